//! Attention-based bridge from binary spikes `[T, C, H, W]` to a dense
//! feature map `[C, H, W]`.
//!
//! Each channel's `T` temporal planes form one group. Per group: an offset
//! predictor feeds a deformable convolution with one kernel per timestep
//! (timesteps never mix), then self-attention over timesteps and a 1x1
//! convolution collapse time. Every group shares the same weights. The
//! result is gated by `sigmoid(spike count over time)`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{join, GraphCtx, ParamMut, ParamRef, Parameterized};
use crate::layer_spec::LayerSpec;
use crate::layers::Conv;
use crate::numerics::conv::conv2d;
use crate::numerics::deform::deform_conv2d;
use crate::numerics::softmax::softmax_rows;
use crate::numerics::tape::{bmm, sigmoid, Var};
use crate::numerics::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BridgeVariant {
    Full,
    /// Deformable conv output goes straight to the temporal 1x1 combination.
    NoTa,
    /// Regular grouped conv instead of the deformable one.
    NoDeform,
    /// No spike-rate gate.
    NoErs,
    /// Plain sum of spikes over time.
    NoAsab,
}

impl BridgeVariant {
    pub const ALL: [BridgeVariant; 5] = [
        BridgeVariant::Full,
        BridgeVariant::NoTa,
        BridgeVariant::NoDeform,
        BridgeVariant::NoErs,
        BridgeVariant::NoAsab,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BridgeVariant::Full => "full",
            BridgeVariant::NoTa => "no-ta",
            BridgeVariant::NoDeform => "no-deform",
            BridgeVariant::NoErs => "no-ers",
            BridgeVariant::NoAsab => "no-asab",
        }
    }

    pub fn attention(self) -> bool {
        !matches!(self, BridgeVariant::NoTa | BridgeVariant::NoAsab)
    }

    pub fn deformable(self) -> bool {
        !matches!(self, BridgeVariant::NoDeform | BridgeVariant::NoAsab)
    }

    pub fn gated(self) -> bool {
        !matches!(self, BridgeVariant::NoErs | BridgeVariant::NoAsab)
    }
}

impl fmt::Display for BridgeVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BridgeVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BridgeVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::invalid("bridge", format!("unknown variant `{s}` (expected full, no-ta, no-deform, no-ers or no-asab)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BridgeConfig {
    pub variant: BridgeVariant,
    /// Deformable kernel size; odd.
    pub kernel: usize,
    pub heads: usize,
    /// Divide attention logits by `sqrt(H * W)`.
    pub scale_scores: bool,
}

impl Default for BridgeConfig {
    fn default() -> Self {
        BridgeConfig {
            variant: BridgeVariant::Full,
            kernel: 5,
            heads: 1,
            scale_scores: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Bridge<T> {
    pub steps: usize,
    pub cfg: BridgeConfig,
    /// `T -> 2*K*K*T` offset predictor, zero at initialization.
    pub offset: Option<Conv<T>>,
    /// Per-timestep kernels, `groups = T`.
    pub tsdc: Option<Conv<T>>,
    pub query: Option<Conv<T>>,
    pub key: Option<Conv<T>>,
    pub value: Option<Conv<T>>,
    /// `heads*T -> 1` (or `T -> 1` without attention).
    pub combine: Option<Conv<T>>,
}

/// Intermediate attention tensors, batched over `N` channel groups.
#[derive(Clone, Debug)]
pub struct AttentionParts<T> {
    /// `[N * heads, T, T]`, rows sum to one.
    pub scores: Tensor<T>,
    /// `[N, heads * T, H, W]`, before the temporal combination.
    pub attended: Tensor<T>,
    /// `[N, 1, H, W]`.
    pub output: Tensor<T>,
}

fn pointwise<T: Real, R: Rng>(c_in: usize, c_out: usize, rng: &mut R) -> Conv<T> {
    Conv::new(c_in, LayerSpec::new(c_out, 1, 0, 1), 1, true, rng)
}

impl<T: Real> Bridge<T> {
    pub fn new<R: Rng>(steps: usize, cfg: BridgeConfig, rng: &mut R) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("bridge", "needs at least one timestep"));
        }
        if cfg.kernel % 2 == 0 || cfg.kernel == 0 {
            return Err(Error::invalid(
                "bridge",
                format!("kernel {} must be odd", cfg.kernel),
            ));
        }
        if cfg.heads == 0 {
            return Err(Error::invalid("bridge", "head count must be positive"));
        }
        let v = cfg.variant;
        let k = cfg.kernel;
        let mut b = Bridge {
            steps,
            cfg,
            offset: None,
            tsdc: None,
            query: None,
            key: None,
            value: None,
            combine: None,
        };
        if v == BridgeVariant::NoAsab {
            return Ok(b);
        }
        b.tsdc = Some(Conv::new(
            steps,
            LayerSpec::new(steps, k, k / 2, 1),
            steps,
            true,
            rng,
        ));
        if v.deformable() {
            let mut off = Conv::new(
                steps,
                LayerSpec::new(2 * k * k * steps, k, k / 2, 1),
                1,
                true,
                rng,
            );
            off.weight = Tensor::zeros(off.weight.shape());
            off.bias = Some(Tensor::zeros(&[2 * k * k * steps]));
            b.offset = Some(off);
        }
        let ht = cfg.heads * steps;
        if v.attention() {
            b.query = Some(pointwise(steps, ht, rng));
            b.key = Some(pointwise(steps, ht, rng));
            b.value = Some(pointwise(steps, ht, rng));
            b.combine = Some(pointwise(ht, 1, rng));
        } else {
            b.combine = Some(pointwise(steps, 1, rng));
        }
        Ok(b)
    }

    fn check_steps(&self, op: &'static str, t: usize) -> Result<()> {
        if t != self.steps {
            return Err(Error::shape(op, "time", self.steps, t));
        }
        Ok(())
    }

    /// `[N, T, H, W] -> [N, 2*K*K*T, H, W]`.
    pub fn predict_offsets(&self, a: &Tensor<T>) -> Result<Tensor<T>> {
        let off = self
            .offset
            .as_ref()
            .ok_or_else(|| Error::invalid("predict_offsets", "variant has no offset predictor"))?;
        off.forward(a)
    }

    /// Per-timestep deformable conv of `[N, T, H, W]`; zero offsets when the
    /// variant is not deformable.
    pub fn tsdc(&self, a: &Tensor<T>, offsets: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let conv = self
            .tsdc
            .as_ref()
            .ok_or_else(|| Error::invalid("tsdc", "variant has no TSDC"))?;
        match offsets {
            Some(o) => deform_conv2d(a, o, &conv.weight, conv.bias.as_ref(), conv.geometry()),
            None => conv2d(a, &conv.weight, conv.bias.as_ref(), conv.geometry()),
        }
    }

    /// Self-attention over timesteps of `[N, T, H, W]`.
    pub fn temporal_attention(&self, a: &Tensor<T>) -> Result<AttentionParts<T>> {
        let (Some(q), Some(k), Some(v), Some(comb)) =
            (&self.query, &self.key, &self.value, &self.combine)
        else {
            return Err(Error::invalid(
                "temporal_attention",
                "variant has no attention",
            ));
        };
        let &[n, t, h, w] = a.shape() else {
            return Err(Error::shape("temporal_attention", "rank", 4, a.ndim()));
        };
        self.check_steps("temporal_attention", t)?;
        let heads = self.cfg.heads;
        let hw = h * w;
        let qv = q.forward(a)?;
        let kv = k.forward(a)?;
        let vv = v.forward(a)?;
        // [N, heads*T, H, W] is [N*heads, T, HW] in memory
        let nb = n * heads;
        let mut logits = Tensor::new(
            &[nb, t, t],
            bmm(qv.data(), kv.data(), nb, t, hw, t, false, true),
        )?;
        if self.cfg.scale_scores {
            let s = T::one() / T::lit(hw as f64).sqrt();
            logits = logits.map(|x| x * s);
        }
        let scores = softmax_rows(&logits)?;
        let attended = Tensor::new(
            &[n, heads * t, h, w],
            bmm(scores.data(), vv.data(), nb, t, t, hw, false, false),
        )?;
        let output = comb.forward(&attended)?;
        Ok(AttentionParts {
            scores,
            attended,
            output,
        })
    }

    /// Collapses time for each group: `[N, T, H, W] -> [N, 1, H, W]`.
    fn collapse(&self, a: &Tensor<T>) -> Result<Tensor<T>> {
        if self.cfg.variant.attention() {
            Ok(self.temporal_attention(a)?.output)
        } else {
            self.combine.as_ref().expect("combine exists").forward(a)
        }
    }

    /// Bridge output before the spike-rate gate, `[C, H, W]`.
    pub fn ungated(&self, spikes: &Tensor<T>) -> Result<Tensor<T>> {
        let &[t, c, h, w] = spikes.shape() else {
            return Err(Error::shape("asab_forward", "rank", 4, spikes.ndim()));
        };
        self.check_steps("asab_forward", t)?;
        if self.cfg.variant == BridgeVariant::NoAsab {
            return time_sum(spikes);
        }
        let grouped = temporal_grouping(spikes)?;
        let offsets = match self.offset {
            Some(_) => Some(self.predict_offsets(&grouped)?),
            None => None,
        };
        let a_sc = self.tsdc(&grouped, offsets.as_ref())?;
        self.collapse(&a_sc)?.reshape(&[c, h, w])
    }

    /// `[T, C, H, W]` spikes to a `[C, H, W]` feature map.
    pub fn forward(&self, spikes: &Tensor<T>) -> Result<Tensor<T>> {
        let out = self.ungated(spikes)?;
        if self.cfg.variant.gated() {
            ers_gate(spikes, &out)
        } else {
            Ok(out)
        }
    }

    /// `spikes` is `[T * B, C, H, W]`, time-major; returns `[B, C, H, W]`.
    pub fn graph(&self, ctx: &mut GraphCtx<T>, prefix: &str, spikes: Var) -> Result<Var> {
        let shape = ctx.tape.value(spikes).shape().to_vec();
        let (t, (c, h, w)) = (self.steps, (shape[1], shape[2], shape[3]));
        if shape[0] % t != 0 {
            return Err(Error::shape(
                "bridge",
                "time",
                format!("multiple of {t}"),
                shape[0],
            ));
        }
        let b = shape[0] / t;
        let rate = {
            let flat = ctx.tape.reshape(spikes, &[t, b * c * h * w])?;
            let s = ctx.tape.sum_axis(flat, 0)?;
            ctx.tape.reshape(s, &[b, c, h, w])?
        };
        if self.cfg.variant == BridgeVariant::NoAsab {
            return Ok(rate);
        }
        let x = ctx.tape.reshape(spikes, &[t, b, c, h, w])?;
        let x = ctx.tape.permute(x, &[1, 2, 0, 3, 4])?;
        let grouped = ctx.tape.reshape(x, &[b * c, t, h, w])?;
        let tsdc = self.tsdc.as_ref().expect("tsdc exists");
        let tw = ctx.param(&join(prefix, "tsdc.weight"), &tsdc.weight);
        let tb = tsdc
            .bias
            .as_ref()
            .map(|bias| ctx.param(&join(prefix, "tsdc.bias"), bias));
        let a_sc = match &self.offset {
            Some(off) => {
                let o = off.graph(ctx, &join(prefix, "offset"), grouped)?;
                ctx.tape
                    .deform_conv2d(grouped, o, tw, tb, tsdc.geometry())?
            }
            None => ctx.tape.conv2d(grouped, tw, tb, tsdc.geometry())?,
        };
        let collapsed = if self.cfg.variant.attention() {
            self.attention_graph(ctx, prefix, a_sc, b * c, h, w)?
        } else {
            self.combine.as_ref().expect("combine exists").graph(
                ctx,
                &join(prefix, "combine"),
                a_sc,
            )?
        };
        let out = ctx.tape.reshape(collapsed, &[b, c, h, w])?;
        if self.cfg.variant.gated() {
            let gate = ctx.tape.sigmoid(rate);
            ctx.tape.mul(gate, out)
        } else {
            Ok(out)
        }
    }

    fn attention_graph(
        &self,
        ctx: &mut GraphCtx<T>,
        prefix: &str,
        a: Var,
        n: usize,
        h: usize,
        w: usize,
    ) -> Result<Var> {
        let t = self.steps;
        let heads = self.cfg.heads;
        let nb = n * heads;
        let q = self
            .query
            .as_ref()
            .expect("query")
            .graph(ctx, &join(prefix, "query"), a)?;
        let k = self
            .key
            .as_ref()
            .expect("key")
            .graph(ctx, &join(prefix, "key"), a)?;
        let v = self
            .value
            .as_ref()
            .expect("value")
            .graph(ctx, &join(prefix, "value"), a)?;
        let q = ctx.tape.reshape(q, &[nb, t, h * w])?;
        let k = ctx.tape.reshape(k, &[nb, t, h * w])?;
        let kt = ctx.tape.permute(k, &[0, 2, 1])?;
        let v = ctx.tape.reshape(v, &[nb, t, h * w])?;
        let mut logits = ctx.tape.matmul(q, kt)?;
        if self.cfg.scale_scores {
            logits = ctx
                .tape
                .affine(logits, T::one() / T::lit((h * w) as f64).sqrt(), T::zero());
        }
        let scores = ctx.tape.softmax_rows(logits)?;
        let att = ctx.tape.matmul(scores, v)?;
        let att = ctx.tape.reshape(att, &[n, heads * t, h, w])?;
        self.combine
            .as_ref()
            .expect("combine")
            .graph(ctx, &join(prefix, "combine"), att)
    }
}

impl<T: Real> Parameterized<T> for Bridge<T> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        for (name, conv) in [
            ("offset", &self.offset),
            ("tsdc", &self.tsdc),
            ("query", &self.query),
            ("key", &self.key),
            ("value", &self.value),
            ("combine", &self.combine),
        ] {
            if let Some(c) = conv {
                c.params(&join(prefix, name), out);
            }
        }
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        for (name, conv) in [
            ("offset", &mut self.offset),
            ("tsdc", &mut self.tsdc),
            ("query", &mut self.query),
            ("key", &mut self.key),
            ("value", &mut self.value),
            ("combine", &mut self.combine),
        ] {
            if let Some(c) = conv {
                c.params_mut(&join(prefix, name), out);
            }
        }
    }
}

/// `[T, C, H, W] -> [C, T, H, W]`.
pub fn temporal_grouping<T: Real>(spikes: &Tensor<T>) -> Result<Tensor<T>> {
    if spikes.ndim() != 4 {
        return Err(Error::shape("temporal_grouping", "rank", 4, spikes.ndim()));
    }
    spikes.permute(&[1, 0, 2, 3])
}

/// Sum over the leading time axis: `[T, C, H, W] -> [C, H, W]`.
pub fn time_sum<T: Real>(spikes: &Tensor<T>) -> Result<Tensor<T>> {
    let &[t, c, h, w] = spikes.shape() else {
        return Err(Error::shape("time_sum", "rank", 4, spikes.ndim()));
    };
    let plane = c * h * w;
    let mut out = vec![T::zero(); plane];
    for ti in 0..t {
        for (o, &v) in out
            .iter_mut()
            .zip(&spikes.data()[ti * plane..(ti + 1) * plane])
        {
            *o += v;
        }
    }
    Tensor::new(&[c, h, w], out)
}

/// `sigmoid(sum_t spikes) * a_out`.
pub fn ers_gate<T: Real>(spikes: &Tensor<T>, a_out: &Tensor<T>) -> Result<Tensor<T>> {
    let rate = time_sum(spikes)?;
    if rate.shape() != a_out.shape() {
        return Err(Error::shape(
            "ers_gate",
            "feature",
            format!("{:?}", rate.shape()),
            format!("{:?}", a_out.shape()),
        ));
    }
    rate.zip_map(a_out, |s, a| sigmoid(s) * a)
}

pub fn asab_forward<T: Real>(spikes: &Tensor<T>, bridge: &Bridge<T>) -> Result<Tensor<T>> {
    bridge.forward(spikes)
}
