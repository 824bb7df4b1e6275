//! Spiking front-end: stacked conv -> batch norm -> PLIF blocks.
//!
//! Membrane update per timestep, with `k = 1/tau = sigmoid(w)`:
//!
//! ```text
//! V_pre = V + k * (X - (V - v_reset))
//! S     = V_pre >= v_threshold
//! V     = S ? v_reset : V_pre
//! ```

use rand::Rng;

use crate::error::{Error, Result};
use crate::event_io::EventTensor;
use crate::graph::{join, GraphCtx, ParamKind, ParamMut, ParamRef, Parameterized, SpikeMode};
use crate::layer_spec::LayerSpec;
use crate::layers::{BatchNorm, Conv};
use crate::numerics::tape::{sigmoid, Var};
use crate::numerics::{Real, Tensor};

pub use crate::numerics::tape::{arctan_primitive, arctan_surrogate};

pub const DEFAULT_SURROGATE_ALPHA: f64 = 2.0;

/// Neuron constants shared by every spiking layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NeuronConfig {
    pub v_threshold: f64,
    pub v_reset: f64,
    /// Stop gradients through the reset branch.
    pub detach_reset: bool,
    pub surrogate_alpha: f64,
}

impl Default for NeuronConfig {
    fn default() -> Self {
        NeuronConfig {
            v_threshold: 1.0,
            v_reset: 0.0,
            detach_reset: true,
            surrogate_alpha: DEFAULT_SURROGATE_ALPHA,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlifParams<T> {
    pub w: T,
    pub v_threshold: T,
    pub v_reset: T,
}

impl<T: Real> PlifParams<T> {
    pub fn new(w: T, neuron: &NeuronConfig) -> Self {
        PlifParams {
            w,
            v_threshold: T::lit(neuron.v_threshold),
            v_reset: T::lit(neuron.v_reset),
        }
    }

    /// `1 / tau`, always in `(0, 1)`.
    pub fn inv_tau(&self) -> T {
        sigmoid(self.w)
    }

    pub fn tau(&self) -> T {
        T::one() / self.inv_tau()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlifState<T> {
    pub v: Tensor<T>,
}

impl<T: Real> PlifState<T> {
    pub fn reset(shape: &[usize], v_reset: T) -> Self {
        PlifState {
            v: Tensor::full(shape, v_reset),
        }
    }
}

/// Heaviside step used in the forward pass.
#[inline]
pub fn heaviside<T: Real>(u: T) -> T {
    if u >= T::zero() {
        T::one()
    } else {
        T::zero()
    }
}

/// One membrane update; returns the binary spike map.
pub fn plif_step<T: Real>(
    state: &mut PlifState<T>,
    x: &Tensor<T>,
    params: &PlifParams<T>,
) -> Result<Tensor<T>> {
    if state.v.shape() != x.shape() {
        return Err(Error::shape(
            "plif_step",
            "input",
            format!("{:?}", state.v.shape()),
            format!("{:?}", x.shape()),
        ));
    }
    let k = params.inv_tau();
    let mut spikes = Tensor::zeros(x.shape());
    for ((v, &xi), s) in state
        .v
        .data_mut()
        .iter_mut()
        .zip(x.data())
        .zip(spikes.data_mut())
    {
        let pre = *v + k * (xi - (*v - params.v_reset));
        if !pre.is_finite() {
            return Err(Error::NonFinite {
                context: "membrane potential".into(),
            });
        }
        *s = heaviside(pre - params.v_threshold);
        *v = if *s > T::zero() { params.v_reset } else { pre };
    }
    Ok(spikes)
}

/// Runs [`plif_step`] over the leading (time) axis from a fresh state.
pub fn plif_sequence<T: Real>(x: &Tensor<T>, params: &PlifParams<T>) -> Result<Tensor<T>> {
    let steps = x.dim(0);
    let frame = &x.shape()[1..];
    let plane: usize = frame.iter().product();
    let mut state = PlifState::reset(frame, params.v_reset);
    let mut out = Vec::with_capacity(x.len());
    for t in 0..steps {
        let xt = Tensor::new(frame, x.data()[t * plane..(t + 1) * plane].to_vec())?;
        let s = plif_step(&mut state, &xt, params).map_err(|e| match e {
            Error::NonFinite { context } => Error::NonFinite {
                context: format!("{context} at timestep {t}"),
            },
            other => other,
        })?;
        out.extend_from_slice(s.data());
    }
    Tensor::new(x.shape(), out)
}

/// PLIF dynamics recorded on the tape. `x` is `[steps * B, ...]`, time-major.
pub fn plif_graph<T: Real>(
    ctx: &mut GraphCtx<T>,
    x: Var,
    steps: usize,
    w: Var,
    neuron: &NeuronConfig,
) -> Result<Var> {
    let shape = ctx.tape.value(x).shape().to_vec();
    if steps == 0 || shape[0] % steps != 0 {
        return Err(Error::shape(
            "plif_graph",
            "time",
            format!("multiple of {steps}"),
            shape[0],
        ));
    }
    let b = shape[0] / steps;
    let mut frame = shape.clone();
    frame[0] = b;
    let (thr, vr, alpha) = (
        T::lit(neuron.v_threshold),
        T::lit(neuron.v_reset),
        T::lit(neuron.surrogate_alpha),
    );
    let k = ctx.tape.sigmoid(w);
    let mut v = ctx.tape.constant(Tensor::full(&frame, vr));
    let mut spikes = Vec::with_capacity(steps);
    for t in 0..steps {
        let xt = ctx.tape.narrow(x, 0, t * b, b)?;
        let d = ctx.tape.sub(xt, v)?;
        let d = ctx.tape.affine(d, T::one(), vr);
        let kd = ctx.tape.scale(d, k)?;
        let pre = ctx.tape.add(v, kd)?;
        let u = ctx.tape.affine(pre, T::one(), -thr);
        let s = match ctx.mode.spikes {
            SpikeMode::Surrogate => ctx.tape.spike(u, alpha),
            SpikeMode::Smooth => ctx.tape.smooth_spike(u, alpha),
        };
        let gate = if neuron.detach_reset {
            ctx.tape.detach(s)
        } else {
            s
        };
        let above = ctx.tape.affine(pre, T::one(), -vr);
        let drop = ctx.tape.mul(gate, above)?;
        v = ctx.tape.sub(pre, drop)?;
        spikes.push(s);
    }
    ctx.tape.concat(&spikes, 0)
}

/// Conv -> batch norm -> PLIF.
#[derive(Clone, Debug)]
pub struct SnnBlock<T> {
    pub conv: Conv<T>,
    pub bn: BatchNorm<T>,
    /// Time-constant parameter, shape `[1]`.
    pub w: Tensor<T>,
}

impl<T: Real> SnnBlock<T> {
    pub fn new<R: Rng>(in_channels: usize, spec: LayerSpec, rng: &mut R) -> Self {
        SnnBlock {
            conv: Conv::new(in_channels, spec, 1, true, rng),
            bn: BatchNorm::new(spec.channels),
            // sigmoid(0) = 0.5, i.e. tau = 2
            w: Tensor::zeros(&[1]),
        }
    }

    pub fn plif(&self, neuron: &NeuronConfig) -> PlifParams<T> {
        PlifParams::new(self.w.data()[0], neuron)
    }

    /// Batch-normalized conv output `[T, C, H', W']`, the PLIF input current.
    pub fn preactivation(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.bn.forward(&self.conv.forward(x)?)
    }

    pub fn graph(
        &self,
        ctx: &mut GraphCtx<T>,
        prefix: &str,
        x: Var,
        steps: usize,
        neuron: &NeuronConfig,
    ) -> Result<Var> {
        let y = self.conv.graph(ctx, &join(prefix, "conv"), x)?;
        let y = self.bn.graph(ctx, &join(prefix, "bn"), y)?;
        let w = ctx.param(&join(prefix, "w"), &self.w);
        plif_graph(ctx, y, steps, w, neuron)
    }
}

impl<T: Real> Parameterized<T> for SnnBlock<T> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        self.conv.params(&join(prefix, "conv"), out);
        self.bn.params(&join(prefix, "bn"), out);
        out.push((join(prefix, "w"), &self.w, ParamKind::Trainable));
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        self.conv.params_mut(&join(prefix, "conv"), out);
        self.bn.params_mut(&join(prefix, "bn"), out);
        out.push((join(prefix, "w"), &mut self.w, ParamKind::Trainable));
    }
}

/// `input` is `[T, C_in, H, W]`; returns binary spikes `[T, C_out, H', W']`.
pub fn snn_block_forward<T: Real>(
    input: &Tensor<T>,
    block: &SnnBlock<T>,
    neuron: &NeuronConfig,
) -> Result<Tensor<T>> {
    if input.ndim() != 4 {
        return Err(Error::shape("snn_block_forward", "rank", 4, input.ndim()));
    }
    plif_sequence(&block.preactivation(input)?, &block.plif(neuron))
}

#[derive(Clone, Debug)]
pub struct SnnBackbone<T> {
    pub in_channels: usize,
    pub blocks: Vec<SnnBlock<T>>,
    pub neuron: NeuronConfig,
}

impl<T: Real> SnnBackbone<T> {
    pub fn new<R: Rng>(
        specs: &[LayerSpec],
        in_channels: usize,
        neuron: NeuronConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::invalid(
                "snn_backbone",
                "at least one block is required",
            ));
        }
        if let Some(s) = specs.iter().find(|s| s.stride != 1 && s.stride != 2) {
            return Err(Error::invalid(
                "snn_backbone",
                format!("stride of `{s}` must be 1 or 2"),
            ));
        }
        let mut c = in_channels;
        let blocks = specs
            .iter()
            .map(|&spec| {
                let b = SnnBlock::new(c, spec, rng);
                c = spec.channels;
                b
            })
            .collect();
        Ok(SnnBackbone {
            in_channels,
            blocks,
            neuron,
        })
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.blocks.iter().map(|b| b.conv.spec).collect()
    }

    pub fn out_channels(&self) -> usize {
        self.blocks.last().expect("non-empty").conv.spec.channels
    }

    /// Spike tensor shape for `steps` bins of `h` x `w` input.
    pub fn output_shape(&self, steps: usize, h: usize, w: usize) -> Result<[usize; 4]> {
        output_shape(&self.specs(), steps, h, w)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_layers(x)?.pop().expect("non-empty"))
    }

    /// Spike output of every block.
    pub fn forward_layers(&self, x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut outs: Vec<Tensor<T>> = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate() {
            let input = outs.last().unwrap_or(x);
            let s = snn_block_forward(input, block, &self.neuron).map_err(|e| match e {
                Error::NonFinite { context } => Error::NonFinite {
                    context: format!("SNN layer {i}: {context}"),
                },
                other => other,
            })?;
            outs.push(s);
        }
        Ok(outs)
    }

    /// `x` is `[steps * B, C_in, H, W]`, time-major.
    pub fn graph(&self, ctx: &mut GraphCtx<T>, prefix: &str, x: Var, steps: usize) -> Result<Var> {
        let mut h = x;
        for (i, block) in self.blocks.iter().enumerate() {
            h = block.graph(ctx, &join(prefix, &i.to_string()), h, steps, &self.neuron)?;
        }
        Ok(h)
    }
}

impl<T: Real> Parameterized<T> for SnnBackbone<T> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.params(&join(prefix, &i.to_string()), out);
        }
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.params_mut(&join(prefix, &i.to_string()), out);
        }
    }
}

/// Shape propagation through a block stack without evaluating it.
pub fn output_shape(specs: &[LayerSpec], steps: usize, h: usize, w: usize) -> Result<[usize; 4]> {
    let (mut h, mut w, mut c) = (h, w, 0);
    for s in specs {
        (h, w) = s.out_hw(h, w)?;
        c = s.channels;
    }
    Ok([steps, c, h, w])
}

pub fn snn_backbone_forward<T: Real>(
    events: &EventTensor,
    backbone: &SnnBackbone<T>,
) -> Result<Tensor<T>> {
    backbone.forward(&events.to_tensor())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{grad_check_model, GraphMode};
    use crate::numerics::gradcheck::GradCheckConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(w: f64) -> PlifParams<f64> {
        PlifParams::new(w, &NeuronConfig::default())
    }

    #[test]
    fn resting_neuron_stays_put() {
        let mut st = PlifState::reset(&[1], 0.0);
        let s = plif_step(&mut st, &Tensor::zeros(&[1]), &params(0.0)).unwrap();
        assert_eq!((st.v.data()[0], s.data()[0]), (0.0, 0.0));
    }

    #[test]
    fn half_step_towards_input() {
        let mut st = PlifState::reset(&[1], 0.0);
        let s = plif_step(&mut st, &Tensor::ones(&[1]), &params(0.0)).unwrap();
        assert_eq!((st.v.data()[0], s.data()[0]), (0.5, 0.0));
    }

    #[test]
    fn crossing_threshold_spikes_and_resets() {
        let mut st = PlifState {
            v: Tensor::full(&[1], 0.9),
        };
        let s = plif_step(&mut st, &Tensor::full(&[1], 2.0), &params(0.0)).unwrap();
        // 0.9 + 0.5 * (2 - 0.9) = 1.45
        assert_eq!((st.v.data()[0], s.data()[0]), (0.0, 1.0));
    }

    #[test]
    fn non_finite_membrane_is_reported() {
        let mut st = PlifState::reset(&[1], 0.0);
        let err = plif_step(&mut st, &Tensor::full(&[1], f64::INFINITY), &params(0.0)).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }

    #[test]
    fn tau_is_at_least_one() {
        for w in [-50.0, -1.0, 0.0, 3.0, 50.0] {
            assert!(params(w).tau() >= 1.0);
        }
    }

    #[test]
    fn gen1_shapes() {
        let specs: Vec<LayerSpec> = ["64c3p1s2", "128c3p1s2", "256c3p1s2", "256c3p1s1"]
            .iter()
            .map(|s| s.parse().unwrap())
            .collect();
        assert_eq!(
            output_shape(&specs, 10, 304, 240).unwrap(),
            [10, 256, 38, 30]
        );
        assert_eq!(
            output_shape(&specs, 10, 256, 160).unwrap(),
            [10, 256, 32, 20]
        );
    }

    fn toy(seed: u64) -> SnnBackbone<f64> {
        let specs = [LayerSpec::new(3, 3, 1, 2), LayerSpec::new(2, 3, 1, 1)];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SnnBackbone::new(&specs, 2, NeuronConfig::default(), &mut rng).unwrap()
    }

    #[test]
    fn graph_matches_plain_forward_in_eval_mode() {
        let net = toy(4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::from_fn(&[4, 2, 6, 6], |_| rng.gen_range(0..3) as f64);
        let plain = net.forward(&x).unwrap();
        let mut ctx = GraphCtx::new(GraphMode::EVAL);
        let xv = ctx.tape.constant(x.clone());
        let out = net.graph(&mut ctx, "snn", xv, 4).unwrap();
        assert_eq!(ctx.tape.value(out), &plain);
    }

    #[test]
    fn smooth_stack_gradients_match_differences() {
        // two blocks, four timesteps; reset kept on the graph so the smooth
        // network is differentiated exactly
        let mut net = toy(2);
        net.neuron.detach_reset = false;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::from_fn(&[4, 2, 5, 5], |_| rng.gen_range(0.0..2.0));
        for training in [false, true] {
            let mode = GraphMode {
                training,
                spikes: SpikeMode::Smooth,
            };
            let rep = grad_check_model(
                &net,
                &[x.clone()],
                mode,
                GradCheckConfig::default(),
                |m, ctx, v| m.graph(ctx, "snn", v[0], 4),
            )
            .unwrap();
            assert!(rep.passed(), "training={training}: {rep:?}");
        }
    }
}
