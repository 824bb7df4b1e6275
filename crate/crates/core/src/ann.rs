//! Dense back-end: conv -> norm -> ReLU blocks with optional depthwise
//! separable ConvLSTM cells after selected blocks.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{join, GraphCtx, ParamMut, ParamRef, Parameterized};
use crate::layer_spec::LayerSpec;
use crate::layers::{BatchNorm, Conv, LayerNorm};
use crate::numerics::tape::{sigmoid, Var};
use crate::numerics::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    Batch,
    Layer,
}

impl fmt::Display for NormKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NormKind::Batch => "batch",
            NormKind::Layer => "layer",
        })
    }
}

impl FromStr for NormKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "batch" => Ok(NormKind::Batch),
            "layer" => Ok(NormKind::Layer),
            _ => Err(Error::invalid(
                "ann",
                format!("unknown norm `{s}` (expected batch or layer)"),
            )),
        }
    }
}

#[derive(Clone, Debug)]
pub enum Norm<T> {
    Batch(BatchNorm<T>),
    Layer(LayerNorm<T>),
}

impl<T: Real> Norm<T> {
    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Norm::Batch(n) => n.forward(x),
            Norm::Layer(n) => n.forward(x),
        }
    }

    fn graph(&self, ctx: &mut GraphCtx<T>, prefix: &str, x: Var) -> Result<Var> {
        match self {
            Norm::Batch(n) => n.graph(ctx, prefix, x),
            Norm::Layer(n) => n.graph(ctx, prefix, x),
        }
    }
}

#[derive(Clone, Debug)]
pub struct AnnBlock<T> {
    pub conv: Conv<T>,
    pub norm: Norm<T>,
}

impl<T: Real> AnnBlock<T> {
    pub fn new<R: Rng>(in_channels: usize, spec: LayerSpec, norm: NormKind, rng: &mut R) -> Self {
        AnnBlock {
            conv: Conv::new(in_channels, spec, 1, true, rng),
            norm: match norm {
                NormKind::Batch => Norm::Batch(BatchNorm::new(spec.channels)),
                NormKind::Layer => Norm::Layer(LayerNorm::new(spec.channels)),
            },
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self
            .norm
            .forward(&self.conv.forward(x)?)?
            .map(|v| v.max(T::zero())))
    }

    pub fn graph(&self, ctx: &mut GraphCtx<T>, prefix: &str, x: Var) -> Result<Var> {
        let y = self.conv.graph(ctx, &join(prefix, "conv"), x)?;
        let y = self.norm.graph(ctx, &join(prefix, "norm"), y)?;
        Ok(ctx.tape.relu(y))
    }
}

impl<T: Real> Parameterized<T> for AnnBlock<T> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        self.conv.params(&join(prefix, "conv"), out);
        match &self.norm {
            Norm::Batch(n) => n.params(&join(prefix, "norm"), out),
            Norm::Layer(n) => n.params(&join(prefix, "norm"), out),
        }
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        self.conv.params_mut(&join(prefix, "conv"), out);
        match &mut self.norm {
            Norm::Batch(n) => n.params_mut(&join(prefix, "norm"), out),
            Norm::Layer(n) => n.params_mut(&join(prefix, "norm"), out),
        }
    }
}

/// `[C, H, W]` input (or `[B, C, H, W]`) through one block.
pub fn ann_block_forward<T: Real>(input: &Tensor<T>, block: &AnnBlock<T>) -> Result<Tensor<T>> {
    block.forward(input)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmState<T> {
    pub h: Tensor<T>,
    pub c: Tensor<T>,
}

impl<T: Real> LstmState<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        LstmState {
            h: Tensor::zeros(shape),
            c: Tensor::zeros(shape),
        }
    }
}

/// ConvLSTM whose gate convolution is depthwise `k x k` followed by a
/// pointwise `2C -> 4C` projection.
#[derive(Clone, Debug)]
pub struct DwConvLstm<T> {
    pub channels: usize,
    pub depthwise: Conv<T>,
    pub pointwise: Conv<T>,
}

impl<T: Real> DwConvLstm<T> {
    pub fn new<R: Rng>(channels: usize, kernel: usize, rng: &mut R) -> Self {
        let c2 = 2 * channels;
        DwConvLstm {
            channels,
            depthwise: Conv::new(c2, LayerSpec::new(c2, kernel, kernel / 2, 1), c2, true, rng),
            pointwise: Conv::new(c2, LayerSpec::new(4 * channels, 1, 0, 1), 1, true, rng),
        }
    }

    /// One recurrent step; `x` and the state are `[C, H, W]` or `[B, C, H, W]`.
    pub fn step(&self, state: &LstmState<T>, x: &Tensor<T>) -> Result<LstmState<T>> {
        if state.h.shape() != x.shape() || state.c.shape() != x.shape() {
            return Err(Error::shape(
                "dwconvlstm_step",
                "state",
                format!("{:?}", x.shape()),
                format!("{:?}", state.h.shape()),
            ));
        }
        let axis = x.ndim() - 3;
        let hx = Tensor::concat(&[&state.h, x], axis)?;
        let gates = self.pointwise.forward(&self.depthwise.forward(&hx)?)?;
        let c = self.channels;
        let i = gates.narrow(axis, 0, c)?;
        let f = gates.narrow(axis, c, c)?;
        let g = gates.narrow(axis, 2 * c, c)?;
        let o = gates.narrow(axis, 3 * c, c)?;
        let mut next_c = state.c.clone();
        let mut next_h = state.c.clone();
        for (k, (nc, nh)) in next_c
            .data_mut()
            .iter_mut()
            .zip(next_h.data_mut())
            .enumerate()
        {
            let cv = sigmoid(f.data()[k]) * *nc + sigmoid(i.data()[k]) * g.data()[k].tanh();
            *nc = cv;
            *nh = sigmoid(o.data()[k]) * cv.tanh();
        }
        Ok(LstmState {
            h: next_h,
            c: next_c,
        })
    }

    /// Recorded step on `[B, C, H, W]` variables; returns `(h, c)`.
    pub fn graph(
        &self,
        ctx: &mut GraphCtx<T>,
        prefix: &str,
        h: Var,
        c: Var,
        x: Var,
    ) -> Result<(Var, Var)> {
        let hx = ctx.tape.concat(&[h, x], 1)?;
        let y = self.depthwise.graph(ctx, &join(prefix, "depthwise"), hx)?;
        let gates = self.pointwise.graph(ctx, &join(prefix, "pointwise"), y)?;
        let n = self.channels;
        let i = ctx.tape.narrow(gates, 1, 0, n)?;
        let f = ctx.tape.narrow(gates, 1, n, n)?;
        let g = ctx.tape.narrow(gates, 1, 2 * n, n)?;
        let o = ctx.tape.narrow(gates, 1, 3 * n, n)?;
        let (i, f, g, o) = (
            ctx.tape.sigmoid(i),
            ctx.tape.sigmoid(f),
            ctx.tape.tanh(g),
            ctx.tape.sigmoid(o),
        );
        let keep = ctx.tape.mul(f, c)?;
        let write = ctx.tape.mul(i, g)?;
        let c_next = ctx.tape.add(keep, write)?;
        let squashed = ctx.tape.tanh(c_next);
        let h_next = ctx.tape.mul(o, squashed)?;
        Ok((h_next, c_next))
    }
}

impl<T: Real> Parameterized<T> for DwConvLstm<T> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        self.depthwise.params(&join(prefix, "depthwise"), out);
        self.pointwise.params(&join(prefix, "pointwise"), out);
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        self.depthwise.params_mut(&join(prefix, "depthwise"), out);
        self.pointwise.params_mut(&join(prefix, "pointwise"), out);
    }
}

pub fn dwconvlstm_step<T: Real>(
    state: &LstmState<T>,
    x: &Tensor<T>,
    cell: &DwConvLstm<T>,
) -> Result<LstmState<T>> {
    cell.step(state, x)
}

/// Recurrent state of every LSTM cell, in position order.
pub type AnnState<T> = Vec<Option<LstmState<T>>>;

#[derive(Clone, Debug)]
pub struct AnnBackbone<T> {
    pub in_channels: usize,
    pub blocks: Vec<AnnBlock<T>>,
    /// `(block index, cell)`: the cell runs on that block's output.
    pub lstms: Vec<(usize, DwConvLstm<T>)>,
}

impl<T: Real> AnnBackbone<T> {
    pub fn new<R: Rng>(
        in_channels: usize,
        specs: &[LayerSpec],
        norm: NormKind,
        lstm_positions: &[usize],
        lstm_kernel: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if let Some(&p) = lstm_positions.iter().find(|&&p| p >= specs.len()) {
            return Err(Error::invalid(
                "ann_backbone",
                format!(
                    "LSTM position {p} is not a block index (have {} blocks)",
                    specs.len()
                ),
            ));
        }
        if lstm_positions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid(
                "ann_backbone",
                "LSTM positions must be strictly increasing",
            ));
        }
        let mut c = in_channels;
        let mut blocks = Vec::with_capacity(specs.len());
        let mut lstms = Vec::new();
        for (i, &spec) in specs.iter().enumerate() {
            blocks.push(AnnBlock::new(c, spec, norm, rng));
            c = spec.channels;
            if lstm_positions.contains(&i) {
                lstms.push((i, DwConvLstm::new(c, lstm_kernel, rng)));
            }
        }
        Ok(AnnBackbone {
            in_channels,
            blocks,
            lstms,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.blocks
            .last()
            .map_or(self.in_channels, |b| b.conv.spec.channels)
    }

    pub fn initial_state(&self) -> AnnState<T> {
        vec![None; self.lstms.len()]
    }

    /// Runs every block, threading LSTM state; returns each block's output
    /// (after its LSTM, if any).
    pub fn forward(&self, x: &Tensor<T>, state: &mut AnnState<T>) -> Result<Vec<Tensor<T>>> {
        if state.len() != self.lstms.len() {
            return Err(Error::shape(
                "ann_backbone_forward",
                "states",
                self.lstms.len(),
                state.len(),
            ));
        }
        let mut outs: Vec<Tensor<T>> = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate() {
            let mut y = block.forward(outs.last().unwrap_or(x))?;
            if let Some(li) = self.lstms.iter().position(|(p, _)| *p == i) {
                let prev = state[li]
                    .take()
                    .unwrap_or_else(|| LstmState::zeros(y.shape()));
                let next = self.lstms[li].1.step(&prev, &y)?;
                y = next.h.clone();
                state[li] = Some(next);
            }
            outs.push(y);
        }
        Ok(outs)
    }

    /// `x` is `[B, C, H, W]`; `state` holds `(h, c)` variables per cell.
    pub fn graph(
        &self,
        ctx: &mut GraphCtx<T>,
        prefix: &str,
        x: Var,
        state: &mut Vec<Option<(Var, Var)>>,
    ) -> Result<Var> {
        if state.len() != self.lstms.len() {
            state.resize(self.lstms.len(), None);
        }
        let mut y = x;
        for (i, block) in self.blocks.iter().enumerate() {
            y = block.graph(ctx, &join(prefix, &i.to_string()), y)?;
            if let Some(li) = self.lstms.iter().position(|(p, _)| *p == i) {
                let (h, c) = match state[li] {
                    Some(s) => s,
                    None => {
                        let shape = ctx.tape.value(y).shape().to_vec();
                        let z = ctx.tape.constant(Tensor::zeros(&shape));
                        (z, z)
                    }
                };
                let next =
                    self.lstms[li]
                        .1
                        .graph(ctx, &join(prefix, &format!("lstm{i}")), h, c, y)?;
                y = next.0;
                state[li] = Some(next);
            }
        }
        Ok(y)
    }
}

impl<T: Real> Parameterized<T> for AnnBackbone<T> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.params(&join(prefix, &i.to_string()), out);
        }
        for (p, cell) in &self.lstms {
            cell.params(&join(prefix, &format!("lstm{p}")), out);
        }
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.params_mut(&join(prefix, &i.to_string()), out);
        }
        for (p, cell) in &mut self.lstms {
            cell.params_mut(&join(prefix, &format!("lstm{p}")), out);
        }
    }
}

pub fn ann_backbone_forward<T: Real>(
    feature: &Tensor<T>,
    backbone: &AnnBackbone<T>,
    state: &mut AnnState<T>,
) -> Result<Vec<Tensor<T>>> {
    backbone.forward(feature, state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{grad_check_model, GraphMode};
    use crate::numerics::gradcheck::GradCheckConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn block_output_is_non_negative_and_strided() {
        let b = AnnBlock::<f64>::new(3, LayerSpec::new(4, 3, 1, 2), NormKind::Batch, &mut rng(0));
        let x = Tensor::from_fn(&[3, 8, 6], |i| (i as f64 * 0.37).sin());
        let y = b.forward(&x).unwrap();
        assert_eq!(y.shape(), &[4, 4, 3]);
        assert!(y.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn identity_block_is_relu() {
        let mut b =
            AnnBlock::<f64>::new(2, LayerSpec::new(2, 1, 0, 1), NormKind::Batch, &mut rng(0));
        b.conv.weight = Tensor::new(&[2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        b.conv.bias = Some(Tensor::zeros(&[2]));
        if let Norm::Batch(n) = &mut b.norm {
            n.eps = 0.0;
        }
        let x = Tensor::new(&[2, 1, 2], vec![-1.0, 2.0, 0.5, -3.0]).unwrap();
        assert_eq!(b.forward(&x).unwrap().data(), &[0.0, 2.0, 0.5, 0.0]);
    }

    #[test]
    fn zero_lstm_gives_zero_hidden() {
        let mut cell = DwConvLstm::<f64>::new(2, 3, &mut rng(1));
        for (_, t, _) in cell.named_params_mut() {
            *t = Tensor::zeros(t.shape());
        }
        let s = cell
            .step(&LstmState::zeros(&[2, 3, 3]), &Tensor::zeros(&[2, 3, 3]))
            .unwrap();
        assert!(s.h.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn saturated_forget_gate_retains_memory() {
        let mut cell = DwConvLstm::<f64>::new(1, 3, &mut rng(2));
        for (_, t, _) in cell.named_params_mut() {
            *t = Tensor::zeros(t.shape());
        }
        // gate order i, f, g, o
        cell.pointwise.bias = Some(Tensor::new(&[4], vec![-40.0, 40.0, 0.0, 0.0]).unwrap());
        let state = LstmState {
            h: Tensor::zeros(&[1, 2, 2]),
            c: Tensor::full(&[1, 2, 2], 0.7),
        };
        let x = Tensor::from_fn(&[1, 2, 2], |i| i as f64);
        let s = cell.step(&state, &x).unwrap();
        assert!(s.c.max_abs_diff(&state.c).unwrap() < 1e-12);
    }

    #[test]
    fn gen1_final_feature_shape() {
        let specs: Vec<LayerSpec> = ["256c3p1s1", "256c3p1s2", "256c3p1s1", "256c3p1s2"]
            .iter()
            .map(|s| s.parse().unwrap())
            .collect();
        let mut shape = (38, 30);
        for s in &specs {
            shape = s.out_hw(shape.0, shape.1).unwrap();
        }
        assert_eq!(shape, (10, 8));
    }

    #[test]
    fn state_makes_outputs_history_dependent() {
        let specs = [LayerSpec::new(3, 3, 1, 1)];
        let net =
            AnnBackbone::<f64>::new(2, &specs, NormKind::Batch, &[0], 3, &mut rng(3)).unwrap();
        let ff = AnnBackbone::<f64>::new(2, &specs, NormKind::Batch, &[], 3, &mut rng(3)).unwrap();
        let x = Tensor::from_fn(&[2, 4, 4], |i| (i as f64).cos());
        let mut st = net.initial_state();
        let a = net.forward(&x, &mut st).unwrap().pop().unwrap();
        let b = net.forward(&x, &mut st).unwrap().pop().unwrap();
        assert!(a.max_abs_diff(&b).unwrap() > 0.0);
        assert!(b.data().iter().all(|v| v.abs() < 1.0));
        let mut none = ff.initial_state();
        assert_eq!(
            ff.forward(&x, &mut none).unwrap(),
            ff.forward(&x, &mut none).unwrap()
        );
    }

    #[test]
    fn graph_matches_plain_and_gradients_check() {
        let specs = [LayerSpec::new(3, 3, 1, 2), LayerSpec::new(2, 3, 1, 1)];
        for norm in [NormKind::Batch, NormKind::Layer] {
            let net = AnnBackbone::<f64>::new(2, &specs, norm, &[1], 3, &mut rng(4)).unwrap();
            let x = Tensor::from_fn(&[2, 2, 6, 6], |i| ((i * 7) % 5) as f64 / 5.0 - 0.3);
            // two windows of recurrence
            let mut st = net.initial_state();
            net.forward(&x, &mut st).unwrap();
            let plain = net.forward(&x, &mut st).unwrap().pop().unwrap();
            let mut ctx = GraphCtx::new(GraphMode::EVAL);
            let xv = ctx.tape.constant(x.clone());
            let mut gs = Vec::new();
            net.graph(&mut ctx, "ann", xv, &mut gs).unwrap();
            let out = net.graph(&mut ctx, "ann", xv, &mut gs).unwrap();
            assert!(ctx.tape.value(out).max_abs_diff(&plain).unwrap() < 1e-12);

            let rep = grad_check_model(
                &net,
                &[x.clone()],
                GraphMode::TRAIN,
                GradCheckConfig::default(),
                |m, ctx, v| {
                    let mut s = Vec::new();
                    m.graph(ctx, "ann", v[0], &mut s)?;
                    m.graph(ctx, "ann", v[0], &mut s)
                },
            )
            .unwrap();
            assert!(rep.passed(), "{norm}: {rep:?}");
        }
    }
}
