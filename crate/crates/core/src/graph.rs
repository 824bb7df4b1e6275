//! Named parameters and the bookkeeping around a differentiable forward pass.

use std::collections::BTreeMap;

use crate::error::Result;
use crate::numerics::gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
use crate::numerics::tape::{BatchStats, Gradients, Tape, Var};
use crate::numerics::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// Carried state such as batch-norm running statistics.
    Buffer,
}

pub type ParamRef<'a, T> = (String, &'a Tensor<T>, ParamKind);
pub type ParamMut<'a, T> = (String, &'a mut Tensor<T>, ParamKind);

/// Components that own named tensors.
pub trait Parameterized<T: Real> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>);
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>);

    fn named_params(&self) -> Vec<ParamRef<'_, T>> {
        let mut out = Vec::new();
        self.params("", &mut out);
        out
    }

    fn named_params_mut(&mut self) -> Vec<ParamMut<'_, T>> {
        let mut out = Vec::new();
        self.params_mut("", &mut out);
        out
    }

    fn param_count(&self) -> usize {
        self.named_params()
            .iter()
            .filter(|(_, _, k)| *k == ParamKind::Trainable)
            .map(|(_, t, _)| t.len())
            .sum()
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// How spiking nonlinearities are recorded.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpikeMode {
    /// Exact step forward, arctan surrogate backward.
    Surrogate,
    /// Arctan primitive forward and backward, for finite-difference checks.
    Smooth,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GraphMode {
    /// Batch norm uses batch statistics (and reports them for running updates).
    pub training: bool,
    pub spikes: SpikeMode,
}

impl GraphMode {
    pub const TRAIN: GraphMode = GraphMode {
        training: true,
        spikes: SpikeMode::Surrogate,
    };
    pub const EVAL: GraphMode = GraphMode {
        training: false,
        spikes: SpikeMode::Surrogate,
    };
}

/// A tape plus the parameters bound to it by name.
pub struct GraphCtx<T: Real> {
    pub tape: Tape<T>,
    pub mode: GraphMode,
    bound: BTreeMap<String, Var>,
    bn_stats: Vec<(String, BatchStats<T>)>,
}

impl<T: Real> GraphCtx<T> {
    pub fn new(mode: GraphMode) -> Self {
        Self::with_tape(Tape::new(), mode)
    }

    pub fn with_tape(tape: Tape<T>, mode: GraphMode) -> Self {
        GraphCtx {
            tape,
            mode,
            bound: BTreeMap::new(),
            bn_stats: Vec::new(),
        }
    }

    /// Records `value` as a differentiable leaf under `name`; repeated calls
    /// with the same name return the same variable.
    pub fn param(&mut self, name: &str, value: &Tensor<T>) -> Var {
        if let Some(&v) = self.bound.get(name) {
            return v;
        }
        let v = self.tape.param(value.clone());
        self.bound.insert(name.to_string(), v);
        v
    }

    /// Makes later `param(name, ..)` calls resolve to `v`.
    pub fn bind(&mut self, name: &str, v: Var) {
        self.bound.insert(name.to_string(), v);
    }

    pub fn bound(&self) -> impl Iterator<Item = (&str, Var)> {
        self.bound.iter().map(|(k, &v)| (k.as_str(), v))
    }

    pub fn record_bn_stats(&mut self, prefix: &str, stats: BatchStats<T>) {
        self.bn_stats.push((prefix.to_string(), stats));
    }

    /// Batch statistics gathered by training-mode batch norms, keyed by the
    /// norm's parameter prefix.
    pub fn bn_stats(&self) -> &[(String, BatchStats<T>)] {
        &self.bn_stats
    }

    /// Gradient for every bound parameter (zeros where none flowed).
    pub fn param_grads(&self, root: Var) -> Result<BTreeMap<String, Tensor<T>>> {
        let g: Gradients<T> = self.tape.backward(root)?;
        Ok(self
            .bound
            .iter()
            .map(|(name, &v)| (name.clone(), g.get_or_zeros(v, self.tape.value(v))))
            .collect())
    }
}

/// Finite-difference check of a model's forward pass with respect to
/// `inputs` and every trainable parameter. `forward` receives the variables
/// for `inputs`; parameters resolve through the context by name.
pub fn grad_check_model<M, F>(
    model: &M,
    inputs: &[Tensor<f64>],
    mode: GraphMode,
    cfg: GradCheckConfig,
    forward: F,
) -> Result<GradCheckReport>
where
    M: Parameterized<f64>,
    F: Fn(&M, &mut GraphCtx<f64>, &[Var]) -> Result<Var>,
{
    let trainable: Vec<(String, Tensor<f64>)> = model
        .named_params()
        .into_iter()
        .filter(|p| p.2 == ParamKind::Trainable)
        .map(|(n, t, _)| (n, t.clone()))
        .collect();
    let mut all = inputs.to_vec();
    all.extend(trainable.iter().map(|(_, t)| t.clone()));
    let n_in = inputs.len();
    grad_check(
        |tape, vars| {
            let mut ctx = GraphCtx::with_tape(std::mem::take(tape), mode);
            for ((name, _), &v) in trainable.iter().zip(&vars[n_in..]) {
                ctx.bind(name, v);
            }
            let out = forward(model, &mut ctx, &vars[..n_in]);
            *tape = ctx.tape;
            out
        },
        &all,
        cfg,
    )
}
