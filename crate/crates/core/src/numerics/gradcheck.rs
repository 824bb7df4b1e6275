//! Finite-difference verification of tape gradients.
//!
//! The checked function's output is projected onto a fixed random direction
//! `r`, so a single backward pass (seeded with `r`) yields the gradient of the
//! scalar `sum(r * f(inputs))`; central differences of that scalar give the
//! numeric reference.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::conv::ConvGeometry;
use crate::numerics::tape::{OpKind, Tape, Var};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Lower bound on the denominator of the relative error; below it the
    /// comparison is effectively absolute.
    pub floor: f64,
    pub tolerance: f64,
    /// Check at most this many randomly chosen elements per input.
    pub max_elements: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-3,
            floor: 1e-2,
            tolerance: 1e-4,
            max_elements: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, flat element index)` of the largest error.
    pub worst: Option<(usize, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub checked: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares tape gradients of `f` against central differences for every
/// input (or a sampled subset of elements when `max_elements` is set).
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], cfg: GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    grad_check_against(&f, &f, inputs, cfg)
}

/// Like [`grad_check`], but differentiates `analytic` on the tape and takes
/// finite differences of `reference`. The two must agree in value wherever
/// the check is meaningful (e.g. a surrogate-gradient op against the smooth
/// function whose derivative the surrogate is).
pub fn grad_check_against<F, G>(
    analytic: &F,
    reference: &G,
    inputs: &[Tensor<f64>],
    cfg: GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + ?Sized,
    G: Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + ?Sized,
{
    let eval = |f: &G, vals: &[Tensor<f64>]| -> Result<(Tape<f64>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|v| tape.param(v.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok((tape, out))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.param(v.clone())).collect();
    let out = analytic(&mut tape, &vars)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let proj = Tensor::from_fn(tape.value(out).shape(), |_| rng.gen_range(-1.0..1.0));
    let grads = tape.backward_with(out, proj.clone())?;
    let project =
        |t: &Tensor<f64>| -> f64 { t.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum() };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        checked: 0,
        tolerance: cfg.tolerance,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[i], input);
        let elems: Vec<usize> = match cfg.max_elements {
            Some(m) if m < input.len() => sample(&mut rng, input.len(), m).into_vec(),
            _ => (0..input.len()).collect(),
        };
        for j in elems {
            let orig = input.data()[j];
            work[i].data_mut()[j] = orig + cfg.step;
            let (t_plus, o_plus) = eval(reference, &work)?;
            let lp = project(t_plus.value(o_plus));
            work[i].data_mut()[j] = orig - cfg.step;
            let (t_minus, o_minus) = eval(reference, &work)?;
            let lm = project(t_minus.value(o_minus));
            work[i].data_mut()[j] = orig;
            let numeric = (lp - lm) / (2.0 * cfg.step);
            let a = analytic.data()[j];
            if !a.is_finite() || !numeric.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("grad_check input {i} element {j}"),
                });
            }
            let err = relative_error(a, numeric, cfg.floor);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((i, j));
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    Ok(report)
}

type CheckFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

/// A randomized check case for one tape operation.
pub struct OpCheck {
    pub op: OpKind,
    pub inputs: Vec<Tensor<f64>>,
    pub analytic: CheckFn,
    /// Function differenced numerically; `None` means `analytic` itself.
    pub reference: Option<CheckFn>,
}

impl OpCheck {
    fn new(op: OpKind, inputs: Vec<Tensor<f64>>, f: CheckFn) -> Self {
        OpCheck {
            op,
            inputs,
            analytic: f,
            reference: None,
        }
    }

    pub fn run(&self, cfg: GradCheckConfig) -> Result<GradCheckReport> {
        let reference = self.reference.as_ref().unwrap_or(&self.analytic);
        grad_check_against(
            self.analytic.as_ref(),
            reference.as_ref(),
            &self.inputs,
            cfg,
        )
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Magnitudes in `[0.1, 1)` with random sign, for ops with a kink at zero.
fn off_origin(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Offsets whose fractional part stays in `[0.1, 0.9]`, keeping bilinear
/// sample points away from the integer lattice where the map has kinks.
fn fractional(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        rng.gen_range(-2i32..2) as f64 + rng.gen_range(0.1..0.9)
    })
}

/// One randomized case for every differentiable operation.
pub fn op_checks(seed: u64) -> Vec<OpCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut out = Vec::new();

    let (n, c, h, w) = (
        r.gen_range(1..3),
        r.gen_range(1..4),
        r.gen_range(3..6),
        r.gen_range(3..6),
    );
    let groups = if c > 1 && r.gen_bool(0.5) { c } else { 1 };
    let c_out = groups * r.gen_range(1..3);
    let k = [1, 3][r.gen_range(0..2)];
    let geo = ConvGeometry::new(r.gen_range(1..3), k / 2, groups);
    out.push(OpCheck::new(
        OpKind::Conv2d,
        vec![
            uniform(r, &[n, c, h, w], -1.0, 1.0),
            uniform(r, &[c_out, c / groups, k, k], -1.0, 1.0),
            uniform(r, &[c_out], -1.0, 1.0),
        ],
        Box::new(move |t, v| t.conv2d(v[0], v[1], Some(v[2]), geo)),
    ));

    let geo = ConvGeometry::new(1, 1, c);
    out.push(OpCheck::new(
        OpKind::DeformConv2d,
        vec![
            uniform(r, &[n, c, h, w], -1.0, 1.0),
            fractional(r, &[n, 2 * c * 9, h, w]),
            uniform(r, &[c, 1, 3, 3], -1.0, 1.0),
            uniform(r, &[c], -1.0, 1.0),
        ],
        Box::new(move |t, v| t.deform_conv2d(v[0], v[1], v[2], Some(v[3]), geo)),
    ));

    let bn_n = r.gen_range(2..4);
    out.push(OpCheck::new(
        OpKind::BatchNormTrain,
        vec![
            uniform(r, &[bn_n, c, h, w], -2.0, 2.0),
            uniform(r, &[c], 0.5, 1.5),
            uniform(r, &[c], -1.0, 1.0),
        ],
        Box::new(|t, v| Ok(t.batchnorm_train(v[0], v[1], v[2], 1e-5)?.0)),
    ));

    let mean: Vec<f64> = (0..c).map(|_| r.gen_range(-1.0..1.0)).collect();
    let var: Vec<f64> = (0..c).map(|_| r.gen_range(0.1..2.0)).collect();
    out.push(OpCheck::new(
        OpKind::BatchNormEval,
        vec![
            uniform(r, &[n, c, h, w], -2.0, 2.0),
            uniform(r, &[c], 0.5, 1.5),
            uniform(r, &[c], -1.0, 1.0),
        ],
        Box::new(move |t, v| t.batchnorm_eval(v[0], v[1], v[2], mean.clone(), var.clone(), 1e-5)),
    ));

    out.push(OpCheck::new(
        OpKind::LayerNorm,
        vec![
            uniform(r, &[n, c, h, w], -2.0, 2.0),
            uniform(r, &[c], 0.5, 1.5),
            uniform(r, &[c], -1.0, 1.0),
        ],
        Box::new(|t, v| t.layernorm(v[0], v[1], v[2], 1e-5)),
    ));

    let (rows, cols) = (r.gen_range(1..5), r.gen_range(1..6));
    out.push(OpCheck::new(
        OpKind::Softmax,
        vec![uniform(r, &[rows, cols], -2.0, 2.0)],
        Box::new(|t, v| t.softmax_rows(v[0])),
    ));

    let coords = Tensor::new(
        &[2],
        vec![
            r.gen_range(0.1..0.9) + r.gen_range(-1i32..w as i32) as f64,
            r.gen_range(0.1..0.9) + r.gen_range(-1i32..h as i32) as f64,
        ],
    )
    .expect("two coordinates");
    out.push(OpCheck::new(
        OpKind::BilinearSample,
        vec![uniform(r, &[h, w], -1.0, 1.0), coords],
        Box::new(|t, v| t.bilinear_sample(v[0], v[1])),
    ));

    let (b, m, kk, nn) = (
        r.gen_range(1..3),
        r.gen_range(1..4),
        r.gen_range(1..4),
        r.gen_range(1..4),
    );
    out.push(OpCheck::new(
        OpKind::MatMul,
        vec![
            uniform(r, &[b, m, kk], -1.0, 1.0),
            uniform(r, &[b, kk, nn], -1.0, 1.0),
        ],
        Box::new(|t, v| t.matmul(v[0], v[1])),
    ));

    out.push(OpCheck::new(
        OpKind::Permute,
        vec![uniform(r, &[n, c, h], -1.0, 1.0)],
        Box::new(|t, v| t.permute(v[0], &[2, 0, 1])),
    ));

    out.push(OpCheck::new(
        OpKind::Reshape,
        vec![uniform(r, &[c, h, w], -1.0, 1.0)],
        Box::new(move |t, v| t.reshape(v[0], &[c * h, w])),
    ));

    out.push(OpCheck::new(
        OpKind::Concat,
        vec![
            uniform(r, &[n, c, h], -1.0, 1.0),
            uniform(r, &[n, c + 1, h], -1.0, 1.0),
        ],
        Box::new(|t, v| t.concat(&[v[0], v[1]], 1)),
    ));

    let start = r.gen_range(0..h - 1);
    out.push(OpCheck::new(
        OpKind::Narrow,
        vec![uniform(r, &[c, h, w], -1.0, 1.0)],
        Box::new(move |t, v| t.narrow(v[0], 1, start, 2)),
    ));

    let shape = [c, h];
    for op in [OpKind::Add, OpKind::Sub, OpKind::Mul] {
        out.push(OpCheck::new(
            op,
            vec![uniform(r, &shape, -1.0, 1.0), uniform(r, &shape, -1.0, 1.0)],
            Box::new(move |t, v| match op {
                OpKind::Add => t.add(v[0], v[1]),
                OpKind::Sub => t.sub(v[0], v[1]),
                _ => t.mul(v[0], v[1]),
            }),
        ));
    }

    let (a, s) = (r.gen_range(-2.0..2.0), r.gen_range(-1.0..1.0));
    out.push(OpCheck::new(
        OpKind::Affine,
        vec![uniform(r, &shape, -1.0, 1.0)],
        Box::new(move |t, v| Ok(t.affine(v[0], a, s))),
    ));

    out.push(OpCheck::new(
        OpKind::Scale,
        vec![uniform(r, &shape, -1.0, 1.0), uniform(r, &[1], -2.0, 2.0)],
        Box::new(|t, v| t.scale(v[0], v[1])),
    ));

    out.push(OpCheck::new(
        OpKind::Sigmoid,
        vec![uniform(r, &shape, -3.0, 3.0)],
        Box::new(|t, v| Ok(t.sigmoid(v[0]))),
    ));
    out.push(OpCheck::new(
        OpKind::Tanh,
        vec![uniform(r, &shape, -2.0, 2.0)],
        Box::new(|t, v| Ok(t.tanh(v[0]))),
    ));
    out.push(OpCheck::new(
        OpKind::Relu,
        vec![off_origin(r, &shape)],
        Box::new(|t, v| Ok(t.relu(v[0]))),
    ));

    let alpha = 2.0;
    out.push(OpCheck {
        op: OpKind::Spike,
        inputs: vec![uniform(r, &shape, -1.5, 1.5)],
        analytic: Box::new(move |t, v| Ok(t.spike(v[0], alpha))),
        reference: Some(Box::new(move |t, v| Ok(t.smooth_spike(v[0], alpha)))),
    });
    out.push(OpCheck::new(
        OpKind::SmoothSpike,
        vec![uniform(r, &shape, -1.5, 1.5)],
        Box::new(move |t, v| Ok(t.smooth_spike(v[0], alpha))),
    ));

    // x * detach(x) differentiates as x * const.
    let x = uniform(r, &shape, -1.0, 1.0);
    let frozen = x.clone();
    out.push(OpCheck {
        op: OpKind::Detach,
        inputs: vec![x],
        analytic: Box::new(|t, v| {
            let d = t.detach(v[0]);
            t.mul(v[0], d)
        }),
        reference: Some(Box::new(move |t, v| {
            let c = t.constant(frozen.clone());
            t.mul(v[0], c)
        })),
    });

    let axis = r.gen_range(0..3);
    out.push(OpCheck::new(
        OpKind::SumAxis,
        vec![uniform(r, &[n, c, h], -1.0, 1.0)],
        Box::new(move |t, v| t.sum_axis(v[0], axis)),
    ));
    out.push(OpCheck::new(
        OpKind::Sum,
        vec![uniform(r, &shape, -1.0, 1.0)],
        Box::new(|t, v| Ok(t.sum(v[0]))),
    ));

    let targets = Tensor::from_fn(&shape, |_| if r.gen_bool(0.3) { 1.0 } else { 0.0 });
    out.push(OpCheck::new(
        OpKind::BceWithLogits,
        vec![uniform(r, &shape, -4.0, 4.0)],
        Box::new(move |t, v| t.bce_with_logits_sum(v[0], &targets, 30.0)),
    ));

    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn registry_covers_every_op() {
        let covered: HashSet<OpKind> = op_checks(0).iter().map(|c| c.op).collect();
        for op in OpKind::DIFFERENTIABLE {
            assert!(covered.contains(&op), "{op:?} has no gradient check");
        }
    }

    #[test]
    fn every_op_matches_finite_differences() {
        for seed in 0..20 {
            for case in op_checks(seed) {
                let rep = case
                    .run(GradCheckConfig {
                        seed,
                        ..Default::default()
                    })
                    .unwrap();
                assert!(rep.passed(), "seed {seed} {:?}: {rep:?}", case.op);
            }
        }
    }

    #[test]
    fn linear_op_is_nearly_exact() {
        let case = op_checks(3)
            .into_iter()
            .find(|c| c.op == OpKind::Conv2d)
            .unwrap();
        let rep = case.run(GradCheckConfig::default()).unwrap();
        assert!(rep.max_rel_error < 1e-6, "{rep:?}");
    }

    #[test]
    fn wrong_gradient_is_caught() {
        // detach severs a real dependency, so comparing against the true
        // function must fail
        let x = Tensor::new(&[3], vec![0.3, -0.7, 1.1]).unwrap();
        let rep = grad_check(
            |t, v| {
                let d = t.detach(v[0]);
                t.mul(v[0], d)
            },
            &[x],
            GradCheckConfig::default(),
        )
        .unwrap();
        assert!(!rep.passed());
    }

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(relative_error(2.0, 1.0, 1e-2), 0.5);
        assert!((relative_error(1e-6, 0.0, 1e-2) - 1e-4).abs() < 1e-18);
    }
}
