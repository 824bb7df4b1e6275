//! Reverse-mode differentiation over dense tensors.
//!
//! Nodes are appended in evaluation order, so every parent index is smaller
//! than its child's and the backward sweep is a single reverse scan.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::numerics::bilinear::BilinearTaps;
use crate::numerics::conv::{conv2d, conv2d_backward, ConvGeometry};
use crate::numerics::deform::{deform_conv2d, deform_conv2d_backward};
use crate::numerics::norm::{
    batchnorm2d, batchnorm2d_backward, batchnorm2d_train, batchnorm2d_train_backward, layernorm2d,
    layernorm2d_backward, BnStats,
};
use crate::numerics::softmax::{softmax_rows, softmax_rows_backward};
use crate::numerics::{gemm, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Every differentiable operation the tape can record.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Conv2d,
    DeformConv2d,
    BatchNormTrain,
    BatchNormEval,
    LayerNorm,
    Softmax,
    BilinearSample,
    MatMul,
    Permute,
    Reshape,
    Concat,
    Narrow,
    Add,
    Sub,
    Mul,
    Affine,
    Scale,
    Sigmoid,
    Tanh,
    Relu,
    Spike,
    SmoothSpike,
    Detach,
    SumAxis,
    Sum,
    BceWithLogits,
}

impl OpKind {
    /// All recordable operations except `Leaf`.
    pub const DIFFERENTIABLE: [OpKind; 26] = [
        OpKind::Conv2d,
        OpKind::DeformConv2d,
        OpKind::BatchNormTrain,
        OpKind::BatchNormEval,
        OpKind::LayerNorm,
        OpKind::Softmax,
        OpKind::BilinearSample,
        OpKind::MatMul,
        OpKind::Permute,
        OpKind::Reshape,
        OpKind::Concat,
        OpKind::Narrow,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Affine,
        OpKind::Scale,
        OpKind::Sigmoid,
        OpKind::Tanh,
        OpKind::Relu,
        OpKind::Spike,
        OpKind::SmoothSpike,
        OpKind::Detach,
        OpKind::SumAxis,
        OpKind::Sum,
        OpKind::BceWithLogits,
    ];
}

/// Values handed to a node's backward rule.
pub struct BackwardArgs<'a, T> {
    pub grad: &'a Tensor<T>,
    pub inputs: Vec<&'a Tensor<T>>,
    pub output: &'a Tensor<T>,
}

type BackwardFn<T> = Box<dyn Fn(&BackwardArgs<'_, T>) -> Result<Vec<Option<Tensor<T>>>>>;

struct Node<T> {
    value: Tensor<T>,
    op: OpKind,
    parents: Vec<Var>,
    requires_grad: bool,
    backward: Option<BackwardFn<T>>,
}

/// Batch statistics produced by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Arctan surrogate: `alpha / (2 * (1 + (pi/2 * alpha * u)^2))`.
pub fn arctan_surrogate<T: Real>(u: T, alpha: T) -> T {
    let z = T::lit(PI / 2.0) * alpha * u;
    alpha / (T::lit(2.0) * (T::one() + z * z))
}

/// Smooth primitive of [`arctan_surrogate`]: `1/2 + atan(pi/2 * alpha * u) / pi`.
pub fn arctan_primitive<T: Real>(u: T, alpha: T) -> T {
    T::lit(0.5) + (T::lit(PI / 2.0) * alpha * u).atan() / T::lit(PI)
}

pub struct Tape<T: Real = f64> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            "shape",
            format!("{:?}", a.shape()),
            format!("{:?}", b.shape()),
        ));
    }
    Ok(())
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that records values only; `backward` is unavailable.
    pub fn no_grad() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Every recorded variable, in recording order.
    pub fn vars(&self) -> impl Iterator<Item = Var> {
        (0..self.nodes.len()).map(Var)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn op(&self, v: Var) -> OpKind {
        self.nodes[v.0].op
    }

    pub fn parents(&self, v: Var) -> &[Var] {
        &self.nodes[v.0].parents
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false)
    }

    /// Differentiable input.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true)
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: OpKind::Leaf,
            parents: Vec::new(),
            requires_grad: requires_grad && self.grad_enabled,
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(
        &mut self,
        op: OpKind,
        value: Tensor<T>,
        parents: Vec<Var>,
        backward: BackwardFn<T>,
    ) -> Var {
        let requires_grad =
            self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            parents,
            requires_grad,
            backward: requires_grad.then_some(backward),
        });
        Var(self.nodes.len() - 1)
    }

    // ---- convolutions and normalization -------------------------------

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geo: ConvGeometry) -> Result<Var> {
        let out = conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), geo)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(
            OpKind::Conv2d,
            out,
            parents,
            Box::new(move |a| {
                let g = conv2d_backward(a.inputs[0], a.inputs[1], geo, a.grad)?;
                let mut res = vec![Some(g.input), Some(g.weight)];
                if a.inputs.len() == 3 {
                    res.push(Some(g.bias));
                }
                Ok(res)
            }),
        ))
    }

    pub fn deform_conv2d(
        &mut self,
        x: Var,
        offsets: Var,
        w: Var,
        b: Option<Var>,
        geo: ConvGeometry,
    ) -> Result<Var> {
        let out = deform_conv2d(
            self.value(x),
            self.value(offsets),
            self.value(w),
            b.map(|b| self.value(b)),
            geo,
        )?;
        let mut parents = vec![x, offsets, w];
        parents.extend(b);
        Ok(self.push(
            OpKind::DeformConv2d,
            out,
            parents,
            Box::new(move |a| {
                let g = deform_conv2d_backward(a.inputs[0], a.inputs[1], a.inputs[2], geo, a.grad)?;
                let mut res = vec![Some(g.input), Some(g.offsets), Some(g.weight)];
                if a.inputs.len() == 4 {
                    res.push(Some(g.bias));
                }
                Ok(res)
            }),
        ))
    }

    /// Batch norm with batch statistics over `(N, H, W)`.
    pub fn batchnorm_train(
        &mut self,
        x: Var,
        weight: Var,
        bias: Var,
        eps: T,
    ) -> Result<(Var, BatchStats<T>)> {
        let fwd = batchnorm2d_train(
            self.value(x),
            self.value(weight).data(),
            self.value(bias).data(),
            eps,
        )?;
        let stats = BatchStats {
            mean: fwd.batch_mean.clone(),
            var: fwd.batch_var.clone(),
        };
        let x_hat = fwd.x_hat;
        let inv_std = fwd.inv_std;
        let c = inv_std.len();
        let v = self.push(
            OpKind::BatchNormTrain,
            fwd.output,
            vec![x, weight, bias],
            Box::new(move |a| {
                let g = batchnorm2d_train_backward(&x_hat, &inv_std, a.inputs[1].data(), a.grad)?;
                Ok(vec![
                    Some(g.input),
                    Some(Tensor::new(&[c], g.weight)?),
                    Some(Tensor::new(&[c], g.bias)?),
                ])
            }),
        );
        Ok((v, stats))
    }

    /// Batch norm with fixed (running) statistics.
    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        weight: Var,
        bias: Var,
        mean: Vec<T>,
        var: Vec<T>,
        eps: T,
    ) -> Result<Var> {
        let out = batchnorm2d(
            self.value(x),
            BnStats {
                mean: &mean,
                var: &var,
                weight: self.value(weight).data(),
                bias: self.value(bias).data(),
                eps,
            },
        )?;
        Ok(self.push(
            OpKind::BatchNormEval,
            out,
            vec![x, weight, bias],
            Box::new(move |a| {
                let stats = BnStats {
                    mean: &mean,
                    var: &var,
                    weight: a.inputs[1].data(),
                    bias: a.inputs[2].data(),
                    eps,
                };
                let g = batchnorm2d_backward(a.inputs[0], stats, a.grad)?;
                let c = mean.len();
                Ok(vec![
                    Some(g.input),
                    Some(Tensor::new(&[c], g.weight)?),
                    Some(Tensor::new(&[c], g.bias)?),
                ])
            }),
        ))
    }

    pub fn layernorm(&mut self, x: Var, weight: Var, bias: Var, eps: T) -> Result<Var> {
        let fwd = layernorm2d(
            self.value(x),
            self.value(weight).data(),
            self.value(bias).data(),
            eps,
        )?;
        let x_hat = fwd.x_hat;
        let inv_std = fwd.inv_std;
        Ok(self.push(
            OpKind::LayerNorm,
            fwd.output,
            vec![x, weight, bias],
            Box::new(move |a| {
                let g = layernorm2d_backward(&x_hat, &inv_std, a.inputs[1].data(), a.grad)?;
                let c = g.weight.len();
                Ok(vec![
                    Some(g.input),
                    Some(Tensor::new(&[c], g.weight)?),
                    Some(Tensor::new(&[c], g.bias)?),
                ])
            }),
        ))
    }

    // ---- attention building blocks ------------------------------------

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let out = softmax_rows(self.value(x))?;
        Ok(self.push(
            OpKind::Softmax,
            out,
            vec![x],
            Box::new(|a| Ok(vec![Some(softmax_rows_backward(a.output, a.grad))])),
        ))
    }

    /// Batched matrix product `[B,M,K] x [B,K,N] -> [B,M,N]` (2-D also accepted).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (bs, m, k, n) = matmul_dims(self.value(a).shape(), self.value(b).shape())?;
        let out = bmm(
            self.value(a).data(),
            self.value(b).data(),
            bs,
            m,
            k,
            n,
            false,
            false,
        );
        let shape = if self.value(a).ndim() == 2 {
            vec![m, n]
        } else {
            vec![bs, m, n]
        };
        let a_shape = self.value(a).shape().to_vec();
        let b_shape = self.value(b).shape().to_vec();
        Ok(self.push(
            OpKind::MatMul,
            Tensor::new(&shape, out)?,
            vec![a, b],
            Box::new(move |args| {
                let g = args.grad.data();
                // dA = dC * B^T, dB = A^T * dC
                let da = bmm(g, args.inputs[1].data(), bs, m, n, k, false, true);
                let db = bmm(args.inputs[0].data(), g, bs, k, m, n, true, false);
                Ok(vec![
                    Some(Tensor::new(&a_shape, da)?),
                    Some(Tensor::new(&b_shape, db)?),
                ])
            }),
        ))
    }

    /// Samples a `[H,W]` map at `coords = [x, y]`; returns a `[1]` tensor.
    pub fn bilinear_sample(&mut self, map: Var, coords: Var) -> Result<Var> {
        let &[h, w] = self.value(map).shape() else {
            return Err(Error::shape(
                "bilinear_sample",
                "rank",
                2,
                self.value(map).ndim(),
            ));
        };
        if self.value(coords).len() != 2 {
            return Err(Error::shape(
                "bilinear_sample",
                "coords",
                2,
                self.value(coords).len(),
            ));
        }
        let c = self.value(coords).data();
        let v = BilinearTaps::at(h, w, c[0], c[1]).sample(self.value(map).data());
        Ok(self.push(
            OpKind::BilinearSample,
            Tensor::scalar(v),
            vec![map, coords],
            Box::new(move |a| {
                let g = a.grad.data()[0];
                let c = a.inputs[1].data();
                let taps = BilinearTaps::at(h, w, c[0], c[1]);
                let mut gm = Tensor::zeros(&[h, w]);
                for &(i, wgt) in &taps.taps[..taps.count] {
                    gm.data_mut()[i] += g * wgt;
                }
                let (gx, gy) = taps.coord_grad(a.inputs[0].data());
                Ok(vec![
                    Some(gm),
                    Some(Tensor::new(&[2], vec![g * gx, g * gy])?),
                ])
            }),
        ))
    }

    // ---- shape manipulation -------------------------------------------

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let out = self.value(x).permute(axes)?;
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        Ok(self.push(
            OpKind::Permute,
            out,
            vec![x],
            Box::new(move |a| Ok(vec![Some(a.grad.permute(&inverse)?)])),
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let orig = self.value(x).shape().to_vec();
        Ok(self.push(
            OpKind::Reshape,
            out,
            vec![x],
            Box::new(move |a| Ok(vec![Some(a.grad.clone().reshape(&orig)?)])),
        ))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let parts: Vec<&Tensor<T>> = xs.iter().map(|&v| self.value(v)).collect();
        let out = Tensor::concat(&parts, axis)?;
        let extents: Vec<usize> = parts.iter().map(|p| p.dim(axis)).collect();
        Ok(self.push(
            OpKind::Concat,
            out,
            xs.to_vec(),
            Box::new(move |a| {
                let mut start = 0;
                let mut res = Vec::with_capacity(extents.len());
                for &e in &extents {
                    res.push(Some(a.grad.narrow(axis, start, e)?));
                    start += e;
                }
                Ok(res)
            }),
        ))
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).narrow(axis, start, len)?;
        let shape = self.value(x).shape().to_vec();
        Ok(self.push(
            OpKind::Narrow,
            out,
            vec![x],
            Box::new(move |a| {
                let outer: usize = shape[..axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let mut g = Tensor::zeros(&shape);
                for o in 0..outer {
                    let dst = (o * shape[axis] + start) * inner;
                    let src = o * len * inner;
                    g.data_mut()[dst..dst + len * inner]
                        .copy_from_slice(&a.grad.data()[src..src + len * inner]);
                }
                Ok(vec![Some(g)])
            }),
        ))
    }

    // ---- elementwise --------------------------------------------------

    pub fn add(&mut self, x: Var, y: Var) -> Result<Var> {
        same_shape("add", self.value(x), self.value(y))?;
        let out = self.value(x).zip_map(self.value(y), |a, b| a + b)?;
        Ok(self.push(
            OpKind::Add,
            out,
            vec![x, y],
            Box::new(|a| Ok(vec![Some(a.grad.clone()), Some(a.grad.clone())])),
        ))
    }

    pub fn sub(&mut self, x: Var, y: Var) -> Result<Var> {
        same_shape("sub", self.value(x), self.value(y))?;
        let out = self.value(x).zip_map(self.value(y), |a, b| a - b)?;
        Ok(self.push(
            OpKind::Sub,
            out,
            vec![x, y],
            Box::new(|a| Ok(vec![Some(a.grad.clone()), Some(a.grad.map(|g| -g))])),
        ))
    }

    pub fn mul(&mut self, x: Var, y: Var) -> Result<Var> {
        same_shape("mul", self.value(x), self.value(y))?;
        let out = self.value(x).zip_map(self.value(y), |a, b| a * b)?;
        Ok(self.push(
            OpKind::Mul,
            out,
            vec![x, y],
            Box::new(|a| {
                Ok(vec![
                    Some(a.grad.zip_map(a.inputs[1], |g, v| g * v)?),
                    Some(a.grad.zip_map(a.inputs[0], |g, v| g * v)?),
                ])
            }),
        ))
    }

    /// `scale * x + shift` with constant coefficients.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let out = self.value(x).map(|v| scale * v + shift);
        self.push(
            OpKind::Affine,
            out,
            vec![x],
            Box::new(move |a| Ok(vec![Some(a.grad.map(|g| g * scale))])),
        )
    }

    /// Multiplies every element of `x` by the single element of `s`.
    pub fn scale(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::shape("scale", "scalar", 1, self.value(s).len()));
        }
        let k = self.value(s).data()[0];
        let out = self.value(x).map(|v| v * k);
        Ok(self.push(
            OpKind::Scale,
            out,
            vec![x, s],
            Box::new(|a| {
                let k = a.inputs[1].data()[0];
                let gs: T = a
                    .grad
                    .data()
                    .iter()
                    .zip(a.inputs[0].data())
                    .map(|(&g, &v)| g * v)
                    .sum();
                Ok(vec![Some(a.grad.map(|g| g * k)), Some(Tensor::scalar(gs))])
            }),
        ))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(
            OpKind::Sigmoid,
            out,
            vec![x],
            Box::new(|a| {
                Ok(vec![Some(
                    a.grad.zip_map(a.output, |g, y| g * y * (T::one() - y))?,
                )])
            }),
        )
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.tanh());
        self.push(
            OpKind::Tanh,
            out,
            vec![x],
            Box::new(|a| {
                Ok(vec![Some(
                    a.grad.zip_map(a.output, |g, y| g * (T::one() - y * y))?,
                )])
            }),
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()));
        self.push(
            OpKind::Relu,
            out,
            vec![x],
            Box::new(|a| {
                Ok(vec![Some(a.grad.zip_map(a.inputs[0], |g, v| {
                    if v > T::zero() {
                        g
                    } else {
                        T::zero()
                    }
                })?)])
            }),
        )
    }

    /// Heaviside step `u >= 0`, back-propagating the arctan surrogate.
    pub fn spike(&mut self, u: Var, alpha: T) -> Var {
        let out = self
            .value(u)
            .map(|v| if v >= T::zero() { T::one() } else { T::zero() });
        self.push(
            OpKind::Spike,
            out,
            vec![u],
            Box::new(move |a| {
                Ok(vec![Some(a.grad.zip_map(a.inputs[0], |g, v| {
                    g * arctan_surrogate(v, alpha)
                })?)])
            }),
        )
    }

    /// Smooth arctan primitive in place of the step; its exact derivative is
    /// the surrogate used by [`Tape::spike`].
    pub fn smooth_spike(&mut self, u: Var, alpha: T) -> Var {
        let out = self.value(u).map(|v| arctan_primitive(v, alpha));
        self.push(
            OpKind::SmoothSpike,
            out,
            vec![u],
            Box::new(move |a| {
                Ok(vec![Some(a.grad.zip_map(a.inputs[0], |g, v| {
                    g * arctan_surrogate(v, alpha)
                })?)])
            }),
        )
    }

    /// Identity in the forward pass, zero gradient.
    pub fn detach(&mut self, x: Var) -> Var {
        let out = self.value(x).clone();
        self.push(OpKind::Detach, out, vec![x], Box::new(|_| Ok(vec![None])))
    }

    // ---- reductions and losses ----------------------------------------

    /// Sums over `axis`, removing it (a rank-1 input reduces to `[1]`).
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid(
                "sum_axis",
                format!("axis {axis} out of range"),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let dim = shape[axis];
        let src = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for d in 0..dim {
                let row = &src[(o * dim + d) * inner..][..inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        let mut out_shape: Vec<usize> = shape
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != axis)
            .map(|(_, &d)| d)
            .collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        Ok(self.push(
            OpKind::SumAxis,
            Tensor::new(&out_shape, out)?,
            vec![x],
            Box::new(move |a| {
                let mut g = Tensor::zeros(&shape);
                for o in 0..outer {
                    for d in 0..dim {
                        g.data_mut()[(o * dim + d) * inner..][..inner]
                            .copy_from_slice(&a.grad.data()[o * inner..(o + 1) * inner]);
                    }
                }
                Ok(vec![Some(g)])
            }),
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let shape = self.value(x).shape().to_vec();
        self.push(
            OpKind::Sum,
            Tensor::scalar(s),
            vec![x],
            Box::new(move |a| Ok(vec![Some(Tensor::full(&shape, a.grad.data()[0]))])),
        )
    }

    /// Summed binary cross-entropy on logits clamped to `[-clamp, clamp]`.
    pub fn bce_with_logits_sum(
        &mut self,
        logits: Var,
        targets: &Tensor<T>,
        clamp: T,
    ) -> Result<Var> {
        same_shape("bce_with_logits", self.value(logits), targets)?;
        let t = targets.clone();
        let loss: T = self
            .value(logits)
            .data()
            .iter()
            .zip(t.data())
            .map(|(&z, &y)| {
                let z = z.max(-clamp).min(clamp);
                z.max(T::zero()) - z * y + (T::one() + (-z.abs()).exp()).ln()
            })
            .sum();
        Ok(self.push(
            OpKind::BceWithLogits,
            Tensor::scalar(loss),
            vec![logits],
            Box::new(move |a| {
                let g = a.grad.data()[0];
                Ok(vec![Some(a.inputs[0].zip_map(&t, |z, y| {
                    if z.abs() > clamp {
                        T::zero()
                    } else {
                        g * (sigmoid(z) - y)
                    }
                })?)])
            }),
        ))
    }

    // ---- backward -----------------------------------------------------

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).len() != 1 {
            return Err(Error::shape("backward", "root", 1, self.value(root).len()));
        }
        self.backward_with(root, Tensor::ones(self.value(root).shape()))
    }

    /// Reverse sweep seeded with an explicit adjoint for `root`.
    pub fn backward_with(&self, root: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        if !self.grad_enabled {
            return Err(Error::invalid(
                "backward",
                "tape was created without gradient tracking",
            ));
        }
        same_shape("backward", self.value(root), &seed)?;
        let mut adj: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(grad) = adj[i].take() else { continue };
            if !grad.all_finite() {
                return Err(Error::NonFinite {
                    context: format!("adjoint of node {i} ({:?})", node.op),
                });
            }
            let args = BackwardArgs {
                grad: &grad,
                inputs: node
                    .parents
                    .iter()
                    .map(|p| &self.nodes[p.0].value)
                    .collect(),
                output: &node.value,
            };
            let parent_grads = backward(&args)?;
            for (p, g) in node.parents.iter().zip(parent_grads) {
                let (Some(g), true) = (g, self.nodes[p.0].requires_grad) else {
                    continue;
                };
                match &mut adj[p.0] {
                    Some(acc) => acc.add_assign_tensor(&g),
                    slot @ None => *slot = Some(g),
                }
            }
            adj[i] = Some(grad);
        }
        Ok(Gradients { adj })
    }
}

/// Adjoints indexed by [`Var`].
pub struct Gradients<T> {
    adj: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.adj.get(v.0).and_then(|g| g.as_ref())
    }

    /// Adjoint of `v`, or zeros shaped like `like` when `v` received none.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor<T>) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

#[inline]
pub fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match (a, b) {
        (&[m, k], &[k2, n]) => {
            if k != k2 {
                return Err(Error::shape("matmul", "inner", k, k2));
            }
            Ok((1, m, k, n))
        }
        (&[bs, m, k], &[bs2, k2, n]) => {
            if bs != bs2 {
                return Err(Error::shape("matmul", "batch", bs, bs2));
            }
            if k != k2 {
                return Err(Error::shape("matmul", "inner", k, k2));
            }
            Ok((bs, m, k, n))
        }
        _ => Err(Error::shape(
            "matmul",
            "rank",
            "2 or 3 (matching)",
            format!("{} and {}", a.len(), b.len()),
        )),
    }
}

/// Batched GEMM where operand storage may be transposed per batch entry.
#[allow(clippy::too_many_arguments)]
pub(crate) fn bmm<T: Real>(
    a: &[T],
    b: &[T],
    bs: usize,
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
) -> Vec<T> {
    let mut out = vec![T::zero(); bs * m * n];
    for i in 0..bs {
        gemm(
            m,
            k,
            n,
            &a[i * m * k..(i + 1) * m * k],
            ta,
            &b[i * k * n..(i + 1) * k * n],
            tb,
            T::zero(),
            &mut out[i * m * n..(i + 1) * m * n],
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn surrogate_at_zero_and_tails() {
        assert!((arctan_surrogate(0.0f64, 2.0) - 1.0).abs() < 1e-15);
        assert!(arctan_surrogate(1e6, 2.0) < 1e-10);
        assert!(arctan_surrogate(-1e6, 2.0) < 1e-10);
    }

    #[test]
    fn backward_order_and_accumulation() {
        // f(x) = sum(x * x + x) -> df/dx = 2x + 1
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.add(sq, x).unwrap();
        let l = tape.sum(s);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[3.0, -3.0, 2.0]);
        for v in [sq, s, l] {
            assert!(tape.parents(v).iter().all(|p| p.index() < v.index()));
        }
    }

    #[test]
    fn constants_and_detach_receive_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::scalar(2.0));
        let c = tape.constant(Tensor::scalar(3.0));
        let d = tape.detach(x);
        let p = tape.mul(d, c).unwrap();
        let q = tape.mul(p, x).unwrap();
        let g = tape.backward(q).unwrap();
        assert!(g.get(c).is_none());
        // only the non-detached path contributes: d(q)/dx = d * c = 6
        assert_eq!(g.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn no_grad_tape_refuses_backward() {
        let mut tape = Tape::<f32>::no_grad();
        let x = tape.param(Tensor::scalar(1.0));
        let y = tape.sigmoid(x);
        assert!(tape.backward(y).is_err());
        assert!((tape.value(y).data()[0] - 0.7310586).abs() < 1e-6);
    }

    #[test]
    fn bce_zero_logit_is_ln2() {
        let mut tape = Tape::<f64>::new();
        let z = tape.param(Tensor::zeros(&[1]));
        let l = tape
            .bce_with_logits_sum(z, &Tensor::ones(&[1]), 30.0)
            .unwrap();
        assert!((tape.value(l).data()[0] - std::f64::consts::LN_2).abs() < 1e-15);
    }
}
