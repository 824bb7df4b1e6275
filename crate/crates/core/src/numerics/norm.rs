//! Batch and layer normalization over `[N,C,H,W]` (or `[C,H,W]`) tensors.

use crate::error::{Error, Result};
use crate::numerics::conv::split_batch;
use crate::numerics::{Real, Tensor};

/// Running-statistics momentum: `running = 0.9 * running + 0.1 * batch`.
pub const BN_MOMENTUM: f64 = 0.9;

/// Per-channel affine normalization parameters.
#[derive(Clone, Copy, Debug)]
pub struct BnStats<'a, T> {
    pub mean: &'a [T],
    pub var: &'a [T],
    pub weight: &'a [T],
    pub bias: &'a [T],
    pub eps: T,
}

fn check_channels<T: Real>(op: &'static str, c: usize, s: &BnStats<'_, T>) -> Result<()> {
    for (name, len) in [
        ("mean", s.mean.len()),
        ("var", s.var.len()),
        ("weight", s.weight.len()),
        ("bias", s.bias.len()),
    ] {
        if len != c {
            return Err(Error::shape(op, name, c, len));
        }
    }
    if let Some(v) = s.var.iter().find(|v| **v < T::zero() || v.is_nan()) {
        return Err(Error::invalid(
            op,
            format!("variance must be non-negative, got {v}"),
        ));
    }
    if !(s.eps >= T::zero()) {
        return Err(Error::invalid(op, "eps must be non-negative"));
    }
    Ok(())
}

/// Inference-mode batch norm using stored statistics.
pub fn batchnorm2d<T: Real>(input: &Tensor<T>, stats: BnStats<'_, T>) -> Result<Tensor<T>> {
    let (n, c, h, w, _) = split_batch("batchnorm2d", input.shape())?;
    check_channels("batchnorm2d", c, &stats)?;
    let hw = h * w;
    let mut out = input.clone();
    for ni in 0..n {
        for ci in 0..c {
            let a = stats.weight[ci] / (stats.var[ci] + stats.eps).sqrt();
            let b = stats.bias[ci] - stats.mean[ci] * a;
            for v in &mut out.data_mut()[(ni * c + ci) * hw..][..hw] {
                *v = *v * a + b;
            }
        }
    }
    Ok(out)
}

/// Biased per-channel mean and variance over the `(N, H, W)` axes.
pub fn channel_stats<T: Real>(input: &Tensor<T>) -> Result<(Vec<T>, Vec<T>)> {
    let (n, c, h, w, _) = split_batch("channel_stats", input.shape())?;
    let hw = h * w;
    let count = T::lit((n * hw) as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ci in 0..c {
        let mut s = T::zero();
        for ni in 0..n {
            s += input.data()[(ni * c + ci) * hw..][..hw]
                .iter()
                .copied()
                .sum::<T>();
        }
        let m = s / count;
        let mut q = T::zero();
        for ni in 0..n {
            for &v in &input.data()[(ni * c + ci) * hw..][..hw] {
                q += (v - m) * (v - m);
            }
        }
        mean[ci] = m;
        var[ci] = q / count;
    }
    Ok((mean, var))
}

/// Everything the training-mode backward pass needs.
#[derive(Clone, Debug)]
pub struct BnTrainOutput<T> {
    pub output: Tensor<T>,
    pub x_hat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
}

/// Training-mode batch norm: normalizes with the batch's own statistics.
/// Constant channels normalize to zero thanks to `eps`.
pub fn batchnorm2d_train<T: Real>(
    input: &Tensor<T>,
    weight: &[T],
    bias: &[T],
    eps: T,
) -> Result<BnTrainOutput<T>> {
    let (n, c, h, w, _) = split_batch("batchnorm2d_train", input.shape())?;
    let (mean, var) = channel_stats(input)?;
    check_channels(
        "batchnorm2d_train",
        c,
        &BnStats {
            mean: &mean,
            var: &var,
            weight,
            bias,
            eps,
        },
    )?;
    if !(eps > T::zero()) {
        return Err(Error::invalid("batchnorm2d_train", "eps must be positive"));
    }
    let hw = h * w;
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut x_hat = input.clone();
    let mut out = input.clone();
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * hw;
            for i in base..base + hw {
                let xh = (input.data()[i] - mean[ci]) * inv_std[ci];
                x_hat.data_mut()[i] = xh;
                out.data_mut()[i] = xh * weight[ci] + bias[ci];
            }
        }
    }
    Ok(BnTrainOutput {
        output: out,
        x_hat,
        inv_std,
        batch_mean: mean,
        batch_var: var,
    })
}

/// Exponential moving average update of running statistics.
pub fn update_running<T: Real>(running: &mut [T], batch: &[T], momentum: T) {
    for (r, b) in running.iter_mut().zip(batch) {
        *r = momentum * *r + (T::one() - momentum) * *b;
    }
}

#[derive(Clone, Debug)]
pub struct NormGrads<T> {
    pub input: Tensor<T>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

/// Backward of [`batchnorm2d_train`].
pub fn batchnorm2d_train_backward<T: Real>(
    fwd_x_hat: &Tensor<T>,
    inv_std: &[T],
    weight: &[T],
    grad_out: &Tensor<T>,
) -> Result<NormGrads<T>> {
    let (n, c, h, w, _) = split_batch("batchnorm2d_train_backward", fwd_x_hat.shape())?;
    let hw = h * w;
    let m = T::lit((n * hw) as f64);
    let mut gi = vec![T::zero(); fwd_x_hat.len()];
    let mut gw = vec![T::zero(); c];
    let mut gb = vec![T::zero(); c];
    for ci in 0..c {
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        for ni in 0..n {
            let base = (ni * c + ci) * hw;
            for i in base..base + hw {
                sum_g += grad_out.data()[i];
                sum_gx += grad_out.data()[i] * fwd_x_hat.data()[i];
            }
        }
        gb[ci] = sum_g;
        gw[ci] = sum_gx;
        let k = weight[ci] * inv_std[ci] / m;
        for ni in 0..n {
            let base = (ni * c + ci) * hw;
            for i in base..base + hw {
                gi[i] = k * (m * grad_out.data()[i] - sum_g - fwd_x_hat.data()[i] * sum_gx);
            }
        }
    }
    Ok(NormGrads {
        input: Tensor::new(fwd_x_hat.shape(), gi)?,
        weight: gw,
        bias: gb,
    })
}

/// Backward of inference-mode [`batchnorm2d`] (statistics are constants).
pub fn batchnorm2d_backward<T: Real>(
    input: &Tensor<T>,
    stats: BnStats<'_, T>,
    grad_out: &Tensor<T>,
) -> Result<NormGrads<T>> {
    let (n, c, h, w, _) = split_batch("batchnorm2d_backward", input.shape())?;
    check_channels("batchnorm2d_backward", c, &stats)?;
    let hw = h * w;
    let mut gi = vec![T::zero(); input.len()];
    let mut gw = vec![T::zero(); c];
    let mut gb = vec![T::zero(); c];
    for ci in 0..c {
        let inv = T::one() / (stats.var[ci] + stats.eps).sqrt();
        for ni in 0..n {
            let base = (ni * c + ci) * hw;
            for i in base..base + hw {
                let g = grad_out.data()[i];
                gi[i] = g * stats.weight[ci] * inv;
                gw[ci] += g * (input.data()[i] - stats.mean[ci]) * inv;
                gb[ci] += g;
            }
        }
    }
    Ok(NormGrads {
        input: Tensor::new(input.shape(), gi)?,
        weight: gw,
        bias: gb,
    })
}

#[derive(Clone, Debug)]
pub struct LnOutput<T> {
    pub output: Tensor<T>,
    pub x_hat: Tensor<T>,
    pub inv_std: Vec<T>,
}

/// Layer norm over each sample's `(C,H,W)` block with per-channel affine.
pub fn layernorm2d<T: Real>(
    input: &Tensor<T>,
    weight: &[T],
    bias: &[T],
    eps: T,
) -> Result<LnOutput<T>> {
    let (n, c, h, w, _) = split_batch("layernorm2d", input.shape())?;
    if weight.len() != c {
        return Err(Error::shape("layernorm2d", "weight", c, weight.len()));
    }
    if bias.len() != c {
        return Err(Error::shape("layernorm2d", "bias", c, bias.len()));
    }
    let hw = h * w;
    let size = c * hw;
    let count = T::lit(size as f64);
    let mut x_hat = input.clone();
    let mut out = input.clone();
    let mut inv_std = Vec::with_capacity(n);
    for ni in 0..n {
        let block = &input.data()[ni * size..(ni + 1) * size];
        let mean = block.iter().copied().sum::<T>() / count;
        let var = block.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / count;
        let inv = T::one() / (var + eps).sqrt();
        inv_std.push(inv);
        for ci in 0..c {
            for j in 0..hw {
                let i = ni * size + ci * hw + j;
                let xh = (input.data()[i] - mean) * inv;
                x_hat.data_mut()[i] = xh;
                out.data_mut()[i] = xh * weight[ci] + bias[ci];
            }
        }
    }
    Ok(LnOutput {
        output: out,
        x_hat,
        inv_std,
    })
}

pub fn layernorm2d_backward<T: Real>(
    x_hat: &Tensor<T>,
    inv_std: &[T],
    weight: &[T],
    grad_out: &Tensor<T>,
) -> Result<NormGrads<T>> {
    let (n, c, h, w, _) = split_batch("layernorm2d_backward", x_hat.shape())?;
    let hw = h * w;
    let size = c * hw;
    let m = T::lit(size as f64);
    let mut gi = vec![T::zero(); x_hat.len()];
    let mut gw = vec![T::zero(); c];
    let mut gb = vec![T::zero(); c];
    for ni in 0..n {
        // gradient w.r.t. x_hat
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        for ci in 0..c {
            for j in 0..hw {
                let i = ni * size + ci * hw + j;
                let g = grad_out.data()[i];
                gw[ci] += g * x_hat.data()[i];
                gb[ci] += g;
                let gx = g * weight[ci];
                sum_g += gx;
                sum_gx += gx * x_hat.data()[i];
            }
        }
        let k = inv_std[ni] / m;
        for ci in 0..c {
            for j in 0..hw {
                let i = ni * size + ci * hw + j;
                let gx = grad_out.data()[i] * weight[ci];
                gi[i] = k * (m * gx - sum_g - x_hat.data()[i] * sum_gx);
            }
        }
    }
    Ok(NormGrads {
        input: Tensor::new(x_hat.shape(), gi)?,
        weight: gw,
        bias: gb,
    })
}
