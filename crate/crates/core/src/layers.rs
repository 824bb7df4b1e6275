//! Parameter-owning convolution and normalization layers with a plain
//! forward pass and a tape-recorded one.

use rand::Rng;

use crate::error::Result;
use crate::graph::{join, GraphCtx, ParamKind, ParamMut, ParamRef, Parameterized};
use crate::layer_spec::LayerSpec;
use crate::numerics::conv::{conv2d, ConvGeometry};
use crate::numerics::norm::{batchnorm2d, layernorm2d, update_running, BnStats, BN_MOMENTUM};
use crate::numerics::tape::{BatchStats, Var};
use crate::numerics::{Real, Tensor};

pub const NORM_EPS: f64 = 1e-5;

/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` samples.
pub fn uniform_init<T: Real, R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let b = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::lit(rng.gen_range(-b..b)))
}

#[derive(Clone, Debug)]
pub struct Conv<T> {
    pub in_channels: usize,
    pub spec: LayerSpec,
    pub groups: usize,
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Real> Conv<T> {
    pub fn new<R: Rng>(
        in_channels: usize,
        spec: LayerSpec,
        groups: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels / groups * spec.kernel * spec.kernel;
        let weight = uniform_init(
            &[
                spec.channels,
                in_channels / groups,
                spec.kernel,
                spec.kernel,
            ],
            fan_in,
            rng,
        );
        let bias = bias.then(|| uniform_init(&[spec.channels], fan_in, rng));
        Conv {
            in_channels,
            spec,
            groups,
            weight,
            bias,
        }
    }

    pub fn geometry(&self) -> ConvGeometry {
        ConvGeometry::new(self.spec.stride, self.spec.padding, self.groups)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv2d(x, &self.weight, self.bias.as_ref(), self.geometry())
    }

    pub fn graph(&self, ctx: &mut GraphCtx<T>, prefix: &str, x: Var) -> Result<Var> {
        let w = ctx.param(&join(prefix, "weight"), &self.weight);
        let b = self
            .bias
            .as_ref()
            .map(|b| ctx.param(&join(prefix, "bias"), b));
        ctx.tape.conv2d(x, w, b, self.geometry())
    }
}

impl<T: Real> Parameterized<T> for Conv<T> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        out.push((join(prefix, "weight"), &self.weight, ParamKind::Trainable));
        if let Some(b) = &self.bias {
            out.push((join(prefix, "bias"), b, ParamKind::Trainable));
        }
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        out.push((
            join(prefix, "weight"),
            &mut self.weight,
            ParamKind::Trainable,
        ));
        if let Some(b) = &mut self.bias {
            out.push((join(prefix, "bias"), b, ParamKind::Trainable));
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub eps: T,
}

impl<T: Real> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            weight: Tensor::ones(&[channels]),
            bias: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
            eps: T::lit(NORM_EPS),
        }
    }

    pub fn stats(&self) -> BnStats<'_, T> {
        BnStats {
            mean: self.running_mean.data(),
            var: self.running_var.data(),
            weight: self.weight.data(),
            bias: self.bias.data(),
            eps: self.eps,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        batchnorm2d(x, self.stats())
    }

    pub fn graph(&self, ctx: &mut GraphCtx<T>, prefix: &str, x: Var) -> Result<Var> {
        let w = ctx.param(&join(prefix, "weight"), &self.weight);
        let b = ctx.param(&join(prefix, "bias"), &self.bias);
        if ctx.mode.training {
            let (y, stats) = ctx.tape.batchnorm_train(x, w, b, self.eps)?;
            ctx.record_bn_stats(prefix, stats);
            Ok(y)
        } else {
            ctx.tape.batchnorm_eval(
                x,
                w,
                b,
                self.running_mean.data().to_vec(),
                self.running_var.data().to_vec(),
                self.eps,
            )
        }
    }

    pub fn update_running(&mut self, stats: &BatchStats<T>) {
        let m = T::lit(BN_MOMENTUM);
        update_running(self.running_mean.data_mut(), &stats.mean, m);
        update_running(self.running_var.data_mut(), &stats.var, m);
    }
}

impl<T: Real> Parameterized<T> for BatchNorm<T> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        out.push((join(prefix, "weight"), &self.weight, ParamKind::Trainable));
        out.push((join(prefix, "bias"), &self.bias, ParamKind::Trainable));
        out.push((
            join(prefix, "running_mean"),
            &self.running_mean,
            ParamKind::Buffer,
        ));
        out.push((
            join(prefix, "running_var"),
            &self.running_var,
            ParamKind::Buffer,
        ));
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        out.push((
            join(prefix, "weight"),
            &mut self.weight,
            ParamKind::Trainable,
        ));
        out.push((join(prefix, "bias"), &mut self.bias, ParamKind::Trainable));
        out.push((
            join(prefix, "running_mean"),
            &mut self.running_mean,
            ParamKind::Buffer,
        ));
        out.push((
            join(prefix, "running_var"),
            &mut self.running_var,
            ParamKind::Buffer,
        ));
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub eps: T,
}

impl<T: Real> LayerNorm<T> {
    pub fn new(channels: usize) -> Self {
        LayerNorm {
            weight: Tensor::ones(&[channels]),
            bias: Tensor::zeros(&[channels]),
            eps: T::lit(NORM_EPS),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(layernorm2d(x, self.weight.data(), self.bias.data(), self.eps)?.output)
    }

    pub fn graph(&self, ctx: &mut GraphCtx<T>, prefix: &str, x: Var) -> Result<Var> {
        let w = ctx.param(&join(prefix, "weight"), &self.weight);
        let b = ctx.param(&join(prefix, "bias"), &self.bias);
        ctx.tape.layernorm(x, w, b, self.eps)
    }
}

impl<T: Real> Parameterized<T> for LayerNorm<T> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        out.push((join(prefix, "weight"), &self.weight, ParamKind::Trainable));
        out.push((join(prefix, "bias"), &self.bias, ParamKind::Trainable));
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        out.push((
            join(prefix, "weight"),
            &mut self.weight,
            ParamKind::Trainable,
        ));
        out.push((join(prefix, "bias"), &mut self.bias, ParamKind::Trainable));
    }
}
