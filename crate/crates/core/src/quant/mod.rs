//! Deployment path for the spiking front-end: symmetric per-output-channel
//! weight quantization, batch norm folded into the neuron update, and an
//! integer-convolution forward pass.
//!
//! With `k = 1/tau`, the fused neuron input for an integer accumulator `a`
//! of channel `c` is `scale[c] * a + shift[c]`, where
//!
//! ```text
//! scale = q * gamma / (tau * sqrt(var + eps))
//! shift = (b - mean) * gamma / (tau * sqrt(var + eps)) + beta / tau
//! ```
//!
//! which equals `k * BN(conv(x))` computed with the dequantized weights.

mod manifest;

pub use manifest::{
    parse_manifest, read_quantized, write_quantized, LayerEntry, Manifest, MANIFEST_FILE,
    MANIFEST_FORMAT,
};

use crate::error::{Error, Result};
use crate::event_io::EventTensor;
use crate::layer_spec::LayerSpec;
use crate::numerics::conv::conv_out_dim;
use crate::numerics::Tensor;
use crate::snn::SnnBackbone;

pub const SUPPORTED_BITS: [u32; 4] = [8, 6, 4, 2];

/// Largest integer magnitude at `bits`; the range is symmetric.
pub fn qmax(bits: u32) -> i32 {
    (1 << (bits - 1)) - 1
}

fn check_bits(bits: u32) -> Result<()> {
    if SUPPORTED_BITS.contains(&bits) {
        Ok(())
    } else {
        Err(Error::invalid(
            "quantize",
            format!("unsupported bit width {bits} (expected one of 8, 6, 4, 2)"),
        ))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantParams {
    pub bits: u32,
    pub shape: Vec<usize>,
    /// One per output channel, > 0.
    pub scales: Vec<f64>,
    pub values: Vec<i8>,
}

impl QuantParams {
    pub fn dequantize(&self) -> Tensor<f64> {
        let per = self.values.len() / self.scales.len().max(1);
        Tensor::new(
            &self.shape,
            self.values
                .iter()
                .enumerate()
                .map(|(i, &q)| q as f64 * self.scales[i / per])
                .collect(),
        )
        .expect("shape matches values")
    }
}

/// Symmetric per-output-channel quantization of `w` (`[C_out, ...]`),
/// rounding half away from zero. An all-zero channel gets scale 1.
pub fn quantize_per_channel(w: &Tensor<f64>, bits: u32) -> Result<QuantParams> {
    check_bits(bits)?;
    if w.ndim() == 0 || w.dim(0) == 0 {
        return Err(Error::invalid(
            "quantize",
            "weight tensor has no output channels",
        ));
    }
    if !w.all_finite() {
        return Err(Error::NonFinite {
            context: "weights to quantize".into(),
        });
    }
    let c_out = w.dim(0);
    let per = w.len() / c_out;
    let top = qmax(bits);
    let mut scales = Vec::with_capacity(c_out);
    let mut values = Vec::with_capacity(w.len());
    for chunk in w.data().chunks(per.max(1)).take(c_out) {
        let m = chunk.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let s = if m > 0.0 { m / top as f64 } else { 1.0 };
        scales.push(s);
        values.extend(
            chunk
                .iter()
                .map(|&v| ((v / s).round() as i32).clamp(-top, top) as i8),
        );
    }
    Ok(QuantParams {
        bits,
        shape: w.shape().to_vec(),
        scales,
        values,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusedLifParams {
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
}

/// Per-channel batch-norm statistics and affine parameters.
#[derive(Clone, Copy, Debug)]
pub struct BnFold<'a> {
    pub mean: &'a [f64],
    pub var: &'a [f64],
    pub weight: &'a [f64],
    pub bias: &'a [f64],
    pub eps: f64,
}

pub fn fuse_bn_lif(
    conv_bias: &[f64],
    bn: BnFold<'_>,
    tau: f64,
    q_scale: &[f64],
) -> Result<FusedLifParams> {
    let c = q_scale.len();
    for (name, len) in [
        ("conv bias", conv_bias.len()),
        ("mean", bn.mean.len()),
        ("var", bn.var.len()),
        ("weight", bn.weight.len()),
        ("bias", bn.bias.len()),
    ] {
        if len != c {
            return Err(Error::shape("fuse_bn_lif", name, c, len));
        }
    }
    if !(tau >= 1.0) || !tau.is_finite() {
        return Err(Error::invalid(
            "fuse_bn_lif",
            format!("tau must be >= 1, got {tau}"),
        ));
    }
    if bn.eps < 0.0 || bn.var.iter().any(|&v| !(v >= 0.0)) {
        return Err(Error::invalid(
            "fuse_bn_lif",
            "variance and eps must be non-negative",
        ));
    }
    let mut scale = Vec::with_capacity(c);
    let mut shift = Vec::with_capacity(c);
    for i in 0..c {
        let g = bn.weight[i] / (tau * (bn.var[i] + bn.eps).sqrt());
        scale.push(q_scale[i] * g);
        shift.push((conv_bias[i] - bn.mean[i]) * g + bn.bias[i] / tau);
    }
    if scale.iter().chain(&shift).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "fused scale/shift".into(),
        });
    }
    Ok(FusedLifParams { scale, shift })
}

/// Integer activations `[T, C, H, W]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IntTensor {
    pub shape: [usize; 4],
    pub data: Vec<i32>,
}

impl IntTensor {
    pub fn from_events(e: &EventTensor) -> Self {
        IntTensor {
            shape: e.shape(),
            data: e
                .counts
                .iter()
                .map(|&c| c.min(i32::MAX as u32) as i32)
                .collect(),
        }
    }

    /// Rounds every element; intended for tensors that already hold integers.
    pub fn from_tensor(t: &Tensor<f64>) -> Result<Self> {
        let &[a, b, c, d] = t.shape() else {
            return Err(Error::shape("int_tensor", "rank", 4, t.ndim()));
        };
        Ok(IntTensor {
            shape: [a, b, c, d],
            data: t.data().iter().map(|v| v.round() as i32).collect(),
        })
    }
}

/// One fused spiking layer.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantLayer {
    pub in_channels: usize,
    pub spec: LayerSpec,
    pub weights: QuantParams,
    pub fused: FusedLifParams,
    /// `1 / tau`.
    pub k: f64,
    pub v_threshold: f64,
    pub v_reset: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedSnn {
    pub bits: u32,
    pub layers: Vec<QuantLayer>,
}

impl QuantizedSnn {
    pub fn from_backbone(snn: &SnnBackbone<f64>, bits: u32) -> Result<Self> {
        let layers = snn
            .blocks
            .iter()
            .map(|b| {
                let q = quantize_per_channel(&b.conv.weight, bits)?;
                let plif = b.plif(&snn.neuron);
                let c = b.conv.spec.channels;
                let zeros = vec![0.0; c];
                let fused = fuse_bn_lif(
                    b.conv.bias.as_ref().map_or(&zeros[..], |t| t.data()),
                    BnFold {
                        mean: b.bn.running_mean.data(),
                        var: b.bn.running_var.data(),
                        weight: b.bn.weight.data(),
                        bias: b.bn.bias.data(),
                        eps: b.bn.eps,
                    },
                    plif.tau(),
                    &q.scales,
                )?;
                Ok(QuantLayer {
                    in_channels: b.conv.in_channels,
                    spec: b.conv.spec,
                    weights: q,
                    fused,
                    k: plif.inv_tau(),
                    v_threshold: plif.v_threshold,
                    v_reset: plif.v_reset,
                })
            })
            .collect::<Result<_>>()?;
        Ok(QuantizedSnn { bits, layers })
    }
}

/// Integer convolution with saturating `i32` accumulation; returns the raw
/// accumulators and the number of saturated additions.
pub fn int_conv2d(x: &IntTensor, layer: &QuantLayer) -> Result<(IntTensor, u64)> {
    let [t, c_in, h, w] = x.shape;
    if c_in != layer.in_channels {
        return Err(Error::shape(
            "int_conv2d",
            "channels",
            layer.in_channels,
            c_in,
        ));
    }
    let LayerSpec {
        channels: c_out,
        kernel: k,
        padding: p,
        stride: s,
    } = layer.spec;
    let ho = conv_out_dim(h, k, s, p)?;
    let wo = conv_out_dim(w, k, s, p)?;
    let wt = &layer.weights.values;
    let mut out = vec![0i32; t * c_out * ho * wo];
    let mut overflows = 0u64;
    for ti in 0..t {
        for co in 0..c_out {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0i32;
                    for ci in 0..c_in {
                        for ky in 0..k {
                            let iy = (oy * s + ky) as isize - p as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * s + kx) as isize - p as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let a =
                                    x.data[((ti * c_in + ci) * h + iy as usize) * w + ix as usize];
                                if a == 0 {
                                    continue;
                                }
                                let wv = wt[((co * c_in + ci) * k + ky) * k + kx] as i32;
                                let prod = a.checked_mul(wv).unwrap_or_else(|| {
                                    overflows += 1;
                                    a.saturating_mul(wv)
                                });
                                match acc.checked_add(prod) {
                                    Some(v) => acc = v,
                                    None => {
                                        overflows += 1;
                                        acc = acc.saturating_add(prod);
                                    }
                                }
                            }
                        }
                    }
                    out[((ti * c_out + co) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    Ok((
        IntTensor {
            shape: [t, c_out, ho, wo],
            data: out,
        },
        overflows,
    ))
}

/// Fused neuron input `scale * acc + shift`, `[T, C, H, W]`.
pub fn fused_preactivation(x: &IntTensor, layer: &QuantLayer) -> Result<(Tensor<f64>, u64)> {
    let (acc, overflows) = int_conv2d(x, layer)?;
    let [_, c, h, w] = acc.shape;
    let plane = h * w;
    let data = acc
        .data
        .iter()
        .enumerate()
        .map(|(i, &a)| {
            let ch = (i / plane) % c;
            layer.fused.scale[ch] * a as f64 + layer.fused.shift[ch]
        })
        .collect();
    Ok((Tensor::new(&acc.shape, data)?, overflows))
}

#[derive(Clone, Debug, PartialEq)]
pub struct FixedPointOutput {
    /// Binary spikes of every layer.
    pub spikes: Vec<Tensor<f64>>,
    /// Saturated accumulator additions; zero in a healthy run.
    pub overflows: u64,
}

/// Fused membrane update `V += drive - k * (V - v_reset)`, then threshold
/// and hard reset, per timestep from a fresh state.
fn fused_plif(drive: &Tensor<f64>, layer: &QuantLayer) -> Tensor<f64> {
    let t = drive.dim(0);
    let plane = drive.len() / t.max(1);
    let mut v = vec![layer.v_reset; plane];
    let mut out = vec![0.0; drive.len()];
    for ti in 0..t {
        for i in 0..plane {
            let pre = v[i] + drive.data()[ti * plane + i] - layer.k * (v[i] - layer.v_reset);
            if pre >= layer.v_threshold {
                out[ti * plane + i] = 1.0;
                v[i] = layer.v_reset;
            } else {
                v[i] = pre;
            }
        }
    }
    Tensor::new(drive.shape(), out).expect("same shape")
}

pub fn fixed_point_forward(events: &IntTensor, model: &QuantizedSnn) -> Result<FixedPointOutput> {
    let mut spikes: Vec<Tensor<f64>> = Vec::with_capacity(model.layers.len());
    let mut overflows = 0;
    let mut x = events.clone();
    for layer in &model.layers {
        let (drive, o) = fused_preactivation(&x, layer)?;
        if !drive.all_finite() {
            return Err(Error::NonFinite {
                context: "fused neuron input".into(),
            });
        }
        overflows += o;
        let s = fused_plif(&drive, layer);
        x = IntTensor::from_tensor(&s)?;
        spikes.push(s);
    }
    Ok(FixedPointOutput { spikes, overflows })
}

#[derive(Clone, Debug, PartialEq)]
pub struct FidelityReport {
    pub matched: u64,
    pub total: u64,
    /// Mismatched cells per layer.
    pub layer_mismatches: Vec<u64>,
    /// Earliest timestep holding any mismatch, over all layers.
    pub first_divergence: Option<usize>,
}

impl FidelityReport {
    pub fn match_rate(&self) -> f64 {
        if self.total == 0 {
            1.0
        } else {
            self.matched as f64 / self.total as f64
        }
    }
}

/// Cellwise agreement of two spike tensors `[T, ...]`.
pub fn spike_fidelity(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<FidelityReport> {
    layered_fidelity(std::slice::from_ref(a), std::slice::from_ref(b))
}

/// Agreement pooled over every cell of every layer.
pub fn layered_fidelity(a: &[Tensor<f64>], b: &[Tensor<f64>]) -> Result<FidelityReport> {
    if a.len() != b.len() {
        return Err(Error::shape("spike_fidelity", "layers", a.len(), b.len()));
    }
    let mut rep = FidelityReport {
        matched: 0,
        total: 0,
        layer_mismatches: Vec::with_capacity(a.len()),
        first_divergence: None,
    };
    for (x, y) in a.iter().zip(b) {
        if x.shape() != y.shape() {
            return Err(Error::shape(
                "spike_fidelity",
                "shape",
                format!("{:?}", x.shape()),
                format!("{:?}", y.shape()),
            ));
        }
        let plane = x.len() / x.shape().first().copied().unwrap_or(1).max(1);
        let mut miss = 0u64;
        for (i, (p, q)) in x.data().iter().zip(y.data()).enumerate() {
            if p != q {
                miss += 1;
                let t = i / plane.max(1);
                rep.first_divergence = Some(rep.first_divergence.map_or(t, |f| f.min(t)));
            }
        }
        rep.total += x.len() as u64;
        rep.matched += x.len() as u64 - miss;
        rep.layer_mismatches.push(miss);
    }
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::conv::{conv2d, ConvGeometry};
    use crate::snn::NeuronConfig;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn int8_closed_form() {
        let w = Tensor::new(&[1, 2], vec![1.27, 0.50]).unwrap();
        let q = quantize_per_channel(&w, 8).unwrap();
        assert_relative_eq!(q.scales[0], 0.01, epsilon = 1e-15);
        assert_eq!(q.values, vec![127, 50]);
    }

    #[test]
    fn zero_channel_gets_unit_scale() {
        let w = Tensor::new(&[2, 2], vec![0.0, 0.0, 0.3, -0.1]).unwrap();
        let q = quantize_per_channel(&w, 4).unwrap();
        assert_eq!(q.scales[0], 1.0);
        assert_eq!(&q.values[..2], &[0, 0]);
    }

    #[test]
    fn int2_is_ternary() {
        let w = Tensor::new(&[1, 4], vec![1.0, 0.9, -0.4, 0.6]).unwrap();
        let q = quantize_per_channel(&w, 2).unwrap();
        assert_eq!(q.values, vec![1, 1, 0, 1]);
        assert!(quantize_per_channel(&w, 3).is_err());
        assert!(quantize_per_channel(&Tensor::new(&[1, 1], vec![f64::NAN]).unwrap(), 8).is_err());
    }

    #[test]
    fn fusion_worked_examples() {
        let id = fuse_bn_lif(
            &[0.0],
            BnFold {
                mean: &[0.0],
                var: &[1.0],
                weight: &[1.0],
                bias: &[0.0],
                eps: 0.0,
            },
            1.0,
            &[1.0],
        )
        .unwrap();
        assert_eq!((id.scale[0], id.shift[0]), (1.0, 0.0));
        let f = fuse_bn_lif(
            &[0.0],
            BnFold {
                mean: &[1.0],
                var: &[3.0],
                weight: &[2.0],
                bias: &[4.0],
                eps: 1.0,
            },
            2.0,
            &[1.0],
        )
        .unwrap();
        assert_relative_eq!(f.scale[0], 0.5, epsilon = 1e-15);
        assert_relative_eq!(f.shift[0], 1.5, epsilon = 1e-15);
    }

    #[test]
    fn fused_matches_float_on_random_layers() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let snn = SnnBackbone::<f64>::new(
                &[LayerSpec::new(3, 3, 1, 2)],
                2,
                NeuronConfig::default(),
                &mut rng,
            )
            .unwrap();
            let mut snn = snn;
            let b = &mut snn.blocks[0];
            for v in b.bn.running_mean.data_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
            for v in b.bn.running_var.data_mut() {
                *v = rng.gen_range(0.1..3.0);
            }
            b.w.data_mut()[0] = rng.gen_range(-2.0..2.0);
            let q = QuantizedSnn::from_backbone(&snn, 8).unwrap();
            let x = IntTensor {
                shape: [2, 2, 7, 6],
                data: (0..168).map(|_| rng.gen_range(0..4)).collect(),
            };
            let (fused, ov) = fused_preactivation(&x, &q.layers[0]).unwrap();
            assert_eq!(ov, 0);
            let b = &snn.blocks[0];
            let xf =
                Tensor::new(&[2, 2, 7, 6], x.data.iter().map(|&v| v as f64).collect()).unwrap();
            let conv = conv2d(
                &xf,
                &q.layers[0].weights.dequantize(),
                b.conv.bias.as_ref(),
                ConvGeometry::new(2, 1, 1),
            )
            .unwrap();
            let k = b.plif(&snn.neuron).inv_tau();
            let float = b.bn.forward(&conv).unwrap().map(|v| v * k);
            assert!(fused.max_abs_diff(&float).unwrap() < 1e-9);
        }
    }

    #[test]
    fn zero_events_zero_spikes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut snn = SnnBackbone::<f64>::new(
            &[LayerSpec::new(2, 3, 1, 1)],
            2,
            NeuronConfig::default(),
            &mut rng,
        )
        .unwrap();
        snn.blocks[0].conv.bias = Some(Tensor::zeros(&[2]));
        let q = QuantizedSnn::from_backbone(&snn, 8).unwrap();
        let out = fixed_point_forward(
            &IntTensor {
                shape: [3, 2, 4, 4],
                data: vec![0; 96],
            },
            &q,
        )
        .unwrap();
        assert!(out.spikes[0].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn accumulator_saturates_and_counts() {
        let layer = QuantLayer {
            in_channels: 1,
            spec: LayerSpec::new(1, 1, 0, 1),
            weights: QuantParams {
                bits: 8,
                shape: vec![1, 1, 1, 1],
                scales: vec![1.0],
                values: vec![127],
            },
            fused: FusedLifParams {
                scale: vec![1.0],
                shift: vec![0.0],
            },
            k: 0.5,
            v_threshold: 1.0,
            v_reset: 0.0,
        };
        let x = IntTensor {
            shape: [1, 1, 1, 2],
            data: vec![i32::MAX, 1],
        };
        let (acc, ov) = int_conv2d(&x, &layer).unwrap();
        assert_eq!(acc.data, vec![i32::MAX, 127]);
        assert_eq!(ov, 1);
    }

    #[test]
    fn fidelity_counts() {
        let a = Tensor::<f64>::zeros(&[4, 25]);
        let mut b = a.clone();
        assert_eq!(spike_fidelity(&a, &b).unwrap().match_rate(), 1.0);
        b.set(&[2, 7], 1.0);
        let r = spike_fidelity(&a, &b).unwrap();
        assert_relative_eq!(r.match_rate(), 0.99);
        assert_eq!(r.first_divergence, Some(2));
        assert!(spike_fidelity(&a, &Tensor::zeros(&[2, 50])).is_err());
    }

    proptest! {
        #[test]
        fn dequantized_error_within_half_step(vals in proptest::collection::vec(-3.0f64..3.0, 12), bits in prop::sample::select(vec![2u32, 4, 6, 8])) {
            let w = Tensor::new(&[3, 4], vals).unwrap();
            let q = quantize_per_channel(&w, bits).unwrap();
            let d = q.dequantize();
            for (i, (a, b)) in w.data().iter().zip(d.data()).enumerate() {
                prop_assert!((a - b).abs() <= q.scales[i / 4] / 2.0 + 1e-12);
            }
            let again = quantize_per_channel(&d, bits).unwrap();
            prop_assert_eq!(&again.values, &q.values);
            for (s, t) in again.scales.iter().zip(&q.scales) {
                prop_assert!((s - t).abs() <= 1e-12 * t.abs());
            }
        }
    }
}
