//! Grouped 2-D convolution via im2col + GEMM.

use crate::error::{Error, Result};
use crate::numerics::{gemm, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Default for ConvGeometry {
    fn default() -> Self {
        ConvGeometry {
            stride: 1,
            padding: 0,
            groups: 1,
        }
    }
}

impl ConvGeometry {
    pub fn new(stride: usize, padding: usize, groups: usize) -> Self {
        ConvGeometry {
            stride,
            padding,
            groups,
        }
    }
}

/// `floor((size + 2 * padding - kernel) / stride) + 1`.
pub fn conv_out_dim(size: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::invalid("conv2d", "stride must be positive"));
    }
    let padded = size + 2 * padding;
    if padded < kernel {
        return Err(Error::shape(
            "conv2d",
            "spatial",
            format!(">= kernel {kernel} after padding"),
            padded,
        ));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Resolved extents for one convolution call.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub h_out: usize,
    pub w_out: usize,
    pub groups: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvDims {
    pub fn cin_g(&self) -> usize {
        self.c_in / self.groups
    }
    pub fn cout_g(&self) -> usize {
        self.c_out / self.groups
    }
    pub fn col_rows(&self) -> usize {
        self.cin_g() * self.k * self.k
    }
    pub fn out_plane(&self) -> usize {
        self.h_out * self.w_out
    }
}

/// Splits a `[C,H,W]` or `[N,C,H,W]` shape into `(n, c, h, w, batched)`.
pub(crate) fn split_batch(
    op: &'static str,
    shape: &[usize],
) -> Result<(usize, usize, usize, usize, bool)> {
    match *shape {
        [c, h, w] => Ok((1, c, h, w, false)),
        [n, c, h, w] => Ok((n, c, h, w, true)),
        _ => Err(Error::shape(op, "rank", "3 or 4", shape.len())),
    }
}

pub(crate) fn resolve_dims(
    op: &'static str,
    input: &[usize],
    weight: &[usize],
    geo: ConvGeometry,
) -> Result<(ConvDims, bool)> {
    let (n, c_in, h, w, batched) = split_batch(op, input)?;
    let &[c_out, cin_g, kh, kw] = weight else {
        return Err(Error::shape(op, "weight rank", 4, weight.len()));
    };
    if geo.groups == 0 {
        return Err(Error::invalid(op, "groups must be positive"));
    }
    if c_in % geo.groups != 0 {
        return Err(Error::shape(
            op,
            "input channels",
            format!("multiple of groups={}", geo.groups),
            c_in,
        ));
    }
    if c_out % geo.groups != 0 {
        return Err(Error::shape(
            op,
            "output channels",
            format!("multiple of groups={}", geo.groups),
            c_out,
        ));
    }
    if cin_g != c_in / geo.groups {
        return Err(Error::shape(
            op,
            "weight input channels",
            c_in / geo.groups,
            cin_g,
        ));
    }
    if kh != kw {
        return Err(Error::shape(op, "kernel width", kh, kw));
    }
    let h_out = conv_out_dim(h, kh, geo.stride, geo.padding)?;
    let w_out = conv_out_dim(w, kw, geo.stride, geo.padding)?;
    Ok((
        ConvDims {
            n,
            c_in,
            h,
            w,
            c_out,
            k: kh,
            h_out,
            w_out,
            groups: geo.groups,
            stride: geo.stride,
            padding: geo.padding,
        },
        batched,
    ))
}

fn check_bias<T: Real>(op: &'static str, bias: Option<&Tensor<T>>, c_out: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.len() != c_out {
            return Err(Error::shape(op, "bias", c_out, b.len()));
        }
    }
    Ok(())
}

/// Unfolds one group of one sample into `cols[cin_g*k*k, h_out*w_out]`.
pub(crate) fn im2col<T: Real>(plane: &[T], d: &ConvDims, cols: &mut [T]) {
    let ohw = d.out_plane();
    for c in 0..d.cin_g() {
        let src = &plane[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ky in 0..d.k {
            for kx in 0..d.k {
                let row = (c * d.k + ky) * d.k + kx;
                let dst = &mut cols[row * ohw..(row + 1) * ohw];
                for oy in 0..d.h_out {
                    let iy = (oy * d.stride + ky) as isize - d.padding as isize;
                    let line = &mut dst[oy * d.w_out..(oy + 1) * d.w_out];
                    if iy < 0 || iy >= d.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src_row = &src[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * d.stride + kx) as isize - d.padding as isize;
                        *v = if ix < 0 || ix >= d.w as isize {
                            T::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `cols` back into `plane` (accumulating).
pub(crate) fn col2im<T: Real>(cols: &[T], d: &ConvDims, plane: &mut [T]) {
    let ohw = d.out_plane();
    for c in 0..d.cin_g() {
        let dst = &mut plane[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ky in 0..d.k {
            for kx in 0..d.k {
                let row = (c * d.k + ky) * d.k + kx;
                let src = &cols[row * ohw..(row + 1) * ohw];
                for oy in 0..d.h_out {
                    let iy = (oy * d.stride + ky) as isize - d.padding as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for ox in 0..d.w_out {
                        let ix = (ox * d.stride + kx) as isize - d.padding as isize;
                        if ix >= 0 && ix < d.w as isize {
                            dst_row[ix as usize] += src[oy * d.w_out + ox];
                        }
                    }
                }
            }
        }
    }
}

fn is_pointwise(d: &ConvDims) -> bool {
    d.k == 1 && d.stride == 1 && d.padding == 0
}

/// Grouped 2-D convolution.
///
/// `input` is `[C_in,H,W]` or `[N,C_in,H,W]`, `weight` is
/// `[C_out, C_in/groups, K, K]`. The output keeps the batch layout of the
/// input.
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geo: ConvGeometry,
) -> Result<Tensor<T>> {
    let (d, batched) = resolve_dims("conv2d", input.shape(), weight.shape(), geo)?;
    check_bias("conv2d", bias, d.c_out)?;
    let ohw = d.out_plane();
    let mut out = vec![T::zero(); d.n * d.c_out * ohw];
    let mut cols = vec![
        T::zero();
        if is_pointwise(&d) {
            0
        } else {
            d.col_rows() * ohw
        }
    ];
    let in_plane = d.c_in * d.h * d.w;
    let wg = d.cout_g() * d.col_rows();
    for n in 0..d.n {
        for g in 0..d.groups {
            let src =
                &input.data()[n * in_plane + g * d.cin_g() * d.h * d.w..][..d.cin_g() * d.h * d.w];
            let cols_ref: &[T] = if is_pointwise(&d) {
                src
            } else {
                im2col(src, &d, &mut cols);
                &cols
            };
            let dst = &mut out[(n * d.c_out + g * d.cout_g()) * ohw..][..d.cout_g() * ohw];
            if let Some(b) = bias {
                for (oc, chunk) in dst.chunks_mut(ohw).enumerate() {
                    chunk.fill(b.data()[g * d.cout_g() + oc]);
                }
            }
            gemm(
                d.cout_g(),
                d.col_rows(),
                ohw,
                &weight.data()[g * wg..(g + 1) * wg],
                false,
                cols_ref,
                false,
                if bias.is_some() { T::one() } else { T::zero() },
                dst,
            );
        }
    }
    let shape: Vec<usize> = if batched {
        vec![d.n, d.c_out, d.h_out, d.w_out]
    } else {
        vec![d.c_out, d.h_out, d.w_out]
    };
    Tensor::new(&shape, out)
}

#[derive(Clone, Debug)]
pub struct Conv2dGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Adjoints of [`conv2d`] with respect to input, weight and bias.
pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    geo: ConvGeometry,
    grad_out: &Tensor<T>,
) -> Result<Conv2dGrads<T>> {
    let (d, _) = resolve_dims("conv2d_backward", input.shape(), weight.shape(), geo)?;
    let ohw = d.out_plane();
    if grad_out.len() != d.n * d.c_out * ohw {
        return Err(Error::shape(
            "conv2d_backward",
            "grad_out",
            d.n * d.c_out * ohw,
            grad_out.len(),
        ));
    }
    let mut g_in = vec![T::zero(); input.len()];
    let mut g_w = vec![T::zero(); weight.len()];
    let mut g_b = vec![T::zero(); d.c_out];
    let mut cols = vec![T::zero(); d.col_rows() * ohw];
    let mut dcols = vec![T::zero(); d.col_rows() * ohw];
    let in_plane = d.c_in * d.h * d.w;
    let wg = d.cout_g() * d.col_rows();
    let pointwise = is_pointwise(&d);
    for n in 0..d.n {
        for g in 0..d.groups {
            let off = n * in_plane + g * d.cin_g() * d.h * d.w;
            let len = d.cin_g() * d.h * d.w;
            let src = &input.data()[off..off + len];
            let go = &grad_out.data()[(n * d.c_out + g * d.cout_g()) * ohw..][..d.cout_g() * ohw];
            for (oc, chunk) in go.chunks(ohw).enumerate() {
                g_b[g * d.cout_g() + oc] += chunk.iter().copied().sum::<T>();
            }
            let cols_ref: &[T] = if pointwise {
                src
            } else {
                im2col(src, &d, &mut cols);
                &cols
            };
            // dW_g += dOut_g * cols^T
            gemm(
                d.cout_g(),
                ohw,
                d.col_rows(),
                go,
                false,
                cols_ref,
                true,
                T::one(),
                &mut g_w[g * wg..(g + 1) * wg],
            );
            // dcols = W_g^T * dOut_g
            let w_g = &weight.data()[g * wg..(g + 1) * wg];
            if pointwise {
                gemm(
                    d.col_rows(),
                    d.cout_g(),
                    ohw,
                    w_g,
                    true,
                    go,
                    false,
                    T::one(),
                    &mut g_in[off..off + len],
                );
            } else {
                gemm(
                    d.col_rows(),
                    d.cout_g(),
                    ohw,
                    w_g,
                    true,
                    go,
                    false,
                    T::zero(),
                    &mut dcols,
                );
                col2im(&dcols, &d, &mut g_in[off..off + len]);
            }
        }
    }
    Ok(Conv2dGrads {
        input: Tensor::new(input.shape(), g_in)?,
        weight: Tensor::new(weight.shape(), g_w)?,
        bias: Tensor::new(&[d.c_out], g_b)?,
    })
}

/// Direct-loop reference convolution used by tests as an independent oracle.
#[cfg(test)]
pub(crate) fn conv2d_reference(
    input: &Tensor<f64>,
    weight: &Tensor<f64>,
    bias: Option<&Tensor<f64>>,
    geo: ConvGeometry,
) -> Tensor<f64> {
    let (d, batched) = resolve_dims("ref", input.shape(), weight.shape(), geo).unwrap();
    let mut out = vec![0.0; d.n * d.c_out * d.out_plane()];
    for n in 0..d.n {
        for oc in 0..d.c_out {
            let g = oc / d.cout_g();
            for oy in 0..d.h_out {
                for ox in 0..d.w_out {
                    let mut acc = bias.map_or(0.0, |b| b.data()[oc]);
                    for ic in 0..d.cin_g() {
                        let c = g * d.cin_g() + ic;
                        for ky in 0..d.k {
                            for kx in 0..d.k {
                                let iy = (oy * d.stride + ky) as isize - d.padding as isize;
                                let ix = (ox * d.stride + kx) as isize - d.padding as isize;
                                if iy < 0 || ix < 0 || iy >= d.h as isize || ix >= d.w as isize {
                                    continue;
                                }
                                let xv = input.data()
                                    [((n * d.c_in + c) * d.h + iy as usize) * d.w + ix as usize];
                                let wv =
                                    weight.data()[((oc * d.cin_g() + ic) * d.k + ky) * d.k + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((n * d.c_out + oc) * d.h_out + oy) * d.w_out + ox] = acc;
                }
            }
        }
    }
    let shape = if batched {
        vec![d.n, d.c_out, d.h_out, d.w_out]
    } else {
        vec![d.c_out, d.h_out, d.w_out]
    };
    Tensor::new(&shape, out).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn pointwise_identity_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[3, 5, 4], &mut rng);
        let mut w = Tensor::zeros(&[3, 3, 1, 1]);
        for c in 0..3 {
            w.set(&[c, c, 0, 0], 1.0);
        }
        let y = conv2d(&x, &w, Some(&Tensor::zeros(&[3])), ConvGeometry::default()).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn two_by_two_all_ones_kernel() {
        let x = Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::ones(&[1, 1, 2, 2]);
        let y = conv2d(&x, &w, None, ConvGeometry::default()).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data(), &[10.0]);
    }

    #[test]
    fn zero_input_zero_bias_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = random(&[4, 2, 3, 3], &mut rng);
        let y = conv2d(
            &Tensor::zeros(&[2, 6, 6]),
            &w,
            Some(&Tensor::zeros(&[4])),
            ConvGeometry::new(2, 1, 1),
        )
        .unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_size_follows_conv_arithmetic() {
        assert_eq!(conv_out_dim(304, 3, 2, 1).unwrap(), 152);
        assert_eq!(conv_out_dim(38, 3, 1, 1).unwrap(), 38);
        assert_eq!(conv_out_dim(5, 3, 2, 0).unwrap(), 2);
        assert!(conv_out_dim(1, 3, 1, 0).is_err());
    }

    #[test]
    fn matches_reference_on_random_configs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..30 {
            let groups = [1, 2, 3][rng.gen_range(0..3)];
            let cin = groups * rng.gen_range(1..3);
            let cout = groups * rng.gen_range(1..3);
            let k = [1, 2, 3, 5][rng.gen_range(0..4)];
            let stride = rng.gen_range(1..3);
            let padding = rng.gen_range(0..3);
            let h = rng.gen_range(k.max(2)..9);
            let w = rng.gen_range(k.max(2)..9);
            let n = rng.gen_range(1..3);
            let x = random(&[n, cin, h, w], &mut rng);
            let wt = random(&[cout, cin / groups, k, k], &mut rng);
            let b = random(&[cout], &mut rng);
            let geo = ConvGeometry::new(stride, padding, groups);
            let got = conv2d(&x, &wt, Some(&b), geo).unwrap();
            let expect = conv2d_reference(&x, &wt, Some(&b), geo);
            assert!(got.max_abs_diff(&expect).unwrap() < 1e-12);
        }
    }

    #[test]
    fn shape_errors_name_the_axis() {
        let x = Tensor::<f64>::zeros(&[3, 4, 4]);
        let w = Tensor::zeros(&[2, 2, 3, 3]);
        let err = conv2d(&x, &w, None, ConvGeometry::default()).unwrap_err();
        assert!(err.to_string().contains("weight input channels"), "{err}");
        let err = conv2d(
            &x,
            &Tensor::zeros(&[2, 1, 3, 3]),
            None,
            ConvGeometry::new(1, 0, 2),
        )
        .unwrap_err();
        assert!(err.to_string().contains("input channels"), "{err}");
    }
}
