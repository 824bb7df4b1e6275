//! Deformable convolution (v1, no modulation) with one offset set per group.
//!
//! Offsets are laid out `[N, 2 * groups * K * K, H_out, W_out]`; for group
//! `g` and tap `k = ky * K + kx` channel `2 * (g * K * K + k)` holds the row
//! offset and the next channel the column offset.

use crate::error::{Error, Result};
use crate::numerics::bilinear::BilinearTaps;
use crate::numerics::conv::{resolve_dims, ConvDims, ConvGeometry};
use crate::numerics::{gemm, Real, Tensor};

fn check_offsets<T: Real>(offsets: &Tensor<T>, d: &ConvDims) -> Result<()> {
    let want = [d.n, 2 * d.groups * d.k * d.k, d.h_out, d.w_out];
    let got = offsets.shape();
    let got4: Vec<usize> = if got.len() == 3 {
        std::iter::once(1).chain(got.iter().copied()).collect()
    } else {
        got.to_vec()
    };
    if got4.len() != 4 {
        return Err(Error::shape("deform_conv2d", "offset rank", 4, got.len()));
    }
    for (axis, name) in ["batch", "offset channels", "offset height", "offset width"]
        .iter()
        .enumerate()
    {
        if got4[axis] != want[axis] {
            return Err(Error::shape("deform_conv2d", *name, want[axis], got4[axis]));
        }
    }
    Ok(())
}

/// Sampling position of tap `(ky, kx)` for output `(oy, ox)`.
#[inline]
fn sample_point<T: Real>(
    d: &ConvDims,
    offs: &[T],
    g: usize,
    ky: usize,
    kx: usize,
    pix: usize,
    oy: usize,
    ox: usize,
) -> (T, T) {
    let ohw = d.out_plane();
    let ch = 2 * (g * d.k * d.k + ky * d.k + kx);
    let dy = offs[ch * ohw + pix];
    let dx = offs[(ch + 1) * ohw + pix];
    let y = T::lit((oy * d.stride + ky) as f64 - d.padding as f64) + dy;
    let x = T::lit((ox * d.stride + kx) as f64 - d.padding as f64) + dx;
    (x, y)
}

/// Bilinear "im2col" at the offset sampling points of one (sample, group).
fn deform_cols<T: Real>(src: &[T], offs: &[T], d: &ConvDims, g: usize, cols: &mut [T]) {
    let ohw = d.out_plane();
    let hw = d.h * d.w;
    for ky in 0..d.k {
        for kx in 0..d.k {
            for oy in 0..d.h_out {
                for ox in 0..d.w_out {
                    let pix = oy * d.w_out + ox;
                    let (x, y) = sample_point(d, offs, g, ky, kx, pix, oy, ox);
                    let taps = BilinearTaps::at(d.h, d.w, x, y);
                    for c in 0..d.cin_g() {
                        let row = (c * d.k + ky) * d.k + kx;
                        cols[row * ohw + pix] = taps.sample(&src[c * hw..(c + 1) * hw]);
                    }
                }
            }
        }
    }
}

/// Deformable grouped convolution.
pub fn deform_conv2d<T: Real>(
    input: &Tensor<T>,
    offsets: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geo: ConvGeometry,
) -> Result<Tensor<T>> {
    let (d, batched) = resolve_dims("deform_conv2d", input.shape(), weight.shape(), geo)?;
    check_offsets(offsets, &d)?;
    if let Some(b) = bias {
        if b.len() != d.c_out {
            return Err(Error::shape("deform_conv2d", "bias", d.c_out, b.len()));
        }
    }
    let ohw = d.out_plane();
    let mut out = vec![T::zero(); d.n * d.c_out * ohw];
    let mut cols = vec![T::zero(); d.col_rows() * ohw];
    let in_plane = d.c_in * d.h * d.w;
    let off_plane = 2 * d.groups * d.k * d.k * ohw;
    let wg = d.cout_g() * d.col_rows();
    for n in 0..d.n {
        let offs = &offsets.data()[n * off_plane..(n + 1) * off_plane];
        for g in 0..d.groups {
            let src =
                &input.data()[n * in_plane + g * d.cin_g() * d.h * d.w..][..d.cin_g() * d.h * d.w];
            deform_cols(src, offs, &d, g, &mut cols);
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
                &cols,
                false,
                if bias.is_some() { T::one() } else { T::zero() },
                dst,
            );
        }
    }
    let shape = if batched {
        vec![d.n, d.c_out, d.h_out, d.w_out]
    } else {
        vec![d.c_out, d.h_out, d.w_out]
    };
    Tensor::new(&shape, out)
}

#[derive(Clone, Debug)]
pub struct DeformGrads<T> {
    pub input: Tensor<T>,
    pub offsets: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn deform_conv2d_backward<T: Real>(
    input: &Tensor<T>,
    offsets: &Tensor<T>,
    weight: &Tensor<T>,
    geo: ConvGeometry,
    grad_out: &Tensor<T>,
) -> Result<DeformGrads<T>> {
    let (d, _) = resolve_dims("deform_conv2d_backward", input.shape(), weight.shape(), geo)?;
    check_offsets(offsets, &d)?;
    let ohw = d.out_plane();
    let hw = d.h * d.w;
    let in_plane = d.c_in * hw;
    let off_plane = 2 * d.groups * d.k * d.k * ohw;
    let wg = d.cout_g() * d.col_rows();
    let mut g_in = vec![T::zero(); input.len()];
    let mut g_off = vec![T::zero(); offsets.len()];
    let mut g_w = vec![T::zero(); weight.len()];
    let mut g_b = vec![T::zero(); d.c_out];
    let mut cols = vec![T::zero(); d.col_rows() * ohw];
    let mut dcols = vec![T::zero(); d.col_rows() * ohw];
    for n in 0..d.n {
        let offs = &offsets.data()[n * off_plane..(n + 1) * off_plane];
        for g in 0..d.groups {
            let base = n * in_plane + g * d.cin_g() * hw;
            let src = &input.data()[base..base + d.cin_g() * hw];
            let go = &grad_out.data()[(n * d.c_out + g * d.cout_g()) * ohw..][..d.cout_g() * ohw];
            for (oc, chunk) in go.chunks(ohw).enumerate() {
                g_b[g * d.cout_g() + oc] += chunk.iter().copied().sum::<T>();
            }
            deform_cols(src, offs, &d, g, &mut cols);
            gemm(
                d.cout_g(),
                ohw,
                d.col_rows(),
                go,
                false,
                &cols,
                true,
                T::one(),
                &mut g_w[g * wg..(g + 1) * wg],
            );
            gemm(
                d.col_rows(),
                d.cout_g(),
                ohw,
                &weight.data()[g * wg..(g + 1) * wg],
                true,
                go,
                false,
                T::zero(),
                &mut dcols,
            );
            for ky in 0..d.k {
                for kx in 0..d.k {
                    let ch = 2 * (g * d.k * d.k + ky * d.k + kx);
                    for oy in 0..d.h_out {
                        for ox in 0..d.w_out {
                            let pix = oy * d.w_out + ox;
                            let (x, y) = sample_point(&d, offs, g, ky, kx, pix, oy, ox);
                            let taps = BilinearTaps::at(d.h, d.w, x, y);
                            if taps.count == 0 {
                                continue;
                            }
                            let mut gx = T::zero();
                            let mut gy = T::zero();
                            for c in 0..d.cin_g() {
                                let row = (c * d.k + ky) * d.k + kx;
                                let gc = dcols[row * ohw + pix];
                                let plane = &src[c * hw..(c + 1) * hw];
                                let dst = &mut g_in[base + c * hw..base + (c + 1) * hw];
                                for &(i, wgt) in &taps.taps[..taps.count] {
                                    dst[i] += gc * wgt;
                                }
                                let (cx, cy) = taps.coord_grad(plane);
                                gx += gc * cx;
                                gy += gc * cy;
                            }
                            g_off[n * off_plane + ch * ohw + pix] += gy;
                            g_off[n * off_plane + (ch + 1) * ohw + pix] += gx;
                        }
                    }
                }
            }
        }
    }
    Ok(DeformGrads {
        input: Tensor::new(input.shape(), g_in)?,
        offsets: Tensor::new(offsets.shape(), g_off)?,
        weight: Tensor::new(weight.shape(), g_w)?,
        bias: Tensor::new(&[d.c_out], g_b)?,
    })
}
