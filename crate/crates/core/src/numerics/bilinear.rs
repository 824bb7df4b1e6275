use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

/// Interpolation weights and coordinate derivatives at one sample point.
///
/// `taps` holds up to four `(flat index, weight)` pairs for in-bounds
/// neighbours; out-of-bounds neighbours are zero and are omitted.
#[derive(Clone, Copy, Debug)]
pub struct BilinearTaps<T> {
    pub taps: [(usize, T); 4],
    pub count: usize,
    /// `d weight / d x` for each tap.
    pub dwdx: [T; 4],
    /// `d weight / d y` for each tap.
    pub dwdy: [T; 4],
}

impl<T: Real> BilinearTaps<T> {
    #[inline]
    pub fn at(h: usize, w: usize, x: T, y: T) -> Self {
        let mut out = BilinearTaps {
            taps: [(0, T::zero()); 4],
            count: 0,
            dwdx: [T::zero(); 4],
            dwdy: [T::zero(); 4],
        };
        if !(x > -T::one() && y > -T::one() && x < T::lit(w as f64) && y < T::lit(h as f64)) {
            return out;
        }
        let x0 = x.floor();
        let y0 = y.floor();
        let lx = x - x0;
        let ly = y - y0;
        let hx = T::one() - lx;
        let hy = T::one() - ly;
        let xi = x0.to_i64().unwrap_or(i64::MIN);
        let yi = y0.to_i64().unwrap_or(i64::MIN);
        let corners = [
            (yi, xi, hy * hx, -hy, -hx),
            (yi, xi + 1, hy * lx, hy, -lx),
            (yi + 1, xi, ly * hx, -ly, hx),
            (yi + 1, xi + 1, ly * lx, ly, lx),
        ];
        for (cy, cx, wgt, ddx, ddy) in corners {
            if cy >= 0 && cx >= 0 && (cy as usize) < h && (cx as usize) < w {
                let k = out.count;
                out.taps[k] = (cy as usize * w + cx as usize, wgt);
                out.dwdx[k] = ddx;
                out.dwdy[k] = ddy;
                out.count += 1;
            }
        }
        out
    }

    #[inline]
    pub fn sample(&self, plane: &[T]) -> T {
        let mut v = T::zero();
        for &(i, wgt) in &self.taps[..self.count] {
            v += plane[i] * wgt;
        }
        v
    }

    /// `(d value / d x, d value / d y)`.
    #[inline]
    pub fn coord_grad(&self, plane: &[T]) -> (T, T) {
        let mut gx = T::zero();
        let mut gy = T::zero();
        for k in 0..self.count {
            let v = plane[self.taps[k].0];
            gx += v * self.dwdx[k];
            gy += v * self.dwdy[k];
        }
        (gx, gy)
    }
}

/// Samples `map[H,W]` at column `x`, row `y`. Neighbours outside the map
/// count as zero, so points at least one pixel outside return 0.
pub fn bilinear_sample<T: Real>(map: &Tensor<T>, x: T, y: T) -> Result<T> {
    let &[h, w] = map.shape() else {
        return Err(Error::shape("bilinear_sample", "rank", 2, map.ndim()));
    };
    Ok(BilinearTaps::at(h, w, x, y).sample(map.data()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map() -> Tensor<f64> {
        Tensor::new(&[2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap()
    }

    #[test]
    fn exact_on_integer_coordinates() {
        let m = Tensor::from_fn(&[3, 4], |i| (i * i) as f64);
        for y in 0..3 {
            for x in 0..4 {
                assert_eq!(
                    bilinear_sample(&m, x as f64, y as f64).unwrap(),
                    m.get(&[y, x])
                );
            }
        }
    }

    #[test]
    fn midpoint_of_four_cells() {
        assert!((bilinear_sample(&map(), 0.5, 0.5).unwrap() - 1.5).abs() < 1e-15);
    }

    #[test]
    fn far_outside_is_zero_and_edges_fade() {
        assert_eq!(bilinear_sample(&map(), -5.0, -5.0).unwrap(), 0.0);
        assert_eq!(bilinear_sample(&map(), 2.0, 0.0).unwrap(), 0.0);
        // half a pixel past the right edge of row 0 (value 1) fades to 0.5
        assert!((bilinear_sample(&map(), 1.5, 0.0).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn coordinate_gradient_matches_difference() {
        let m = Tensor::from_fn(&[4, 5], |i| ((i * 7) % 5) as f64 - 1.3);
        let (x, y) = (1.3, 2.6);
        let taps = BilinearTaps::at(4, 5, x, y);
        let (gx, gy) = taps.coord_grad(m.data());
        let h = 1e-6;
        let fx = (bilinear_sample(&m, x + h, y).unwrap() - bilinear_sample(&m, x - h, y).unwrap())
            / (2.0 * h);
        let fy = (bilinear_sample(&m, x, y + h).unwrap() - bilinear_sample(&m, x, y - h).unwrap())
            / (2.0 * h);
        assert!((gx - fx).abs() < 1e-8);
        assert!((gy - fy).abs() < 1e-8);
    }
}
