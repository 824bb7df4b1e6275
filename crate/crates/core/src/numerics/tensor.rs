use std::fmt;

use crate::error::{Error, Result};
use crate::numerics::Real;

/// Dense row-major tensor.
///
/// The element type doubles as the dtype tag: `Tensor<f64>` for gradient
/// checks and training, `Tensor<f32>` for inference and `Tensor<i32>` /
/// `Tensor<i8>` for the fixed-point path.
#[derive(Clone, PartialEq)]
pub struct Tensor<T = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor{:?} ", self.shape)?;
        if self.data.len() <= PREVIEW {
            write!(f, "{:?}", self.data)
        } else {
            write!(f, "{:?}..", &self.data[..PREVIEW])
        }
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn check_shape(op: &'static str, shape: &[usize]) -> Result<()> {
    if shape.is_empty() {
        return Err(Error::invalid(op, "tensor must have at least one axis"));
    }
    if let Some(axis) = shape.iter().position(|&d| d == 0) {
        return Err(Error::shape(op, format!("{axis}"), "extent > 0", 0));
    }
    Ok(())
}

impl<T: Copy> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        check_shape("Tensor::new", shape)?;
        let n = numel(shape);
        if n != data.len() {
            return Err(Error::shape("Tensor::new", "data", n, data.len()));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        check_shape("Tensor::full", shape).expect("invalid shape");
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        check_shape("Tensor::from_fn", shape).expect("invalid shape");
        Tensor {
            shape: shape.to_vec(),
            data: (0..numel(shape)).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.shape.len()];
        for i in (0..self.shape.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * self.shape[i + 1];
        }
        strides
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index.iter().zip(&self.shape).fold(0, |acc, (&i, &d)| {
            debug_assert!(i < d);
            acc * d + i
        })
    }

    pub fn get(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: T) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        check_shape("reshape", shape)?;
        if numel(shape) != self.data.len() {
            return Err(Error::shape(
                "reshape",
                "numel",
                self.data.len(),
                numel(shape),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data,
        })
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        let nd = self.shape.len();
        if axes.len() != nd {
            return Err(Error::shape("permute", "rank", nd, axes.len()));
        }
        let mut seen = vec![false; nd];
        for &a in axes {
            if a >= nd || seen[a] {
                return Err(Error::invalid(
                    "permute",
                    format!("{axes:?} is not a permutation"),
                ));
            }
            seen[a] = true;
        }
        let in_strides = self.strides();
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let mut data = Vec::with_capacity(self.data.len());
        let mut idx = vec![0usize; nd];
        let inner = out_shape[nd - 1];
        let inner_stride = src_strides[nd - 1];
        loop {
            let base: usize = idx[..nd - 1]
                .iter()
                .zip(&src_strides[..nd - 1])
                .map(|(i, s)| i * s)
                .sum();
            for j in 0..inner {
                data.push(self.data[base + j * inner_stride]);
            }
            // advance the outer multi-index
            let mut axis = nd - 1;
            loop {
                if axis == 0 {
                    return Ok(Tensor {
                        shape: out_shape,
                        data,
                    });
                }
                axis -= 1;
                idx[axis] += 1;
                if idx[axis] < out_shape[axis] {
                    break;
                }
                idx[axis] = 0;
            }
        }
    }

    /// Contiguous sub-range along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        if axis >= self.shape.len() {
            return Err(Error::invalid(
                "narrow",
                format!("axis {axis} out of range"),
            ));
        }
        if len == 0 || start + len > self.shape[axis] {
            return Err(Error::shape(
                "narrow",
                format!("{axis}"),
                format!("range within 0..{}", self.shape[axis]),
                format!("{start}..{}", start + len),
            ));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let dim = self.shape[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Ok(Tensor { shape, data })
    }

    /// Concatenates tensors along `axis`; all other extents must agree.
    pub fn concat(parts: &[&Tensor<T>], axis: usize) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat", "no tensors given"))?;
        let nd = first.shape.len();
        if axis >= nd {
            return Err(Error::invalid(
                "concat",
                format!("axis {axis} out of range"),
            ));
        }
        for p in parts {
            if p.shape.len() != nd {
                return Err(Error::shape("concat", "rank", nd, p.shape.len()));
            }
            for (i, (&a, &b)) in first.shape.iter().zip(&p.shape).enumerate() {
                if i != axis && a != b {
                    return Err(Error::shape("concat", format!("{i}"), a, b));
                }
            }
        }
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total;
        Ok(Tensor { shape, data })
    }
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        self.map(|v| U::lit(v.to_f64_lossy()))
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest elementwise absolute difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor<T>) -> Result<T> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "max_abs_diff",
                "shape",
                format!("{:?}", self.shape),
                format!("{:?}", other.shape),
            ));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (a, b)| m.max((*a - *b).abs())))
    }

    pub fn zip_map(&self, other: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "zip_map",
                "shape",
                format!("{:?}", self.shape),
                format!("{:?}", other.shape),
            ));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub(crate) fn add_assign_tensor(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }
}
