//! Dense row-major `f64` tensors and the raw kernels the autodiff graph is
//! built from. Nothing in this module records gradients.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        let head = &self.data[..self.data.len().min(PREVIEW)];
        write!(f, "Tensor{:?} {:?}", self.shape, head)?;
        if self.data.len() > PREVIEW {
            write!(f, " .. ({} values)", self.data.len())?;
        }
        Ok(())
    }
}

fn assert_positive(shape: &[usize]) {
    assert!(shape.iter().all(|&d| d > 0), "tensor extents must be positive, got {shape:?}");
}

impl Tensor {
    /// Builds a tensor, checking that every extent is positive and that the
    /// buffer length matches the shape.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Invalid(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        if numel(shape) != data.len() {
            return Err(Error::Invalid(format!(
                "shape {shape:?} needs {} values, buffer holds {}",
                numel(shape),
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    /// Panics on a zero extent, as does [`Tensor::from_fn`].
    pub fn full(shape: &[usize], value: f64) -> Self {
        assert_positive(shape);
        Tensor::from_parts(shape.to_vec(), vec![value; numel(shape)])
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::from_parts(Vec::new(), vec![value])
    }

    /// Fills a tensor by evaluating `f` on every multi-index in row-major order.
    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> f64) -> Self {
        assert_positive(shape);
        let n = numel(shape);
        let mut idx = vec![0usize; shape.len()];
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f(&idx));
            increment(&mut idx, shape);
        }
        Tensor::from_parts(shape.to_vec(), data)
    }

    /// `0, 1, 2, ...` laid out in row-major order.
    pub fn arange(shape: &[usize]) -> Self {
        let n = numel(shape);
        Tensor::from_parts(shape.to_vec(), (0..n).map(|i| i as f64).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::Invalid(format!(
                "item() needs a one-element tensor, got shape {:?}",
                self.shape
            )))
        }
    }

    pub fn at(&self, idx: &[usize]) -> f64 {
        assert_eq!(idx.len(), self.shape.len(), "index rank mismatch");
        let mut off = 0;
        for (&i, &d) in idx.iter().zip(&self.shape) {
            assert!(i < d, "index {idx:?} out of bounds for {:?}", self.shape);
            off = off * d + i;
        }
        self.data[off]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() || shape.contains(&0) {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        Ok(Tensor::from_parts(shape.to_vec(), self.data.clone()))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Largest elementwise absolute difference; infinite when shapes differ.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        if self.shape != other.shape {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Bitwise equality of shape and payload (distinguishes `0.0` from `-0.0`).
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn increment(idx: &mut [usize], shape: &[usize]) {
    for ax in (0..shape.len()).rev() {
        idx[ax] += 1;
        if idx[ax] < shape[ax] {
            return;
        }
        idx[ax] = 0;
    }
}

/// Numpy-style broadcast of two shapes (right-aligned, extents equal or 1).
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every element of `out_shape` (row-major), the offset of the element of
/// a tensor with `in_shape` that broadcasts onto it.
pub(crate) fn broadcast_offsets(in_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let pad = rank - in_shape.len();
    let in_strides = strides(in_shape);
    let mut eff = vec![0; rank];
    for ax in 0..in_shape.len() {
        if in_shape[ax] != 1 {
            eff[ax + pad] = in_strides[ax];
        }
    }
    strided_offsets(out_shape, &eff)
}

/// Offsets produced by walking `shape` in row-major order with custom strides.
pub(crate) fn strided_offsets(shape: &[usize], strides: &[usize]) -> Vec<usize> {
    let n = numel(shape);
    let mut out = Vec::with_capacity(n);
    if shape.is_empty() {
        out.push(0);
        return out;
    }
    let last = shape.len() - 1;
    let (inner, inner_stride) = (shape[last], strides[last]);
    let outer = n / inner;
    let mut idx = vec![0usize; last];
    let mut base = 0usize;
    for _ in 0..outer {
        for j in 0..inner {
            out.push(base + j * inner_stride);
        }
        for ax in (0..last).rev() {
            idx[ax] += 1;
            base += strides[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            base -= strides[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

/// Sums `grad` (shaped like a broadcast result) back down to `shape`.
pub(crate) fn sum_to_shape(grad: &Tensor, shape: &[usize]) -> Tensor {
    if grad.shape() == shape {
        return grad.clone();
    }
    let offsets = broadcast_offsets(shape, grad.shape());
    let mut out = vec![0.0; numel(shape)];
    for (g, &o) in grad.data().iter().zip(&offsets) {
        out[o] += g;
    }
    Tensor::from_parts(shape.to_vec(), out)
}

/// Row-major permutation of axes: output axis `i` is input axis `perm[i]`.
pub(crate) fn permute(x: &Tensor, perm: &[usize]) -> Tensor {
    let in_strides = strides(x.shape());
    let out_shape: Vec<usize> = perm.iter().map(|&p| x.shape()[p]).collect();
    let walk: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let offsets = strided_offsets(&out_shape, &walk);
    let data = offsets.iter().map(|&o| x.data()[o]).collect();
    Tensor::from_parts(out_shape, data)
}

pub(crate) fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// `c += a · b` for row-major `a: m×k`, `b: k×n`, `c: m×n`.
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c += a · bᵀ` for `a: m×k`, `b: n×k`, `c: m×n`.
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let dot: f64 = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            c[i * n + j] += dot;
        }
    }
}

/// `c += aᵀ · b` for `a: k×m`, `b: k×n`, `c: m×n`.
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_buffers() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(&[2, 0], vec![]).is_err());
        assert!(Tensor::new(&[2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape(&[4, 1, 3], &[5, 1]), Some(vec![4, 5, 3]));
        assert_eq!(broadcast_shape(&[], &[2, 2]), Some(vec![2, 2]));
        assert_eq!(broadcast_shape(&[3], &[4]), None);
    }

    #[test]
    fn offsets_walk_row_major() {
        assert_eq!(broadcast_offsets(&[3], &[2, 3]), vec![0, 1, 2, 0, 1, 2]);
        assert_eq!(broadcast_offsets(&[2, 1], &[2, 3]), vec![0, 0, 0, 1, 1, 1]);
    }

    #[test]
    fn permute_transposes() {
        let x = Tensor::arange(&[2, 3]);
        let t = permute(&x, &[1, 0]);
        assert_eq!(t.shape(), &[3, 2]);
        assert_eq!(t.data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        assert_eq!(permute(&t, &inverse_permutation(&[1, 0])), x);
    }

    #[test]
    fn gemm_variants_agree() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let mut c = [0.0; 4];
        gemm_nn(&a, &b, &mut c, 2, 3, 2);
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);

        let bt = [7.0, 9.0, 11.0, 8.0, 10.0, 12.0]; // bᵀ, 2x3
        let mut c2 = [0.0; 4];
        gemm_nt(&a, &bt, &mut c2, 2, 3, 2);
        assert_eq!(c2, c);

        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0]; // aᵀ, 3x2
        let mut c3 = [0.0; 4];
        gemm_tn(&at, &b, &mut c3, 2, 3, 2);
        assert_eq!(c3, c);
    }

    #[test]
    fn sum_to_shape_reduces_broadcast_axes() {
        let g = Tensor::ones(&[2, 3]);
        assert_eq!(sum_to_shape(&g, &[3]).data(), &[2.0, 2.0, 2.0]);
        assert_eq!(sum_to_shape(&g, &[2, 1]).data(), &[3.0, 3.0]);
    }
}
