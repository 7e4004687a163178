//! Dense row-major tensors and the matmul kernels shared by the tape.
//!
//! All reductions walk their operands left to right in a fixed order, so
//! results are bit-reproducible for a given input.

use std::ops::Range;

use crate::error::{shape_err, Error, Result};
use crate::real::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Real = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
    /// Gradient accumulator, same length as `data` when present.
    pub grad: Option<Vec<T>>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return shape_err("new", format!("zero extent in {shape:?}"));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return shape_err(
                "new",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            );
        }
        Ok(Self {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
            grad: None,
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
            grad: None,
        }
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), data.iter().map(|&x| T::of(x)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Extent of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("tensor has at least one axis")
    }

    /// Number of rows when viewed as `[numel / last_dim, last_dim]`.
    pub fn rows(&self) -> usize {
        self.numel() / self.last_dim()
    }

    pub fn cols(&self) -> usize {
        self.last_dim()
    }

    pub fn at(&self, row: usize, col: usize) -> T {
        self.data[row * self.cols() + col]
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.f64()).collect()
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::of(x.f64())).collect(),
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|x| U::of(x.f64())).collect()),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient accumulator, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[T]) {
        debug_assert_eq!(g.len(), self.data.len());
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b),
            None => self.grad = Some(g.to_vec()),
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return shape_err(
                "reshape",
                format!("{:?} -> {shape:?} changes element count", self.shape),
            );
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
            grad: self.grad.clone(),
        })
    }

    pub fn transpose(&self) -> Result<Self> {
        if self.ndim() != 2 {
            return shape_err("transpose", format!("expected 2-D, got {:?}", self.shape));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        Ok(Self {
            shape: vec![c, r],
            data: transpose_raw(&self.data, r, c),
            grad: self.grad.as_ref().map(|g| transpose_raw(g, r, c)),
        })
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k, n) = matmul_dims(self.shape(), other.shape())?;
        let mut out = vec![T::zero(); m * n];
        matmul_nn(&self.data, &other.data, &mut out, m, k, n);
        Self::new(vec![m, n], out)
    }

    /// Rows `range` of a 2-D tensor.
    pub fn slice_rows(&self, range: Range<usize>) -> Result<Self> {
        self.check_2d("slice_rows")?;
        if range.start >= range.end || range.end > self.shape[0] {
            return shape_err("slice_rows", format!("{range:?} of {:?}", self.shape));
        }
        let keep: Vec<usize> = range.collect();
        self.select_rows(&keep)
    }

    /// Columns `range` of a 2-D tensor.
    pub fn slice_cols(&self, range: Range<usize>) -> Result<Self> {
        self.check_2d("slice_cols")?;
        if range.start >= range.end || range.end > self.shape[1] {
            return shape_err("slice_cols", format!("{range:?} of {:?}", self.shape));
        }
        let keep: Vec<usize> = range.collect();
        self.select_cols(&keep)
    }

    /// Gathers the listed rows (in the given order). Gradients follow the data.
    pub fn select_rows(&self, keep: &[usize]) -> Result<Self> {
        self.check_2d("select_rows")?;
        let (r, c) = (self.shape[0], self.shape[1]);
        if keep.is_empty() || keep.iter().any(|&i| i >= r) {
            return shape_err("select_rows", format!("indices {keep:?} for {r} rows"));
        }
        let gather = |src: &[T]| -> Vec<T> {
            let mut out = Vec::with_capacity(keep.len() * c);
            for &i in keep {
                out.extend_from_slice(&src[i * c..(i + 1) * c]);
            }
            out
        };
        Ok(Self {
            shape: vec![keep.len(), c],
            data: gather(&self.data),
            grad: self.grad.as_deref().map(gather),
        })
    }

    /// Gathers the listed columns (in the given order). Gradients follow the data.
    pub fn select_cols(&self, keep: &[usize]) -> Result<Self> {
        self.check_2d("select_cols")?;
        let (r, c) = (self.shape[0], self.shape[1]);
        if keep.is_empty() || keep.iter().any(|&j| j >= c) {
            return shape_err("select_cols", format!("indices {keep:?} for {c} cols"));
        }
        let gather = |src: &[T]| -> Vec<T> {
            let mut out = Vec::with_capacity(r * keep.len());
            for i in 0..r {
                let row = &src[i * c..(i + 1) * c];
                out.extend(keep.iter().map(|&j| row[j]));
            }
            out
        };
        Ok(Self {
            shape: vec![r, keep.len()],
            data: gather(&self.data),
            grad: self.grad.as_deref().map(gather),
        })
    }

    /// Concatenates 2-D tensors along `axis` (0 = rows, 1 = columns).
    pub fn concat(parts: &[&Self], axis: usize) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape {
                op: "concat",
                detail: "no inputs".into(),
            })?;
        for p in parts {
            p.check_2d("concat")?;
        }
        match axis {
            0 => {
                let c = first.shape[1];
                if parts.iter().any(|p| p.shape[1] != c) {
                    return shape_err("concat", "column counts differ");
                }
                let rows = parts.iter().map(|p| p.shape[0]).sum();
                let data = parts.iter().flat_map(|p| p.data.iter().copied()).collect();
                Self::new(vec![rows, c], data)
            }
            1 => {
                let r = first.shape[0];
                if parts.iter().any(|p| p.shape[0] != r) {
                    return shape_err("concat", "row counts differ");
                }
                let cols = parts.iter().map(|p| p.shape[1]).sum();
                let mut data = Vec::with_capacity(r * cols);
                for i in 0..r {
                    for p in parts {
                        let pc = p.shape[1];
                        data.extend_from_slice(&p.data[i * pc..(i + 1) * pc]);
                    }
                }
                Self::new(vec![r, cols], data)
            }
            _ => shape_err("concat", format!("axis {axis} out of range for 2-D")),
        }
    }

    fn check_2d(&self, op: &'static str) -> Result<()> {
        if self.ndim() != 2 {
            return shape_err(op, format!("expected 2-D, got {:?}", self.shape));
        }
        Ok(())
    }
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize)> {
    if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
        return shape_err("matmul", format!("{a:?} x {b:?}"));
    }
    Ok((a[0], a[1], b[1]))
}

pub(crate) fn transpose_raw<T: Copy>(src: &[T], r: usize, c: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(src.len());
    for j in 0..c {
        for i in 0..r {
            out.push(src[i * c + j]);
        }
    }
    out
}

/// `out[m,n] += a[m,k] · b[k,n]`, accumulating over `k` in order.
pub(crate) fn matmul_nn<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let o_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in o_row.iter_mut().zip(b_row) {
                *o = *o + av * bv;
            }
        }
    }
}

/// `out[m,k] += a[m,n] · b[k,n]ᵀ`.
pub(crate) fn matmul_nt<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            let mut acc = T::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc = acc + x * y;
            }
            out[i * k + p] = out[i * k + p] + acc;
        }
    }
}

/// `out[k,n] += a[m,k]ᵀ · b[m,n]`.
pub(crate) fn matmul_tn<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let o_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in o_row.iter_mut().zip(b_row) {
                *o = *o + av * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn rejects_inconsistent_shape() {
        assert!(Tensor::<f64>::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::<f64>::new(vec![0, 2], vec![]).is_err());
    }

    #[test]
    fn matmul_identity_and_projector() {
        let id = t(&[2, 2], &[1., 0., 0., 1.]);
        let m = t(&[2, 2], &[1., 2., 3., 4.]);
        assert_eq!(id.matmul(&m).unwrap().data(), m.data());
        let proj = t(&[2, 2], &[1., 0., 0., 0.]);
        let b = t(&[2, 2], &[5., 6., 7., 8.]);
        assert_eq!(proj.matmul(&b).unwrap().data(), &[5., 6., 0., 0.]);
        assert!(m.matmul(&t(&[3, 1], &[1., 1., 1.])).is_err());
    }

    #[test]
    fn slicing_and_concat_roundtrip() {
        let m = t(&[3, 4], &(0..12).map(|x| x as f64).collect::<Vec<_>>());
        let left = m.slice_cols(0..1).unwrap();
        let right = m.slice_cols(1..4).unwrap();
        assert_eq!(Tensor::concat(&[&left, &right], 1).unwrap(), m);
        let top = m.slice_rows(0..2).unwrap();
        let bottom = m.slice_rows(2..3).unwrap();
        assert_eq!(Tensor::concat(&[&top, &bottom], 0).unwrap(), m);
        assert_eq!(m.select_cols(&[3, 0]).unwrap().data(), &[3., 0., 7., 4., 11., 8.]);
        assert!(m.slice_rows(2..2).is_err());
    }

    #[test]
    fn transpose_and_reshape() {
        let m = t(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        let tt = m.transpose().unwrap();
        assert_eq!(tt.shape(), &[3, 2]);
        assert_eq!(tt.data(), &[1., 4., 2., 5., 3., 6.]);
        assert_eq!(tt.transpose().unwrap(), m);
        assert!(m.reshape(&[4, 2]).is_err());
        assert_eq!(m.reshape(&[3, 2]).unwrap().shape(), &[3, 2]);
    }

    #[test]
    fn nt_and_tn_kernels_agree_with_explicit_transpose() {
        let a = t(&[2, 3], &[1., -2., 3., 0.5, 4., -1.]);
        let b = t(&[4, 3], &(0..12).map(|x| x as f64 * 0.25).collect::<Vec<_>>());
        let mut out = vec![0.0; 8];
        matmul_nt(a.data(), b.data(), &mut out, 2, 3, 4);
        let expect = a.matmul(&b.transpose().unwrap()).unwrap();
        assert_eq!(out, expect.data());

        let c = t(&[2, 4], &(0..8).map(|x| x as f64 - 3.0).collect::<Vec<_>>());
        let mut out = vec![0.0; 12];
        matmul_tn(a.data(), c.data(), &mut out, 2, 3, 4);
        let expect = a.transpose().unwrap().matmul(&c).unwrap();
        assert_eq!(out, expect.data());
    }
}
