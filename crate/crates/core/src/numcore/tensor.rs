use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// A named parameter block, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl ParamTensor {
    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        let n = shape.iter().product();
        ParamTensor { name: name.into(), shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n: usize = self.shape.iter().product();
        if n != self.data.len() {
            return Err(Error::dim(format!(
                "tensor `{}` has shape {:?} but {} values",
                self.name,
                self.shape,
                self.data.len()
            )));
        }
        if !all_finite(&self.data) {
            return Err(Error::numeric(format!("tensor `{}` holds non-finite values", self.name)));
        }
        Ok(())
    }
}

pub fn zeros_like(params: &[ParamTensor]) -> Vec<ParamTensor> {
    params.iter().map(|p| ParamTensor::zeros(p.name.clone(), &p.shape)).collect()
}

pub fn all_finite(xs: &[f64]) -> bool {
    xs.iter().all(|x| x.is_finite())
}

/// Row-major matrix used for batches of activations.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix {rows}x{cols} given {} values", data.len());
        Mat { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Mat { rows: rows.len(), cols, data }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }
}

/// `c = a · b`, where `b` is a `k × n` row-major slice.
pub fn gemm_ab(a: &Mat, b: &[f64], n: usize, c: &mut Mat) {
    let (m, k) = (a.rows, a.cols);
    assert_eq!(b.len(), k * n);
    assert!(c.rows == m && c.cols == n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.data.fill(0.0);
        return;
    }
    // SAFETY: all slices are sized exactly for the stated strides.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.data.as_ptr(), k as isize, 1,
            b.as_ptr(), n as isize, 1,
            0.0,
            c.data.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `c += aᵀ · b` with `a: m × k`, `b: m × n`, `c: k × n`.
pub fn gemm_at_b_acc(a: &Mat, b: &Mat, c: &mut [f64]) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(b.rows, m);
    assert_eq!(c.len(), k * n);
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    // SAFETY: `a` is read transposed through swapped strides.
    unsafe {
        matrixmultiply::dgemm(
            k, m, n, 1.0,
            a.data.as_ptr(), 1, k as isize,
            b.data.as_ptr(), n as isize, 1,
            1.0,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `c = a · bᵀ` with `a: m × n`, `b: k × n` row-major, `c: m × k`.
pub fn gemm_a_bt(a: &Mat, b: &[f64], k: usize, c: &mut Mat) {
    let (m, n) = (a.rows, a.cols);
    assert_eq!(b.len(), k * n);
    assert!(c.rows == m && c.cols == k);
    if m == 0 || k == 0 {
        return;
    }
    if n == 0 {
        c.data.fill(0.0);
        return;
    }
    // SAFETY: `b` is read transposed through swapped strides.
    unsafe {
        matrixmultiply::dgemm(
            m, n, k, 1.0,
            a.data.as_ptr(), n as isize, 1,
            b.as_ptr(), 1, n as isize,
            0.0,
            c.data.as_mut_ptr(), k as isize, 1,
        );
    }
}
