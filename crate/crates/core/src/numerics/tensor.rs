use serde::{Deserialize, Serialize};

use super::NumericsError;

/// Dense row-major tensor of 64-bit floats.
///
/// Every tensor in this crate has rank 0, 1 or 2. Rank-0 and rank-1 tensors
/// are viewed as `[1, 1]` and `[1, n]` matrices by the broadcasting ops.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, NumericsError> {
        if shape.len() > 2 {
            return Err(NumericsError::Contract(format!(
                "rank {} tensors are not supported",
                shape.len()
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(NumericsError::Contract(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![], data: vec![v] }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![v; n] }
    }

    /// Builds a `[rows, cols]` matrix from row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length");
        Tensor { shape: vec![rows, cols], data }
    }

    /// Single column `[n, 1]`.
    pub fn column(data: Vec<f64>) -> Self {
        let n = data.len();
        Tensor { shape: vec![n, 1], data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, NumericsError> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(NumericsError::Contract("ragged rows".into()));
            }
            data.extend_from_slice(r);
        }
        Ok(Tensor { shape: vec![rows.len(), cols], data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows when viewed as a matrix.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[0],
        }
    }

    /// Columns when viewed as a matrix.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1],
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.rows() == other.rows() && self.cols() == other.cols() && self.len() == other.len()
    }
}

/// `a[m,k] @ b[k,n]`, optionally reading either operand transposed.
pub(crate) fn gemm(
    a: &[f64],
    a_rows: usize,
    a_cols: usize,
    a_t: bool,
    b: &[f64],
    b_rows: usize,
    b_cols: usize,
    b_t: bool,
) -> (Vec<f64>, usize, usize) {
    let (m, k) = if a_t { (a_cols, a_rows) } else { (a_rows, a_cols) };
    let (k2, n) = if b_t { (b_cols, b_rows) } else { (b_rows, b_cols) };
    assert_eq!(k, k2, "inner dimensions");
    let mut out = vec![0.0; m * n];
    if m == 0 || n == 0 {
        return (out, m, n);
    }
    let (rsa, csa) = if a_t { (1, a_cols as isize) } else { (a_cols as isize, 1) };
    let (rsb, csb) = if b_t { (1, b_cols as isize) } else { (b_cols as isize, 1) };
    // SAFETY: strides and extents describe the owned buffers above exactly.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    (out, m, n)
}
