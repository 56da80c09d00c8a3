use crate::error::{Error, Result};

/// Dense row-major `f64` array.
///
/// One-dimensional tensors of shape `[d]` behave as a single row wherever an
/// operation needs a matrix view.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Contract(format!(
                "tensor shape {shape:?} must have positive dimensions"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Contract(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        assert!(
            len > 0,
            "tensor shape {shape:?} must have positive dimensions"
        );
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::filled(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "empty vector");
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Stacks equal-length rows into a `[rows.len() × d]` matrix.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::shape("from_rows", &[cols], &[row.len()]));
            }
            data.extend_from_slice(row);
        }
        Self::new(vec![rows.len(), cols], data)
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// `(rows, cols)` view; rank-1 tensors are a single row, higher ranks
    /// fold all leading dimensions into rows.
    pub fn dims2(&self) -> (usize, usize) {
        let cols = *self.shape.last().expect("non-empty shape");
        (self.data.len() / cols, cols)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let (_, cols) = self.dims2();
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `out[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    // row-major strides: a (k, 1), b (n, 1)
    gemm(a, (k, 1), b, (n, 1), out, m, k, n);
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    gemm(a, (k, 1), b, (1, k), out, m, k, n);
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    gemm(a, (1, k), b, (n, 1), out, k, m, n);
}

/// `out[m×n] += A[m×k] · B[k×n]` for strided views of `a` and `b`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    a: &[f64],
    sa: (usize, usize),
    b: &[f64],
    sb: (usize, usize),
    out: &mut [f64],
    m: usize,
    k: usize,
    n: usize,
) {
    assert!(
        a.len() >= m * k && b.len() >= k * n && out.len() >= m * n,
        "gemm operand too short"
    );
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    // SAFETY: the asserts above bound every element the strides address.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            1.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
