use crate::error::{CoreError, Result};
use crate::nncore::real::Real;

/// Dense row-major matrix. Vectors are represented as `1 x n` tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor2D<R> {
    rows: usize,
    cols: usize,
    data: Vec<R>,
}

impl<R: Real> Tensor2D<R> {
    pub fn new(rows: usize, cols: usize, data: Vec<R>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(CoreError::DimMismatch {
                op: "Tensor2D::new",
                left: format!("{rows}x{cols}"),
                right: format!("data length {}", data.len()),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![R::zero(); rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: R) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    /// Row vector from a slice.
    pub fn row_vector(values: &[R]) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    pub fn from_rows(rows: &[Vec<R>]) -> Result<Self> {
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(nrows * ncols);
        for row in rows {
            if row.len() != ncols {
                return Err(CoreError::DimMismatch {
                    op: "Tensor2D::from_rows",
                    left: format!("row length {ncols}"),
                    right: format!("row length {}", row.len()),
                });
            }
            data.extend_from_slice(row);
        }
        Tensor2D::new(nrows, ncols, data)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[R] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [R] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> R {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: R) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[R] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [R] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copy of rows `[start, end)`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        debug_assert!(start <= end && end <= self.rows);
        Self {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Copy of columns `[start, start + len)`.
    pub fn slice_cols(&self, start: usize, len: usize) -> Self {
        debug_assert!(start + len <= self.cols);
        let mut data = Vec::with_capacity(self.rows * len);
        for i in 0..self.rows {
            data.extend_from_slice(&self.data[i * self.cols + start..i * self.cols + start + len]);
        }
        Self {
            rows: self.rows,
            cols: len,
            data,
        }
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.set(j, i, self.get(i, j));
            }
        }
        out
    }

    /// `self * other`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(CoreError::DimMismatch {
                op: "matmul",
                left: format!("{}x{}", self.rows, self.cols),
                right: format!("{}x{}", other.rows, other.cols),
            });
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == R::zero() {
                    continue;
                }
                let orow = other.row(k);
                let out_row = out.row_mut(i);
                for (o, &b) in out_row.iter_mut().zip(orow) {
                    *o = *o + a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self * other^T`.
    pub fn matmul_nt(&self, other: &Self) -> Result<Self> {
        if self.cols != other.cols {
            return Err(CoreError::DimMismatch {
                op: "matmul_nt",
                left: format!("{}x{}", self.rows, self.cols),
                right: format!("{}x{}", other.rows, other.cols),
            });
        }
        let mut out = Self::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            for j in 0..other.rows {
                let dot = self
                    .row(i)
                    .iter()
                    .zip(other.row(j))
                    .map(|(&a, &b)| a * b)
                    .sum();
                out.set(i, j, dot);
            }
        }
        Ok(out)
    }

    /// `self^T * other`.
    pub fn matmul_tn(&self, other: &Self) -> Result<Self> {
        if self.rows != other.rows {
            return Err(CoreError::DimMismatch {
                op: "matmul_tn",
                left: format!("{}x{}", self.rows, self.cols),
                right: format!("{}x{}", other.rows, other.cols),
            });
        }
        let mut out = Self::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            for i in 0..self.cols {
                let a = self.get(k, i);
                if a == R::zero() {
                    continue;
                }
                let orow = other.row(k);
                let out_row = out.row_mut(i);
                for (o, &b) in out_row.iter_mut().zip(orow) {
                    *o = *o + a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(CoreError::DimMismatch {
                op: "add",
                left: format!("{}x{}", self.rows, self.cols),
                right: format!("{}x{}", other.rows, other.cols),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn scale(&self, c: R) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| v * c).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(R) -> R) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Column-wise arithmetic mean as a `1 x cols` tensor.
    pub fn mean_rows(&self) -> Result<Self> {
        if self.rows == 0 {
            return Err(CoreError::Precondition(
                "mean over zero rows is undefined".into(),
            ));
        }
        let inv = R::one() / R::from_f64(self.rows as f64);
        let mut out = vec![R::zero(); self.cols];
        for i in 0..self.rows {
            for (o, &v) in out.iter_mut().zip(self.row(i)) {
                *o = *o + v;
            }
        }
        for o in &mut out {
            *o = *o * inv;
        }
        Tensor2D::new(1, self.cols, out)
    }

    /// Sum over rows as a `1 x cols` tensor.
    pub fn sum_rows(&self) -> Self {
        let mut out = vec![R::zero(); self.cols];
        for i in 0..self.rows {
            for (o, &v) in out.iter_mut().zip(self.row(i)) {
                *o = *o + v;
            }
        }
        Self {
            rows: 1,
            cols: self.cols,
            data: out,
        }
    }

    pub fn to_f64(&self) -> Tensor2D<f64> {
        Tensor2D {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| v.to_f64()).collect(),
        }
    }

    pub fn to_f32(&self) -> Tensor2D<f32> {
        Tensor2D {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| v.to_f32()).collect(),
        }
    }
}

/// `xW + b` with `b` broadcast per row. Forward value only; the graph handles
/// gradient registration.
pub fn linear_forward<R: Real>(
    x: &Tensor2D<R>,
    w: &Tensor2D<R>,
    b: &Tensor2D<R>,
) -> Result<Tensor2D<R>> {
    if x.cols() != w.rows() {
        return Err(CoreError::DimMismatch {
            op: "linear",
            left: format!("x is {}x{}", x.rows(), x.cols()),
            right: format!("W is {}x{}", w.rows(), w.cols()),
        });
    }
    if b.rows() != 1 || b.cols() != w.cols() {
        return Err(CoreError::DimMismatch {
            op: "linear",
            left: format!("W is {}x{}", w.rows(), w.cols()),
            right: format!("b is {}x{}", b.rows(), b.cols()),
        });
    }
    let mut y = x.matmul(w)?;
    for i in 0..y.rows() {
        for (v, &bv) in y.row_mut(i).iter_mut().zip(b.row(0)) {
            *v = *v + bv;
        }
    }
    Ok(y)
}

/// Row-wise softmax with max-subtraction for stability.
pub fn softmax_rows<R: Real>(x: &Tensor2D<R>) -> Tensor2D<R> {
    let mut out = x.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().cloned().fold(R::neg_infinity(), R::max);
        let mut sum = R::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    out
}

/// Row-wise layer normalisation followed by the affine `gamma * x + beta`.
pub fn layer_norm_forward<R: Real>(
    x: &Tensor2D<R>,
    gamma: &Tensor2D<R>,
    beta: &Tensor2D<R>,
    eps: R,
) -> Result<Tensor2D<R>> {
    if gamma.cols() != x.cols() || beta.cols() != x.cols() {
        return Err(CoreError::DimMismatch {
            op: "layer_norm",
            left: format!("x has {} cols", x.cols()),
            right: format!("gamma {} / beta {} cols", gamma.cols(), beta.cols()),
        });
    }
    let n = R::from_f64(x.cols() as f64);
    let mut out = x.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let mean = row.iter().cloned().sum::<R>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<R>() / n;
        let denom = (var + eps).sqrt();
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) / denom * gamma.get(0, j) + beta.get(0, j);
        }
    }
    Ok(out)
}
