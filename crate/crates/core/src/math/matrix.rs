use crate::error::{GqsError, Result};

/// Row-major dense matrix of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(GqsError::Shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(GqsError::Shape("ragged rows".into()));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn row_vector(values: Vec<f64>) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values,
        }
    }

    pub fn column_vector(values: Vec<f64>) -> Self {
        Self {
            rows: values.len(),
            cols: 1,
            data: values,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::row_vector(vec![value])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Value of a 1x1 matrix.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(GqsError::NonFinite(what.to_string()))
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale_in_place(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn add_assign(&mut self, other: &DenseMatrix) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn add_scaled(&mut self, other: &DenseMatrix, s: f64) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// `self · other`.
    pub fn matmul(&self, other: &DenseMatrix) -> Result<Self> {
        if self.cols != other.rows {
            return Err(GqsError::Shape(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        matmul_acc(self, other, &mut out);
        Ok(out)
    }

    /// `self · otherᵀ`.
    pub fn matmul_bt(&self, other: &DenseMatrix) -> Result<Self> {
        if self.cols != other.cols {
            return Err(GqsError::Shape(format!(
                "matmul_bt {}x{} by ({}x{})ᵀ",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            let o = out.row_mut(i);
            for (j, oj) in o.iter_mut().enumerate() {
                *oj = dot(a, other.row(j));
            }
        }
        Ok(out)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&self) -> Result<Self> {
        self.ensure_finite("softmax input")?;
        let mut out = self.clone();
        for r in 0..out.rows {
            softmax_in_place(out.row_mut(r));
        }
        Ok(out)
    }

    /// Arithmetic mean of the first `valid` rows.
    pub fn mean_rows(&self, valid: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for r in 0..valid {
            for (o, v) in out.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        let inv = 1.0 / valid as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        out
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let k = i * 4;
        acc[0] += a[k] * b[k];
        acc[1] += a[k + 1] * b[k + 1];
        acc[2] += a[k + 2] * b[k + 2];
        acc[3] += a[k + 3] * b[k + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for k in chunks * 4..a.len() {
        s += a[k] * b[k];
    }
    s
}

#[inline]
pub(crate) fn axpy(out: &mut [f64], s: f64, x: &[f64]) {
    for (o, v) in out.iter_mut().zip(x) {
        *o += s * v;
    }
}

/// `out += a · b`.
pub(crate) fn matmul_acc(a: &DenseMatrix, b: &DenseMatrix, out: &mut DenseMatrix) {
    let n = b.cols;
    for i in 0..a.rows {
        let arow = &a.data[i * a.cols..(i + 1) * a.cols];
        let orow = &mut out.data[i * n..(i + 1) * n];
        for (k, &aik) in arow.iter().enumerate() {
            if aik != 0.0 {
                axpy(orow, aik, &b.data[k * n..(k + 1) * n]);
            }
        }
    }
}

/// `out += aᵀ · b`.
pub(crate) fn matmul_at_b_acc(a: &DenseMatrix, b: &DenseMatrix, out: &mut DenseMatrix) {
    let n = b.cols;
    for i in 0..a.rows {
        let arow = &a.data[i * a.cols..(i + 1) * a.cols];
        let brow = &b.data[i * n..(i + 1) * n];
        for (k, &aik) in arow.iter().enumerate() {
            if aik != 0.0 {
                axpy(&mut out.data[k * n..(k + 1) * n], aik, brow);
            }
        }
    }
}

/// `out += a · bᵀ`.
pub(crate) fn matmul_a_bt_acc(a: &DenseMatrix, b: &DenseMatrix, out: &mut DenseMatrix) {
    for i in 0..a.rows {
        let arow = a.row(i);
        for j in 0..b.rows {
            out.data[i * out.cols + j] += dot(arow, b.row(j));
        }
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    row.iter_mut().for_each(|v| *v *= inv);
}

/// `log σ(x)` without overflow.
pub fn stable_log_sigmoid(x: f64) -> Result<f64> {
    if !x.is_finite() {
        return Err(GqsError::NonFinite(format!("log_sigmoid input {x}")));
    }
    Ok(log_sigmoid(x))
}

#[inline]
pub(crate) fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + inner.tanh())
}

#[inline]
pub(crate) fn gelu_grad(x: f64) -> f64 {
    let x2 = x * x;
    let inner = GELU_C * (x + 0.044715 * x2 * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x2)
}

/// Row-wise layer normalisation without affine terms. Returns (normalised, inverse std per row).
pub(crate) fn layer_norm_rows(x: &DenseMatrix, eps: f64) -> (DenseMatrix, Vec<f64>) {
    let mut out = x.clone();
    let mut inv_std = Vec::with_capacity(x.rows());
    let n = x.cols() as f64;
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + eps).sqrt();
        row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
        inv_std.push(inv);
    }
    (out, inv_std)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_sigmoid_fixtures() {
        assert_eq!(stable_log_sigmoid(0.0).unwrap(), -std::f64::consts::LN_2);
        assert!(stable_log_sigmoid(1e4).unwrap().abs() < 1e-100);
        let reference = -(1.0f64 + 3.0f64.exp()).ln();
        assert!((stable_log_sigmoid(-3.0).unwrap() - reference).abs() < 1e-15);
        assert!((stable_log_sigmoid(-3.0).unwrap() + 3.048_587_351_573_742).abs() < 1e-12);
        assert!(stable_log_sigmoid(-1e4).unwrap().is_finite());
        assert!(stable_log_sigmoid(f64::NAN).is_err());
        assert!(stable_log_sigmoid(f64::INFINITY).is_err());
    }

    #[test]
    fn softmax_fixtures() {
        let one = DenseMatrix::scalar(5.0).softmax_rows().unwrap();
        assert_eq!(one.data(), &[1.0]);
        let half = DenseMatrix::row_vector(vec![0.0, 0.0]).softmax_rows().unwrap();
        assert_eq!(half.data(), &[0.5, 0.5]);
        let s = DenseMatrix::row_vector(vec![1.0, 2.0, 3.0]).softmax_rows().unwrap();
        for (got, want) in s.data().iter().zip([0.090031, 0.244728, 0.665241]) {
            assert!((got - want).abs() < 1e-6);
        }
        assert!(DenseMatrix::row_vector(vec![f64::NAN]).softmax_rows().is_err());
    }

    #[test]
    fn matmul_variants_agree() {
        let a = DenseMatrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        let b = DenseMatrix::from_rows(&[vec![1.0, 0.5], vec![-1.0, 2.0], vec![0.0, 1.0]]).unwrap();
        let ab = a.matmul(&b).unwrap();
        assert_eq!(ab.data(), &[-1.0, 7.5, -1.0, 18.0]);
        let abt = a.matmul_bt(&b.transpose()).unwrap();
        assert_eq!(ab, abt);
        let mut atb = DenseMatrix::zeros(3, 3);
        matmul_at_b_acc(&a, &a, &mut atb);
        assert_eq!(atb, a.transpose().matmul(&a).unwrap());
        assert!(a.matmul(&a).is_err());
    }

    #[test]
    fn gelu_derivative_matches_differences() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
