//! Dense row-major `f64` matrices and the kernels everything else is built from.

use std::fmt;

use crate::counter;
use crate::error::{Error, Result};

/// Dense 2-D array, row-major, at least 1x1.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix {}x{} ", self.rows, self.cols)?;
        f.debug_list()
            .entries(self.data.chunks(self.cols).take(8))
            .finish()
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::invalid(
                "Matrix::new",
                format!("dimensions must be positive, got {rows}x{cols}"),
            ));
        }
        if data.len() != rows * cols {
            return Err(Error::invalid(
                "Matrix::new",
                format!("{} values for a {rows}x{cols} matrix", data.len()),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Panics if either dimension is zero.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        assert!(rows > 0 && cols > 0, "zero-sized matrix {rows}x{cols}");
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid("Matrix::from_rows", "ragged rows"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn row_vector(values: &[f64]) -> Result<Self> {
        Self::new(1, values.len(), values.to_vec())
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                m.data[r * cols + c] = f(r, c);
            }
        }
        m
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bytes held by the element buffer.
    pub fn byte_size(&self) -> usize {
        self.data.len() * std::mem::size_of::<f64>()
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn matmul(&self, b: &Matrix) -> Result<Matrix> {
        gemm("matmul", self, false, b, false)
    }

    /// `self * b^T`
    pub fn matmul_nt(&self, b: &Matrix) -> Result<Matrix> {
        gemm("matmul_nt", self, false, b, true)
    }

    /// `self^T * b`
    pub fn matmul_tn(&self, b: &Matrix) -> Result<Matrix> {
        gemm("matmul_tn", self, true, b, false)
    }

    pub fn add(&self, b: &Matrix) -> Result<Matrix> {
        self.zip_with("add", b, |x, y| x + y)
    }

    pub fn sub(&self, b: &Matrix) -> Result<Matrix> {
        self.zip_with("sub", b, |x, y| x - y)
    }

    pub fn hadamard(&self, b: &Matrix) -> Result<Matrix> {
        self.zip_with("hadamard", b, |x, y| x * y)
    }

    pub fn add_assign(&mut self, b: &Matrix) -> Result<()> {
        check_same("add_assign", self, b)?;
        for (x, y) in self.data.iter_mut().zip(&b.data) {
            *x += y;
        }
        Ok(())
    }

    pub fn scale(&self, c: f64) -> Matrix {
        self.map(|x| x * c)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Adds the 1 x cols row vector `bias` to every row.
    pub fn add_row(&self, bias: &Matrix) -> Result<Matrix> {
        if bias.rows != 1 || bias.cols != self.cols {
            return Err(Error::Shape {
                op: "add_row",
                left: self.shape(),
                right: bias.shape(),
            });
        }
        let mut out = self.clone();
        for row in out.data.chunks_mut(self.cols) {
            for (x, b) in row.iter_mut().zip(&bias.data) {
                *x += b;
            }
        }
        Ok(out)
    }

    /// Column sums as a 1 x cols row vector.
    pub fn sum_rows(&self) -> Matrix {
        let mut out = Matrix::zeros(1, self.cols);
        for row in self.data.chunks(self.cols) {
            for (o, x) in out.data.iter_mut().zip(row) {
                *o += x;
            }
        }
        out
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Matrix> {
        if len == 0 || start + len > self.rows {
            return Err(Error::invalid(
                "slice_rows",
                format!("rows {start}..{} of {}", start + len, self.rows),
            ));
        }
        Ok(Matrix {
            rows: len,
            cols: self.cols,
            data: self.data[start * self.cols..(start + len) * self.cols].to_vec(),
        })
    }

    pub fn concat_rows(parts: &[&Matrix]) -> Result<Matrix> {
        let first = parts.first().ok_or(Error::Empty("concat_rows"))?;
        let cols = first.cols;
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
        let mut rows = 0;
        for p in parts {
            if p.cols != cols {
                return Err(Error::Shape {
                    op: "concat_rows",
                    left: first.shape(),
                    right: p.shape(),
                });
            }
            data.extend_from_slice(&p.data);
            rows += p.rows;
        }
        Matrix::new(rows, cols, data)
    }

    /// Gathers rows by index.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Matrix> {
        if idx.is_empty() {
            return Err(Error::Empty("select_rows"));
        }
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            if i >= self.rows {
                return Err(Error::invalid(
                    "select_rows",
                    format!("row {i} out of {}", self.rows),
                ));
            }
            data.extend_from_slice(self.row(i));
        }
        Matrix::new(idx.len(), self.cols, data)
    }

    fn zip_with(&self, op: &'static str, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        check_same(op, self, b)?;
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
        })
    }
}

fn check_same(op: &'static str, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op,
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(())
}

/// `op(a) * op(b)` where `op` optionally transposes.
pub(crate) fn gemm(op: &'static str, a: &Matrix, ta: bool, b: &Matrix, tb: bool) -> Result<Matrix> {
    let (m, ka) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (kb, n) = if tb { (b.cols, b.rows) } else { (b.rows, b.cols) };
    if ka != kb {
        return Err(Error::Shape {
            op,
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut out = Matrix::zeros(m, n);
    gemm_into(a, ta, b, tb, 0.0, &mut out);
    Ok(out)
}

/// `c = op(a) * op(b) + beta * c`; shapes must already agree.
pub(crate) fn gemm_into(a: &Matrix, ta: bool, b: &Matrix, tb: bool, beta: f64, c: &mut Matrix) {
    let (m, k) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let n = if tb { b.rows } else { b.cols };
    debug_assert_eq!(c.shape(), (m, n));
    gemm_raw(m, k, n, &a.data, ta, &b.data, tb, beta, &mut c.data);
}

/// Row-major GEMM on raw slices: `op(a)` is `m x k`, `op(b)` is `k x n`,
/// `c` is `m x n`. A transposed operand is stored in its untransposed
/// row-major layout.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_raw(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    counter::add((m * k * n) as u64);
    // SAFETY: the asserted lengths cover every element addressed by the
    // strides above, and `c` is a unique borrow so it cannot alias `a`/`b`.
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
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    counter::add(a.len() as u64);
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `acc += w * x`
#[inline]
pub(crate) fn axpy(acc: &mut [f64], w: f64, x: &[f64]) {
    counter::add(x.len() as u64);
    for (a, v) in acc.iter_mut().zip(x) {
        *a += w * v;
    }
}

/// Outer product of two vectors, `u^T v`, shape `u.len() x v.len()`.
pub fn outer(u: &[f64], v: &[f64]) -> Result<Matrix> {
    if u.is_empty() || v.is_empty() {
        return Err(Error::Empty("outer"));
    }
    let mut out = Matrix::zeros(u.len(), v.len());
    for (i, &ui) in u.iter().enumerate() {
        axpy(out.row_mut(i), ui, v);
    }
    Ok(out)
}

/// Row-wise softmax of `scale * a`, stabilized by subtracting the row max.
pub fn softmax_rows(a: &Matrix, scale: f64) -> Result<Matrix> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::invalid("softmax_rows", format!("scale {scale}")));
    }
    if !a.is_finite() {
        return Err(Error::NonFinite {
            op: "softmax_rows",
            detail: "input logits".into(),
        });
    }
    let mut out = a.clone();
    for row in out.data.chunks_mut(a.cols) {
        softmax_in_place(row, scale);
    }
    Ok(out)
}

pub(crate) fn softmax_in_place(row: &mut [f64], scale: f64) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(scale * x));
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (scale * *x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

/// Affine layer normalization over a vector of fixed length.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams {
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
    pub epsilon: f64,
}

pub const DEFAULT_LN_EPS: f64 = 1e-5;

impl LayerNormParams {
    pub fn new(gain: Vec<f64>, bias: Vec<f64>, epsilon: f64) -> Result<Self> {
        if gain.len() != bias.len() || gain.is_empty() {
            return Err(Error::invalid(
                "LayerNormParams",
                format!("gain length {} vs bias length {}", gain.len(), bias.len()),
            ));
        }
        if !(epsilon > 0.0) {
            return Err(Error::invalid("LayerNormParams", format!("epsilon {epsilon}")));
        }
        Ok(LayerNormParams { gain, bias, epsilon })
    }

    /// Gain 1, bias 0.
    pub fn identity(n: usize, epsilon: f64) -> Self {
        LayerNormParams {
            gain: vec![1.0; n],
            bias: vec![0.0; n],
            epsilon,
        }
    }

    pub fn len(&self) -> usize {
        self.gain.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gain.is_empty()
    }
}

/// Per-row layer normalization with population variance.
pub fn layer_norm_rows(a: &Matrix, p: &LayerNormParams) -> Result<Matrix> {
    layer_norm_raw(a, &p.gain, &p.bias, p.epsilon).map(|(y, _, _)| y)
}

/// Returns `(y, xhat, inv_std)`. A constant row with `eps == 0` yields
/// `xhat = 0`, so the output is the bias.
pub(crate) fn layer_norm_raw(
    a: &Matrix,
    gain: &[f64],
    bias: &[f64],
    eps: f64,
) -> Result<(Matrix, Matrix, Vec<f64>)> {
    if gain.len() != a.cols || bias.len() != a.cols {
        return Err(Error::Shape {
            op: "layer_norm_rows",
            left: a.shape(),
            right: (1, gain.len()),
        });
    }
    let n = a.cols as f64;
    let mut xhat = a.clone();
    let mut y = a.clone();
    let mut inv = Vec::with_capacity(a.rows);
    for r in 0..a.rows {
        let row = a.row(r);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        let denom = (var + eps).sqrt();
        let is = if denom > 0.0 { 1.0 / denom } else { 0.0 };
        inv.push(is);
        let xr = xhat.row_mut(r);
        for (h, &x) in xr.iter_mut().zip(row) {
            *h = (x - mean) * is;
        }
        let yr = y.row_mut(r);
        for c in 0..a.cols {
            yr[c] = xhat.data[r * a.cols + c] * gain[c] + bias[c];
        }
    }
    Ok((y, xhat, inv))
}

/// `elu(x) + 1`: `x + 1` for `x >= 0`, `exp(x)` otherwise. Strictly positive.
pub fn elu_plus_one(a: &Matrix) -> Matrix {
    a.map(elu1)
}

#[inline]
pub(crate) fn elu1(x: f64) -> f64 {
    if x >= 0.0 {
        x + 1.0
    } else {
        x.exp()
    }
}

pub fn relu(a: &Matrix) -> Matrix {
    a.map(|x| x.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let a = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        assert_eq!(Matrix::identity(2).matmul(&a).unwrap(), a);
        let b = Matrix::from_rows(&[&[0.0], &[1.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = random(5, 7, 1);
        let b = random(7, 3, 2);
        let got = a.matmul(&b).unwrap();
        assert!(got.max_abs_diff(&naive_matmul(&a, &b)) < 1e-14);
        let bt = b.transpose();
        assert!(a.matmul_nt(&bt).unwrap().max_abs_diff(&got) < 1e-14);
        let at = a.transpose();
        assert!(at.matmul_tn(&b).unwrap().max_abs_diff(&got) < 1e-14);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 3);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("(2, 3)"), "{err}");
        assert!(matches!(a.matmul(&b), Err(Error::Shape { .. })));
    }

    #[test]
    fn matmul_counts_muladds() {
        counter::reset();
        let _ = random(3, 4, 0).matmul(&random(4, 5, 1)).unwrap();
        assert_eq!(counter::snapshot().total(), 60);
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&Matrix::zeros(1, 2), 1.0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax_rows(&Matrix::filled(1, 3, 123.4), 1.0).unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        // Direct evaluation.
        let s = softmax_rows(&Matrix::row_vector(&[1.0, 2.0, 3.0]).unwrap(), 1.0).unwrap();
        let z = 1f64.exp() + 2f64.exp() + 3f64.exp();
        for (i, v) in s.data().iter().enumerate() {
            assert!((v - ((i + 1) as f64).exp() / z).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rejects_bad_input() {
        let m = Matrix::row_vector(&[f64::NAN, 1.0]).unwrap();
        assert!(matches!(softmax_rows(&m, 1.0), Err(Error::NonFinite { .. })));
        assert!(softmax_rows(&Matrix::zeros(1, 2), 0.0).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let x = Matrix::row_vector(&[3.0, 1.0]).unwrap();
        let (y, _, _) = layer_norm_raw(&x, &[1.0, 1.0], &[0.0, 0.0], 0.0).unwrap();
        assert_eq!(y.data(), &[1.0, -1.0]);

        let p = LayerNormParams::identity(4, DEFAULT_LN_EPS);
        let y = layer_norm_rows(&Matrix::zeros(1, 4), &p).unwrap();
        assert_eq!(y.data(), &[0.0; 4]);

        let p = LayerNormParams {
            gain: vec![2.0; 3],
            bias: vec![0.5, -0.5, 1.0],
            epsilon: 1e-5,
        };
        let y = layer_norm_rows(&Matrix::filled(1, 3, 7.0), &p).unwrap();
        assert_eq!(y.data(), &[0.5, -0.5, 1.0]);
    }

    #[test]
    fn layer_norm_dimension_mismatch() {
        let p = LayerNormParams::identity(3, 1e-5);
        assert!(layer_norm_rows(&Matrix::zeros(2, 4), &p).is_err());
        assert!(LayerNormParams::new(vec![1.0], vec![0.0, 0.0], 1e-5).is_err());
        assert!(LayerNormParams::new(vec![1.0], vec![0.0], 0.0).is_err());
    }

    #[test]
    fn elu_examples() {
        let m = Matrix::row_vector(&[0.0, 2.0, -1.0]).unwrap();
        let e = elu_plus_one(&m);
        assert_eq!(e.get(0, 0), 1.0);
        assert_eq!(e.get(0, 1), 3.0);
        assert!((e.get(0, 2) - 0.36787944117144233).abs() < 1e-15);
    }

    #[test]
    fn outer_product() {
        let o = outer(&[1.0, -1.0], &[1.0, -1.0]).unwrap();
        assert_eq!(o.data(), &[1.0, -1.0, -1.0, 1.0]);
    }

    #[test]
    fn constructor_invariants() {
        assert!(Matrix::new(0, 3, vec![]).is_err());
        assert!(Matrix::new(2, 2, vec![1.0; 3]).is_err());
        assert!(Matrix::from_rows(&[&[1.0], &[1.0, 2.0]]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn matrix_strategy() -> impl Strategy<Value = Matrix> {
            (1usize..6, 2usize..9).prop_flat_map(|(r, c)| {
                proptest::collection::vec(-5.0f64..5.0, r * c)
                    .prop_map(move |d| Matrix::new(r, c, d).unwrap())
            })
        }

        proptest! {
            #[test]
            fn softmax_rows_are_distributions(m in matrix_strategy(), scale in 0.1f64..3.0) {
                let s = softmax_rows(&m, scale).unwrap();
                for r in 0..s.rows() {
                    let row = s.row(r);
                    prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                    prop_assert!(row.iter().all(|&v| v > 0.0 && v < 1.0));
                }
            }

            #[test]
            fn layer_norm_standardizes(m in matrix_strategy()) {
                let p = LayerNormParams::identity(m.cols(), DEFAULT_LN_EPS);
                let y = layer_norm_rows(&m, &p).unwrap();
                for r in 0..m.rows() {
                    let row = m.row(r);
                    let n = row.len() as f64;
                    let mu = row.iter().sum::<f64>() / n;
                    let var = row.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / n;
                    let out = y.row(r);
                    let omu = out.iter().sum::<f64>() / n;
                    prop_assert!(omu.abs() < 1e-10);
                    if var > 1e-2 {
                        let ovar = out.iter().map(|x| (x - omu).powi(2)).sum::<f64>() / n;
                        // eps shifts the variance by a factor var / (var + eps)
                        prop_assert!((ovar - var / (var + DEFAULT_LN_EPS)).abs() < 1e-10);
                        let tight = LayerNormParams::identity(m.cols(), 1e-12);
                        let t = layer_norm_rows(&m, &tight).unwrap();
                        let trow = t.row(r);
                        let tmu = trow.iter().sum::<f64>() / n;
                        let tvar = trow.iter().map(|x| (x - tmu).powi(2)).sum::<f64>() / n;
                        prop_assert!((tvar - 1.0).abs() < 1e-6);
                    }
                }
            }

            #[test]
            fn layer_norm_scale_invariant(m in matrix_strategy(), c in 0.1f64..10.0) {
                // Affine-free with eps -> 0 so scaling is exact up to rounding.
                let ones = vec![1.0; m.cols()];
                let zeros = vec![0.0; m.cols()];
                let (a, _, _) = layer_norm_raw(&m, &ones, &zeros, 0.0).unwrap();
                let (b, _, _) = layer_norm_raw(&m.scale(c), &ones, &zeros, 0.0).unwrap();
                for r in 0..m.rows() {
                    let row = m.row(r);
                    let n = row.len() as f64;
                    let mu = row.iter().sum::<f64>() / n;
                    let var = row.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / n;
                    if var > 1e-6 {
                        for (x, y) in a.row(r).iter().zip(b.row(r)) {
                            prop_assert!((x - y).abs() < 1e-8);
                        }
                    }
                }
            }
        }
    }
}
