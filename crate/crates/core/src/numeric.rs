//! Dense double-precision vectors and matrices, activations, sparsemax, and a
//! central-difference gradient oracle.
//!
//! Everything here is shape-checked at the public boundary. The `pub(crate)`
//! kernels at the bottom skip the checks and are used on the hot paths of the
//! model once shapes have been validated.

use std::fmt;
use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Owned contiguous vector of `f64`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn zeros(len: usize) -> Self {
        Vector(vec![0.0; len])
    }

    pub fn filled(len: usize, value: f64) -> Self {
        Vector(vec![value; len])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for Vector {
    fn from(v: Vec<f64>) -> Self {
        Vector(v)
    }
}

impl From<&[f64]> for Vector {
    fn from(v: &[f64]) -> Self {
        Vector(v.to_vec())
    }
}

impl FromIterator<f64> for Vector {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        Vector(iter.into_iter().collect())
    }
}

impl Deref for Vector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for Vector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::from_vec",
                format!("{} values for {rows}x{cols}", rows * cols),
                format!("{} values", data.len()),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::shape(
                    "Matrix::from_rows",
                    format!("{cols} columns"),
                    format!("{} columns in row {i}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
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

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics; an empty matrix has no rows worth yielding
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }
}

impl fmt::Display for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.rows, self.cols)
    }
}

/// `W·x (+ b)`.
pub fn affine(w: &Matrix, x: &[f64], b: Option<&[f64]>) -> Result<Vector> {
    if w.cols != x.len() {
        return Err(Error::shape(
            "affine",
            format!("x of length {} for W {}", w.cols, w),
            format!("x of length {}", x.len()),
        ));
    }
    if let Some(b) = b {
        if b.len() != w.rows {
            return Err(Error::shape(
                "affine",
                format!("b of length {} for W {}", w.rows, w),
                format!("b of length {}", b.len()),
            ));
        }
    }
    let mut out = Vector::zeros(w.rows);
    gemv(w, x, &mut out);
    if let Some(b) = b {
        for (o, bi) in out.iter_mut().zip(b) {
            *o += bi;
        }
    }
    Ok(out)
}

/// Element-wise activation functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Sigmoid,
    Relu,
    Tanh,
}

pub fn activate(kind: Activation, x: &[f64]) -> Result<Vector> {
    if let Some(i) = x.iter().position(|v| v.is_nan()) {
        return Err(Error::NonFinite {
            context: format!("activate({kind:?}) input at index {i}"),
        });
    }
    Ok(match kind {
        Activation::Sigmoid => x.iter().map(|&v| sigmoid(v)).collect(),
        Activation::Relu => x.iter().map(|&v| v.max(0.0)).collect(),
        Activation::Tanh => x.iter().map(|&v| v.tanh()).collect(),
    })
}

/// Logistic function evaluated without overflow for large `|x|`.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Euclidean projection of `z` onto the probability simplex.
pub fn sparsemax(z: &[f64]) -> Result<Vector> {
    if z.is_empty() {
        return Err(Error::invalid("sparsemax of an empty vector"));
    }
    if let Some(i) = z.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: format!("sparsemax input at index {i}"),
        });
    }
    let mut out = Vector::zeros(z.len());
    let mut scratch = Vec::with_capacity(z.len());
    sparsemax_into(z, &mut out, &mut scratch);
    Ok(out)
}

/// Sort-based projection: with `z` sorted descending, the support size is
/// the largest `k` with `k·z_(k) > Σ_{j≤k} z_(j) − 1`.
pub(crate) fn sparsemax_into(z: &[f64], out: &mut [f64], scratch: &mut Vec<f64>) {
    scratch.clear();
    scratch.extend_from_slice(z);
    scratch.sort_unstable_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut support_sum = scratch[0];
    let mut support = 1;
    for (i, &v) in scratch.iter().enumerate() {
        cumsum += v;
        let k = (i + 1) as f64;
        if k * v > cumsum - 1.0 {
            support = i + 1;
            support_sum = cumsum;
        }
    }
    let tau = (support_sum - 1.0) / support as f64;
    for (o, &v) in out.iter_mut().zip(z) {
        *o = (v - tau).max(0.0);
    }
}

/// Central-difference gradient of `f` at `x`.
pub fn finite_diff_grad<F>(mut f: F, x: &[f64], eps: f64) -> Result<Vector>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::invalid(format!("finite-difference step must be positive, got {eps}")));
    }
    let mut probe = x.to_vec();
    let mut grad = Vector::zeros(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let plus = f(&probe);
        probe[i] = orig - eps;
        let minus = f(&probe);
        probe[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite {
                context: format!("objective while perturbing coordinate {i}"),
            });
        }
        grad[i] = (plus - minus) / (2.0 * eps);
    }
    Ok(grad)
}

// Unchecked kernels.

/// out = W·x
#[inline]
pub(crate) fn gemv(w: &Matrix, x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(w.cols, x.len());
    debug_assert_eq!(w.rows, out.len());
    for (o, row) in out.iter_mut().zip(w.data.chunks_exact(w.cols.max(1))) {
        *o = dot(row, x);
    }
}

/// out += Wᵀ·y
#[inline]
pub(crate) fn gemv_t_acc(w: &Matrix, y: &[f64], out: &mut [f64]) {
    debug_assert_eq!(w.rows, y.len());
    debug_assert_eq!(w.cols, out.len());
    for (&yi, row) in y.iter().zip(w.data.chunks_exact(w.cols.max(1))) {
        if yi != 0.0 {
            axpy(yi, row, out);
        }
    }
}

/// G += y·xᵀ
#[inline]
pub(crate) fn outer_acc(g: &mut Matrix, y: &[f64], x: &[f64]) {
    debug_assert_eq!(g.rows, y.len());
    debug_assert_eq!(g.cols, x.len());
    let cols = g.cols.max(1);
    for (&yi, row) in y.iter().zip(g.data.chunks_exact_mut(cols)) {
        if yi != 0.0 {
            axpy(yi, x, row);
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// y += a·x
#[inline]
pub(crate) fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_affine(w: &Matrix, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; w.rows()];
        for i in 0..w.rows() {
            for j in 0..w.cols() {
                out[i] += w.get(i, j) * x[j];
            }
        }
        out
    }

    /// Brute-force simplex projection: enumerate every candidate support set,
    /// solve the equality-constrained least squares on it, keep the feasible
    /// candidate closest to `z`.
    fn projection_oracle(z: &[f64]) -> Vec<f64> {
        let n = z.len();
        let mut best: Option<(f64, Vec<f64>)> = None;
        for mask in 1u32..(1 << n) {
            let k = mask.count_ones() as f64;
            let s: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| z[i]).sum();
            let tau = (s - 1.0) / k;
            let p: Vec<f64> = (0..n)
                .map(|i| if mask >> i & 1 == 1 { z[i] - tau } else { 0.0 })
                .collect();
            if p.iter().any(|&v| v < -1e-12) {
                continue;
            }
            let d: f64 = p.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum();
            if best.as_ref().map_or(true, |(bd, _)| d < *bd) {
                best = Some((d, p));
            }
        }
        best.unwrap().1
    }

    #[test]
    fn affine_identity_and_bias() {
        let w = Matrix::identity(2);
        assert_eq!(affine(&w, &[3.0, -1.0], None).unwrap().as_slice(), &[3.0, -1.0]);
        let ones = Matrix::from_vec(1, 2, vec![1.0, 1.0]).unwrap();
        assert_eq!(affine(&ones, &[3.0, -1.0], Some(&[1.0])).unwrap().as_slice(), &[3.0]);
    }

    #[test]
    fn affine_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = Matrix::from_vec(4, 3, (0..12).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let x: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
        let got = affine(&w, &x, None).unwrap();
        for (g, e) in got.iter().zip(naive_affine(&w, &x)) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn affine_rejects_mismatch() {
        let w = Matrix::zeros(2, 3);
        let err = affine(&w, &[1.0, 2.0], None).unwrap_err();
        assert!(err.to_string().contains("2x3"), "{err}");
        assert!(affine(&w, &[1.0, 2.0, 3.0], Some(&[0.0])).is_err());
    }

    #[test]
    fn activation_points() {
        let s = activate(Activation::Sigmoid, &[0.0, 3f64.ln()]).unwrap();
        assert_eq!(s[0], 0.5);
        assert!((s[1] - 0.75).abs() < 1e-15);
        let r = activate(Activation::Relu, &[-2.0, 0.0, 5.0]).unwrap();
        assert_eq!(r.as_slice(), &[0.0, 0.0, 5.0]);
        assert!(activate(Activation::Tanh, &[f64::NAN]).is_err());
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        let s = activate(Activation::Sigmoid, &[-1e3, 1e3, -745.0, 710.0]).unwrap();
        assert!(s.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
        assert!(s[0] < 1e-300);
        assert_eq!(s[1], 1.0);
    }

    #[test]
    fn sparsemax_examples() {
        assert_eq!(sparsemax(&[2.0, 0.0]).unwrap().as_slice(), &[1.0, 0.0]);
        for c in [-5.0, 0.0, 3.7] {
            let p = sparsemax(&[c, c, c]).unwrap();
            for v in p.iter() {
                assert!((v - 1.0 / 3.0).abs() < 1e-15);
            }
        }
        let p = sparsemax(&[1.0, 0.6, 0.1]).unwrap();
        let oracle = projection_oracle(&[1.0, 0.6, 0.1]);
        for ((g, o), e) in p.iter().zip(&oracle).zip([0.7, 0.3, 0.0]) {
            assert!((g - e).abs() < 1e-12);
            assert!((o - e).abs() < 1e-9);
        }
        assert!(sparsemax(&[]).is_err());
    }

    #[test]
    fn finite_diff_examples() {
        let g = finite_diff_grad(|x| x[0] * x[0], &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-8);
        let g = finite_diff_grad(|_| 4.2, &[1.0, -2.0], 1e-5).unwrap();
        assert_eq!(g.as_slice(), &[0.0, 0.0]);
        let err = finite_diff_grad(|x| if x[1] > 0.5 { f64::INFINITY } else { 0.0 }, &[0.0, 0.5], 1e-3)
            .unwrap_err();
        assert!(err.to_string().contains("coordinate 1"), "{err}");
        assert!(finite_diff_grad(|_| 0.0, &[0.0], 0.0).is_err());
    }

    proptest! {
        #[test]
        fn sparsemax_simplex_and_shift(z in prop::collection::vec(-5.0f64..5.0, 1..12), c in -50.0f64..50.0) {
            let p = sparsemax(&z).unwrap();
            prop_assert!(p.iter().all(|&v| v >= 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
            let q = sparsemax(&shifted).unwrap();
            for (a, b) in p.iter().zip(q.iter()) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn sigmoid_symmetry(x in -800.0f64..800.0) {
            prop_assert!((sigmoid(x) + sigmoid(-x) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn affine_is_linear(vals in prop::collection::vec(-3.0f64..3.0, 12),
                            x in prop::collection::vec(-3.0f64..3.0, 4),
                            y in prop::collection::vec(-3.0f64..3.0, 4)) {
            let w = Matrix::from_vec(3, 4, vals).unwrap();
            let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a + b).collect();
            let lhs = affine(&w, &xy, None).unwrap();
            let a = affine(&w, &x, None).unwrap();
            let b = affine(&w, &y, None).unwrap();
            for i in 0..3 {
                prop_assert!((lhs[i] - a[i] - b[i]).abs() < 1e-9);
            }
        }
    }
}
