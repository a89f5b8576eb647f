//! Building blocks of the network: causal dilated convolution banks,
//! squeeze-and-excitation style recalibration, and a GRU cell.
//!
//! Each block has a checked public forward function plus crate-internal
//! forward/backward pairs that keep the intermediate values needed for
//! reverse-mode accumulation. Gradients are accumulated into a value of the
//! same parameter type.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{self, axpy, dot, gemv, gemv_t_acc, outer_acc, sigmoid, Matrix, Vector};

/// A bank of `N_c` causal dilated filters over an `N_r`-wide series.
///
/// `filters` is `N_c × (L·N_r)`; columns `l·N_r .. (l+1)·N_r` of row `f`
/// hold tap `l` of filter `f`, applied to the visit `k·l` steps back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvBank {
    pub filters: Matrix,
    pub bias: Vector,
    pub dilation: usize,
    pub kernel_len: usize,
}

impl ConvBank {
    pub fn zeros(n_filters: usize, kernel_len: usize, n_inputs: usize, dilation: usize) -> Self {
        ConvBank {
            filters: Matrix::zeros(n_filters, kernel_len * n_inputs),
            bias: Vector::zeros(n_filters),
            dilation,
            kernel_len,
        }
    }

    pub fn n_filters(&self) -> usize {
        self.filters.rows()
    }

    pub fn n_inputs(&self) -> usize {
        self.filters.cols() / self.kernel_len.max(1)
    }

    /// Number of visits (current included) that can influence one output.
    pub fn receptive_field(&self) -> usize {
        self.dilation * (self.kernel_len - 1) + 1
    }

    fn validate(&self, width: usize) -> Result<()> {
        if self.kernel_len == 0 || self.dilation == 0 || self.n_filters() == 0 {
            return Err(Error::invalid(format!(
                "conv bank needs kernel_len, dilation and filter count >= 1 (got L={}, k={}, N_c={})",
                self.kernel_len,
                self.dilation,
                self.n_filters()
            )));
        }
        if self.filters.cols() != self.kernel_len * width || self.bias.len() != self.n_filters() {
            return Err(Error::shape(
                "dilated_causal_conv",
                format!("filters {}x{} and bias {}", self.n_filters(), self.kernel_len * width, self.n_filters()),
                format!("filters {} and bias {}", self.filters, self.bias.len()),
            ));
        }
        Ok(())
    }
}

/// Activation used to turn recalibration scores into weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateActivation {
    Sigmoid,
    Sparsemax,
}

/// Two bias-free fully connected layers: compress `n → ⌈n/r⌉`, ReLU, expand
/// back to `n`, then the gate activation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SEParams {
    pub compress: Matrix,
    pub expand: Matrix,
    pub ratio: usize,
    pub activation: GateActivation,
}

impl SEParams {
    pub fn zeros(width: usize, ratio: usize, activation: GateActivation) -> Self {
        let squeezed = compressed_width(width, ratio);
        SEParams {
            compress: Matrix::zeros(squeezed, width),
            expand: Matrix::zeros(width, squeezed),
            ratio,
            activation,
        }
    }

    pub fn width(&self) -> usize {
        self.compress.cols()
    }

    fn validate(&self, width: usize) -> Result<()> {
        let m = compressed_width(width, self.ratio);
        if self.ratio == 0 {
            return Err(Error::invalid("compress ratio must be >= 1"));
        }
        if self.compress.shape() != (m, width) || self.expand.shape() != (width, m) {
            return Err(Error::shape(
                "se_recalibrate",
                format!("compress {m}x{width}, expand {width}x{m}"),
                format!("compress {}, expand {}", self.compress, self.expand),
            ));
        }
        Ok(())
    }
}

/// `⌈n/r⌉`
pub fn compressed_width(width: usize, ratio: usize) -> usize {
    width.div_ceil(ratio.max(1))
}

/// Gate weights act on `[h_prev; v]`; the candidate weights act on
/// `[r ⊙ h_prev; v]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GruParams {
    pub w_update: Matrix,
    pub b_update: Vector,
    pub w_reset: Matrix,
    pub b_reset: Vector,
    pub w_cand: Matrix,
    pub b_cand: Vector,
}

impl GruParams {
    pub fn zeros(hidden: usize, input: usize) -> Self {
        GruParams {
            w_update: Matrix::zeros(hidden, hidden + input),
            b_update: Vector::zeros(hidden),
            w_reset: Matrix::zeros(hidden, hidden + input),
            b_reset: Vector::zeros(hidden),
            w_cand: Matrix::zeros(hidden, hidden + input),
            b_cand: Vector::zeros(hidden),
        }
    }

    pub fn hidden(&self) -> usize {
        self.b_update.len()
    }

    pub fn input_width(&self) -> usize {
        self.w_update.cols() - self.hidden()
    }

    fn validate(&self, h_len: usize, v_len: usize) -> Result<()> {
        let h = self.hidden();
        let expect = (h, h + v_len);
        let ok = h_len == h
            && [&self.w_update, &self.w_reset, &self.w_cand].iter().all(|w| w.shape() == expect)
            && [&self.b_reset, &self.b_cand].iter().all(|b| b.len() == h);
        if !ok {
            return Err(Error::shape(
                "gru_step",
                format!("hidden {h}, weights {}x{}", expect.0, expect.1),
                format!(
                    "h_prev {h_len}, v {v_len}, weights {}/{}/{}",
                    self.w_update, self.w_reset, self.w_cand
                ),
            ));
        }
        Ok(())
    }
}

/// Causal dilated convolution: `out[t][f] = bias_f + Σ_l ⟨filter_f[l], series[t − k·l]⟩`,
/// with visits before the start treated as zero.
pub fn dilated_causal_conv(series: &Matrix, bank: &ConvBank) -> Result<Matrix> {
    if series.rows() == 0 {
        return Err(Error::invalid("convolution over an empty series"));
    }
    bank.validate(series.cols())?;
    let mut out = Matrix::zeros(series.rows(), bank.n_filters());
    conv_forward_into(series, bank, &mut out, 0);
    Ok(out)
}

/// Runs every bank and concatenates their outputs per visit, in bank order.
pub fn multi_scale_conv(series: &Matrix, banks: &[ConvBank]) -> Result<Matrix> {
    let first = banks
        .first()
        .ok_or_else(|| Error::invalid("multi-scale convolution needs at least one bank"))?;
    if series.rows() == 0 {
        return Err(Error::invalid("convolution over an empty series"));
    }
    let n_c = first.n_filters();
    for b in banks {
        if b.n_filters() != n_c {
            return Err(Error::shape(
                "multi_scale_conv",
                format!("{n_c} filters per bank"),
                format!("bank with dilation {} has {} filters", b.dilation, b.n_filters()),
            ));
        }
        b.validate(series.cols())?;
    }
    let mut out = Matrix::zeros(series.rows(), n_c * banks.len());
    for (i, b) in banks.iter().enumerate() {
        conv_forward_into(series, b, &mut out, i * n_c);
    }
    Ok(out)
}

/// Writes the bank's output into columns `col_offset..col_offset+N_c` of `out`.
pub(crate) fn conv_forward_into(series: &Matrix, bank: &ConvBank, out: &mut Matrix, col_offset: usize) {
    let width = series.cols();
    let n_c = bank.n_filters();
    for t in 0..series.rows() {
        let row = &mut out.row_mut(t)[col_offset..col_offset + n_c];
        row.copy_from_slice(&bank.bias);
        for l in 0..bank.kernel_len {
            let Some(src) = t.checked_sub(bank.dilation * l) else {
                break;
            };
            let x = series.row(src);
            for (f, o) in row.iter_mut().enumerate() {
                *o += dot(&bank.filters.row(f)[l * width..(l + 1) * width], x);
            }
        }
    }
}

/// Accumulates filter and bias gradients given `d_out` (columns
/// `col_offset..col_offset+N_c` of the concatenated output gradient).
pub(crate) fn conv_backward(series: &Matrix, bank: &ConvBank, d_out: &Matrix, col_offset: usize, grad: &mut ConvBank) {
    let width = series.cols();
    let n_c = bank.n_filters();
    for t in 0..series.rows() {
        let g = &d_out.row(t)[col_offset..col_offset + n_c];
        axpy(1.0, g, &mut grad.bias);
        for l in 0..bank.kernel_len {
            let Some(src) = t.checked_sub(bank.dilation * l) else {
                break;
            };
            let x = series.row(src);
            for (f, &gf) in g.iter().enumerate() {
                if gf != 0.0 {
                    axpy(gf, x, &mut grad.filters.row_mut(f)[l * width..(l + 1) * width]);
                }
            }
        }
    }
}

/// Returns `(u, u ⊙ x)` with `u = act(U·ReLU(W·x))`.
pub fn se_recalibrate(x: &[f64], p: &SEParams) -> Result<(Vector, Vector)> {
    p.validate(x.len())?;
    let mut cache = SeCache::new(p);
    let mut weighted = Vector::zeros(x.len());
    cache.forward(p, x, &mut weighted);
    Ok((cache.weights, weighted))
}

/// Intermediate values of one recalibration.
#[derive(Debug, Clone)]
pub(crate) struct SeCache {
    pre_relu: Vector,
    squeezed: Vector,
    scores: Vector,
    pub(crate) weights: Vector,
}

impl SeCache {
    pub(crate) fn new(p: &SEParams) -> Self {
        let m = p.compress.rows();
        let n = p.compress.cols();
        SeCache {
            pre_relu: Vector::zeros(m),
            squeezed: Vector::zeros(m),
            scores: Vector::zeros(n),
            weights: Vector::zeros(n),
        }
    }

    pub(crate) fn forward(&mut self, p: &SEParams, x: &[f64], weighted: &mut [f64]) {
        gemv(&p.compress, x, &mut self.pre_relu);
        for (q, &a) in self.squeezed.iter_mut().zip(self.pre_relu.iter()) {
            *q = a.max(0.0);
        }
        gemv(&p.expand, &self.squeezed, &mut self.scores);
        match p.activation {
            GateActivation::Sigmoid => {
                for (u, &s) in self.weights.iter_mut().zip(self.scores.iter()) {
                    *u = sigmoid(s);
                }
            }
            GateActivation::Sparsemax => {
                let mut scratch = Vec::with_capacity(self.scores.len());
                numeric::sparsemax_into(&self.scores, &mut self.weights, &mut scratch);
            }
        }
        for ((o, &u), &xi) in weighted.iter_mut().zip(self.weights.iter()).zip(x) {
            *o = u * xi;
        }
    }

    /// Backpropagates `d_weighted = ∂L/∂(u ⊙ x)`. Parameter gradients go to
    /// `grad`; if `d_x` is given, `∂L/∂x` is added to it.
    pub(crate) fn backward(
        &self,
        p: &SEParams,
        x: &[f64],
        d_weighted: &[f64],
        grad: &mut SEParams,
        d_x: Option<&mut [f64]>,
    ) {
        let n = x.len();
        let mut d_scores = vec![0.0; n];
        match p.activation {
            GateActivation::Sigmoid => {
                for i in 0..n {
                    let u = self.weights[i];
                    d_scores[i] = d_weighted[i] * x[i] * u * (1.0 - u);
                }
            }
            GateActivation::Sparsemax => {
                // Jacobian is diag(s) − s·sᵀ/|S| over the support S.
                let mut sum = 0.0;
                let mut count = 0usize;
                for i in 0..n {
                    if self.weights[i] > 0.0 {
                        sum += d_weighted[i] * x[i];
                        count += 1;
                    }
                }
                let mean = sum / count.max(1) as f64;
                for i in 0..n {
                    if self.weights[i] > 0.0 {
                        d_scores[i] = d_weighted[i] * x[i] - mean;
                    }
                }
            }
        }
        outer_acc(&mut grad.expand, &d_scores, &self.squeezed);
        let mut d_pre = vec![0.0; self.pre_relu.len()];
        gemv_t_acc(&p.expand, &d_scores, &mut d_pre);
        for (d, &a) in d_pre.iter_mut().zip(self.pre_relu.iter()) {
            if a <= 0.0 {
                *d = 0.0;
            }
        }
        outer_acc(&mut grad.compress, &d_pre, x);
        if let Some(d_x) = d_x {
            for i in 0..n {
                d_x[i] += d_weighted[i] * self.weights[i];
            }
            gemv_t_acc(&p.compress, &d_pre, d_x);
        }
    }
}

/// One step of the GRU recurrence.
pub fn gru_step(h_prev: &[f64], v: &[f64], p: &GruParams) -> Result<Vector> {
    p.validate(h_prev.len(), v.len())?;
    let mut cache = GruCache::new(p.hidden(), v.len());
    cache.forward(p, h_prev, v);
    Ok(cache.h)
}

/// Intermediate values of one GRU step.
#[derive(Debug, Clone)]
pub(crate) struct GruCache {
    /// `[h_prev; v]`
    joint: Vector,
    /// `[r ⊙ h_prev; v]`
    joint_reset: Vector,
    update: Vector,
    reset: Vector,
    cand: Vector,
    pub(crate) h: Vector,
}

impl GruCache {
    pub(crate) fn new(hidden: usize, input: usize) -> Self {
        GruCache {
            joint: Vector::zeros(hidden + input),
            joint_reset: Vector::zeros(hidden + input),
            update: Vector::zeros(hidden),
            reset: Vector::zeros(hidden),
            cand: Vector::zeros(hidden),
            h: Vector::zeros(hidden),
        }
    }

    pub(crate) fn forward(&mut self, p: &GruParams, h_prev: &[f64], v: &[f64]) {
        let nh = h_prev.len();
        self.joint[..nh].copy_from_slice(h_prev);
        self.joint[nh..].copy_from_slice(v);
        gemv(&p.w_update, &self.joint, &mut self.update);
        gemv(&p.w_reset, &self.joint, &mut self.reset);
        for i in 0..nh {
            self.update[i] = sigmoid(self.update[i] + p.b_update[i]);
            self.reset[i] = sigmoid(self.reset[i] + p.b_reset[i]);
            self.joint_reset[i] = self.reset[i] * h_prev[i];
        }
        self.joint_reset[nh..].copy_from_slice(v);
        gemv(&p.w_cand, &self.joint_reset, &mut self.cand);
        for i in 0..nh {
            self.cand[i] = (self.cand[i] + p.b_cand[i]).tanh();
            let z = self.update[i];
            self.h[i] = (1.0 - z) * h_prev[i] + z * self.cand[i];
        }
    }

    /// Given `d_h = ∂L/∂h`, accumulates parameter gradients and returns
    /// `∂L/∂h_prev`; `∂L/∂v` is added into `d_v`.
    pub(crate) fn backward(&self, p: &GruParams, d_h: &[f64], grad: &mut GruParams, d_v: &mut [f64]) -> Vector {
        let nh = d_h.len();
        let h_prev = &self.joint[..nh];
        let mut d_h_prev = Vector::zeros(nh);
        let mut d_cand_pre = vec![0.0; nh];
        let mut d_update_pre = vec![0.0; nh];
        for i in 0..nh {
            let z = self.update[i];
            let n = self.cand[i];
            d_h_prev[i] = d_h[i] * (1.0 - z);
            d_cand_pre[i] = d_h[i] * z * (1.0 - n * n);
            d_update_pre[i] = d_h[i] * (n - h_prev[i]) * z * (1.0 - z);
        }

        outer_acc(&mut grad.w_cand, &d_cand_pre, &self.joint_reset);
        axpy(1.0, &d_cand_pre, &mut grad.b_cand);
        let mut d_joint_reset = vec![0.0; self.joint_reset.len()];
        gemv_t_acc(&p.w_cand, &d_cand_pre, &mut d_joint_reset);
        let mut d_reset_pre = vec![0.0; nh];
        for i in 0..nh {
            let r = self.reset[i];
            d_h_prev[i] += d_joint_reset[i] * r;
            d_reset_pre[i] = d_joint_reset[i] * h_prev[i] * r * (1.0 - r);
        }
        axpy(1.0, &d_joint_reset[nh..], d_v);

        outer_acc(&mut grad.w_update, &d_update_pre, &self.joint);
        axpy(1.0, &d_update_pre, &mut grad.b_update);
        outer_acc(&mut grad.w_reset, &d_reset_pre, &self.joint);
        axpy(1.0, &d_reset_pre, &mut grad.b_reset);
        let mut d_joint = vec![0.0; self.joint.len()];
        gemv_t_acc(&p.w_update, &d_update_pre, &mut d_joint);
        gemv_t_acc(&p.w_reset, &d_reset_pre, &mut d_joint);
        axpy(1.0, &d_joint[..nh], &mut d_h_prev);
        axpy(1.0, &d_joint[nh..], d_v);
        d_h_prev
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
    }

    fn random_bank(rng: &mut ChaCha8Rng, n_c: usize, l: usize, n_r: usize, k: usize) -> ConvBank {
        ConvBank {
            filters: random_matrix(rng, n_c, l * n_r, 1.0),
            bias: (0..n_c).map(|_| rng.random_range(-1.0..1.0)).collect(),
            dilation: k,
            kernel_len: l,
        }
    }

    /// Straight transcription of the output formula with explicit padding.
    fn conv_oracle(series: &Matrix, bank: &ConvBank) -> Vec<Vec<f64>> {
        let n_r = series.cols();
        (0..series.rows() as i64)
            .map(|t| {
                (0..bank.n_filters())
                    .map(|f| {
                        let mut acc = bank.bias[f];
                        for l in 0..bank.kernel_len {
                            let src = t - (bank.dilation * l) as i64;
                            for i in 0..n_r {
                                let x = if src >= 0 { series.get(src as usize, i) } else { 0.0 };
                                acc += bank.filters.get(f, l * n_r + i) * x;
                            }
                        }
                        acc
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn conv_worked_example() {
        let series = Matrix::from_vec(5, 1, vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let bank = ConvBank {
            filters: Matrix::from_vec(1, 2, vec![1.0, 1.0]).unwrap(),
            bias: Vector::zeros(1),
            dilation: 2,
            kernel_len: 2,
        };
        let out = dilated_causal_conv(&series, &bank).unwrap();
        let oracle: Vec<f64> = conv_oracle(&series, &bank).into_iter().map(|r| r[0]).collect();
        assert_eq!(oracle, vec![1.0, 2.0, 4.0, 6.0, 8.0]);
        assert_eq!(out.as_slice(), oracle.as_slice());
    }

    #[test]
    fn conv_zero_filters_and_pointwise_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let series = random_matrix(&mut rng, 6, 3, 2.0);
        let zero = ConvBank::zeros(4, 2, 3, 2);
        assert!(dilated_causal_conv(&series, &zero).unwrap().as_slice().iter().all(|&v| v == 0.0));

        let mut select = ConvBank::zeros(1, 1, 3, 1);
        select.filters.set(0, 1, 1.0);
        let out = dilated_causal_conv(&series, &select).unwrap();
        for t in 0..6 {
            assert_eq!(out.get(t, 0), series.get(t, 1));
        }
    }

    #[test]
    fn conv_matches_oracle_on_random_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let series = random_matrix(&mut rng, 9, 4, 2.0);
        for k in 1..=4 {
            let bank = random_bank(&mut rng, 3, 3, 4, k);
            let out = dilated_causal_conv(&series, &bank).unwrap();
            for (t, row) in conv_oracle(&series, &bank).iter().enumerate() {
                for (f, e) in row.iter().enumerate() {
                    assert!((out.get(t, f) - e).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let series = Matrix::zeros(4, 3);
        assert!(dilated_causal_conv(&series, &ConvBank::zeros(2, 2, 4, 1)).is_err());
        assert!(dilated_causal_conv(&series, &ConvBank::zeros(2, 2, 3, 0)).is_err());
        assert!(dilated_causal_conv(&Matrix::zeros(0, 3), &ConvBank::zeros(2, 2, 3, 1)).is_err());
        let banks = [ConvBank::zeros(2, 2, 3, 1), ConvBank::zeros(3, 2, 3, 2)];
        assert!(multi_scale_conv(&series, &banks).is_err());
        assert!(multi_scale_conv(&series, &[]).is_err());
    }

    #[test]
    fn multi_scale_slices_match_single_banks() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let series = random_matrix(&mut rng, 10, 3, 1.5);
        let banks: Vec<_> = [1, 2, 3].iter().map(|&k| random_bank(&mut rng, 4, 2, 3, k)).collect();
        let all = multi_scale_conv(&series, &banks).unwrap();
        assert_eq!(all.shape(), (10, 12));
        for (b, bank) in banks.iter().enumerate() {
            let single = dilated_causal_conv(&series, bank).unwrap();
            for t in 0..10 {
                assert_eq!(&all.row(t)[b * 4..(b + 1) * 4], single.row(t));
            }
        }
        let one = multi_scale_conv(&series, &banks[..1]).unwrap();
        assert_eq!(one, dilated_causal_conv(&series, &banks[0]).unwrap());

        let two = [banks[0].clone(), ConvBank::zeros(4, 2, 3, 2)];
        let out = multi_scale_conv(&series, &two).unwrap();
        assert!(out.iter_rows().all(|r| r[4..].iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn receptive_field_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let series = random_matrix(&mut rng, 12, 2, 1.0);
        for (l, k) in [(2, 1), (2, 3), (3, 2)] {
            let bank = random_bank(&mut rng, 3, l, 2, k);
            let base = dilated_causal_conv(&series, &bank).unwrap();
            let t = 11;
            for j in (k * (l - 1) + 1)..=t {
                let mut pert = series.clone();
                pert.set(t - j, 0, 99.0);
                let out = dilated_causal_conv(&pert, &bank).unwrap();
                assert_eq!(out.row(t), base.row(t), "L={l} k={k} j={j}");
            }
        }
    }

    #[test]
    fn se_examples() {
        let p = SEParams::zeros(4, 2, GateActivation::Sigmoid);
        let x = [1.0, -2.0, 0.5, 4.0];
        let (u, xt) = se_recalibrate(&x, &p).unwrap();
        assert!(u.iter().all(|&v| v == 0.5));
        for (a, b) in xt.iter().zip(x) {
            assert_eq!(*a, 0.5 * b);
        }

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = SEParams {
            compress: random_matrix(&mut rng, 2, 4, 1.0),
            expand: random_matrix(&mut rng, 4, 2, 1.0),
            ratio: 2,
            activation: GateActivation::Sparsemax,
        };
        let (_, xt) = se_recalibrate(&[0.0; 4], &p).unwrap();
        assert!(xt.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn se_sparsemax_one_hot() {
        // W = I (ratio 1), U = diag(1, 0): pre-activation for x = (2, 0) is (2, 0).
        let p = SEParams {
            compress: Matrix::identity(2),
            expand: Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap(),
            ratio: 1,
            activation: GateActivation::Sparsemax,
        };
        let x = [2.0, 0.0];
        let expected = numeric::sparsemax(&[2.0, 0.0]).unwrap();
        let (u, xt) = se_recalibrate(&x, &p).unwrap();
        assert_eq!(u, expected);
        assert_eq!(u.as_slice(), &[1.0, 0.0]);
        assert_eq!(xt.as_slice(), &[2.0, 0.0]);
    }

    #[test]
    fn se_compressed_width_rounds_up() {
        assert_eq!(compressed_width(5, 2), 3);
        assert_eq!(compressed_width(192, 4), 48);
        assert_eq!(SEParams::zeros(5, 2, GateActivation::Sigmoid).compress.shape(), (3, 5));
        assert!(se_recalibrate(&[1.0; 4], &SEParams::zeros(5, 2, GateActivation::Sigmoid)).is_err());
    }

    /// Scalar-loop GRU with the same gate convention, written independently.
    fn gru_oracle(h: &[f64], v: &[f64], p: &GruParams) -> Vec<f64> {
        let nh = h.len();
        let joint: Vec<f64> = h.iter().chain(v).cloned().collect();
        let lin = |w: &Matrix, b: &Vector, x: &[f64], i: usize| {
            let mut s = b[i];
            for j in 0..x.len() {
                s += w.get(i, j) * x[j];
            }
            s
        };
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let z: Vec<f64> = (0..nh).map(|i| sig(lin(&p.w_update, &p.b_update, &joint, i))).collect();
        let r: Vec<f64> = (0..nh).map(|i| sig(lin(&p.w_reset, &p.b_reset, &joint, i))).collect();
        let gated: Vec<f64> = (0..nh).map(|i| r[i] * h[i]).chain(v.iter().cloned()).collect();
        (0..nh)
            .map(|i| {
                let n = lin(&p.w_cand, &p.b_cand, &gated, i).tanh();
                (1.0 - z[i]) * h[i] + z[i] * n
            })
            .collect()
    }

    fn random_gru(rng: &mut ChaCha8Rng, nh: usize, ni: usize) -> GruParams {
        let mut vec = |n: usize| -> Vector { (0..n).map(|_| rng.random_range(-0.5..0.5)).collect() };
        let b = (vec(nh), vec(nh), vec(nh));
        GruParams {
            w_update: random_matrix(rng, nh, nh + ni, 0.8),
            b_update: b.0,
            w_reset: random_matrix(rng, nh, nh + ni, 0.8),
            b_reset: b.1,
            w_cand: random_matrix(rng, nh, nh + ni, 0.8),
            b_cand: b.2,
        }
    }

    #[test]
    fn gru_zero_params_fixed_point() {
        let p = GruParams::zeros(4, 3);
        assert!(gru_step(&[0.0; 4], &[1.0, -2.0, 3.0], &p).unwrap().iter().all(|&v| v == 0.0));
        assert!(gru_step(&[0.0; 3], &[1.0, -2.0, 3.0], &p).is_err());
    }

    #[test]
    fn gru_ignores_disconnected_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = random_gru(&mut rng, 4, 3);
        for w in [&mut p.w_update, &mut p.w_reset, &mut p.w_cand] {
            for i in 0..4 {
                for j in 4..7 {
                    w.set(i, j, 0.0);
                }
            }
        }
        let h = [0.3, -0.2, 0.1, 0.9];
        let a = gru_step(&h, &[1.0, 2.0, 3.0], &p).unwrap();
        let b = gru_step(&h, &[-7.0, 0.0, 40.0], &p).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn gru_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..5 {
            let p = random_gru(&mut rng, 5, 3);
            let h: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            let v: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let got = gru_step(&h, &v, &p).unwrap();
            for (g, e) in got.iter().zip(gru_oracle(&h, &v, &p)) {
                assert!((g - e).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn conv_is_causal(seed in 0u64..1000, t in 0usize..8, k in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let series = random_matrix(&mut rng, 8, 3, 2.0);
            let banks: Vec<_> = (1..=3).map(|m| random_bank(&mut rng, 2, 2, 3, m * k)).collect();
            let mut pert = series.clone();
            for s in (t + 1)..8 {
                for i in 0..3 {
                    pert.set(s, i, rng.random_range(-50.0..50.0));
                }
            }
            let a = multi_scale_conv(&series, &banks).unwrap();
            let b = multi_scale_conv(&pert, &banks).unwrap();
            for s in 0..=t {
                prop_assert_eq!(a.row(s), b.row(s));
            }
        }

        #[test]
        fn sigmoid_gate_never_amplifies(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = SEParams {
                compress: random_matrix(&mut rng, 3, 6, 3.0),
                expand: random_matrix(&mut rng, 6, 3, 3.0),
                ratio: 2,
                activation: GateActivation::Sigmoid,
            };
            let x: Vec<f64> = (0..6).map(|_| rng.random_range(-10.0..10.0)).collect();
            let (u, xt) = se_recalibrate(&x, &p).unwrap();
            for i in 0..6 {
                prop_assert!((0.0..=1.0).contains(&u[i]));
                prop_assert!(xt[i].abs() <= x[i].abs());
            }
        }

        #[test]
        fn gru_output_bounded(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_gru(&mut rng, 4, 3);
            let h: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
            let v: Vec<f64> = (0..3).map(|_| rng.random_range(-20.0..20.0)).collect();
            let out = gru_step(&h, &v, &p).unwrap();
            for i in 0..4 {
                prop_assert!(out[i].is_finite());
                prop_assert!(out[i].abs() < 1.0 + h[i].abs());
            }
        }
    }
}
