//! Adam, the mini-batch training loop with early stopping on validation
//! AUPRC, and the analytic-vs-numeric gradient check.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, PatientSequence};
use crate::error::{Error, Result};
use crate::metrics::{self, Metrics, ScoredSet};
use crate::model::{self, init_params, is_bias, ForwardOutput, Mode, ModelConfig, ParamSet};
use crate::numeric::{finite_diff_grad, Matrix, Vector};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Patients per mini-batch.
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a validation-AUPRC improvement before stopping.
    pub patience: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 128,
            max_epochs: 30,
            patience: 5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| {
            Err(Error::Config {
                key: format!("train.{key}"),
                msg,
            })
        };
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", format!("must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be >= 1".into());
        }
        if self.patience == 0 {
            return bad("patience", "must be >= 1".into());
        }
        if self.max_epochs == 0 {
            return bad("max_epochs", "must be >= 1".into());
        }
        for (key, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(key, format!("must lie in [0, 1), got {b}"));
            }
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon", format!("must be positive, got {}", self.epsilon));
        }
        Ok(())
    }
}

/// First and second moment estimates, shaped like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first: ParamSet,
    pub second: ParamSet,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        AdamState {
            first: params.zeros_like(),
            second: params.zeros_like(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(params: &mut ParamSet, grads: &ParamSet, state: &mut AdamState, cfg: &TrainConfig) -> Result<()> {
    let layout = params.layout();
    if grads.layout() != layout || state.first.layout() != layout || state.second.layout() != layout {
        return Err(Error::invalid("gradient or optimizer state does not match the parameter layout"));
    }
    for (name, _, g) in grads.tensors() {
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("gradient of `{name}` at index {i}"),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let correct1 = 1.0 - cfg.beta1.powi(t);
    let correct2 = 1.0 - cfg.beta2.powi(t);
    let grads = grads.tensors();
    let mut first = state.first.tensors_mut();
    let mut second = state.second.tensors_mut();
    for (i, (_, p)) in params.tensors_mut().into_iter().enumerate() {
        let g = grads[i].2;
        let m = &mut *first[i].1;
        let v = &mut *second[i].1;
        for j in 0..p.len() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let m_hat = m[j] / correct1;
            let v_hat = v[j] / correct2;
            p[j] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
    Ok(())
}

/// Mean loss and mean gradient over the patients of a batch that have at
/// least one labelled visit. Patients are processed in parallel; the
/// reduction runs in batch order.
pub fn batch_gradient(
    batch: &[&PatientSequence],
    params: &ParamSet,
    config: &ModelConfig,
    modes: &[Mode],
) -> Result<(f64, ParamSet)> {
    if modes.len() != batch.len() {
        return Err(Error::shape("batch_gradient", batch.len(), modes.len()));
    }
    let results: Vec<Option<Result<(f64, ParamSet)>>> = batch
        .par_iter()
        .zip(modes.par_iter())
        .map(|(seq, &mode)| {
            seq.mask
                .iter()
                .any(|&m| m != 0.0)
                .then(|| model::backward(seq, params, config, mode))
        })
        .collect();
    let mut total = params.zeros_like();
    let mut loss = 0.0;
    let mut count = 0usize;
    for r in results.into_iter().flatten() {
        let (l, g) = r?;
        loss += l;
        total.add_scaled(&g, 1.0);
        count += 1;
    }
    if count == 0 {
        return Err(Error::invalid("batch has no labelled visits"));
    }
    let scale = 1.0 / count as f64;
    for (_, t) in total.tensors_mut() {
        t.iter_mut().for_each(|v| *v *= scale);
    }
    Ok((loss * scale, total))
}

/// Eval-mode forward pass of every patient, in dataset order.
pub fn predict(ds: &Dataset, params: &ParamSet, config: &ModelConfig) -> Result<Vec<ForwardOutput>> {
    ds.patients
        .par_iter()
        .map(|p| model::forward(p, params, config, Mode::Eval))
        .collect()
}

/// Per-patient scored sets restricted to labelled visits.
pub fn scored_groups(ds: &Dataset, outputs: &[ForwardOutput]) -> Result<Vec<ScoredSet>> {
    ds.patients
        .iter()
        .zip(outputs)
        .map(|(p, out)| {
            let (scores, labels) = out
                .predictions
                .iter()
                .zip(p.labels.iter())
                .zip(p.mask.iter())
                .filter(|(_, &m)| m != 0.0)
                .map(|((&s, &y), _)| (s, y))
                .unzip();
            ScoredSet::new(scores, labels)
        })
        .collect()
}

/// Pooled validation metrics for `params` on `ds`.
pub fn evaluate_dataset(ds: &Dataset, params: &ParamSet, config: &ModelConfig) -> Result<Metrics> {
    let outputs = predict(ds, params, config)?;
    let groups = scored_groups(ds, &outputs)?;
    let mut pooled = ScoredSet::default();
    for g in groups {
        pooled.scores.extend(g.scores);
        pooled.labels.extend(g.labels);
    }
    metrics::evaluate(&pooled)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auprc: f64,
    pub val_auroc: f64,
    pub val_min_se_pp: f64,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    /// Parameters of the epoch with the best validation AUPRC.
    pub params: ParamSet,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl FitResult {
    /// History as JSON lines, one record per epoch.
    pub fn history_jsonl(&self) -> String {
        self.history
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }
}

fn check_dataset(ds: &Dataset, mcfg: &ModelConfig, name: &str) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::invalid(format!("{name} set is empty")));
    }
    if ds.n_features() != mcfg.n_features {
        return Err(Error::shape(
            "fit",
            format!("{} features", mcfg.n_features),
            format!("{name} set with {} features", ds.n_features()),
        ));
    }
    Ok(())
}

pub fn fit(train: &Dataset, valid: &Dataset, mcfg: &ModelConfig, tcfg: &TrainConfig) -> Result<FitResult> {
    mcfg.validate()?;
    tcfg.validate()?;
    check_dataset(train, mcfg, "training")?;
    check_dataset(valid, mcfg, "validation")?;

    let mut params = init_params(mcfg, seed::derive(tcfg.seed, "init", &[]));
    let mut adam = AdamState::new(&params);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<(f64, ParamSet, usize)> = None;
    let mut stale = 0;

    for epoch in 0..tcfg.max_epochs {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed::derive(tcfg.seed, "shuffle", &[epoch as u64])));
        let mut loss_sum = 0.0;
        let mut n_batches = 0usize;
        for (b, chunk) in order.chunks(tcfg.batch_size).enumerate() {
            let batch: Vec<&PatientSequence> = chunk.iter().map(|&i| &train.patients[i]).collect();
            if batch.iter().all(|p| p.mask.iter().all(|&m| m == 0.0)) {
                continue;
            }
            let modes: Vec<Mode> = chunk
                .iter()
                .map(|&i| Mode::Train {
                    seed: seed::derive(tcfg.seed, "dropout", &[epoch as u64, i as u64]),
                })
                .collect();
            let (loss, grads) = batch_gradient(&batch, &params, mcfg, &modes)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch: epoch + 1, batch: b });
            }
            adam_step(&mut params, &grads, &mut adam, tcfg).map_err(|e| match e {
                Error::NonFinite { .. } => Error::Divergence { epoch: epoch + 1, batch: b },
                other => other,
            })?;
            loss_sum += loss;
            n_batches += 1;
        }

        let val = evaluate_dataset(valid, &params, mcfg)?;
        history.push(EpochRecord {
            epoch: epoch + 1,
            train_loss: loss_sum / n_batches.max(1) as f64,
            val_auprc: val.auprc,
            val_auroc: val.auroc,
            val_min_se_pp: val.min_se_pp,
        });
        if best.as_ref().map_or(true, |(score, _, _)| val.auprc > *score) {
            best = Some((val.auprc, params.clone(), epoch + 1));
            stale = 0;
        } else {
            stale += 1;
            if stale >= tcfg.patience {
                break;
            }
        }
    }

    let (_, params, best_epoch) = best.expect("at least one epoch runs");
    Ok(FitResult {
        params,
        history,
        best_epoch,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `tensor[index]` of the coordinate with the largest relative error.
    pub worst_param: String,
    pub analytic: f64,
    pub numeric: f64,
    pub n_params: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub seq_len: usize,
    pub n_patients: usize,
    pub eps: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            seq_len: 5,
            n_patients: 2,
            eps: 1e-5,
        }
    }
}

/// Compares the analytic batch gradient with central differences, dropout off.
pub fn gradient_check(mcfg: &ModelConfig, seed: u64) -> Result<GradCheckReport> {
    gradient_check_with(mcfg, seed, GradCheckOptions::default(), |_| {})
}

/// As [`gradient_check`], with a hook that may tamper with the analytic
/// gradient before comparison.
pub fn gradient_check_with<F>(mcfg: &ModelConfig, seed: u64, opts: GradCheckOptions, tamper: F) -> Result<GradCheckReport>
where
    F: FnOnce(&mut ParamSet),
{
    mcfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, "gradcheck-data", &[]));
    let t_len = opts.seq_len.min(mcfg.max_seq_len).max(1);
    let patients: Vec<PatientSequence> = (0..opts.n_patients.max(1))
        .map(|i| {
            let data = (0..t_len * mcfg.n_features).map(|_| rng.random_range(-2.0..2.0)).collect();
            PatientSequence {
                id: format!("g{i}"),
                visits: Matrix::from_vec(t_len, mcfg.n_features, data).expect("sized"),
                labels: (0..t_len).map(|_| f64::from(u8::from(rng.random_bool(0.4)))).collect(),
                mask: Vector::filled(t_len, 1.0),
                group: None,
            }
        })
        .collect();
    let batch: Vec<&PatientSequence> = patients.iter().collect();
    let modes = vec![Mode::Eval; batch.len()];

    let mut params = init_params(mcfg, seed::derive(seed, "init", &[]));
    for (name, t) in params.tensors_mut() {
        if is_bias(&name) {
            t.iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
        }
    }

    let (_, mut analytic) = batch_gradient(&batch, &params, mcfg, &modes)?;
    tamper(&mut analytic);
    let analytic = analytic.flatten();

    let mut probe = params.clone();
    let numeric = finite_diff_grad(
        |x| {
            probe.assign_flat(x).expect("same layout");
            batch_gradient_loss(&batch, &probe, mcfg).unwrap_or(f64::NAN)
        },
        &params.flatten(),
        opts.eps,
    )?;

    let (worst, max_rel_err) = analytic
        .iter()
        .zip(numeric.iter())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-8))
        .enumerate()
        .fold((0, 0.0), |acc, (i, e)| if e > acc.1 { (i, e) } else { acc });
    let (name, idx) = params.locate(worst).expect("index within layout");
    Ok(GradCheckReport {
        max_rel_err,
        worst_param: format!("{name}[{idx}]"),
        analytic: analytic[worst],
        numeric: numeric[worst],
        n_params: analytic.len(),
        seed,
    })
}

fn batch_gradient_loss(batch: &[&PatientSequence], params: &ParamSet, config: &ModelConfig) -> Result<f64> {
    let mut total = 0.0;
    for seq in batch {
        let out = model::forward(seq, params, config, Mode::Eval)?;
        total += model::bce_loss(&out.predictions, &seq.labels, &seq.mask)?;
    }
    Ok(total / batch.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;

    fn scalar_params() -> (ModelConfig, ParamSet) {
        let cfg = ModelConfig {
            n_features: 1,
            hidden: 1,
            filters: 1,
            dilations: vec![1],
            ..ModelConfig::default()
        }
        .with_variant(Variant::Gru);
        (cfg.clone(), ParamSet::zeros(&cfg))
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let (_, p0) = scalar_params();
        let mut p = init_params(
            &ModelConfig {
                n_features: 2,
                hidden: 3,
                ..ModelConfig::default()
            },
            1,
        );
        let before = p.clone();
        let g = p.zeros_like();
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &g, &mut st, &TrainConfig::default()).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step, 1);
        assert!(adam_step(&mut p, &p0, &mut st, &TrainConfig::default()).is_err());
    }

    #[test]
    fn adam_first_step_is_lr_times_sign() {
        let (_, mut p) = scalar_params();
        let mut g = p.zeros_like();
        g.out_bias[0] = 1.0;
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &g, &mut st, &TrainConfig::default()).unwrap();
        // m̂ = 1, v̂ = 1 → Δ = −lr / (1 + ε)
        assert!((p.out_bias[0] + 1e-3).abs() < 1e-6);
        assert!((p.out_bias[0] + 1e-3 / (1.0 + 1e-8)).abs() < 1e-18);
    }

    #[test]
    fn adam_is_odd_in_gradient() {
        let (_, p0) = scalar_params();
        let mut g = p0.zeros_like();
        g.out_weight.as_mut_slice()[0] = 0.37;
        g.out_bias[0] = -2.5;
        let mut neg = g.clone();
        for (_, t) in neg.tensors_mut() {
            t.iter_mut().for_each(|v| *v = -*v);
        }
        let (mut a, mut b) = (p0.clone(), p0.clone());
        let (mut sa, mut sb) = (AdamState::new(&a), AdamState::new(&b));
        adam_step(&mut a, &g, &mut sa, &TrainConfig::default()).unwrap();
        adam_step(&mut b, &neg, &mut sb, &TrainConfig::default()).unwrap();
        for (x, y) in a.flatten().iter().zip(b.flatten()) {
            assert_eq!(*x, -y);
        }
    }

    #[test]
    fn adam_rejects_nan_naming_param() {
        let (_, mut p) = scalar_params();
        let mut g = p.zeros_like();
        g.gru.b_reset[0] = f64::NAN;
        let mut st = AdamState::new(&p);
        let err = adam_step(&mut p, &g, &mut st, &TrainConfig::default()).unwrap_err();
        assert!(err.to_string().contains("gru.b_reset"), "{err}");
        assert_eq!(st.step, 0);
    }

    #[test]
    fn train_config_validation() {
        assert!(TrainConfig { learning_rate: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { patience: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }
}
