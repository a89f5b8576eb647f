//! Threshold-free binary classification metrics and patient-level bootstrap.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pooled per-visit scores and 0/1 labels.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoredSet {
    pub scores: Vec<f64>,
    pub labels: Vec<f64>,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<f64>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::shape("ScoredSet", scores.len(), labels.len()));
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("score at index {i}"),
            });
        }
        if let Some(i) = labels.iter().position(|&y| y != 0.0 && y != 1.0) {
            return Err(Error::invalid(format!("label at index {i} is {}, not 0 or 1", labels[i])));
        }
        Ok(ScoredSet { scores, labels })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&y| y == 1.0).count()
    }

    pub fn negatives(&self) -> usize {
        self.len() - self.positives()
    }

    fn extend(&mut self, other: &ScoredSet) {
        self.scores.extend_from_slice(&other.scores);
        self.labels.extend_from_slice(&other.labels);
    }
}

/// Area under the ROC curve as the Mann-Whitney statistic, ties counted half.
pub fn auroc(s: &ScoredSet) -> Result<f64> {
    let (n_pos, n_neg) = (s.positives(), s.negatives());
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::invalid(format!("AUROC needs both classes (positives {n_pos}, negatives {n_neg})")));
    }
    let order = sorted_ascending(&s.scores);
    // Sum of (1-based, tie-averaged) ranks of the positives, kept doubled so it stays integral.
    let mut twice_rank_sum: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && s.scores[order[j + 1]] == s.scores[order[i]] {
            j += 1;
        }
        let twice_avg_rank = (i + 1 + j + 1) as u64;
        let pos_in_tie = order[i..=j].iter().filter(|&&k| s.labels[k] == 1.0).count() as u64;
        twice_rank_sum += twice_avg_rank * pos_in_tie;
        i = j + 1;
    }
    let n_pos = n_pos as u64;
    // 2·U = 2·(rank sum) − n_pos·(n_pos + 1)
    let twice_u = twice_rank_sum - n_pos * (n_pos + 1);
    Ok(twice_u as f64 / 2.0 / (n_pos * n_neg as u64) as f64)
}

fn sorted_ascending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));
    idx
}

/// One operating point of the curve, at "score ≥ threshold".
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub tpr: f64,
    pub fpr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrCurve {
    pub points: Vec<CurvePoint>,
    pub auprc: f64,
    pub min_se_pp: f64,
}

/// Precision-recall curve with one point per distinct threshold (descending),
/// step-wise AUPRC `Σ (R_i − R_{i−1})·P_i`, and `max min(P, R)`.
pub fn pr_curve(s: &ScoredSet) -> Result<PrCurve> {
    let n_pos = s.positives();
    if n_pos == 0 {
        return Err(Error::invalid("precision-recall curve needs at least one positive"));
    }
    let n_neg = s.negatives();
    let mut order = sorted_ascending(&s.scores);
    order.reverse();

    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auprc = 0.0;
    let mut min_se_pp: f64 = 0.0;
    let mut prev_recall = 0.0;
    let mut i = 0;
    while i < order.len() {
        let threshold = s.scores[order[i]];
        while i < order.len() && s.scores[order[i]] == threshold {
            if s.labels[order[i]] == 1.0 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let (precision, recall) = precision_recall(tp, fp, n_pos);
        auprc += (recall - prev_recall) * precision;
        prev_recall = recall;
        min_se_pp = min_se_pp.max(precision.min(recall));
        points.push(CurvePoint {
            threshold,
            precision,
            recall,
            tpr: recall,
            fpr: if n_neg == 0 { 0.0 } else { fp as f64 / n_neg as f64 },
        });
    }
    Ok(PrCurve {
        points,
        auprc,
        min_se_pp,
    })
}

#[inline]
pub(crate) fn precision_recall(tp: usize, fp: usize, n_pos: usize) -> (f64, f64) {
    (tp as f64 / (tp + fp) as f64, tp as f64 / n_pos as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub auprc: f64,
    pub auroc: f64,
    pub min_se_pp: f64,
}

pub fn evaluate(s: &ScoredSet) -> Result<Metrics> {
    let pr = pr_curve(s)?;
    Ok(Metrics {
        auprc: pr.auprc,
        auroc: auroc(s)?,
        min_se_pp: pr.min_se_pp,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSummary {
    pub auprc: Spread,
    pub auroc: Spread,
    pub min_se_pp: Spread,
    pub n_resamples: usize,
    /// Resamples dropped because they contained a single class.
    pub n_degenerate: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auprc: f64,
    pub auroc: f64,
    pub min_se_pp: f64,
    pub bootstrap: BootstrapSummary,
    pub n_patients: usize,
    pub n_samples: usize,
    pub seed: u64,
}

/// Point estimates on the full set plus bootstrap mean/std (population std)
/// over patient-level resamples. Each index list picks patients from `groups`.
pub fn bootstrap_eval<I>(groups: &[ScoredSet], resamples: I, seed: u64) -> Result<EvalReport>
where
    I: IntoIterator<Item = Vec<usize>>,
{
    let mut pooled = ScoredSet::default();
    for g in groups {
        pooled.extend(g);
    }
    let point = evaluate(&pooled)?;

    let mut samples: Vec<Metrics> = Vec::new();
    let mut degenerate = 0;
    let mut total = 0;
    let mut buf = ScoredSet::default();
    for idx in resamples {
        total += 1;
        buf.scores.clear();
        buf.labels.clear();
        for i in idx {
            let g = groups
                .get(i)
                .ok_or_else(|| Error::invalid(format!("resample index {i} out of range for {} patients", groups.len())))?;
            buf.extend(g);
        }
        let pos = buf.positives();
        if pos == 0 || pos == buf.len() {
            degenerate += 1;
            continue;
        }
        samples.push(evaluate(&buf)?);
    }
    if total > 0 && degenerate * 2 > total {
        return Err(Error::invalid(format!(
            "{degenerate} of {total} bootstrap resamples contain a single class"
        )));
    }
    let spread = |f: fn(&Metrics) -> f64| {
        if samples.is_empty() {
            return Spread { mean: f(&point), std: 0.0 };
        }
        let n = samples.len() as f64;
        let mean = samples.iter().map(f).sum::<f64>() / n;
        let var = samples.iter().map(|m| (f(m) - mean).powi(2)).sum::<f64>() / n;
        Spread { mean, std: var.sqrt() }
    };
    Ok(EvalReport {
        auprc: point.auprc,
        auroc: point.auroc,
        min_se_pp: point.min_se_pp,
        bootstrap: BootstrapSummary {
            auprc: spread(|m| m.auprc),
            auroc: spread(|m| m.auroc),
            min_se_pp: spread(|m| m.min_se_pp),
            n_resamples: total,
            n_degenerate: degenerate,
        },
        n_patients: groups.len(),
        n_samples: pooled.len(),
        seed,
    })
}

/// Writes `threshold,precision,recall,tpr,fpr` rows.
pub fn write_curve_csv(points: &[CurvePoint], path: &std::path::Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    for p in points {
        w.serialize(p).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
