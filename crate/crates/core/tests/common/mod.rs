#![allow(dead_code)]

use adacare::data::{Dataset, PatientSequence};
use adacare::model::ModelConfig;
use adacare::numeric::{Matrix, Vector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// N_r=3, N_c=2, N_h=4, rates 1,2,3, dropout 0.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        n_features: 3,
        hidden: 4,
        filters: 2,
        kernel_len: 2,
        dilations: vec![1, 2, 3],
        dropout: 0.0,
        ..ModelConfig::default()
    }
}

pub fn random_patient(rng: &mut ChaCha8Rng, id: &str, t_len: usize, n_r: usize) -> PatientSequence {
    let data = (0..t_len * n_r).map(|_| rng.random_range(-2.0..2.0)).collect();
    PatientSequence {
        id: id.into(),
        visits: Matrix::from_vec(t_len, n_r, data).unwrap(),
        labels: (0..t_len).map(|_| if rng.random::<f64>() < 0.4 { 1.0 } else { 0.0 }).collect(),
        mask: Vector::filled(t_len, 1.0),
        group: None,
    }
}

pub fn dataset(patients: Vec<PatientSequence>, n_r: usize) -> Dataset {
    Dataset {
        patients,
        feature_names: (0..n_r).map(|j| format!("x{j}")).collect(),
        normalization: None,
    }
}

/// Fraction of (positive, negative) pairs ranked correctly, ties counted half.
pub fn pairwise_auroc(scores: &[f64], labels: &[f64]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1.0 && labels[j] == 0.0 {
                den += 1.0;
                if si > sj {
                    num += 1.0;
                } else if si == sj {
                    num += 0.5;
                }
            }
        }
    }
    num / den
}

/// Evaluates precision and recall at every distinct score taken as a
/// threshold (`score >= thr`), from the highest down, and returns
/// (step-wise AUPRC, max min(P, R)).
pub fn exhaustive_pr(scores: &[f64], labels: &[f64]) -> (f64, f64) {
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let n_pos = labels.iter().filter(|&&y| y == 1.0).count() as f64;
    let mut area = 0.0;
    let mut best: f64 = 0.0;
    let mut prev_r = 0.0;
    for thr in thresholds {
        let tp = scores.iter().zip(labels).filter(|(&s, &y)| s >= thr && y == 1.0).count() as f64;
        let fp = scores.iter().zip(labels).filter(|(&s, &y)| s >= thr && y == 0.0).count() as f64;
        let p = tp / (tp + fp);
        let r = tp / n_pos;
        area += (r - prev_r) * p;
        prev_r = r;
        best = best.max(p.min(r));
    }
    (area, best)
}

/// Euclidean projection onto the simplex by enumerating candidate supports
/// and keeping the closest feasible point.
pub fn simplex_projection(z: &[f64]) -> Vec<f64> {
    let n = z.len();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for mask in 1u32..(1 << n) {
        let k = mask.count_ones() as f64;
        let s: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| z[i]).sum();
        let tau = (s - 1.0) / k;
        let p: Vec<f64> = (0..n).map(|i| if mask >> i & 1 == 1 { z[i] - tau } else { 0.0 }).collect();
        if p.iter().any(|&v| v < -1e-12) {
            continue;
        }
        let d: f64 = p.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum();
        if best.as_ref().is_none_or(|(bd, _)| d < *bd) {
            best = Some((d, p));
        }
    }
    best.unwrap().1
}
