//! Patient sequences and datasets: CSV ingestion, carry-forward imputation,
//! truncation and patient-level splitting with train-only normalization,
//! bootstrap resampling, and a synthetic cohort generator with planted
//! long-trend and short-spike risk signals.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{sigmoid, Matrix, Vector};

/// One patient's visits, per-visit labels and label mask.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientSequence {
    pub id: String,
    /// `T × N_r`; missing cells are NaN until imputation.
    pub visits: Matrix,
    pub labels: Vector,
    pub mask: Vector,
    /// Outcome group used when aggregating importance weights.
    pub group: Option<String>,
}

impl PatientSequence {
    pub fn len(&self) -> usize {
        self.visits.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.visits.rows() == 0
    }

    fn truncated(&self, max_len: usize) -> PatientSequence {
        if self.len() <= max_len {
            return self.clone();
        }
        let n_r = self.visits.cols();
        PatientSequence {
            id: self.id.clone(),
            visits: Matrix::from_vec(max_len, n_r, self.visits.as_slice()[..max_len * n_r].to_vec())
                .expect("prefix of a valid matrix"),
            labels: self.labels[..max_len].into(),
            mask: self.mask[..max_len].into(),
            group: self.group.clone(),
        }
    }
}

/// Per-feature z-score statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub patients: Vec<PatientSequence>,
    pub feature_names: Vec<String>,
    /// Set by [`prepare`]; statistics of the training split.
    pub normalization: Option<Normalization>,
}

impl Dataset {
    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn len(&self) -> usize {
        self.patients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patients.is_empty()
    }

    pub fn n_visits(&self) -> usize {
        self.patients.iter().map(PatientSequence::len).sum()
    }

    pub fn has_missing(&self) -> bool {
        self.patients.iter().any(|p| p.visits.as_slice().iter().any(|v| v.is_nan()))
    }

    fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            patients: idx.iter().map(|&i| self.patients[i].clone()).collect(),
            feature_names: self.feature_names.clone(),
            normalization: self.normalization.clone(),
        }
    }

    /// Writes `records.csv`, `labels.csv` and `groups.csv` into `dir`.
    pub fn write_csv(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let records = dir.join("records.csv");
        let mut w = csv_writer(&records)?;
        let mut header = vec!["patient_id".to_string(), "visit_index".to_string()];
        header.extend(self.feature_names.iter().cloned());
        w.write_record(&header).map_err(|e| csv_err(&records, e))?;
        for p in &self.patients {
            for t in 0..p.len() {
                let mut row = vec![p.id.clone(), t.to_string()];
                row.extend(
                    p.visits
                        .row(t)
                        .iter()
                        .map(|v| if v.is_nan() { String::new() } else { format!("{v:?}") }),
                );
                w.write_record(&row).map_err(|e| csv_err(&records, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(&records, e))?;

        let labels = dir.join("labels.csv");
        let mut w = csv_writer(&labels)?;
        w.write_record(["patient_id", "visit_index", "label"]).map_err(|e| csv_err(&labels, e))?;
        for p in &self.patients {
            for t in 0..p.len() {
                if p.mask[t] != 0.0 {
                    w.write_record([p.id.as_str(), &t.to_string(), &(p.labels[t] as u8).to_string()])
                        .map_err(|e| csv_err(&labels, e))?;
                }
            }
        }
        w.flush().map_err(|e| Error::io(&labels, e))?;

        let groups = dir.join("groups.csv");
        let mut w = csv_writer(&groups)?;
        w.write_record(["patient_id", "group"]).map_err(|e| csv_err(&groups, e))?;
        for p in &self.patients {
            if let Some(g) = &p.group {
                w.write_record([p.id.as_str(), g]).map_err(|e| csv_err(&groups, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(&groups, e))
    }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(f))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: e.to_string(),
    }
}

/// Reads a records CSV (`patient_id,visit_index,<features...>`) and a labels
/// CSV (`patient_id,visit_index,label`), plus an optional groups CSV
/// (`patient_id,group`).
pub fn load_csv(records_path: &Path, labels_path: &Path, groups_path: Option<&Path>) -> Result<Dataset> {
    let parse_err = |path: &Path, line: u64, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };

    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(records_path)
        .map_err(|e| open_err(records_path, e))?;
    let header = rdr.headers().map_err(|e| csv_err(records_path, e))?.clone();
    if header.len() < 3 || &header[0] != "patient_id" || &header[1] != "visit_index" {
        return Err(parse_err(
            records_path,
            1,
            "header must be `patient_id,visit_index,<feature names...>`".into(),
        ));
    }
    let feature_names: Vec<String> = header.iter().skip(2).map(str::to_string).collect();
    let n_r = feature_names.len();

    // patient id -> visit index -> (values, line)
    let mut order: Vec<String> = Vec::new();
    let mut rows: HashMap<String, BTreeMap<i64, Vec<f64>>> = HashMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(records_path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != n_r + 2 {
            return Err(parse_err(records_path, line, format!("expected {} fields, found {}", n_r + 2, rec.len())));
        }
        let pid = rec[0].to_string();
        let visit: i64 = rec[1]
            .trim()
            .parse()
            .map_err(|_| parse_err(records_path, line, format!("visit_index `{}` is not an integer", &rec[1])))?;
        let mut values = Vec::with_capacity(n_r);
        for (j, cell) in rec.iter().skip(2).enumerate() {
            let cell = cell.trim();
            if cell.is_empty() {
                values.push(f64::NAN);
            } else {
                let v: f64 = cell.parse().map_err(|_| {
                    parse_err(records_path, line, format!("feature `{}` has non-numeric value `{cell}`", feature_names[j]))
                })?;
                if !v.is_finite() {
                    return Err(parse_err(records_path, line, format!("feature `{}` is not finite", feature_names[j])));
                }
                values.push(v);
            }
        }
        let visits = rows.entry(pid.clone()).or_insert_with(|| {
            order.push(pid.clone());
            BTreeMap::new()
        });
        if visits.insert(visit, values).is_some() {
            return Err(parse_err(records_path, line, format!("duplicate record for patient `{pid}`, visit {visit}")));
        }
    }
    if order.is_empty() {
        return Err(parse_err(records_path, 1, "no records".into()));
    }

    let mut labels: HashMap<String, BTreeMap<i64, f64>> = HashMap::new();
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(labels_path)
        .map_err(|e| open_err(labels_path, e))?;
    let header = rdr.headers().map_err(|e| csv_err(labels_path, e))?.clone();
    if header.iter().collect::<Vec<_>>() != ["patient_id", "visit_index", "label"] {
        return Err(parse_err(labels_path, 1, "header must be `patient_id,visit_index,label`".into()));
    }
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(labels_path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        let pid = &rec[0];
        let Some(visits) = rows.get(pid) else {
            return Err(parse_err(labels_path, line, format!("label for unknown patient `{pid}`")));
        };
        let visit: i64 = rec[1]
            .trim()
            .parse()
            .map_err(|_| parse_err(labels_path, line, format!("visit_index `{}` is not an integer", &rec[1])))?;
        if !visits.contains_key(&visit) {
            return Err(parse_err(labels_path, line, format!("label for unknown visit {visit} of patient `{pid}`")));
        }
        let label = match rec[2].trim() {
            "0" => 0.0,
            "1" => 1.0,
            other => return Err(parse_err(labels_path, line, format!("label `{other}` is not 0 or 1"))),
        };
        if labels.entry(pid.to_string()).or_default().insert(visit, label).is_some() {
            return Err(parse_err(labels_path, line, format!("duplicate label for patient `{pid}`, visit {visit}")));
        }
    }

    let mut groups: HashMap<String, String> = HashMap::new();
    if let Some(path) = groups_path {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(path)
            .map_err(|e| open_err(path, e))?;
        for rec in rdr.records() {
            let rec = rec.map_err(|e| csv_err(path, e))?;
            let line = rec.position().map_or(0, |p| p.line());
            if rec.len() != 2 {
                return Err(parse_err(path, line, "expected `patient_id,group`".into()));
            }
            if !rows.contains_key(&rec[0]) {
                return Err(parse_err(path, line, format!("group for unknown patient `{}`", &rec[0])));
            }
            groups.insert(rec[0].to_string(), rec[1].to_string());
        }
    }

    let patients = order
        .into_iter()
        .map(|pid| {
            let visits = &rows[&pid];
            let lab = labels.get(&pid);
            let mut data = Vec::with_capacity(visits.len() * n_r);
            let mut y = Vec::with_capacity(visits.len());
            let mut mask = Vec::with_capacity(visits.len());
            for (visit, values) in visits {
                data.extend_from_slice(values);
                match lab.and_then(|l| l.get(visit)) {
                    Some(&v) => {
                        y.push(v);
                        mask.push(1.0);
                    }
                    None => {
                        y.push(0.0);
                        mask.push(0.0);
                    }
                }
            }
            PatientSequence {
                group: groups.get(&pid).cloned(),
                visits: Matrix::from_vec(visits.len(), n_r, data).expect("row widths checked"),
                labels: y.into(),
                mask: mask.into(),
                id: pid,
            }
        })
        .collect();

    Ok(Dataset {
        patients,
        feature_names,
        normalization: None,
    })
}

fn open_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            msg: format!("{other:?}"),
        },
    }
}

/// Carries the last observation forward per feature; cells before the first
/// observation take the first observed value.
pub fn impute(ds: &Dataset) -> Result<Dataset> {
    let mut out = ds.clone();
    for p in &mut out.patients {
        let (t_len, n_r) = p.visits.shape();
        for j in 0..n_r {
            let Some(first) = (0..t_len).map(|t| p.visits.get(t, j)).find(|v| !v.is_nan()) else {
                return Err(Error::invalid(format!(
                    "patient `{}` never observes feature `{}`",
                    p.id, ds.feature_names[j]
                )));
            };
            let mut last = first;
            for t in 0..t_len {
                let v = p.visits.get(t, j);
                if v.is_nan() {
                    p.visits.set(t, j, last);
                } else {
                    last = v;
                }
            }
        }
    }
    Ok(out)
}

/// Fractions of patients assigned to train / validation / test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    /// 15% test, then 85/15 of the remainder for train/validation.
    fn default() -> Self {
        SplitFractions {
            train: 0.85 * 0.85,
            valid: 0.85 * 0.15,
            test: 0.15,
        }
    }
}

/// Splits `n` items by largest remainder so the counts sum to `n`.
pub fn split_counts(n: usize, fractions: &SplitFractions) -> Result<[usize; 3]> {
    let f = [fractions.train, fractions.valid, fractions.test];
    if f.iter().any(|&x| !(0.0..=1.0).contains(&x)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config {
            key: "data.split".into(),
            msg: format!("fractions must be in [0,1] and sum to 1, got {f:?}"),
        });
    }
    let exact: Vec<f64> = f.iter().map(|x| x * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let mut left = n - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    Ok([counts[0], counts[1], counts[2]])
}

/// Truncates, splits at patient level with a seeded shuffle, and z-scores all
/// three splits with statistics fitted on the training split only.
pub fn prepare(ds: &Dataset, max_len: usize, fractions: &SplitFractions, seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    if max_len == 0 {
        return Err(Error::Config {
            key: "data.max_len".into(),
            msg: "must be >= 1".into(),
        });
    }
    if ds.has_missing() {
        return Err(Error::invalid("prepare expects an imputed dataset"));
    }
    let counts = split_counts(ds.len(), fractions)?;
    for (name, c) in ["train", "valid", "test"].iter().zip(counts) {
        if c == 0 {
            return Err(Error::invalid(format!(
                "{name} split receives zero of {} patients",
                ds.len()
            )));
        }
    }
    let truncated = Dataset {
        patients: ds.patients.iter().map(|p| p.truncated(max_len)).collect(),
        ..ds.clone()
    };
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (train_idx, rest) = idx.split_at(counts[0]);
    let (valid_idx, test_idx) = rest.split_at(counts[1]);
    let sorted = |s: &[usize]| {
        let mut v = s.to_vec();
        v.sort_unstable();
        v
    };
    let mut train = truncated.subset(&sorted(train_idx));
    let mut valid = truncated.subset(&sorted(valid_idx));
    let mut test = truncated.subset(&sorted(test_idx));

    let norm = fit_normalization(&train)?;
    for split in [&mut train, &mut valid, &mut test] {
        apply_normalization(split, &norm);
    }
    Ok((train, valid, test))
}

/// Population mean and standard deviation of each feature over all visits.
pub fn fit_normalization(ds: &Dataset) -> Result<Normalization> {
    let n_r = ds.n_features();
    let count = ds.n_visits() as f64;
    let mut mean = vec![0.0; n_r];
    for p in &ds.patients {
        for row in p.visits.iter_rows() {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut var = vec![0.0; n_r];
    for p in &ds.patients {
        for row in p.visits.iter_rows() {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
    }
    let std: Vec<f64> = var.iter().map(|s| (s / count).sqrt()).collect();
    if let Some(j) = std.iter().position(|&s| !(s > 0.0)) {
        return Err(Error::invalid(format!(
            "feature `{}` is constant over the training split",
            ds.feature_names[j]
        )));
    }
    Ok(Normalization { mean, std })
}

fn apply_normalization(ds: &mut Dataset, norm: &Normalization) {
    for p in &mut ds.patients {
        for t in 0..p.len() {
            for ((v, m), s) in p.visits.row_mut(t).iter_mut().zip(&norm.mean).zip(&norm.std) {
                *v = (*v - m) / s;
            }
        }
    }
    ds.normalization = Some(norm.clone());
}

/// `n` with-replacement resamples of patient indices `0..test.len()`.
pub fn bootstrap_resample(test: &Dataset, n: usize, seed: u64) -> impl Iterator<Item = Vec<usize>> {
    bootstrap_indices(test.len(), n, seed)
}

pub fn bootstrap_indices(size: usize, n: usize, seed: u64) -> impl Iterator<Item = Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(move |_| (0..size).map(|_| rng.random_range(0..size.max(1))).collect())
}

/// Parameters of the synthetic cohort generator.
///
/// Every patient gets a random per-patient baseline on each feature plus
/// Gaussian measurement noise. Chronic patients additionally carry a steady
/// decline on `trend_feature`; acute patients carry one short elevation of
/// `spike_magnitude` on `spike_feature`. The per-visit risk is
/// `sigmoid(intercept + trend_coef·decline_so_far + spike_coef·[spike within the last spike_window visits])`,
/// with the intercept solved so the expected prevalence hits the target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub n_patients: usize,
    pub min_visits: usize,
    pub max_visits: usize,
    pub n_features: usize,
    pub seed: u64,
    /// Share of patients carrying the trend signal.
    pub chronic_fraction: f64,
    /// Share of patients carrying the spike signal.
    pub acute_fraction: f64,
    pub trend_feature: usize,
    /// Decline per visit is drawn uniformly from `[0.5, 1]·trend_slope`.
    pub trend_slope: f64,
    pub trend_coef: f64,
    pub spike_feature: usize,
    pub spike_window: usize,
    pub spike_magnitude: f64,
    pub spike_coef: f64,
    /// Standard deviation of per-patient baselines.
    pub baseline_std: f64,
    pub noise_std: f64,
    pub prevalence: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_patients: 500,
            min_visits: 12,
            max_visits: 40,
            n_features: 20,
            seed: 0,
            chronic_fraction: 0.3,
            acute_fraction: 0.3,
            trend_feature: 0,
            trend_slope: 0.15,
            trend_coef: 3.0,
            spike_feature: 1,
            spike_window: 2,
            spike_magnitude: 3.0,
            spike_coef: 8.0,
            baseline_std: 1.0,
            noise_std: 0.3,
            prevalence: 0.15,
        }
    }
}

pub const GROUP_CHRONIC: &str = "chronic";
pub const GROUP_ACUTE: &str = "acute";
pub const GROUP_CONTROL: &str = "control";

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| {
            Err(Error::Config {
                key: format!("synth.{key}"),
                msg,
            })
        };
        if self.n_patients == 0 {
            return bad("n_patients", "must be >= 1".into());
        }
        if self.min_visits == 0 || self.min_visits > self.max_visits {
            return bad("min_visits", format!("need 1 <= min_visits <= max_visits, got {}..{}", self.min_visits, self.max_visits));
        }
        if self.n_features == 0 {
            return bad("n_features", "must be >= 1".into());
        }
        if self.trend_feature >= self.n_features {
            return bad("trend_feature", format!("index {} out of range for {} features", self.trend_feature, self.n_features));
        }
        if self.spike_feature >= self.n_features {
            return bad("spike_feature", format!("index {} out of range for {} features", self.spike_feature, self.n_features));
        }
        if self.spike_window == 0 {
            return bad("spike_window", "must be >= 1".into());
        }
        if !(self.prevalence > 0.0 && self.prevalence < 1.0) {
            return bad("prevalence", format!("must lie in (0, 1), got {}", self.prevalence));
        }
        for (key, f) in [("chronic_fraction", self.chronic_fraction), ("acute_fraction", self.acute_fraction)] {
            if !(0.0..=1.0).contains(&f) {
                return bad(key, format!("must lie in [0, 1], got {f}"));
            }
        }
        if self.chronic_fraction + self.acute_fraction > 1.0 + 1e-12 {
            return bad("acute_fraction", "chronic_fraction + acute_fraction exceeds 1".into());
        }
        for (key, v) in [
            ("noise_std", self.noise_std),
            ("baseline_std", self.baseline_std),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(key, format!("must be finite and >= 0, got {v}"));
            }
        }
        Ok(())
    }

    fn feature_names(&self) -> Vec<String> {
        (0..self.n_features)
            .map(|j| {
                if j == self.trend_feature {
                    format!("trend_{j}")
                } else if j == self.spike_feature {
                    format!("spike_{j}")
                } else {
                    format!("f{j}")
                }
            })
            .collect()
    }
}

/// Noise-free latent risk signal of one synthetic patient, per visit.
struct Latent {
    id: String,
    visits: Matrix,
    signal: Vec<f64>,
    group: &'static str,
}

const INTERCEPT_RANGE: (f64, f64) = (-30.0, 30.0);

pub fn synth_generate(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::invalid(e.to_string()))?;
    let baseline = Normal::new(0.0, spec.baseline_std).map_err(|e| Error::invalid(e.to_string()))?;
    let n_r = spec.n_features;
    let width = (spec.n_patients as f64).log10().ceil().max(1.0) as usize;

    let mut latents = Vec::with_capacity(spec.n_patients);
    for i in 0..spec.n_patients {
        let t_len = rng.random_range(spec.min_visits..=spec.max_visits);
        let u: f64 = rng.random();
        let group = if u < spec.chronic_fraction {
            GROUP_CHRONIC
        } else if u < spec.chronic_fraction + spec.acute_fraction {
            GROUP_ACUTE
        } else {
            GROUP_CONTROL
        };
        let base: Vec<f64> = (0..n_r).map(|_| baseline.sample(&mut rng)).collect();
        let slope = if group == GROUP_CHRONIC {
            spec.trend_slope * rng.random_range(0.5..=1.0)
        } else {
            0.0
        };
        // Spike onset anywhere after the first visit, lasting one or two visits.
        let spike = (group == GROUP_ACUTE).then(|| {
            let onset = rng.random_range(1.min(t_len - 1)..t_len);
            let duration = rng.random_range(1..=2usize);
            (onset, duration)
        });

        let mut data = Vec::with_capacity(t_len * n_r);
        let mut signal = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let decline = slope * t as f64;
            let spiking = spike.is_some_and(|(on, d)| t >= on && t < on + d);
            let recent_spike = spike.is_some_and(|(on, _)| t >= on && t < on + spec.spike_window);
            for (j, b) in base.iter().enumerate() {
                let mut v = *b + noise.sample(&mut rng);
                if j == spec.trend_feature {
                    v -= decline;
                }
                if j == spec.spike_feature && spiking {
                    v += spec.spike_magnitude;
                }
                data.push(v);
            }
            signal.push(spec.trend_coef * decline + if recent_spike { spec.spike_coef } else { 0.0 });
        }
        latents.push(Latent {
            id: format!("P{i:0width$}"),
            visits: Matrix::from_vec(t_len, n_r, data).expect("row-major fill"),
            signal,
            group,
        });
    }

    let intercept = solve_intercept(&latents, spec.prevalence)?;
    let patients = latents
        .into_iter()
        .map(|l| {
            let labels: Vector = l
                .signal
                .iter()
                .map(|s| if rng.random::<f64>() < sigmoid(intercept + s) { 1.0 } else { 0.0 })
                .collect();
            PatientSequence {
                mask: Vector::filled(labels.len(), 1.0),
                labels,
                id: l.id,
                visits: l.visits,
                group: Some(l.group.to_string()),
            }
        })
        .collect();
    Ok(Dataset {
        patients,
        feature_names: spec.feature_names(),
        normalization: None,
    })
}

/// Bisection for the intercept whose expected per-visit prevalence equals `target`.
fn solve_intercept(latents: &[Latent], target: f64) -> Result<f64> {
    let n: usize = latents.iter().map(|l| l.signal.len()).sum();
    let expected = |b: f64| latents.iter().flat_map(|l| &l.signal).map(|s| sigmoid(b + s)).sum::<f64>() / n as f64;
    let (mut lo, mut hi) = INTERCEPT_RANGE;
    let tol = 1e-3 * target.min(1.0 - target);
    if expected(lo) > target + tol || expected(hi) < target - tol {
        return Err(Error::invalid(format!(
            "prevalence {target} is unreachable with intercepts in {INTERCEPT_RANGE:?} (achievable {:.4}..{:.4})",
            expected(lo),
            expected(hi)
        )));
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if expected(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Resolves a path relative to a base directory unless it is absolute.
pub fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Writes a JSON document with a trailing newline.
pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    let s = serde_json::to_string_pretty(value).map_err(|e| Error::invalid(e.to_string()))?;
    f.write_all(s.as_bytes()).and_then(|_| f.write_all(b"\n")).map_err(|e| Error::io(path, e))
}
