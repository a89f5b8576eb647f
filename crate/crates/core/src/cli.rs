//! The `adacare` command line: `synth`, `train`, `eval`, `explain` and
//! `gradcheck`, driven by one JSON run configuration plus flag overrides.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration error.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{self, Dataset, SplitFractions, SynthSpec};
use crate::error::{Error, Result};
use crate::interpret::{self, RecalibrationTrace, Scope};
use crate::metrics;
use crate::model::{ModelConfig, ParamSet};
use crate::seed;
use crate::training::{self, GradCheckOptions, GradCheckReport, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "adacare", version, about = "Train, evaluate and explain per-visit risk models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Root seed; every random stream is derived from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Worker threads for per-patient parallelism.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Override a configuration key, e.g. `--set train.max_epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate a synthetic cohort as CSV files.
    Synth,
    /// Fit a model and write its parameters and training history.
    Train,
    /// Evaluate a fitted model on the test split with bootstrap spreads.
    Eval,
    /// Export recalibration-weight importance matrices.
    Explain,
    /// Compare analytic gradients with central differences.
    Gradcheck,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Records CSV; defaults to `<out>/records.csv`.
    pub records: Option<PathBuf>,
    /// Labels CSV; defaults to `<out>/labels.csv`.
    pub labels: Option<PathBuf>,
    /// Optional `patient_id,group` CSV; defaults to `<out>/groups.csv` if present.
    pub groups: Option<PathBuf>,
    pub max_len: usize,
    pub split: SplitFractions,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            records: None,
            labels: None,
            groups: None,
            max_len: 400,
            split: SplitFractions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub bootstrap: usize,
    pub curve_csv: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            bootstrap: 1000,
            curve_csv: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub model: ModelConfig,
    pub seeds: u64,
    pub seq_len: usize,
    pub tolerance: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            model: ModelConfig {
                n_features: 3,
                hidden: 4,
                filters: 2,
                kernel_len: 2,
                dilations: vec![1, 2, 3],
                dropout: 0.0,
                ..ModelConfig::default()
            },
            seeds: 10,
            seq_len: 5,
            tolerance: 1e-4,
        }
    }
}

/// Everything a command may need, read from one JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    /// Parameters file; defaults to `<out>/params.bin`.
    pub params: Option<PathBuf>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub synth: SynthSpec,
    pub eval: EvalConfig,
    pub gradcheck: GradcheckConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: PathBuf::from("out"),
            params: None,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            synth: SynthSpec::default(),
            eval: EvalConfig::default(),
            gradcheck: GradcheckConfig::default(),
        }
    }
}

impl RunConfig {
    /// Builds the configuration from an optional JSON file, `--set` overrides
    /// and the dedicated flags, then validates it.
    pub fn load(cli: &Cli) -> Result<RunConfig> {
        let mut doc = match &cli.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| Error::Config {
                    key: "--config".into(),
                    msg: format!("{}: {e}", path.display()),
                })?;
                serde_json::from_str::<Value>(&text).map_err(|e| Error::Config {
                    key: "--config".into(),
                    msg: format!("{}: {e}", path.display()),
                })?
            }
            None => Value::Object(Default::default()),
        };
        for o in &cli.overrides {
            apply_override(&mut doc, o)?;
        }
        if let Some(s) = cli.seed {
            set_path(&mut doc, "seed", Value::from(s))?;
        }
        if let Some(out) = &cli.out {
            set_path(&mut doc, "out", Value::from(out.to_string_lossy().into_owned()))?;
        }
        let cfg: RunConfig = serde_path_to_error::deserialize(doc).map_err(|e| {
            let path = e.path().to_string();
            Error::Config {
                key: if path == "." { "<root>".into() } else { path },
                msg: e.into_inner().to_string(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.synth.validate()?;
        self.gradcheck.model.validate()?;
        if self.synth.seed != 0 {
            return Err(Error::Config {
                key: "synth.seed".into(),
                msg: "derived from the root `seed`; set that instead".into(),
            });
        }
        if self.train.seed != 0 {
            return Err(Error::Config {
                key: "train.seed".into(),
                msg: "derived from the root `seed`; set that instead".into(),
            });
        }
        if self.data.max_len == 0 {
            return Err(Error::Config {
                key: "data.max_len".into(),
                msg: "must be >= 1".into(),
            });
        }
        data::split_counts(1, &self.data.split)?;
        if self.model.max_seq_len < self.data.max_len {
            return Err(Error::Config {
                key: "model.max_seq_len".into(),
                msg: format!("must be >= data.max_len ({})", self.data.max_len),
            });
        }
        if self.gradcheck.seeds == 0 || self.gradcheck.seq_len == 0 {
            return Err(Error::Config {
                key: "gradcheck".into(),
                msg: "seeds and seq_len must be >= 1".into(),
            });
        }
        Ok(())
    }

    fn params_path(&self) -> PathBuf {
        self.params.clone().unwrap_or_else(|| self.out.join("params.bin"))
    }

    fn records_path(&self) -> PathBuf {
        self.data.records.clone().unwrap_or_else(|| self.out.join("records.csv"))
    }

    fn labels_path(&self) -> PathBuf {
        self.data.labels.clone().unwrap_or_else(|| self.out.join("labels.csv"))
    }

    fn groups_path(&self) -> Option<PathBuf> {
        match &self.data.groups {
            Some(p) => Some(p.clone()),
            None => {
                let p = self.out.join("groups.csv");
                p.exists().then_some(p)
            }
        }
    }
}

fn apply_override(doc: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| Error::Config {
        key: spec.into(),
        msg: "overrides take the form key=value".into(),
    })?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    set_path(doc, key.trim(), value)
}

fn set_path(doc: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node.as_object_mut().ok_or_else(|| Error::Config {
            key: key.into(),
            msg: format!("`{}` is not an object", parts[..i].join(".")),
        })?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } => 2,
        _ => 1,
    }
}

pub fn run(cli: &Cli) -> Result<ExitCode> {
    let cfg = RunConfig::load(cli)?;
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config {
                key: "--threads".into(),
                msg: "must be >= 1".into(),
            });
        }
        // Fails only if a pool already exists, which is fine for repeated in-process calls.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    match cli.command {
        Command::Synth => synth(&cfg),
        Command::Train => train(&cfg),
        Command::Eval => eval(&cfg),
        Command::Explain => explain(&cfg),
        Command::Gradcheck => return gradcheck(&cfg),
    }?;
    Ok(ExitCode::SUCCESS)
}

fn synth(cfg: &RunConfig) -> Result<()> {
    let spec = SynthSpec {
        seed: seed::derive(cfg.seed, "synth", &[]),
        ..cfg.synth.clone()
    };
    let ds = data::synth_generate(&spec)?;
    ds.write_csv(&cfg.out)?;
    eprintln!(
        "wrote {} patients / {} visits to {}",
        ds.len(),
        ds.n_visits(),
        cfg.out.display()
    );
    Ok(())
}

/// Loads, imputes and splits the configured dataset.
fn splits(cfg: &RunConfig) -> Result<(Dataset, Dataset, Dataset)> {
    let records = cfg.records_path();
    let labels = cfg.labels_path();
    for (key, p) in [("data.records", &records), ("data.labels", &labels)] {
        if !p.exists() {
            return Err(Error::Config {
                key: key.into(),
                msg: format!("{} does not exist", p.display()),
            });
        }
    }
    let ds = data::load_csv(&records, &labels, cfg.groups_path().as_deref())?;
    if ds.n_features() != cfg.model.n_features {
        return Err(Error::Config {
            key: "model.n_features".into(),
            msg: format!("is {} but the data has {} features", cfg.model.n_features, ds.n_features()),
        });
    }
    let ds = data::impute(&ds)?;
    data::prepare(&ds, cfg.data.max_len, &cfg.data.split, seed::derive(cfg.seed, "split", &[]))
}

fn load_params(cfg: &RunConfig) -> Result<(ModelConfig, ParamSet)> {
    let path = cfg.params_path();
    if !path.exists() {
        return Err(Error::Config {
            key: "params".into(),
            msg: format!("{} does not exist", path.display()),
        });
    }
    ParamSet::load(&path)
}

fn train(cfg: &RunConfig) -> Result<()> {
    let (train, valid, _) = splits(cfg)?;
    let tcfg = TrainConfig {
        seed: seed::derive(cfg.seed, "train", &[]),
        ..cfg.train.clone()
    };
    let fit = training::fit(&train, &valid, &cfg.model, &tcfg)?;
    let params_path = cfg.params_path();
    fit.params.save(&cfg.model, &params_path)?;
    let history = cfg.out.join("history.jsonl");
    fs::write(&history, fit.history_jsonl()).map_err(|e| Error::io(&history, e))?;
    eprintln!(
        "trained {} epochs (best {}), wrote {}",
        fit.history.len(),
        fit.best_epoch,
        params_path.display()
    );
    Ok(())
}

fn eval(cfg: &RunConfig) -> Result<()> {
    let (mcfg, params) = load_params(cfg)?;
    let (_, _, test) = splits(cfg)?;
    let outputs = training::predict(&test, &params, &mcfg)?;
    let groups = training::scored_groups(&test, &outputs)?;
    let boot_seed = seed::derive(cfg.seed, "bootstrap", &[]);
    let report = metrics::bootstrap_eval(
        &groups,
        data::bootstrap_resample(&test, cfg.eval.bootstrap, boot_seed),
        boot_seed,
    )?;
    data::write_json(&cfg.out.join("eval.json"), &report)?;
    if cfg.eval.curve_csv {
        let mut pooled = metrics::ScoredSet::default();
        for g in &groups {
            pooled.scores.extend_from_slice(&g.scores);
            pooled.labels.extend_from_slice(&g.labels);
        }
        let curve = metrics::pr_curve(&pooled)?;
        metrics::write_curve_csv(&curve.points, &cfg.out.join("curve.csv"))?;
    }
    eprintln!(
        "AUPRC {:.4} ({:.4})  AUROC {:.4} ({:.4})  min(Se,P+) {:.4} ({:.4})",
        report.auprc,
        report.bootstrap.auprc.std,
        report.auroc,
        report.bootstrap.auroc.std,
        report.min_se_pp,
        report.bootstrap.min_se_pp.std
    );
    Ok(())
}

/// Group tag used for patients without one.
const DEFAULT_GROUP: &str = "all";

fn explain(cfg: &RunConfig) -> Result<()> {
    let (mcfg, params) = load_params(cfg)?;
    let (_, _, test) = splits(cfg)?;
    let outputs = training::predict(&test, &params, &mcfg)?;
    let traces: Vec<(RecalibrationTrace, String)> = outputs
        .into_iter()
        .zip(&test.patients)
        .map(|(o, p)| {
            (
                o.trace.with_feature_names(&test.feature_names),
                p.group.clone().unwrap_or_else(|| DEFAULT_GROUP.into()),
            )
        })
        .collect();
    let fingerprint = interpret::config_fingerprint(&mcfg);
    let mut scopes = vec![(Scope::Raw, "importance_raw.csv")];
    if mcfg.use_conv {
        scopes.push((Scope::ConvByRate, "importance_conv.csv"));
    }
    for (scope, file) in scopes {
        let m = interpret::aggregate_importance(&traces, scope)?;
        interpret::export_report(&m, &cfg.out.join(file), &fingerprint)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct GradcheckSummary {
    tolerance: f64,
    passed: bool,
    max_rel_err: f64,
    runs: Vec<GradCheckReport>,
}

fn gradcheck(cfg: &RunConfig) -> Result<ExitCode> {
    let gc = &cfg.gradcheck;
    let opts = GradCheckOptions {
        seq_len: gc.seq_len,
        ..GradCheckOptions::default()
    };
    let runs = (0..gc.seeds)
        .map(|i| training::gradient_check_with(&gc.model, seed::derive(cfg.seed, "gradcheck", &[i]), opts, |_| {}))
        .collect::<Result<Vec<_>>>()?;
    let max_rel_err = runs.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    let passed = max_rel_err < gc.tolerance;
    data::write_json(
        &cfg.out.join("gradcheck.json"),
        &GradcheckSummary {
            tolerance: gc.tolerance,
            passed,
            max_rel_err,
            runs,
        },
    )?;
    eprintln!(
        "gradient check: max relative error {max_rel_err:.3e} over {} seeds ({})",
        gc.seeds,
        if passed { "pass" } else { "FAIL" }
    );
    Ok(if passed { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
