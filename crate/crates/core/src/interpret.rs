//! Recalibration traces and their aggregation into feature × outcome-group
//! importance matrices.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::numeric::Vector;

/// Recalibration weights captured during one forward pass, one entry per visit.
#[derive(Debug, Clone, PartialEq)]
pub struct RecalibrationTrace {
    /// Raw-record weights `u^r_t` (all ones when raw recalibration is off).
    pub raw: Vec<Vector>,
    /// Convolutional weights `u^c_t`, blocks of `filters` per dilation rate.
    pub conv: Vec<Vector>,
    pub dilations: Vec<usize>,
    pub filters: usize,
    /// Row labels for the raw scope; `feature_<i>` is used when empty.
    pub feature_names: Vec<String>,
}

impl RecalibrationTrace {
    pub fn with_feature_names(mut self, names: &[String]) -> Self {
        self.feature_names = names.to_vec();
        self
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scope {
    /// One row per raw feature.
    Raw,
    /// One row per dilation rate; conv weights mean-pooled within each block.
    ConvByRate,
}

impl FromStr for Scope {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(Scope::Raw),
            "conv-by-rate" | "conv" => Ok(Scope::ConvByRate),
            other => Err(Error::invalid(format!("unknown importance scope `{other}` (expected raw or conv-by-rate)"))),
        }
    }
}

/// Mean recalibration weight per row and outcome group. Columns are sorted
/// by group name; only groups with at least one visit appear.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceMatrix {
    pub scope: Scope,
    pub rows: Vec<String>,
    pub groups: Vec<String>,
    /// `cells[row][group]`
    pub cells: Vec<Vec<f64>>,
    /// Number of visits averaged into each column.
    pub counts: Vec<usize>,
}

impl ImportanceMatrix {
    pub fn cell(&self, row: &str, group: &str) -> Option<f64> {
        let r = self.rows.iter().position(|x| x == row)?;
        let g = self.groups.iter().position(|x| x == group)?;
        Some(self.cells[r][g])
    }

    /// Row labels of one column ordered by descending weight.
    pub fn ranking(&self, group: &str) -> Option<Vec<&str>> {
        let g = self.groups.iter().position(|x| x == group)?;
        let mut idx: Vec<usize> = (0..self.rows.len()).collect();
        idx.sort_by(|&a, &b| self.cells[b][g].total_cmp(&self.cells[a][g]));
        Some(idx.into_iter().map(|i| self.rows[i].as_str()).collect())
    }
}

fn weights_for<'a>(trace: &'a RecalibrationTrace, scope: Scope) -> &'a [Vector] {
    match scope {
        Scope::Raw => &trace.raw,
        Scope::ConvByRate => &trace.conv,
    }
}

pub fn aggregate_importance(traces: &[(RecalibrationTrace, String)], scope: Scope) -> Result<ImportanceMatrix> {
    let (first, _) = traces
        .first()
        .ok_or_else(|| Error::invalid("no traces to aggregate"))?;
    let rows: Vec<String> = match scope {
        Scope::Raw => {
            let n = first.raw.first().map_or(0, |v| v.len());
            if first.feature_names.len() == n {
                first.feature_names.clone()
            } else {
                (0..n).map(|i| format!("feature_{i}")).collect()
            }
        }
        Scope::ConvByRate => {
            if first.dilations.is_empty() {
                return Err(Error::invalid("conv-by-rate importance requested but the model has no convolution path"));
            }
            first.dilations.iter().map(|k| format!("dilation_{k}")).collect()
        }
    };
    let width = match scope {
        Scope::Raw => rows.len(),
        Scope::ConvByRate => first.dilations.len() * first.filters,
    };

    // group -> (row sums, visit count)
    let mut acc: BTreeMap<&str, (Vec<f64>, usize)> = BTreeMap::new();
    for (trace, group) in traces {
        if scope == Scope::ConvByRate && (trace.dilations != first.dilations || trace.filters != first.filters) {
            return Err(Error::shape(
                "aggregate_importance",
                format!("dilations {:?} x {} filters", first.dilations, first.filters),
                format!("dilations {:?} x {} filters", trace.dilations, trace.filters),
            ));
        }
        for w in weights_for(trace, scope) {
            if w.len() != width {
                return Err(Error::shape("aggregate_importance", format!("weights of width {width}"), w.len()));
            }
            let entry = acc.entry(group.as_str()).or_insert_with(|| (vec![0.0; rows.len()], 0));
            match scope {
                Scope::Raw => {
                    for (s, v) in entry.0.iter_mut().zip(w.iter()) {
                        *s += v;
                    }
                }
                Scope::ConvByRate => {
                    for (s, block) in entry.0.iter_mut().zip(w.chunks_exact(first.filters)) {
                        *s += block.iter().sum::<f64>() / first.filters as f64;
                    }
                }
            }
            entry.1 += 1;
        }
    }
    if acc.is_empty() {
        return Err(Error::invalid("traces contain no visits"));
    }

    let groups: Vec<String> = acc.keys().map(|g| g.to_string()).collect();
    let counts: Vec<usize> = acc.values().map(|(_, c)| *c).collect();
    let cells = (0..rows.len())
        .map(|r| acc.values().map(|(sums, c)| sums[r] / *c as f64).collect())
        .collect();
    Ok(ImportanceMatrix {
        scope,
        rows,
        groups,
        cells,
        counts,
    })
}

/// Hex SHA-256 of the model configuration's JSON form.
pub fn config_fingerprint(config: &ModelConfig) -> String {
    let json = serde_json::to_vec(config).expect("config serializes");
    let digest = Sha256::digest(&json);
    digest.iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

#[derive(Serialize)]
struct Sidecar<'a> {
    scope: Scope,
    rows: &'a [String],
    groups: &'a [String],
    counts: &'a [usize],
    config_fingerprint: &'a str,
}

/// Writes the matrix as CSV (17 significant digits) at `path` and a JSON
/// sidecar with counts and the config fingerprint next to it. Returns the
/// sidecar path.
pub fn export_report(matrix: &ImportanceMatrix, path: &Path, fingerprint: &str) -> Result<PathBuf> {
    let mut csv = String::from("feature");
    for g in &matrix.groups {
        csv.push(',');
        csv.push_str(g);
    }
    csv.push('\n');
    for (name, row) in matrix.rows.iter().zip(&matrix.cells) {
        csv.push_str(name);
        for v in row {
            let _ = write!(csv, ",{v:.16e}");
        }
        csv.push('\n');
    }
    fs::write(path, csv).map_err(|e| Error::io(path, e))?;

    let sidecar = path.with_extension("json");
    let body = serde_json::to_string_pretty(&Sidecar {
        scope: matrix.scope,
        rows: &matrix.rows,
        groups: &matrix.groups,
        counts: &matrix.counts,
        config_fingerprint: fingerprint,
    })
    .map_err(|e| Error::invalid(e.to_string()))?;
    fs::write(&sidecar, body + "\n").map_err(|e| Error::io(&sidecar, e))?;
    Ok(sidecar)
}
