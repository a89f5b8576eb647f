//! The full network: multi-scale causal convolution over the visit history,
//! recalibration of both the convolutional features and the raw record, a
//! GRU over the concatenated visit embeddings, and a per-visit sigmoid head.
//!
//! `forward` and `backward` share one taped evaluation so the gradient is
//! always taken through exactly the graph that produced the predictions,
//! dropout mask included.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::PatientSequence;
use crate::error::{Error, Result};
use crate::interpret::RecalibrationTrace;
use crate::layers::{self, ConvBank, GateActivation, GruCache, GruParams, SEParams, SeCache};
use crate::numeric::{dot, sigmoid, Matrix, Vector};

/// Lower/upper clamp applied to predicted probabilities inside the loss.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_features: usize,
    pub hidden: usize,
    pub filters: usize,
    pub kernel_len: usize,
    pub dilations: Vec<usize>,
    pub compress_ratio: usize,
    pub raw_activation: GateActivation,
    pub use_conv: bool,
    pub use_raw_recal: bool,
    pub dropout: f64,
    pub max_seq_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_features: 20,
            hidden: 64,
            filters: 64,
            kernel_len: 2,
            dilations: vec![1, 2, 3],
            compress_ratio: 2,
            raw_activation: GateActivation::Sigmoid,
            use_conv: true,
            use_raw_recal: true,
            dropout: 0.5,
            max_seq_len: 400,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_features", self.n_features),
            ("hidden", self.hidden),
            ("filters", self.filters),
            ("kernel_len", self.kernel_len),
            ("compress_ratio", self.compress_ratio),
            ("max_seq_len", self.max_seq_len),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::Config {
                    key: format!("model.{key}"),
                    msg: "must be >= 1".into(),
                });
            }
        }
        if self.dilations.is_empty() || self.dilations[0] == 0 || self.dilations.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config {
                key: "model.dilations".into(),
                msg: format!("must be non-empty, positive and strictly increasing, got {:?}", self.dilations),
            });
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config {
                key: "model.dropout".into(),
                msg: format!("must lie in [0, 1), got {}", self.dropout),
            });
        }
        Ok(())
    }

    /// Width of the concatenated convolution output, zero without the conv path.
    pub fn conv_width(&self) -> usize {
        if self.use_conv {
            self.filters * self.dilations.len()
        } else {
            0
        }
    }

    /// Width of the visit embedding fed to the GRU.
    pub fn embedding_width(&self) -> usize {
        self.n_features + self.conv_width()
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        let (conv, raw) = match variant {
            Variant::Gru => (false, None),
            Variant::RawSigmoid => (false, Some(GateActivation::Sigmoid)),
            Variant::Conv => (true, None),
            Variant::ConvRawSparsemax => (true, Some(GateActivation::Sparsemax)),
            Variant::ConvRawSigmoid => (true, Some(GateActivation::Sigmoid)),
        };
        self.use_conv = conv;
        self.use_raw_recal = raw.is_some();
        if let Some(act) = raw {
            self.raw_activation = act;
        }
        self
    }
}

/// Ablation variants. The conv path always carries its own sigmoid recalibration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Plain GRU on raw records.
    Gru,
    /// Raw-record recalibration (sigmoid), no convolution.
    RawSigmoid,
    /// Convolution with its recalibration, raw record passed through.
    Conv,
    /// Convolution plus sparsemax raw recalibration.
    ConvRawSparsemax,
    /// Full model: convolution plus sigmoid raw recalibration.
    ConvRawSigmoid,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Gru,
        Variant::RawSigmoid,
        Variant::Conv,
        Variant::ConvRawSparsemax,
        Variant::ConvRawSigmoid,
    ];
}

/// Every learnable tensor of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub conv: Vec<ConvBank>,
    pub conv_se: Option<SEParams>,
    pub raw_se: Option<SEParams>,
    pub gru: GruParams,
    pub out_weight: Matrix,
    pub out_bias: Vector,
}

/// Name and shape of one tensor in a [`ParamSet`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: [usize; 2],
    pub offset: usize,
}

impl ParamSet {
    /// All-zero parameters with the shapes implied by `config`.
    pub fn zeros(config: &ModelConfig) -> Self {
        let conv_width = config.conv_width();
        let conv = if config.use_conv {
            config
                .dilations
                .iter()
                .map(|&k| ConvBank::zeros(config.filters, config.kernel_len, config.n_features, k))
                .collect()
        } else {
            Vec::new()
        };
        ParamSet {
            conv,
            conv_se: config
                .use_conv
                .then(|| SEParams::zeros(conv_width, config.compress_ratio, GateActivation::Sigmoid)),
            raw_se: config
                .use_raw_recal
                .then(|| SEParams::zeros(config.n_features, config.compress_ratio, config.raw_activation)),
            gru: GruParams::zeros(config.hidden, config.embedding_width()),
            out_weight: Matrix::zeros(1, config.hidden),
            out_bias: Vector::zeros(1),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    /// Tensors in canonical order: `(name, [rows, cols], values)`.
    pub fn tensors(&self) -> Vec<(String, [usize; 2], &[f64])> {
        let mut out = Vec::new();
        for b in &self.conv {
            out.push((
                format!("conv.k{}.filters", b.dilation),
                [b.filters.rows(), b.filters.cols()],
                b.filters.as_slice(),
            ));
            out.push((format!("conv.k{}.bias", b.dilation), [b.bias.len(), 1], b.bias.as_slice()));
        }
        for (prefix, se) in [("conv_se", &self.conv_se), ("raw_se", &self.raw_se)] {
            if let Some(se) = se {
                out.push((format!("{prefix}.compress"), mat_shape(&se.compress), se.compress.as_slice()));
                out.push((format!("{prefix}.expand"), mat_shape(&se.expand), se.expand.as_slice()));
            }
        }
        let g = &self.gru;
        for (name, w, b) in [
            ("update", &g.w_update, &g.b_update),
            ("reset", &g.w_reset, &g.b_reset),
            ("cand", &g.w_cand, &g.b_cand),
        ] {
            out.push((format!("gru.w_{name}"), mat_shape(w), w.as_slice()));
            out.push((format!("gru.b_{name}"), [b.len(), 1], b.as_slice()));
        }
        out.push(("out.weight".into(), mat_shape(&self.out_weight), self.out_weight.as_slice()));
        out.push(("out.bias".into(), [1, 1], self.out_bias.as_slice()));
        out
    }

    /// Mutable view of the tensors, same order as [`ParamSet::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = Vec::new();
        for b in &mut self.conv {
            let k = b.dilation;
            out.push((format!("conv.k{k}.filters"), b.filters.as_mut_slice()));
            out.push((format!("conv.k{k}.bias"), &mut b.bias[..]));
        }
        for (prefix, se) in [("conv_se", &mut self.conv_se), ("raw_se", &mut self.raw_se)] {
            if let Some(se) = se {
                out.push((format!("{prefix}.compress"), se.compress.as_mut_slice()));
                out.push((format!("{prefix}.expand"), se.expand.as_mut_slice()));
            }
        }
        let g = &mut self.gru;
        out.push(("gru.w_update".into(), g.w_update.as_mut_slice()));
        out.push(("gru.b_update".into(), &mut g.b_update[..]));
        out.push(("gru.w_reset".into(), g.w_reset.as_mut_slice()));
        out.push(("gru.b_reset".into(), &mut g.b_reset[..]));
        out.push(("gru.w_cand".into(), g.w_cand.as_mut_slice()));
        out.push(("gru.b_cand".into(), &mut g.b_cand[..]));
        out.push(("out.weight".into(), self.out_weight.as_mut_slice()));
        out.push(("out.bias".into(), &mut self.out_bias[..]));
        out
    }

    /// Layout of the flattened parameter vector.
    pub fn layout(&self) -> Vec<TensorInfo> {
        let mut offset = 0;
        self.tensors()
            .into_iter()
            .map(|(name, shape, values)| {
                let info = TensorInfo { name, shape, offset };
                offset += values.len();
                info
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.tensors().iter().map(|(_, _, v)| v.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for (_, _, v) in self.tensors() {
            out.extend_from_slice(v);
        }
        out
    }

    /// Overwrites every tensor from a flat vector produced by [`ParamSet::flatten`].
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.len() {
            return Err(Error::shape("ParamSet::assign_flat", self.len(), flat.len()));
        }
        let mut offset = 0;
        for (_, t) in self.tensors_mut() {
            t.copy_from_slice(&flat[offset..offset + t.len()]);
            offset += t.len();
        }
        Ok(())
    }

    /// Name of the tensor holding flat coordinate `index`, with the index inside it.
    pub fn locate(&self, index: usize) -> Option<(String, usize)> {
        self.layout().into_iter().find_map(|info| {
            let n = info.shape[0] * info.shape[1];
            (index >= info.offset && index < info.offset + n).then(|| (info.name, index - info.offset))
        })
    }

    /// `self += scale · other`. Both sets must share a layout.
    pub(crate) fn add_scaled(&mut self, other: &ParamSet, scale: f64) {
        for ((_, dst), (_, _, src)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }

    pub fn write_to<W: Write>(&self, config: &ModelConfig, mut w: W) -> Result<()> {
        let header = ParamHeader {
            format: PARAM_FORMAT.into(),
            config: config.clone(),
            tensors: self.layout(),
            count: self.len(),
        };
        let json = serde_json::to_string(&header).map_err(|e| Error::invalid(e.to_string()))?;
        let io = |e| Error::io("<params>", e);
        w.write_all(json.as_bytes()).map_err(io)?;
        w.write_all(b"\n").map_err(io)?;
        for (_, _, values) in self.tensors() {
            for v in values {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    pub fn read_from<R: Read>(r: R) -> Result<(ModelConfig, ParamSet)> {
        let mut r = BufReader::new(r);
        let mut line = Vec::new();
        r.read_until(b'\n', &mut line).map_err(|e| Error::io("<params>", e))?;
        let header: ParamHeader =
            serde_json::from_slice(&line).map_err(|e| Error::invalid(format!("bad params header: {e}")))?;
        if header.format != PARAM_FORMAT {
            return Err(Error::invalid(format!("unsupported params format `{}`", header.format)));
        }
        header.config.validate()?;
        let mut params = ParamSet::zeros(&header.config);
        if params.layout() != header.tensors || params.len() != header.count {
            return Err(Error::invalid("params header layout does not match its model config"));
        }
        let mut bytes = vec![0u8; header.count * 8];
        r.read_exact(&mut bytes).map_err(|e| Error::io("<params>", e))?;
        let flat: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        params.assign_flat(&flat)?;
        Ok((header.config, params))
    }

    pub fn save(&self, config: &ModelConfig, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(config, BufWriter::new(f)).map_err(|e| relabel(e, path))
    }

    pub fn load(path: &Path) -> Result<(ModelConfig, ParamSet)> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        ParamSet::read_from(f).map_err(|e| relabel(e, path))
    }
}

const PARAM_FORMAT: &str = "adacare-params/1";

#[derive(Serialize, Deserialize)]
struct ParamHeader {
    format: String,
    config: ModelConfig,
    tensors: Vec<TensorInfo>,
    count: usize,
}

fn relabel(e: Error, path: &Path) -> Error {
    match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    }
}

fn mat_shape(m: &Matrix) -> [usize; 2] {
    [m.rows(), m.cols()]
}

/// Glorot-uniform weights, zero biases, one seeded stream in canonical tensor order.
pub fn init_params(config: &ModelConfig, seed: u64) -> ParamSet {
    let mut params = ParamSet::zeros(config);
    let shapes: Vec<[usize; 2]> = params.tensors().iter().map(|(_, s, _)| *s).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for ((name, values), [rows, cols]) in params.tensors_mut().into_iter().zip(shapes) {
        if is_bias(&name) {
            continue;
        }
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        for v in values.iter_mut() {
            *v = rng.random_range(-limit..limit);
        }
    }
    params
}

pub(crate) fn is_bias(name: &str) -> bool {
    name.ends_with(".bias") || name.starts_with("gru.b_")
}

/// Evaluation mode; training mode applies inverted dropout with a seeded mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train { seed: u64 },
    Eval,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub predictions: Vector,
    pub hidden: Vec<Vector>,
    pub trace: RecalibrationTrace,
}

pub fn forward(seq: &PatientSequence, params: &ParamSet, config: &ModelConfig, mode: Mode) -> Result<ForwardOutput> {
    let tape = Tape::record(&seq.visits, params, config, mode)?;
    let raw = match &tape.raw_se {
        Some(caches) => caches.iter().map(|c| c.weights.clone()).collect(),
        None => vec![Vector::filled(config.n_features, 1.0); tape.len()],
    };
    let conv = match &tape.conv_se {
        Some(caches) => caches.iter().map(|c| c.weights.clone()).collect(),
        None => vec![Vector::zeros(0); tape.len()],
    };
    Ok(ForwardOutput {
        predictions: tape.preds.iter().copied().collect(),
        hidden: tape.gru.into_iter().map(|c| c.h).collect(),
        trace: RecalibrationTrace {
            raw,
            conv,
            dilations: if config.use_conv { config.dilations.clone() } else { Vec::new() },
            filters: config.filters,
            feature_names: Vec::new(),
        },
    })
}

/// Masked mean binary cross-entropy with predictions clamped to `[1e-7, 1 − 1e-7]`.
pub fn bce_loss(preds: &[f64], labels: &[f64], mask: &[f64]) -> Result<f64> {
    if preds.len() != labels.len() || preds.len() != mask.len() {
        return Err(Error::shape(
            "bce_loss",
            format!("{} labels and mask entries", preds.len()),
            format!("{} labels, {} mask entries", labels.len(), mask.len()),
        ));
    }
    let count = mask.iter().filter(|&&m| m != 0.0).count();
    if count == 0 {
        return Err(Error::invalid("loss over an empty mask"));
    }
    let total: f64 = preds
        .iter()
        .zip(labels)
        .zip(mask)
        .filter(|(_, &m)| m != 0.0)
        .map(|((&p, &y), _)| {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / count as f64)
}

/// Loss and its gradient with respect to every parameter, by reverse-mode
/// accumulation through the recorded forward pass.
pub fn backward(seq: &PatientSequence, params: &ParamSet, config: &ModelConfig, mode: Mode) -> Result<(f64, ParamSet)> {
    let tape = Tape::record(&seq.visits, params, config, mode)?;
    let loss = bce_loss(&tape.preds, &seq.labels, &seq.mask)?;
    let grads = tape.backprop(&seq.visits, &seq.labels, &seq.mask, params, config);
    Ok((loss, grads))
}

/// Everything the backward pass needs from one forward evaluation.
struct Tape {
    conv_out: Option<Matrix>,
    conv_se: Option<Vec<SeCache>>,
    raw_se: Option<Vec<SeCache>>,
    gru: Vec<GruCache>,
    /// Scaled keep-mask per visit (`0` or `1/(1−p)`); absent in eval mode.
    dropout: Option<Vec<Vector>>,
    preds: Vec<f64>,
}

impl Tape {
    fn len(&self) -> usize {
        self.preds.len()
    }

    fn record(visits: &Matrix, params: &ParamSet, config: &ModelConfig, mode: Mode) -> Result<Tape> {
        let (t_len, width) = visits.shape();
        if width != config.n_features {
            return Err(Error::shape("forward", format!("{} features", config.n_features), format!("{width} features")));
        }
        if t_len == 0 {
            return Err(Error::invalid("patient sequence has no visits"));
        }
        if t_len > config.max_seq_len {
            return Err(Error::invalid(format!(
                "sequence of {t_len} visits exceeds max_seq_len {}",
                config.max_seq_len
            )));
        }
        if params.gru.input_width() != config.embedding_width() || params.gru.hidden() != config.hidden {
            return Err(Error::shape(
                "forward",
                format!("GRU for embedding width {}", config.embedding_width()),
                format!("GRU input width {}", params.gru.input_width()),
            ));
        }

        let conv_out = if config.use_conv {
            Some(layers::multi_scale_conv(visits, &params.conv)?)
        } else {
            None
        };
        let n_r = config.n_features;
        let emb = config.embedding_width();
        let mut embedding = vec![0.0; emb];

        let mut conv_se = conv_out.as_ref().map(|_| Vec::with_capacity(t_len));
        let mut raw_se = config.use_raw_recal.then(|| Vec::with_capacity(t_len));
        let mut gru = Vec::with_capacity(t_len);
        let mut preds = Vec::with_capacity(t_len);
        let mut dropout = match mode {
            Mode::Train { seed } if config.dropout > 0.0 => Some((ChaCha8Rng::seed_from_u64(seed), Vec::with_capacity(t_len))),
            _ => None,
        };
        let keep_scale = 1.0 / (1.0 - config.dropout);
        let mut h_prev = Vector::zeros(config.hidden);
        let mut dropped = vec![0.0; config.hidden];

        for t in 0..t_len {
            let r = visits.row(t);
            match (&mut raw_se, &params.raw_se) {
                (Some(caches), Some(p)) => {
                    let mut cache = SeCache::new(p);
                    cache.forward(p, r, &mut embedding[..n_r]);
                    debug_assert!(embedding[..n_r]
                        .iter()
                        .zip(cache.weights.iter().zip(r))
                        .all(|(e, (u, x))| e.to_bits() == (u * x).to_bits()));
                    caches.push(cache);
                }
                (None, _) => embedding[..n_r].copy_from_slice(r),
                (Some(_), None) => return Err(Error::invalid("raw recalibration enabled but its parameters are missing")),
            }
            if let (Some(caches), Some(c)) = (&mut conv_se, &conv_out) {
                let p = params
                    .conv_se
                    .as_ref()
                    .ok_or_else(|| Error::invalid("conv path enabled but its recalibration parameters are missing"))?;
                let mut cache = SeCache::new(p);
                cache.forward(p, c.row(t), &mut embedding[n_r..]);
                caches.push(cache);
            }

            let mut cache = GruCache::new(config.hidden, emb);
            cache.forward(&params.gru, &h_prev, &embedding);
            h_prev.copy_from_slice(&cache.h);

            let head_input: &[f64] = match &mut dropout {
                Some((rng, masks)) => {
                    let mask: Vector = (0..config.hidden)
                        .map(|_| if rng.random::<f64>() < config.dropout { 0.0 } else { keep_scale })
                        .collect();
                    for ((d, &h), &m) in dropped.iter_mut().zip(cache.h.iter()).zip(mask.iter()) {
                        *d = h * m;
                    }
                    masks.push(mask);
                    &dropped
                }
                None => &cache.h,
            };
            preds.push(sigmoid(dot(params.out_weight.row(0), head_input) + params.out_bias[0]));
            gru.push(cache);
        }

        Ok(Tape {
            conv_out,
            conv_se,
            raw_se,
            gru,
            dropout: dropout.map(|(_, m)| m),
            preds,
        })
    }

    fn backprop(&self, visits: &Matrix, labels: &[f64], mask: &[f64], params: &ParamSet, config: &ModelConfig) -> ParamSet {
        let mut grads = params.zeros_like();
        let t_len = self.len();
        let n_r = config.n_features;
        let count = mask.iter().filter(|&&m| m != 0.0).count().max(1) as f64;
        let mut d_conv = self.conv_out.as_ref().map(|c| Matrix::zeros(c.rows(), c.cols()));
        let mut d_h = Vector::zeros(config.hidden);
        let mut d_embedding = vec![0.0; config.embedding_width()];

        for t in (0..t_len).rev() {
            let p = self.preds[t];
            let d_logit = if mask[t] != 0.0 && p > PROB_CLAMP && p < 1.0 - PROB_CLAMP {
                (p - labels[t]) / count
            } else {
                0.0
            };
            let h = &self.gru[t].h;
            if d_logit != 0.0 {
                let w = params.out_weight.row(0);
                grads.out_bias[0] += d_logit;
                match &self.dropout {
                    Some(masks) => {
                        let m = &masks[t];
                        for i in 0..config.hidden {
                            grads.out_weight.as_mut_slice()[i] += d_logit * h[i] * m[i];
                            d_h[i] += d_logit * w[i] * m[i];
                        }
                    }
                    None => {
                        for i in 0..config.hidden {
                            grads.out_weight.as_mut_slice()[i] += d_logit * h[i];
                            d_h[i] += d_logit * w[i];
                        }
                    }
                }
            }

            d_embedding.fill(0.0);
            d_h = self.gru[t].backward(&params.gru, &d_h, &mut grads.gru, &mut d_embedding);

            if let (Some(caches), Some(p), Some(g)) = (&self.raw_se, &params.raw_se, &mut grads.raw_se) {
                caches[t].backward(p, visits.row(t), &d_embedding[..n_r], g, None);
            }
            if let (Some(caches), Some(p), Some(g), Some(c), Some(dc)) =
                (&self.conv_se, &params.conv_se, &mut grads.conv_se, &self.conv_out, &mut d_conv)
            {
                caches[t].backward(p, c.row(t), &d_embedding[n_r..], g, Some(dc.row_mut(t)));
            }
        }

        if let Some(dc) = &d_conv {
            let n_c = config.filters;
            for (i, (bank, g)) in params.conv.iter().zip(grads.conv.iter_mut()).enumerate() {
                layers::conv_backward(visits, bank, dc, i * n_c, g);
            }
        }
        grads
    }
}
