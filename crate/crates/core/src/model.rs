//! The fused two-branch head.
//!
//! For a unit query `f`:
//!
//! ```text
//! f1 = act(f . keys^T) . label_values       visual branch
//! f2 = f . adapt(P_txt, net(f))^T            textual branch
//! logits = scale * (alpha * f1 + beta * f2)
//! ```
//!
//! Training minimizes softmax cross-entropy of `logits`; gradients flow into
//! the network and the visual biases (or linear keys) only.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::caches::{
    adapt_textual_backward, adapt_textual_cache, build_textual_cache, build_visual_cache, TextualCache, VisualCache,
    VisualMode,
};
use crate::conditionnet::{
    condition_backward, condition_forward, init_condition_net, ConditionNetParams, NetShape, NetTape, DEFAULT_CHUNKS,
    DEFAULT_FORGET_BIAS, DEFAULT_HIDDEN,
};
use crate::dataio::{EmbeddingSet, Role};
use crate::error::{Error, Result};
use crate::numerics::{argmax, cross_entropy, dot, softmax, Matrix, ParamGroup, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    Linear,
    /// `exp(-sharpness * (1 - a))`
    TipExponential {
        sharpness: f64,
    },
}

impl Activation {
    #[inline]
    fn apply(self, a: f64) -> (f64, f64) {
        match self {
            Activation::Linear => (a, 1.0),
            Activation::TipExponential { sharpness } => {
                let v = (-sharpness * (1.0 - a)).exp();
                (v, sharpness * v)
            }
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Activation::Linear => f.write_str("linear"),
            Activation::TipExponential { sharpness } => write!(f, "tip:{sharpness}"),
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    /// `linear` or `tip:<sharpness>`.
    fn from_str(s: &str) -> Result<Self> {
        if s == "linear" {
            return Ok(Activation::Linear);
        }
        if let Some(rest) = s.strip_prefix("tip:") {
            let sharpness: f64 = rest
                .parse()
                .map_err(|_| Error::Config(format!("bad sharpness in {s:?}")))?;
            if !(sharpness.is_finite() && sharpness >= 0.0) {
                return Err(Error::Config(format!(
                    "sharpness must be finite and >= 0, got {sharpness}"
                )));
            }
            return Ok(Activation::TipExponential { sharpness });
        }
        Err(Error::Config(format!(
            "unknown activation {s:?} (expected linear or tip:<sharpness>)"
        )))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextMode {
    /// Bias pinned at zero; the network is neither run nor trained.
    Fixed,
    Adaptive,
}

impl fmt::Display for TextMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TextMode::Fixed => "fixed",
            TextMode::Adaptive => "adaptive",
        })
    }
}

impl FromStr for TextMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(TextMode::Fixed),
            "adaptive" => Ok(TextMode::Adaptive),
            other => Err(Error::Config(format!("unknown text mode {other:?}"))),
        }
    }
}

/// Everything needed to rebuild a model around a pair of caches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub alpha: f64,
    pub beta: f64,
    pub logit_scale: f64,
    pub activation: Activation,
    pub text_mode: TextMode,
    pub visual_mode: VisualMode,
    pub renormalize_text: bool,
    pub renormalize_visual: bool,
    pub chunks: usize,
    pub hidden: usize,
    pub forget_bias: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            logit_scale: 100.0,
            activation: Activation::Linear,
            text_mode: TextMode::Adaptive,
            visual_mode: VisualMode::Biases,
            renormalize_text: true,
            renormalize_visual: true,
            chunks: DEFAULT_CHUNKS,
            hidden: DEFAULT_HIDDEN,
            forget_bias: DEFAULT_FORGET_BIAS,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(self.logit_scale.is_finite() && self.logit_scale > 0.0) {
            return Err(Error::Config(format!(
                "logit_scale must be > 0, got {}",
                self.logit_scale
            )));
        }
        Ok(())
    }
}

/// A tensor exported for checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

pub const VISUAL_BIASES: &str = "visual.biases";
pub const VISUAL_LINEAR: &str = "visual.linear";

#[derive(Debug, Clone, PartialEq)]
pub struct AtcModel {
    pub textual: TextualCache,
    pub visual: VisualCache,
    pub net: ConditionNetParams,
    pub alpha: f64,
    pub beta: f64,
    pub logit_scale: f64,
    pub activation: Activation,
    pub text_mode: TextMode,
    pub forget_bias: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub predicted_class: usize,
    pub f1: Vec<f64>,
    pub f2: Vec<f64>,
    pub s: Vec<f64>,
}

/// Gradients of the trainable groups; absent groups are frozen.
#[derive(Debug, Clone, PartialEq)]
pub struct AtcGrads {
    pub net: Option<ConditionNetParams>,
    pub visual: Option<Matrix>,
}

impl AtcGrads {
    /// Same order as [`AtcModel::trainable_tensors`].
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = Vec::new();
        if let Some(net) = &self.net {
            out.extend(net.tensors().into_iter().map(|(n, _, d)| (n.to_string(), d)));
        }
        if let Some(v) = &self.visual {
            out.push(("visual".to_string(), v.as_slice()));
        }
        out
    }

    pub fn flat(&self) -> Vec<f64> {
        self.tensors()
            .into_iter()
            .flat_map(|(_, d)| d.iter().copied())
            .collect()
    }

    fn scale(&mut self, k: f64) {
        if let Some(net) = &mut self.net {
            for (_, t) in net.tensors_mut() {
                t.iter_mut().for_each(|v| *v *= k);
            }
        }
        if let Some(v) = &mut self.visual {
            v.as_mut_slice().iter_mut().for_each(|x| *x *= k);
        }
    }
}

/// One training example: a query row, its class, and optionally the support
/// row to leave out of the visual affinities.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub query: &'a [f64],
    pub target: usize,
    pub exclude: Option<usize>,
}

/// Visual branch: per-class sum of activated affinities.
pub fn branch_visual(f_test: &[f64], cache: &VisualCache, activation: Activation) -> Result<Vec<f64>> {
    let keys = cache.keys().keys;
    check_query(f_test, keys.cols(), "branch_visual")?;
    Ok(visual_scores(f_test, &keys, cache.label_values(), activation, None).0)
}

/// Returns `(f1, activation derivatives)`.
fn visual_scores(
    f_test: &[f64],
    keys: &Matrix,
    label_values: &Matrix,
    activation: Activation,
    exclude: Option<usize>,
) -> (Vec<f64>, Vec<f64>) {
    let mut f1 = vec![0.0; label_values.cols()];
    let mut deriv = vec![0.0; keys.rows()];
    for (j, key) in keys.iter_rows().enumerate() {
        if Some(j) == exclude {
            continue;
        }
        let (phi, dphi) = activation.apply(dot(f_test, key));
        deriv[j] = dphi;
        for (o, &l) in f1.iter_mut().zip(label_values.row(j)) {
            *o += phi * l;
        }
    }
    (f1, deriv)
}

/// Textual branch: returns `f2`, the bias `s`, and the network tape when the
/// network ran.
pub fn branch_textual(
    f_test: &[f64],
    cache: &TextualCache,
    net: &ConditionNetParams,
    mode: TextMode,
) -> Result<(Vec<f64>, Vec<f64>, Option<NetTape>)> {
    check_query(f_test, cache.dim(), "branch_textual")?;
    let (s, tape) = match mode {
        TextMode::Adaptive => {
            let (s, tape) = condition_forward(net, f_test)?;
            (s, Some(tape))
        }
        TextMode::Fixed => (vec![0.0; cache.dim()], None),
    };
    let adapted = adapt_textual_cache(cache, &s)?;
    let f2 = adapted.matvec(f_test)?;
    Ok((f2, s, tape))
}

/// `scale * (alpha * f1 + beta * f2)`
pub fn fuse(f1: &[f64], f2: &[f64], alpha: f64, beta: f64, logit_scale: f64) -> Result<Vec<f64>> {
    if f1.len() != f2.len() {
        return Err(Error::shape(
            "fuse",
            format!("f1 of length {}", f1.len()),
            format!("f2 of length {}", f2.len()),
        ));
    }
    Ok(f1
        .iter()
        .zip(f2)
        .map(|(a, b)| logit_scale * (alpha * a + beta * b))
        .collect())
}

fn check_query(f_test: &[f64], dim: usize, op: &'static str) -> Result<()> {
    if f_test.len() != dim {
        return Err(Error::shape(
            op,
            format!("dim {dim}"),
            format!("query of length {}", f_test.len()),
        ));
    }
    Ok(())
}

impl AtcModel {
    /// Builds caches from the text set and an (already sampled, class-major)
    /// support set, and a fresh network from `rng`.
    pub fn new(text: &EmbeddingSet, support: &EmbeddingSet, cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        support.expect_role(Role::Support)?;
        if text.dim() != support.dim() {
            return Err(Error::Validation(format!(
                "text dim {} != support dim {}",
                text.dim(),
                support.dim()
            )));
        }
        let textual = build_textual_cache(text, cfg.renormalize_text)?;
        let visual = build_visual_cache(support, text.num_classes(), cfg.visual_mode, cfg.renormalize_visual)?;
        let shape = NetShape::new(text.dim(), cfg.chunks, cfg.hidden)?;
        let net = init_condition_net(shape, cfg.forget_bias, rng);
        Ok(Self {
            textual,
            visual,
            net,
            alpha: cfg.alpha,
            beta: cfg.beta,
            logit_scale: cfg.logit_scale,
            activation: cfg.activation,
            text_mode: cfg.text_mode,
            forget_bias: cfg.forget_bias,
        })
    }

    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            alpha: self.alpha,
            beta: self.beta,
            logit_scale: self.logit_scale,
            activation: self.activation,
            text_mode: self.text_mode,
            visual_mode: self.visual.mode(),
            renormalize_text: self.textual.renormalize,
            renormalize_visual: self.visual.renormalize,
            chunks: self.net.shape.chunks,
            hidden: self.net.shape.hidden,
            forget_bias: self.forget_bias,
        }
    }

    pub fn dim(&self) -> usize {
        self.textual.dim()
    }

    pub fn num_classes(&self) -> usize {
        self.textual.num_classes()
    }

    /// Precomputes the visual keys for a batch of predictions.
    pub fn prepare(&self) -> Prepared<'_> {
        Prepared {
            model: self,
            keys: self.visual.keys().keys,
        }
    }

    pub fn predict(&self, f_test: &[f64]) -> Result<Prediction> {
        self.prepare().predict(f_test)
    }

    /// Mean loss and mean gradients over `samples`.
    pub fn loss_and_grads(&self, samples: &[Sample<'_>]) -> Result<(f64, AtcGrads)> {
        let (loss, grads, _) = self.loss_grads_and_hits(samples)?;
        Ok((loss, grads))
    }

    /// [`loss_and_grads`](Self::loss_and_grads) plus the number of samples
    /// whose logits already rank the target first.
    pub fn loss_grads_and_hits(&self, samples: &[Sample<'_>]) -> Result<(f64, AtcGrads, usize)> {
        if samples.is_empty() {
            return Err(Error::Validation("empty batch".into()));
        }
        let prepared = self.prepare();
        let visual_trainable = self.visual.trainable().is_some();
        let adaptive = self.text_mode == TextMode::Adaptive;
        let mut d_keys = Matrix::zeros(prepared.keys.rows(), prepared.keys.cols());
        let mut net_grads = adaptive.then(|| self.net.zeros_like());
        let mut total = 0.0;
        let mut hits = 0;

        for sample in samples {
            check_query(sample.query, self.dim(), "loss_and_grads")?;
            let f = sample.query;
            let (f1, dphi) = visual_scores(
                f,
                &prepared.keys,
                self.visual.label_values(),
                self.activation,
                sample.exclude,
            );
            let (f2, s, tape) = branch_textual(f, &self.textual, &self.net, self.text_mode)?;
            let logits = fuse(&f1, &f2, self.alpha, self.beta, self.logit_scale)?;
            let (loss, d_logits) = cross_entropy(&logits, sample.target)?;
            total += loss;
            if argmax(&logits) == sample.target {
                hits += 1;
            }

            if visual_trainable {
                let d_f1: Vec<f64> = d_logits.iter().map(|g| self.logit_scale * self.alpha * g).collect();
                for (j, &dp) in dphi.iter().enumerate() {
                    if Some(j) == sample.exclude {
                        continue;
                    }
                    let d_a = dot(self.visual.label_values().row(j), &d_f1) * dp;
                    if d_a != 0.0 {
                        d_keys.row_mut(j).iter_mut().zip(f).for_each(|(d, x)| *d += d_a * x);
                    }
                }
            }
            if let (Some(acc), Some(tape)) = (net_grads.as_mut(), tape) {
                let mut d_adapted = Matrix::zeros(self.num_classes(), self.dim());
                for (i, g) in d_logits.iter().enumerate() {
                    let d_f2 = self.logit_scale * self.beta * g;
                    d_adapted.row_mut(i).iter_mut().zip(f).for_each(|(d, x)| *d = d_f2 * x);
                }
                let d_s = adapt_textual_backward(&self.textual, &s, &d_adapted);
                let (g, _) = condition_backward(&self.net, tape, &d_s)?;
                acc.add_scaled(&g, 1.0);
            }
        }

        let mut grads = AtcGrads {
            net: net_grads,
            visual: self.visual.keys_backward(&d_keys),
        };
        let n = samples.len() as f64;
        grads.scale(1.0 / n);
        Ok((total / n, grads, hits))
    }

    /// Mean loss only.
    pub fn loss(&self, samples: &[Sample<'_>]) -> Result<f64> {
        let prepared = self.prepare();
        let mut total = 0.0;
        for sample in samples {
            let logits = prepared.logits(sample.query, sample.exclude)?;
            total += cross_entropy(&logits, sample.target)?.0;
        }
        Ok(total / samples.len() as f64)
    }

    /// Trainable tensors, named, in optimizer order.
    pub fn trainable_tensors(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = Vec::new();
        if self.text_mode == TextMode::Adaptive {
            out.extend(self.net.tensors().into_iter().map(|(n, _, d)| (n.to_string(), d)));
        }
        if let Some(v) = self.visual.trainable() {
            out.push((self.visual_tensor_name().to_string(), v.as_slice()));
        }
        out
    }

    pub fn trainable_tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let name = self.visual_tensor_name();
        let mut out: Vec<(String, &mut [f64])> = Vec::new();
        if self.text_mode == TextMode::Adaptive {
            out.extend(self.net.tensors_mut().into_iter().map(|(n, d)| (n.to_string(), d)));
        }
        if let Some(v) = self.visual.trainable_mut() {
            out.push((name.to_string(), v.as_mut_slice()));
        }
        out
    }

    fn visual_tensor_name(&self) -> &'static str {
        match self.visual.mode() {
            VisualMode::Linear => VISUAL_LINEAR,
            _ => VISUAL_BIASES,
        }
    }

    pub fn param_groups(&self) -> Vec<ParamGroup> {
        let mut offset = 0;
        self.trainable_tensors()
            .into_iter()
            .map(|(name, d)| {
                let g = ParamGroup {
                    name,
                    offset,
                    len: d.len(),
                };
                offset += d.len();
                g
            })
            .collect()
    }

    pub fn flat_trainables(&self) -> Vec<f64> {
        self.trainable_tensors()
            .into_iter()
            .flat_map(|(_, d)| d.iter().copied())
            .collect()
    }

    pub fn set_flat_trainables(&mut self, flat: &[f64]) -> Result<()> {
        let total: usize = self.trainable_tensors().iter().map(|(_, d)| d.len()).sum();
        if flat.len() != total {
            return Err(Error::shape("set_flat_trainables", total, flat.len()));
        }
        let mut offset = 0;
        for (_, t) in self.trainable_tensors_mut() {
            t.copy_from_slice(&flat[offset..offset + t.len()]);
            offset += t.len();
        }
        Ok(())
    }

    /// Every stored parameter tensor (network always, visual when present).
    pub fn export_tensors(&self) -> Vec<NamedTensor> {
        let mut out: Vec<NamedTensor> = self
            .net
            .tensors()
            .into_iter()
            .map(|(name, shape, data)| NamedTensor {
                name: name.to_string(),
                shape,
                data: data.to_vec(),
            })
            .collect();
        if let Some(v) = self.visual.trainable() {
            out.push(NamedTensor {
                name: self.visual_tensor_name().to_string(),
                shape: vec![v.rows(), v.cols()],
                data: v.as_slice().to_vec(),
            });
        }
        out
    }

    /// Inverse of [`export_tensors`](Self::export_tensors); every tensor must
    /// be present with a matching shape.
    pub fn import_tensors(&mut self, tensors: &[NamedTensor]) -> Result<()> {
        let find = |name: &str| {
            tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| Error::Validation(format!("checkpoint lacks tensor {name:?}")))
        };
        let expected = self.export_tensors();
        if tensors.len() != expected.len() {
            return Err(Error::Validation(format!(
                "checkpoint has {} tensors, model expects {}",
                tensors.len(),
                expected.len()
            )));
        }
        for want in &expected {
            let got = find(&want.name)?;
            if got.shape != want.shape {
                return Err(Error::shape(
                    "import_tensors",
                    format!("{} {:?}", want.name, want.shape),
                    format!("{:?}", got.shape),
                ));
            }
        }
        for (name, dst) in self.net.tensors_mut() {
            dst.copy_from_slice(&find(name)?.data);
        }
        let vname = self.visual_tensor_name();
        if let Some(v) = self.visual.trainable_mut() {
            v.as_mut_slice().copy_from_slice(&find(vname)?.data);
        }
        Ok(())
    }
}

/// A model with its visual keys computed once.
pub struct Prepared<'a> {
    model: &'a AtcModel,
    keys: Matrix,
}

impl Prepared<'_> {
    pub fn logits(&self, f_test: &[f64], exclude: Option<usize>) -> Result<Vec<f64>> {
        let m = self.model;
        check_query(f_test, m.dim(), "predict")?;
        let (f1, _) = visual_scores(f_test, &self.keys, m.visual.label_values(), m.activation, exclude);
        let (f2, _, _) = branch_textual(f_test, &m.textual, &m.net, m.text_mode)?;
        fuse(&f1, &f2, m.alpha, m.beta, m.logit_scale)
    }

    pub fn predict(&self, f_test: &[f64]) -> Result<Prediction> {
        let m = self.model;
        check_query(f_test, m.dim(), "predict")?;
        let (f1, _) = visual_scores(f_test, &self.keys, m.visual.label_values(), m.activation, None);
        let (f2, s, _) = branch_textual(f_test, &m.textual, &m.net, m.text_mode)?;
        let logits = fuse(&f1, &f2, m.alpha, m.beta, m.logit_scale)?;
        let probabilities = softmax(&logits);
        Ok(Prediction {
            predicted_class: argmax(&logits),
            logits,
            probabilities,
            f1,
            f2,
            s,
        })
    }

    pub fn predict_class(&self, f_test: &[f64]) -> Result<usize> {
        Ok(argmax(&self.logits(f_test, None)?))
    }
}

/// Correct and total counts of a classifier over a labeled set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Accuracy {
    pub correct: usize,
    pub total: usize,
}

impl Accuracy {
    pub fn fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

/// Predicted class of every row of `set`, split over up to `threads` workers.
/// The result does not depend on `threads`.
pub fn predict_all(model: &AtcModel, set: &EmbeddingSet, threads: usize) -> Result<Vec<usize>> {
    if set.dim() != model.dim() {
        return Err(Error::Validation(format!(
            "query dim {} != model dim {}",
            set.dim(),
            model.dim()
        )));
    }
    let prepared = model.prepare();
    let rows = set.len();
    let threads = threads.clamp(1, rows.max(1));
    if threads == 1 {
        return set.features().iter_rows().map(|r| prepared.predict_class(r)).collect();
    }
    let chunk = rows.div_ceil(threads);
    let feats = set.features();
    let prepared = &prepared;
    let parts: Vec<Result<Vec<usize>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..rows)
            .step_by(chunk)
            .map(|start| {
                let end = (start + chunk).min(rows);
                scope.spawn(move || (start..end).map(|r| prepared.predict_class(feats.row(r))).collect())
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("prediction worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(rows);
    for part in parts {
        out.extend(part?);
    }
    Ok(out)
}

pub fn evaluate(model: &AtcModel, set: &EmbeddingSet, threads: usize) -> Result<Accuracy> {
    let preds = predict_all(model, set, threads)?;
    Ok(Accuracy {
        correct: preds.iter().zip(set.labels()).filter(|(p, l)| p == l).count(),
        total: preds.len(),
    })
}

/// Plain cosine zero-shot accuracy of `text` on `query`.
pub fn zero_shot_accuracy(text: &EmbeddingSet, query: &EmbeddingSet) -> Result<Accuracy> {
    if text.dim() != query.dim() {
        return Err(Error::Validation(format!(
            "text dim {} != query dim {}",
            text.dim(),
            query.dim()
        )));
    }
    let mut correct = 0;
    for (row, &label) in query.features().iter_rows().zip(query.labels()) {
        if crate::dataio::zero_shot_predict(text, row)? == label {
            correct += 1;
        }
    }
    Ok(Accuracy {
        correct,
        total: query.len(),
    })
}
