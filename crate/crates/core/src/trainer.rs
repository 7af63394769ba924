//! Adam training loop and the checkpoint codec.
//!
//! Checkpoint layout (little-endian):
//!
//! ```text
//! "ATCK"                     4 bytes
//! version                    u32 (= 1)
//! tensor count               u32
//! per tensor:
//!   name                     u16 byte length + UTF-8
//!   dtype                    u8 (1 = f64)
//!   rank                     u8
//!   dims                     rank x u64
//!   data                     prod(dims) x f64
//! trailer                    u32 byte length + JSON text
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::wire::{put_str_u16, ByteReader};
use crate::dataio::{EmbeddingSet, EpisodeSpec};
use crate::error::{Error, Result};
use crate::model::{AtcModel, ModelConfig, NamedTensor, Sample, VISUAL_BIASES, VISUAL_LINEAR};
use crate::numerics::Rng;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ATCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Upper bound; the effective size is `min(batch_size, episode size)`.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Decoupled, applied to the visual tensor only.
    pub weight_decay: f64,
    pub seed: u64,
    pub shuffle: bool,
    pub leave_self_out: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 256,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            seed: 0,
            shuffle: true,
            leave_self_out: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be >= 0, got {}",
                self.learning_rate
            )));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || self.adam_eps <= 0.0 {
            return Err(Error::Config(
                "adam betas must lie in [0, 1) and eps must be > 0".into(),
            ));
        }
        Ok(())
    }
}

/// First and second moments for one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update, with optional decoupled weight decay.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    cfg: &TrainConfig,
    decay: bool,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len() {
        return Err(Error::shape(
            "adam_step",
            format!("{} params", params.len()),
            format!("{} grads, {}/{} moments", grads.len(), state.m.len(), state.v.len()),
        ));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    let lr = cfg.learning_rate;
    let wd = if decay { cfg.weight_decay } else { 0.0 };
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        if wd != 0.0 {
            params[i] -= lr * wd * params[i];
        }
        params[i] -= lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

/// Which support rows the visual cache was built from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub spec: EpisodeSpec,
    pub indices: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub dim: usize,
    pub num_classes: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub episode: Option<EpisodeRecord>,
    pub metrics: Vec<EpochMetrics>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<NamedTensor>,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn from_model(model: &AtcModel, train: TrainConfig, metrics: Vec<EpochMetrics>) -> Self {
        Self {
            tensors: model.export_tensors(),
            meta: CheckpointMeta {
                dim: model.dim(),
                num_classes: model.num_classes(),
                model: model.config(),
                train,
                episode: None,
                metrics,
            },
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Rebuilds the model around caches built from `text` and the episode
    /// rows of `support` (or all of `support` when no episode is recorded).
    pub fn restore(&self, text: &EmbeddingSet, support: &EmbeddingSet) -> Result<AtcModel> {
        let meta = &self.meta;
        if text.dim() != meta.dim || support.dim() != meta.dim {
            return Err(Error::Validation(format!(
                "checkpoint dim {} does not match text dim {} / support dim {}",
                meta.dim,
                text.dim(),
                support.dim()
            )));
        }
        if text.num_classes() != meta.num_classes {
            return Err(Error::Validation(format!(
                "checkpoint has {} classes, text set has {}",
                meta.num_classes,
                text.num_classes()
            )));
        }
        let episode = match &meta.episode {
            Some(ep) => support.subset(&ep.indices, crate::dataio::Role::Support)?,
            None => support.clone(),
        };
        // network weights are overwritten below, the seed is irrelevant
        let mut model = AtcModel::new(text, &episode, &meta.model, &mut Rng::new(0))?;
        model.import_tensors(&self.tensors)?;
        Ok(model)
    }
}

/// FNV-1a over the bit patterns of everything training must not touch.
pub fn frozen_checksum(model: &AtcModel) -> u64 {
    const PRIME: u64 = 0x0000_0100_0000_01B3;
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    let mut feed = |v: f64| {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(PRIME);
        }
    };
    model.textual.p_txt().as_slice().iter().for_each(|&v| feed(v));
    model.visual.p_img().as_slice().iter().for_each(|&v| feed(v));
    model.visual.label_values().as_slice().iter().for_each(|&v| feed(v));
    for v in [model.alpha, model.beta, model.logit_scale] {
        feed(v);
    }
    h
}

/// Trains `model` in place on `queries` (usually the support rows the visual
/// cache was built from) and returns a checkpoint of the result.
///
/// Batches run sequentially, so the outcome is a pure function of the model,
/// the data and `cfg`.
pub fn train(model: &mut AtcModel, queries: &EmbeddingSet, cfg: &TrainConfig) -> Result<Checkpoint> {
    cfg.validate()?;
    if queries.is_empty() {
        return Err(Error::Validation("training episode is empty".into()));
    }
    if queries.dim() != model.dim() {
        return Err(Error::Validation(format!(
            "training dim {} != model dim {}",
            queries.dim(),
            model.dim()
        )));
    }
    if cfg.leave_self_out && queries.len() != model.visual.len() {
        return Err(Error::Validation(format!(
            "leave-self-out needs the {} cache rows as queries, got {}",
            model.visual.len(),
            queries.len()
        )));
    }

    let frozen = frozen_checksum(model);
    let mut states: Vec<AdamState> = model
        .trainable_tensors()
        .iter()
        .map(|(_, d)| AdamState::new(d.len()))
        .collect();
    let n = queries.len();
    let batch = cfg.batch_size.min(n);
    let root = Rng::new(cfg.seed);
    let mut metrics = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        if cfg.shuffle {
            root.child(epoch as u64).shuffle(&mut order);
        }
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for chunk in order.chunks(batch) {
            let samples: Vec<Sample<'_>> = chunk
                .iter()
                .map(|&i| Sample {
                    query: queries.features().row(i),
                    target: queries.labels()[i],
                    exclude: cfg.leave_self_out.then_some(i),
                })
                .collect();
            let (loss, grads, hits) = model.loss_grads_and_hits(&samples)?;
            loss_sum += loss * chunk.len() as f64;
            correct += hits;

            let grad_tensors = grads.tensors();
            let mut params = model.trainable_tensors_mut();
            if params.len() != grad_tensors.len() {
                return Err(Error::Contract("gradient groups do not match trainable tensors".into()));
            }
            for (((name, p), (_, g)), state) in params.iter_mut().zip(&grad_tensors).zip(&mut states) {
                let decay = name == VISUAL_BIASES || name == VISUAL_LINEAR;
                adam_step(p, g, state, cfg, decay)?;
            }
        }
        metrics.push(EpochMetrics {
            epoch: epoch + 1,
            loss: loss_sum / n as f64,
            accuracy: correct as f64 / n as f64,
        });
    }

    if frozen_checksum(model) != frozen {
        return Err(Error::Contract("frozen tensors changed during training".into()));
    }
    Ok(Checkpoint::from_model(model, cfg.clone(), metrics))
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let count = u32::try_from(ckpt.tensors.len()).map_err(|_| Error::Validation("too many tensors".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for t in &ckpt.tensors {
        let expected: usize = t.shape.iter().product();
        if expected != t.data.len() {
            return Err(Error::shape(
                "encode_checkpoint",
                format!("{} {:?}", t.name, t.shape),
                t.data.len(),
            ));
        }
        put_str_u16(&mut out, &t.name, "tensor name")?;
        out.push(DTYPE_F64);
        let rank = u8::try_from(t.shape.len()).map_err(|_| Error::Validation("tensor rank exceeds 255".into()))?;
        out.push(rank);
        for &d in &t.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let trailer = serde_json::to_vec(&ckpt.meta).map_err(|e| Error::Validation(format!("trailer: {e}")))?;
    let len = u32::try_from(trailer.len()).map_err(|_| Error::Validation("trailer too long".into()))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&trailer);
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = ByteReader::new(bytes);
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::codec(0, "bad magic, expected \"ATCK\""));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::codec(4, format!("unsupported version {version}")));
    }
    let count = r.u32("tensor count")?;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let name = r.str_u16("tensor name")?;
        let dtype_at = r.offset();
        let dtype = r.u8("dtype")?;
        if dtype != DTYPE_F64 {
            return Err(Error::codec(
                dtype_at,
                format!("unsupported dtype {dtype} for {name:?}"),
            ));
        }
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut elements: u64 = 1;
        for _ in 0..rank {
            let at = r.offset();
            let d = r.u64("dimension")?;
            elements = elements
                .checked_mul(d)
                .ok_or_else(|| Error::codec(at, "tensor size overflows"))?;
            shape.push(usize::try_from(d).map_err(|_| Error::codec(at, "dimension too large"))?);
        }
        let nbytes = r.ensure(elements, 8, "tensor data")?;
        let data = r
            .take(nbytes, "tensor data")?
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        tensors.push(NamedTensor { name, shape, data });
    }
    let len = r.u32("trailer length")? as u64;
    let trailer_at = r.offset();
    let nbytes = r.ensure(len, 1, "trailer")?;
    let trailer = r.take(nbytes, "trailer")?;
    r.finish()?;
    let meta: CheckpointMeta =
        serde_json::from_slice(trailer).map_err(|e| Error::codec(trailer_at, format!("bad trailer: {e}")))?;
    Ok(Checkpoint { tensors, meta })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_checkpoint(ckpt)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}
