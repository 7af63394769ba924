use serde::{Deserialize, Serialize};

use super::{EmbeddingSet, Role};
use crate::error::{Error, Result};
use crate::numerics::{normalize_in_place, Matrix, Rng, NORM_EPS};

/// Parameters of the synthetic embedding generator.
///
/// Each class gets a random unit prototype. Text rows are noisy prototypes
/// (`text_noise`), support and query rows are noisier ones (`spread`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub dim: usize,
    pub shots: usize,
    pub queries_per_class: usize,
    pub spread: f64,
    pub text_noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 10,
            dim: 64,
            shots: 16,
            queries_per_class: 50,
            spread: 0.35,
            text_noise: 0.1,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::Config(format!("dim must be >= 2, got {}", self.dim)));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            )));
        }
        if !(self.spread >= 0.0 && self.spread.is_finite()) || !(self.text_noise >= 0.0 && self.text_noise.is_finite())
        {
            return Err(Error::Config("spread and text_noise must be finite and >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub text: EmbeddingSet,
    pub support: EmbeddingSet,
    pub query: EmbeddingSet,
}

fn gaussian_unit(rng: &mut Rng, dim: usize) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        if normalize_in_place(&mut v, NORM_EPS) {
            return v;
        }
    }
}

fn noisy_rows(rng: &mut Rng, prototypes: &[Vec<f64>], per_class: usize, noise: f64) -> (Matrix, Vec<usize>) {
    let dim = prototypes[0].len();
    let mut data = Vec::with_capacity(prototypes.len() * per_class * dim);
    let mut labels = Vec::with_capacity(prototypes.len() * per_class);
    for (class, proto) in prototypes.iter().enumerate() {
        for _ in 0..per_class {
            let mut row: Vec<f64> = proto.iter().map(|&p| p + noise * rng.normal()).collect();
            if !normalize_in_place(&mut row, NORM_EPS) {
                row.clone_from(proto);
            }
            data.extend(row);
            labels.push(class);
        }
    }
    (Matrix::from_vec(labels.len(), dim, data).unwrap(), labels)
}

/// Generates text, support and query sets, class-major, already rounded to
/// storage precision (so writing and re-reading them is lossless).
///
/// Prototypes, text, support and queries draw from separate child streams of
/// `seed`, so changing `queries_per_class` does not move the support rows.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let root = Rng::new(cfg.seed);
    let mut proto_rng = root.child(0);
    let prototypes: Vec<Vec<f64>> = (0..cfg.num_classes)
        .map(|_| gaussian_unit(&mut proto_rng, cfg.dim))
        .collect();
    let names: Vec<String> = (0..cfg.num_classes).map(|i| format!("class_{i:03}")).collect();

    let (text_m, text_l) = noisy_rows(&mut root.child(1), &prototypes, 1, cfg.text_noise);
    let (sup_m, sup_l) = noisy_rows(&mut root.child(2), &prototypes, cfg.shots, cfg.spread);
    let (qry_m, qry_l) = noisy_rows(&mut root.child(3), &prototypes, cfg.queries_per_class, cfg.spread);

    let build =
        |m, l, role| -> Result<EmbeddingSet> { EmbeddingSet::new(m, l, names.clone(), role)?.to_storage_precision() };
    Ok(SynthData {
        text: build(text_m, text_l, Role::Text)?,
        support: build(sup_m, sup_l, Role::Support)?,
        query: build(qry_m, qry_l, Role::Query)?,
    })
}
