//! Finite-difference verification of the full model gradient.
//!
//! Each case builds a small random instance (random caches, random network
//! weights including a non-zero output head, random visual biases) and
//! compares [`AtcModel::loss_and_grads`] with central differences of
//! [`AtcModel::loss`] over every trainable coordinate.

use serde::{Deserialize, Serialize};

use crate::caches::VisualMode;
use crate::dataio::{EmbeddingSet, Role};
use crate::error::Result;
use crate::model::{Activation, AtcModel, ModelConfig, Sample, TextMode};
use crate::numerics::{grad_check, normalize_in_place, GradReport, Matrix, Rng, NORM_EPS};

pub const GRAD_EPS: f64 = 1e-4;
pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCase {
    pub seed: u64,
    pub renormalize: bool,
    pub activation: Activation,
    pub visual_mode: VisualMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCaseReport {
    pub case: GradCase,
    pub report: GradReport,
}

/// The cases run by default for one seed: renormalization on/off crossed
/// with both visual activations.
pub fn default_cases(seed: u64) -> Vec<GradCase> {
    let mut out = Vec::new();
    for renormalize in [true, false] {
        for activation in [Activation::Linear, Activation::TipExponential { sharpness: 5.0 }] {
            out.push(GradCase {
                seed,
                renormalize,
                activation,
                visual_mode: VisualMode::Biases,
            });
        }
    }
    out
}

fn unit_rows(rng: &mut Rng, rows: usize, dim: usize) -> Matrix {
    let mut m = Matrix::zeros(rows, dim);
    for r in 0..rows {
        let row = m.row_mut(r);
        row.iter_mut().for_each(|v| *v = rng.normal());
        normalize_in_place(row, NORM_EPS);
    }
    m
}

/// A random model plus a batch of training samples (owned query rows).
pub struct GradFixture {
    pub model: AtcModel,
    pub queries: Vec<Vec<f64>>,
    pub targets: Vec<usize>,
    pub excludes: Vec<Option<usize>>,
}

impl GradFixture {
    pub fn samples(&self) -> Vec<Sample<'_>> {
        self.queries
            .iter()
            .zip(&self.targets)
            .zip(&self.excludes)
            .map(|((q, &t), &e)| Sample {
                query: q,
                target: t,
                exclude: e,
            })
            .collect()
    }
}

pub fn fixture(case: &GradCase) -> Result<GradFixture> {
    let (classes, shots, dim) = (3, 2, 8);
    let mut rng = Rng::new(case.seed);
    let names: Vec<String> = (0..classes).map(|i| format!("c{i}")).collect();
    let text = EmbeddingSet::new(
        unit_rows(&mut rng, classes, dim),
        (0..classes).collect(),
        names.clone(),
        Role::Text,
    )?;
    let labels: Vec<usize> = (0..classes).flat_map(|c| std::iter::repeat_n(c, shots)).collect();
    let support = EmbeddingSet::new(
        unit_rows(&mut rng, classes * shots, dim),
        labels.clone(),
        names,
        Role::Support,
    )?;
    let cfg = ModelConfig {
        activation: case.activation,
        visual_mode: case.visual_mode,
        text_mode: TextMode::Adaptive,
        renormalize_text: case.renormalize,
        renormalize_visual: case.renormalize,
        chunks: 2,
        hidden: 4,
        ..ModelConfig::default()
    };
    let mut model = AtcModel::new(&text, &support, &cfg, &mut rng)?;
    for v in model
        .net
        .out_w
        .as_mut_slice()
        .iter_mut()
        .chain(model.net.out_b.iter_mut())
    {
        *v = rng.uniform(-0.3, 0.3);
    }
    if let Some(t) = model.visual.trainable_mut() {
        for v in t.as_mut_slice() {
            *v += rng.uniform(-0.2, 0.2);
        }
    }

    let mut queries: Vec<Vec<f64>> = unit_rows(&mut rng, 4, dim).iter_rows().map(<[f64]>::to_vec).collect();
    let mut targets: Vec<usize> = (0..4).map(|i| i % classes).collect();
    let mut excludes = vec![None; 4];
    // one support row queried against the cache without itself
    queries.push(support.features().row(3).to_vec());
    targets.push(labels[3]);
    excludes.push(Some(3));
    Ok(GradFixture {
        model,
        queries,
        targets,
        excludes,
    })
}

/// Runs one case. With `corrupt`, the analytic gradient is deliberately
/// perturbed so the check must fail.
pub fn check_case(case: &GradCase, corrupt: bool) -> Result<GradReport> {
    let fx = fixture(case)?;
    let samples = fx.samples();
    let (_, grads) = fx.model.loss_and_grads(&samples)?;
    let mut analytic = grads.flat();
    if corrupt {
        analytic[0] += 0.05 * (1.0 + analytic[0].abs());
    }
    let params = fx.model.flat_trainables();
    let groups = fx.model.param_groups();
    let mut probe = fx.model.clone();
    grad_check(
        |theta| {
            probe.set_flat_trainables(theta).expect("flat length");
            probe.loss(&samples).unwrap_or(f64::NAN)
        },
        &params,
        &analytic,
        &groups,
        GRAD_EPS,
        GRAD_TOLERANCE,
    )
}

pub fn run_suite(seeds: &[u64], corrupt: bool) -> Result<Vec<GradCaseReport>> {
    let mut out = Vec::new();
    for &seed in seeds {
        for case in default_cases(seed) {
            let report = check_case(&case, corrupt)?;
            out.push(GradCaseReport { case, report });
        }
    }
    Ok(out)
}
