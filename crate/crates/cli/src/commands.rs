//! The command bodies. Each one loads and validates every input file before
//! doing any work and writes its outputs only after all compute succeeded.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use atc_core::dataio::{
    read_embeddings, sample_episode, synth_dataset, write_embeddings, EmbeddingSet, Role, SynthConfig,
};
use atc_core::gradsuite::{run_suite, GradCaseReport};
use atc_core::model::{evaluate, zero_shot_accuracy, AtcModel};
use atc_core::numerics::Rng;
use atc_core::trainer::{encode_checkpoint, load_checkpoint, train, Checkpoint, EpisodeRecord};
use serde::Serialize;

use crate::options::{AblationMode, EvalConfig, RunConfig, SweepParam};
use crate::report::Report;
use crate::{NumericFailure, UsageError};

/// File names written by [`synth`].
pub const SYNTH_FILES: [&str; 3] = ["text.ate", "support.ate", "query.ate"];

fn echo<T: Serialize>(cfg: &T) -> serde_json::Value {
    serde_json::to_value(cfg).expect("configs serialize")
}

fn dataset_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn load(path: &Path) -> anyhow::Result<EmbeddingSet> {
    read_embeddings(path).with_context(|| format!("reading {}", path.display()))
}

/// Text embeddings, an optional labeled pool and any number of query sets,
/// checked for mutual consistency.
pub struct Inputs {
    pub text: EmbeddingSet,
    pub support: Option<EmbeddingSet>,
    pub queries: Vec<(String, EmbeddingSet)>,
}

impl Inputs {
    pub fn load(text: &Path, support: Option<&Path>, queries: &[PathBuf]) -> anyhow::Result<Self> {
        let text_set = load(text)?;
        text_set
            .expect_role(Role::Text)
            .with_context(|| format!("reading {}", text.display()))?;
        let support_set = support.map(load).transpose()?;
        let query_sets = queries
            .iter()
            .map(|p| Ok((dataset_name(p), load(p)?)))
            .collect::<anyhow::Result<Vec<_>>>()?;

        let (dim, classes) = (text_set.dim(), text_set.num_classes());
        let others = support_set
            .iter()
            .map(|s| ("support", s))
            .chain(query_sets.iter().map(|(n, s)| (n.as_str(), s)));
        for (name, set) in others {
            if set.dim() != dim {
                return Err(atc_core::Error::Validation(format!(
                    "{name}: dim {} does not match text dim {dim}",
                    set.dim()
                ))
                .into());
            }
            if set.num_classes() != classes {
                return Err(atc_core::Error::Validation(format!(
                    "{name}: {} classes, text has {classes}",
                    set.num_classes()
                ))
                .into());
            }
        }
        Ok(Self {
            text: text_set,
            support: support_set,
            queries: query_sets,
        })
    }

    fn support(&self) -> &EmbeddingSet {
        self.support.as_ref().expect("loaded with a support file")
    }
}

pub fn synth(cfg: &SynthConfig, out_dir: &Path) -> anyhow::Result<Report> {
    let start = Instant::now();
    let data = synth_dataset(cfg)?;
    std::fs::create_dir_all(out_dir)?;
    for (name, set) in SYNTH_FILES.iter().zip([&data.text, &data.support, &data.query]) {
        write_embeddings(set, out_dir.join(name))?;
    }
    let mut report = Report::new("synth", echo(cfg));
    report.seed = Some(cfg.seed);
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(report)
}

pub fn zeroshot(text: &Path, queries: &[PathBuf]) -> anyhow::Result<Vec<Report>> {
    let start = Instant::now();
    let inputs = Inputs::load(text, None, queries)?;
    let config = serde_json::json!({ "text": text, "queries": queries });
    let mut out = Vec::new();
    for (name, set) in &inputs.queries {
        let acc = zero_shot_accuracy(&inputs.text, set)?;
        out.push(Report::new("zeroshot", config.clone()).with_accuracy(name, acc));
    }
    stamp(&mut out, start, None);
    Ok(out)
}

fn stamp(reports: &mut [Report], start: Instant, seed: Option<u64>) {
    let secs = start.elapsed().as_secs_f64();
    for r in reports {
        r.wall_clock_secs = secs;
        r.seed = seed;
    }
}

/// A trained model with its checkpoint.
pub struct Trained {
    pub model: AtcModel,
    pub checkpoint: Checkpoint,
}

/// Samples the episode, builds the caches and trains. The run seed drives
/// the episode draw, the network initialization and the batch order.
pub fn fit(inputs: &Inputs, run: &RunConfig) -> anyhow::Result<Trained> {
    let support = inputs.support();
    let indices = sample_episode(support.labels(), inputs.text.num_classes(), &run.episode)?;
    let episode = support.subset(&indices, Role::Support)?;
    let mut rng = Rng::new(run.train.seed);
    let mut model = AtcModel::new(&inputs.text, &episode, &run.model, &mut rng)?;
    let mut checkpoint = train(&mut model, &episode, &run.train)?;
    checkpoint.meta.episode = Some(EpisodeRecord {
        spec: run.episode,
        indices,
    });
    Ok(Trained { model, checkpoint })
}

fn threads_or_default(threads: Option<usize>) -> usize {
    threads.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn eval_all(
    command: &str,
    config: &serde_json::Value,
    model: &AtcModel,
    inputs: &Inputs,
    threads: usize,
) -> anyhow::Result<Vec<Report>> {
    inputs
        .queries
        .iter()
        .map(|(name, set)| Ok(Report::new(command, config.clone()).with_accuracy(name, evaluate(model, set, threads)?)))
        .collect()
}

pub fn train_run(run: &RunConfig, threads: Option<usize>) -> anyhow::Result<(Trained, Vec<Report>)> {
    let start = Instant::now();
    run.validate()?;
    let inputs = Inputs::load(&run.text, Some(&run.support), &run.queries)?;
    let trained = fit(&inputs, run)?;
    let config = echo(run);
    let mut reports = eval_all("train", &config, &trained.model, &inputs, threads_or_default(threads))?;
    for r in &mut reports {
        r.metrics = trained.checkpoint.meta.metrics.clone();
    }
    if let Some(path) = &run.ckpt {
        let bytes = encode_checkpoint(&trained.checkpoint)?;
        std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))?;
    }
    stamp(&mut reports, start, Some(run.train.seed));
    Ok((trained, reports))
}

fn restore(cfg: &EvalConfig) -> anyhow::Result<(AtcModel, Inputs, u64)> {
    let ckpt = load_checkpoint(&cfg.ckpt).with_context(|| format!("reading {}", cfg.ckpt.display()))?;
    let inputs = Inputs::load(&cfg.text, Some(&cfg.support), &cfg.queries)?;
    let model = ckpt.restore(&inputs.text, inputs.support())?;
    Ok((model, inputs, ckpt.meta.train.seed))
}

pub fn eval(cfg: &EvalConfig, threads: Option<usize>) -> anyhow::Result<Vec<Report>> {
    let start = Instant::now();
    let (mut model, inputs, seed) = restore(cfg)?;
    if let Some(a) = cfg.alpha {
        model.alpha = a;
    }
    if let Some(b) = cfg.beta {
        model.beta = b;
    }
    let mut reports = eval_all("eval", &echo(cfg), &model, &inputs, threads_or_default(threads))?;
    stamp(&mut reports, start, Some(seed));
    Ok(reports)
}

/// One record per (dataset, value); the other coefficient is pinned at 1.
/// The best value per dataset is flagged (first one on ties).
pub fn sweep(
    cfg: &EvalConfig,
    param: SweepParam,
    values: &[f64],
    threads: Option<usize>,
) -> anyhow::Result<Vec<Report>> {
    let start = Instant::now();
    if values.is_empty() {
        return Err(UsageError("sweep needs at least one value".into()).into());
    }
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(UsageError(format!("sweep value {v} is not finite")).into());
    }
    let (base, inputs, seed) = restore(cfg)?;
    let threads = threads_or_default(threads);
    let mut reports = Vec::new();
    for (name, set) in &inputs.queries {
        let first = reports.len();
        for &v in values {
            let mut model = base.clone();
            (model.alpha, model.beta) = match param {
                SweepParam::Alpha => (v, 1.0),
                SweepParam::Beta => (1.0, v),
            };
            let config = serde_json::json!({
                "eval": cfg,
                "param": param.name(),
                "alpha": model.alpha,
                "beta": model.beta,
            });
            let mut r = Report::new("sweep", config).with_accuracy(name, evaluate(&model, set, threads)?);
            r.param = Some(param.name().to_string());
            r.value = Some(v);
            r.best = Some(false);
            reports.push(r);
        }
        let rows = &mut reports[first..];
        let best = rows
            .iter()
            .enumerate()
            .fold(0, |b, (i, r)| if r.correct > rows[b].correct { i } else { b });
        rows[best].best = Some(true);
    }
    stamp(&mut reports, start, Some(seed));
    Ok(reports)
}

/// Trains each variant from the same seed and evaluates it on every query
/// set.
pub fn ablate(run: &RunConfig, modes: &[AblationMode], threads: Option<usize>) -> anyhow::Result<Vec<Report>> {
    let start = Instant::now();
    if modes.is_empty() {
        return Err(UsageError("ablate needs at least one mode".into()).into());
    }
    run.validate()?;
    let inputs = Inputs::load(&run.text, Some(&run.support), &run.queries)?;
    let threads = threads_or_default(threads);
    let mut reports = Vec::new();
    for &mode in modes {
        let mut variant = run.clone();
        mode.apply(&mut variant.model);
        let trained = fit(&inputs, &variant)?;
        let mut rs = eval_all("ablate", &echo(&variant), &trained.model, &inputs, threads)?;
        for r in &mut rs {
            r.mode = Some(mode.name().to_string());
            r.metrics = trained.checkpoint.meta.metrics.clone();
        }
        reports.extend(rs);
    }
    stamp(&mut reports, start, Some(run.train.seed));
    Ok(reports)
}

pub fn gradcheck(seed: u64, count: u64, corrupt: bool) -> anyhow::Result<Report> {
    let start = Instant::now();
    if count == 0 {
        return Err(UsageError("--count must be >= 1".into()).into());
    }
    let seeds: Vec<u64> = (seed..seed + count).collect();
    let cases = run_suite(&seeds, corrupt)?;
    let mut report = Report::new(
        "gradcheck",
        serde_json::json!({ "seeds": seeds, "corrupt_backward": corrupt }),
    );
    report.gradcheck = cases;
    report.seed = Some(seed);
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(report)
}

/// One line per failing group naming its worst coordinate, or `None` when
/// every group passed.
pub fn gradcheck_failures(cases: &[GradCaseReport]) -> Option<NumericFailure> {
    let lines: Vec<String> = cases
        .iter()
        .flat_map(|c| {
            c.report.groups.iter().filter(|g| !g.passed).map(move |g| {
                format!(
                    "seed {} renorm {} activation {}: group {} worst coordinate {} rel err {:.3e} (analytic {:.6e}, numeric {:.6e})",
                    c.case.seed,
                    if c.case.renormalize { "on" } else { "off" },
                    c.case.activation,
                    g.name,
                    g.worst_index,
                    g.max_rel_err,
                    g.worst_analytic,
                    g.worst_numeric
                )
            })
        })
        .collect();
    (!lines.is_empty()).then(|| NumericFailure(lines.join("\n")))
}
