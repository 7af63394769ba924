//! Command-line arguments, config-file merging and the resolved run config.
//!
//! Every argument struct is also deserializable from a TOML file whose keys
//! are the long flag names (`--visual-mode` → `visual-mode`). Values given on
//! the command line win over the file.

use std::path::{Path, PathBuf};

use atc_core::caches::VisualMode;
use atc_core::dataio::{EpisodeSpec, SynthConfig};
use atc_core::model::{Activation, ModelConfig, TextMode};
use atc_core::trainer::TrainConfig;
use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::UsageError;

#[derive(Debug, Parser)]
#[command(
    name = "atc",
    version,
    about = "Two-branch cache classifier over precomputed embeddings"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic text/support/query triple.
    Synth(SynthArgs),
    /// Cosine zero-shot accuracy of the text embeddings.
    Zeroshot(ZeroshotArgs),
    /// Sample an episode, train, save a checkpoint and evaluate.
    Train(RunArgs),
    /// Evaluate a checkpoint, optionally overriding alpha/beta.
    Eval(EvalArgs),
    /// Evaluate a checkpoint over a range of alpha or beta values.
    Sweep(SweepArgs),
    /// Train and evaluate cache variants side by side.
    Ablate(AblateArgs),
    /// Finite-difference check of every trainable gradient.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Switch {
    On,
    Off,
}

impl Switch {
    pub fn is_on(self) -> bool {
        self == Switch::On
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepParam {
    Alpha,
    Beta,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Alpha => "alpha",
            SweepParam::Beta => "beta",
        }
    }

    pub fn default_values(self) -> Vec<f64> {
        match self {
            SweepParam::Alpha => vec![0.0, 0.5, 1.0, 1.5, 2.0],
            SweepParam::Beta => vec![1.0, 1.5, 2.0, 2.5, 3.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationMode {
    FixedText,
    AdaptiveText,
    FixedVisual,
    LinearVisual,
    BiasVisual,
}

impl AblationMode {
    pub const ALL: [AblationMode; 5] = [
        AblationMode::FixedText,
        AblationMode::AdaptiveText,
        AblationMode::FixedVisual,
        AblationMode::LinearVisual,
        AblationMode::BiasVisual,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationMode::FixedText => "fixed-text",
            AblationMode::AdaptiveText => "adaptive-text",
            AblationMode::FixedVisual => "fixed-visual",
            AblationMode::LinearVisual => "linear-visual",
            AblationMode::BiasVisual => "bias-visual",
        }
    }

    /// Applies the variant on top of a base config; the other branch is
    /// left as configured.
    pub fn apply(self, cfg: &mut ModelConfig) {
        match self {
            AblationMode::FixedText => cfg.text_mode = TextMode::Fixed,
            AblationMode::AdaptiveText => cfg.text_mode = TextMode::Adaptive,
            AblationMode::FixedVisual => cfg.visual_mode = VisualMode::Fixed,
            AblationMode::LinearVisual => cfg.visual_mode = VisualMode::Linear,
            AblationMode::BiasVisual => cfg.visual_mode = VisualMode::Biases,
        }
    }
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct SynthArgs {
    /// Directory receiving text.ate, support.ate and query.ate.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    /// Support rows per class.
    #[arg(long)]
    pub shots: Option<usize>,
    /// Query rows per class.
    #[arg(long)]
    pub queries: Option<usize>,
    /// Spread of samples around their class prototype.
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Perturbation of text embeddings away from the prototypes.
    #[arg(long)]
    pub text_noise: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// TOML file with defaults for any of the flags above.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct ZeroshotArgs {
    #[arg(long)]
    pub text: Option<PathBuf>,
    /// Query file; repeat for several datasets.
    #[arg(long)]
    pub query: Vec<PathBuf>,
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct RunArgs {
    #[arg(long)]
    pub text: Option<PathBuf>,
    /// Labeled pool the episode is sampled from.
    #[arg(long)]
    pub support: Option<PathBuf>,
    /// Query file; repeat for several datasets.
    #[arg(long)]
    pub query: Vec<PathBuf>,
    /// Checkpoint output path.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Images per class in the episode.
    #[arg(long)]
    pub shots: Option<usize>,
    /// Consecutive rows per support image.
    #[arg(long)]
    pub views: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub logit_scale: Option<f64>,
    /// Re-normalize cache rows after adding biases.
    #[arg(long, value_enum)]
    pub renorm: Option<Switch>,
    /// `linear` or `tip:<sharpness>`.
    #[arg(long)]
    pub activation: Option<String>,
    /// `fixed`, `linear` or `biases`.
    #[arg(long)]
    pub visual_mode: Option<String>,
    /// `fixed` or `adaptive`.
    #[arg(long)]
    pub text_mode: Option<String>,
    #[arg(long)]
    pub chunks: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Drop each training query's own cache row from its visual scores.
    #[arg(long, action = ArgAction::Set, num_args = 0..=1, default_missing_value = "true")]
    pub leave_self_out: Option<bool>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

/// The config file may carry a `mode` list next to the run keys.
#[derive(Debug, Clone, Default, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Variant to run; repeat for several. Defaults to all five.
    #[arg(long, value_enum)]
    pub mode: Vec<AblationMode>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub text: Option<PathBuf>,
    /// The pool the checkpoint's episode was sampled from.
    #[arg(long)]
    pub support: Option<PathBuf>,
    #[arg(long)]
    pub query: Vec<PathBuf>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct SweepArgs {
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub text: Option<PathBuf>,
    #[arg(long)]
    pub support: Option<PathBuf>,
    #[arg(long)]
    pub query: Vec<PathBuf>,
    #[arg(long, value_enum)]
    pub param: Option<SweepParam>,
    /// Comma-separated values; defaults depend on the parameter.
    #[arg(long, value_delimiter = ',')]
    pub values: Vec<f64>,
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct GradcheckArgs {
    /// First fixture seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of consecutive seeds.
    #[arg(long)]
    pub count: Option<u64>,
    #[arg(long, hide = true, action = ArgAction::Set, num_args = 0..=1, default_missing_value = "true")]
    pub corrupt_backward: Option<bool>,
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

pub fn load_table(path: &Path) -> anyhow::Result<toml::Table> {
    let text = std::fs::read_to_string(path)?;
    Ok(toml::from_str(&text).map_err(|e| UsageError(format!("config file {}: {e}", path.display())))?)
}

/// Overlays `flags` on `table`. A flag counts as set when it is not null and
/// not an empty list.
pub fn merge_table<T: Serialize + DeserializeOwned>(flags: &T, table: toml::Table) -> anyhow::Result<T> {
    let mut merged = serde_json::to_value(table)?;
    let (serde_json::Value::Object(base), serde_json::Value::Object(over)) =
        (&mut merged, serde_json::to_value(flags)?)
    else {
        unreachable!("tables and argument structs serialize to objects");
    };
    for (key, value) in over {
        let unset = value.is_null() || value.as_array().is_some_and(Vec::is_empty);
        if !unset {
            base.insert(key, value);
        }
    }
    serde_json::from_value(merged).map_err(|e| UsageError(format!("config file: {e}")).into())
}

pub fn merge_config<T: Serialize + DeserializeOwned + Clone>(flags: &T, config: Option<&Path>) -> anyhow::Result<T> {
    match config {
        Some(path) => merge_table(flags, load_table(path)?),
        None => Ok(flags.clone()),
    }
}

impl AblateArgs {
    pub fn resolve(&self) -> anyhow::Result<(RunArgs, Vec<AblationMode>)> {
        let mut table = match &self.run.config {
            Some(path) => load_table(path)?,
            None => toml::Table::new(),
        };
        let file_modes = table.remove("mode");
        let run = merge_table(&self.run, table)?;
        let modes = if !self.mode.is_empty() {
            self.mode.clone()
        } else if let Some(v) = file_modes {
            v.try_into::<Vec<AblationMode>>()
                .map_err(|e| UsageError(format!("config file mode: {e}")))?
        } else {
            AblationMode::ALL.to_vec()
        };
        Ok((run, modes))
    }
}

fn required(path: &Option<PathBuf>, flag: &str) -> anyhow::Result<PathBuf> {
    path.clone()
        .ok_or_else(|| UsageError(format!("--{flag} is required")).into())
}

fn nonempty(paths: &[PathBuf], flag: &str) -> anyhow::Result<Vec<PathBuf>> {
    if paths.is_empty() {
        return Err(UsageError(format!("at least one --{flag} is required")).into());
    }
    Ok(paths.to_vec())
}

fn parse<T: std::str::FromStr<Err = atc_core::Error>>(value: &Option<String>, default: T) -> anyhow::Result<T> {
    match value {
        Some(s) => s.parse().map_err(|e: atc_core::Error| UsageError(e.to_string()).into()),
        None => Ok(default),
    }
}

pub const DEFAULT_SHOTS: usize = 16;

/// Fully resolved inputs of a train or ablate run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub text: PathBuf,
    pub support: PathBuf,
    pub queries: Vec<PathBuf>,
    pub ckpt: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub episode: EpisodeSpec,
    pub train: TrainConfig,
    pub model: ModelConfig,
}

impl RunConfig {
    /// Defaults everywhere except the file paths. `seed` drives the episode
    /// draw, the network initialization and the batch order.
    pub fn new(text: PathBuf, support: PathBuf, queries: Vec<PathBuf>, seed: u64) -> Self {
        Self {
            text,
            support,
            queries,
            ckpt: None,
            report: None,
            episode: EpisodeSpec::new(DEFAULT_SHOTS, seed),
            train: TrainConfig {
                seed,
                ..TrainConfig::default()
            },
            model: ModelConfig::default(),
        }
    }

    pub fn from_args(a: &RunArgs) -> anyhow::Result<Self> {
        let seed = a.seed.unwrap_or(0);
        let mut run = RunConfig::new(
            required(&a.text, "text")?,
            required(&a.support, "support")?,
            nonempty(&a.query, "query")?,
            seed,
        );
        run.ckpt = a.ckpt.clone();
        run.report = a.report.clone();
        run.episode.shots = a.shots.unwrap_or(DEFAULT_SHOTS);
        run.episode.views_per_shot = a.views.unwrap_or(1);

        let t = &mut run.train;
        t.epochs = a.epochs.unwrap_or(t.epochs);
        t.learning_rate = a.lr.unwrap_or(t.learning_rate);
        t.batch_size = a.batch_size.unwrap_or(t.batch_size);
        t.weight_decay = a.weight_decay.unwrap_or(t.weight_decay);
        t.leave_self_out = a.leave_self_out.unwrap_or(t.leave_self_out);

        let m = &mut run.model;
        m.alpha = a.alpha.unwrap_or(m.alpha);
        m.beta = a.beta.unwrap_or(m.beta);
        m.logit_scale = a.logit_scale.unwrap_or(m.logit_scale);
        if let Some(sw) = a.renorm {
            m.renormalize_text = sw.is_on();
            m.renormalize_visual = sw.is_on();
        }
        m.activation = parse::<Activation>(&a.activation, m.activation)?;
        m.visual_mode = parse::<VisualMode>(&a.visual_mode, m.visual_mode)?;
        m.text_mode = parse::<TextMode>(&a.text_mode, m.text_mode)?;
        m.chunks = a.chunks.unwrap_or(m.chunks);
        m.hidden = a.hidden.unwrap_or(m.hidden);
        run.validate()?;
        Ok(run)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        let usage = |e: atc_core::Error| UsageError(e.to_string());
        self.train.validate().map_err(usage)?;
        self.model.validate().map_err(usage)?;
        if self.episode.shots == 0 || self.episode.views_per_shot == 0 {
            return Err(UsageError("--shots and --views must be >= 1".into()).into());
        }
        Ok(())
    }
}

impl SynthArgs {
    pub fn to_config(&self) -> anyhow::Result<SynthConfig> {
        let d = SynthConfig::default();
        let cfg = SynthConfig {
            num_classes: self.classes.unwrap_or(d.num_classes),
            dim: self.dim.unwrap_or(d.dim),
            shots: self.shots.unwrap_or(d.shots),
            queries_per_class: self.queries.unwrap_or(d.queries_per_class),
            spread: self.sigma.unwrap_or(d.spread),
            text_noise: self.text_noise.unwrap_or(d.text_noise),
            seed: self.seed.unwrap_or(d.seed),
        };
        cfg.validate().map_err(|e| UsageError(e.to_string()))?;
        Ok(cfg)
    }
}

/// Evaluation inputs shared by `eval` and `sweep`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub ckpt: PathBuf,
    pub text: PathBuf,
    pub support: PathBuf,
    pub queries: Vec<PathBuf>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
}

impl EvalConfig {
    pub fn from_args(a: &EvalArgs) -> anyhow::Result<Self> {
        Ok(Self {
            ckpt: required(&a.ckpt, "ckpt")?,
            text: required(&a.text, "text")?,
            support: required(&a.support, "support")?,
            queries: nonempty(&a.query, "query")?,
            alpha: a.alpha,
            beta: a.beta,
        })
    }
}

impl SweepArgs {
    pub fn resolve(&self) -> anyhow::Result<(EvalConfig, SweepParam, Vec<f64>)> {
        let eval = EvalConfig {
            ckpt: required(&self.ckpt, "ckpt")?,
            text: required(&self.text, "text")?,
            support: required(&self.support, "support")?,
            queries: nonempty(&self.query, "query")?,
            alpha: None,
            beta: None,
        };
        let param = self.param.ok_or_else(|| UsageError("--param is required".into()))?;
        let values = if self.values.is_empty() {
            param.default_values()
        } else {
            self.values.clone()
        };
        Ok((eval, param, values))
    }
}

impl ZeroshotArgs {
    pub fn resolve(&self) -> anyhow::Result<(PathBuf, Vec<PathBuf>)> {
        Ok((required(&self.text, "text")?, nonempty(&self.query, "query")?))
    }
}
