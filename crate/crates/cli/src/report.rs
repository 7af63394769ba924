use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use atc_core::gradsuite::GradCaseReport;
use atc_core::model::Accuracy;
use atc_core::trainer::EpochMetrics;
use serde::{Deserialize, Serialize};

/// One line of a run report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub command: String,
    pub config: serde_json::Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub correct: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub total: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub param: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub best: Option<bool>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub metrics: Vec<EpochMetrics>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub gradcheck: Vec<GradCaseReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub wall_clock_secs: f64,
}

impl Report {
    pub fn new(command: &str, config: serde_json::Value) -> Self {
        Self {
            command: command.to_string(),
            config,
            dataset: None,
            accuracy: None,
            correct: None,
            total: None,
            mode: None,
            param: None,
            value: None,
            best: None,
            metrics: Vec::new(),
            gradcheck: Vec::new(),
            seed: None,
            wall_clock_secs: 0.0,
        }
    }

    pub fn with_accuracy(mut self, dataset: &str, acc: Accuracy) -> Self {
        self.dataset = Some(dataset.to_string());
        self.accuracy = Some(acc.fraction());
        self.correct = Some(acc.correct);
        self.total = Some(acc.total);
        self
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }

    /// Equal in every field but wall-clock.
    pub fn same_outcome(&self, other: &Report) -> bool {
        let strip = |r: &Report| Report {
            wall_clock_secs: 0.0,
            ..r.clone()
        };
        strip(self) == strip(other)
    }
}

/// Appends records, one JSON object per line.
pub fn append_reports(path: &Path, reports: &[Report]) -> std::io::Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    for r in reports {
        writeln!(f, "{}", r.to_line())?;
    }
    Ok(())
}

pub fn read_reports(path: &Path) -> anyhow::Result<Vec<Report>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
