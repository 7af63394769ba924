//! Embedding sets, their binary codec, the synthetic generator and the
//! k-shot episode sampler.

mod codec;
mod episode;
mod synth;
pub(crate) mod wire;

pub use codec::{
    decode_embeddings, encode_embeddings, read_embeddings, read_embeddings_with_report, write_embeddings,
    EMBEDDING_MAGIC, EMBEDDING_VERSION,
};
pub use episode::{sample_episode, EpisodeSpec};
pub use synth::{synth_dataset, SynthConfig, SynthData};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{norm, Matrix, NORM_EPS};

/// Rows whose norm is within this distance of 1 are already unit at `f32`
/// storage precision and are kept bit-for-bit on load.
pub const STORAGE_UNIT_TOL: f64 = 1e-6;
/// Rows further than this from unit norm on load are counted as warnings.
pub const OFF_UNIT_WARN: f64 = 1e-3;
/// Tolerance of the unit-norm invariant after loading.
pub const UNIT_INVARIANT_TOL: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Text,
    Support,
    Query,
}

impl Role {
    pub fn to_byte(self) -> u8 {
        match self {
            Role::Text => 0,
            Role::Support => 1,
            Role::Query => 2,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Role::Text),
            1 => Some(Role::Support),
            2 => Some(Role::Query),
            _ => None,
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Text => "text",
            Role::Support => "support",
            Role::Query => "query",
        })
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(Role::Text),
            "support" => Ok(Role::Support),
            "query" => Ok(Role::Query),
            other => Err(Error::Config(format!("unknown role {other:?}"))),
        }
    }
}

/// What load-time normalization did to a set of raw rows.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LoadReport {
    /// Rows rescaled to unit norm.
    pub renormalized: usize,
    /// Rows that were more than [`OFF_UNIT_WARN`] away from unit norm.
    pub off_unit: usize,
}

/// Labeled matrix of unit-norm feature rows.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    features: Matrix,
    labels: Vec<usize>,
    class_names: Vec<String>,
    role: Role,
}

impl EmbeddingSet {
    /// Wraps rows that are already unit norm (within [`UNIT_INVARIANT_TOL`]).
    pub fn new(features: Matrix, labels: Vec<usize>, class_names: Vec<String>, role: Role) -> Result<Self> {
        let set = Self {
            features,
            labels,
            class_names,
            role,
        };
        set.validate()?;
        Ok(set)
    }

    /// Applies load-time normalization to raw rows, then validates.
    ///
    /// Rows already unit at storage precision are left untouched so that
    /// re-encoding a decoded file reproduces its bytes.
    pub fn from_raw(
        mut features: Matrix,
        labels: Vec<usize>,
        class_names: Vec<String>,
        role: Role,
    ) -> Result<(Self, LoadReport)> {
        let mut report = LoadReport::default();
        for r in 0..features.rows() {
            let row = features.row_mut(r);
            let n = norm(row);
            if !n.is_finite() {
                return Err(Error::Validation(format!("{role} row {r} is not finite")));
            }
            if n <= NORM_EPS {
                return Err(Error::Validation(format!("{role} row {r} has zero norm")));
            }
            if (n - 1.0).abs() > OFF_UNIT_WARN {
                report.off_unit += 1;
            }
            if (n - 1.0).abs() > STORAGE_UNIT_TOL {
                row.iter_mut().for_each(|x| *x /= n);
                report.renormalized += 1;
            }
        }
        Ok((Self::new(features, labels, class_names, role)?, report))
    }

    /// Rounds rows through `f32` and re-applies load normalization, giving
    /// exactly what a write/read round trip would produce.
    pub fn to_storage_precision(&self) -> Result<Self> {
        let data = self.features.as_slice().iter().map(|&v| v as f32 as f64).collect();
        let features = Matrix::from_vec(self.features.rows(), self.features.cols(), data)?;
        Ok(Self::from_raw(features, self.labels.clone(), self.class_names.clone(), self.role)?.0)
    }

    fn validate(&self) -> Result<()> {
        let c = self.class_names.len();
        if self.labels.len() != self.features.rows() {
            return Err(Error::Validation(format!(
                "{} labels for {} feature rows",
                self.labels.len(),
                self.features.rows()
            )));
        }
        if self.features.cols() == 0 {
            return Err(Error::Validation("feature dimension is zero".into()));
        }
        if let Some((i, &l)) = self.labels.iter().enumerate().find(|(_, &l)| l >= c) {
            return Err(Error::Validation(format!("row {i} has label {l} but only {c} classes")));
        }
        if self.role == Role::Text {
            if self.features.rows() != c {
                return Err(Error::Validation(format!(
                    "text set has {} rows for {c} classes",
                    self.features.rows()
                )));
            }
            if self.labels.iter().enumerate().any(|(i, &l)| i != l) {
                return Err(Error::Validation("text rows must be labeled 0..c in order".into()));
            }
        }
        for (r, row) in self.features.iter_rows().enumerate() {
            let n = norm(row);
            if !n.is_finite() || (n - 1.0).abs() > UNIT_INVARIANT_TOL {
                return Err(Error::Validation(format!(
                    "{} row {r} has norm {n}, expected unit",
                    self.role
                )));
            }
        }
        Ok(())
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Rows at `indices`, in that order, under a new role.
    pub fn subset(&self, indices: &[usize], role: Role) -> Result<Self> {
        let dim = self.dim();
        let mut data = Vec::with_capacity(indices.len() * dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Index {
                    what: "embedding rows",
                    index: i,
                    bound: self.len(),
                });
            }
            data.extend_from_slice(self.features.row(i));
            labels.push(self.labels[i]);
        }
        Self::new(
            Matrix::from_vec(indices.len(), dim, data)?,
            labels,
            self.class_names.clone(),
            role,
        )
    }

    /// Errors unless the set has the given role.
    pub fn expect_role(&self, role: Role) -> Result<()> {
        if self.role != role {
            return Err(Error::Validation(format!("expected a {role} set, got {}", self.role)));
        }
        Ok(())
    }
}

/// Zero-shot cosine classifier: argmax over `query . text_i`.
pub fn zero_shot_predict(text: &EmbeddingSet, query: &[f64]) -> Result<usize> {
    let scores = text.features().matvec(query)?;
    Ok(crate::numerics::argmax(&scores))
}
