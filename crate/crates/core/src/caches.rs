//! The textual cache (class-text rows shifted by one shared per-query bias)
//! and the visual cache (support rows plus learnable per-row offsets).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataio::{EmbeddingSet, Role};
use crate::error::{Error, Result};
use crate::numerics::{l2_normalize_rows, norm, normalize_backward, one_hot, Matrix, NORM_EPS};

#[derive(Debug, Clone, PartialEq)]
pub struct TextualCache {
    p_txt: Matrix,
    pub renormalize: bool,
}

pub fn build_textual_cache(text: &EmbeddingSet, renormalize: bool) -> Result<TextualCache> {
    text.expect_role(Role::Text)?;
    Ok(TextualCache {
        p_txt: text.features().clone(),
        renormalize,
    })
}

impl TextualCache {
    pub fn p_txt(&self) -> &Matrix {
        &self.p_txt
    }

    pub fn num_classes(&self) -> usize {
        self.p_txt.rows()
    }

    pub fn dim(&self) -> usize {
        self.p_txt.cols()
    }
}

/// `P_txt + 1 s^T`, rows re-normalized when the cache asks for it.
///
/// A zero `s` returns `P_txt` itself: its rows are already unit.
pub fn adapt_textual_cache(cache: &TextualCache, s: &[f64]) -> Result<Matrix> {
    if s.len() != cache.dim() {
        return Err(Error::shape(
            "adapt_textual_cache",
            cache.p_txt.shape_str(),
            format!("bias of length {}", s.len()),
        ));
    }
    if s.iter().all(|&v| v == 0.0) {
        return Ok(cache.p_txt.clone());
    }
    let mut out = cache.p_txt.clone();
    for r in 0..out.rows() {
        out.row_mut(r).iter_mut().zip(s).for_each(|(x, b)| *x += b);
    }
    if cache.renormalize {
        out = l2_normalize_rows(&out, NORM_EPS).matrix;
    }
    Ok(out)
}

/// Gradient of a loss with respect to `s`, given its gradient with respect
/// to every row of the adapted cache.
pub fn adapt_textual_backward(cache: &TextualCache, s: &[f64], d_adapted: &Matrix) -> Vec<f64> {
    let mut d_s = vec![0.0; cache.dim()];
    for r in 0..cache.num_classes() {
        let upstream = d_adapted.row(r);
        if cache.renormalize {
            let shifted: Vec<f64> = cache.p_txt.row(r).iter().zip(s).map(|(p, b)| p + b).collect();
            let g = normalize_backward(&shifted, upstream, NORM_EPS);
            d_s.iter_mut().zip(&g).for_each(|(d, v)| *d += v);
        } else {
            d_s.iter_mut().zip(upstream).for_each(|(d, v)| *d += v);
        }
    }
    d_s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VisualMode {
    /// Support rows only, nothing trainable.
    Fixed,
    /// A free key matrix initialized from the support rows.
    Linear,
    /// Support rows plus zero-initialized additive biases.
    Biases,
}

impl fmt::Display for VisualMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VisualMode::Fixed => "fixed",
            VisualMode::Linear => "linear",
            VisualMode::Biases => "biases",
        })
    }
}

impl FromStr for VisualMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(VisualMode::Fixed),
            "linear" => Ok(VisualMode::Linear),
            "biases" => Ok(VisualMode::Biases),
            other => Err(Error::Config(format!(
                "unknown visual mode {other:?} (expected fixed, linear or biases)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisualCache {
    p_img: Matrix,
    label_values: Matrix,
    labels: Vec<usize>,
    mode: VisualMode,
    /// Biases (mode `biases`), key weights (mode `linear`), or `0 x dim`.
    trainable: Matrix,
    pub renormalize: bool,
}

/// Builds the cache from class-major support rows.
pub fn build_visual_cache(
    support: &EmbeddingSet,
    num_classes: usize,
    mode: VisualMode,
    renormalize: bool,
) -> Result<VisualCache> {
    if support.num_classes() != num_classes {
        return Err(Error::Validation(format!(
            "support set declares {} classes, expected {num_classes}",
            support.num_classes()
        )));
    }
    let mut counts = vec![0usize; num_classes];
    support.labels().iter().for_each(|&l| counts[l] += 1);
    if let Some(missing) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Validation(format!("class {missing} has no support rows")));
    }
    if support.labels().windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Validation("support rows must be class-major".into()));
    }
    let p_img = support.features().clone();
    let trainable = match mode {
        VisualMode::Fixed => Matrix::zeros(0, p_img.cols()),
        VisualMode::Biases => Matrix::zeros(p_img.rows(), p_img.cols()),
        VisualMode::Linear => p_img.clone(),
    };
    Ok(VisualCache {
        label_values: one_hot(support.labels(), num_classes)?,
        labels: support.labels().to_vec(),
        p_img,
        mode,
        trainable,
        renormalize,
    })
}

/// Effective keys plus how many of them are (near) zero rows.
#[derive(Debug, Clone)]
pub struct EffectiveCache {
    pub keys: Matrix,
    pub zero_rows: usize,
}

impl VisualCache {
    pub fn p_img(&self) -> &Matrix {
        &self.p_img
    }

    pub fn label_values(&self) -> &Matrix {
        &self.label_values
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn mode(&self) -> VisualMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.p_img.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.p_img.rows() == 0
    }

    pub fn num_classes(&self) -> usize {
        self.label_values.cols()
    }

    /// Biases or linear weights; `None` in fixed mode.
    pub fn trainable(&self) -> Option<&Matrix> {
        (self.mode != VisualMode::Fixed).then_some(&self.trainable)
    }

    pub fn trainable_mut(&mut self) -> Option<&mut Matrix> {
        (self.mode != VisualMode::Fixed).then_some(&mut self.trainable)
    }

    pub fn set_trainable(&mut self, m: Matrix) -> Result<()> {
        if self.mode == VisualMode::Fixed {
            return Err(Error::Contract("fixed visual cache has no trainable tensor".into()));
        }
        if m.shape() != self.p_img.shape() {
            return Err(Error::shape("set_trainable", self.p_img.shape_str(), m.shape_str()));
        }
        self.trainable = m;
        Ok(())
    }

    /// Keys the query is compared against, in any mode.
    pub fn keys(&self) -> EffectiveCache {
        match self.mode {
            VisualMode::Linear => EffectiveCache {
                zero_rows: count_zero_rows(&self.trainable),
                keys: self.trainable.clone(),
            },
            _ => effective_visual_cache(self).expect("non-linear mode"),
        }
    }

    /// Maps gradients on the keys to gradients on the trainable tensor.
    pub fn keys_backward(&self, d_keys: &Matrix) -> Option<Matrix> {
        match self.mode {
            VisualMode::Fixed => None,
            VisualMode::Linear => Some(d_keys.clone()),
            VisualMode::Biases if !self.renormalize => Some(d_keys.clone()),
            VisualMode::Biases => {
                let mut out = Matrix::zeros(d_keys.rows(), d_keys.cols());
                for r in 0..d_keys.rows() {
                    let shifted: Vec<f64> = self
                        .p_img
                        .row(r)
                        .iter()
                        .zip(self.trainable.row(r))
                        .map(|(p, b)| p + b)
                        .collect();
                    out.row_mut(r)
                        .copy_from_slice(&normalize_backward(&shifted, d_keys.row(r), NORM_EPS));
                }
                Some(out)
            }
        }
    }
}

fn count_zero_rows(m: &Matrix) -> usize {
    m.iter_rows().filter(|r| norm(r) <= NORM_EPS).count()
}

/// `P_img + visual_biases`, rows re-normalized when configured. Rows whose
/// bias is exactly zero are returned as the stored support row.
pub fn effective_visual_cache(cache: &VisualCache) -> Result<EffectiveCache> {
    match cache.mode {
        VisualMode::Linear => Err(Error::Contract(
            "linear visual mode has free keys and no bias decomposition".into(),
        )),
        VisualMode::Fixed => Ok(EffectiveCache {
            keys: cache.p_img.clone(),
            zero_rows: count_zero_rows(&cache.p_img),
        }),
        VisualMode::Biases => {
            let mut keys = cache.p_img.clone();
            let mut zero_rows = 0;
            for r in 0..keys.rows() {
                let bias = cache.trainable.row(r);
                if bias.iter().all(|&b| b == 0.0) {
                    continue;
                }
                let row = keys.row_mut(r);
                row.iter_mut().zip(bias).for_each(|(x, b)| *x += b);
                let n = norm(row);
                if n <= NORM_EPS {
                    zero_rows += 1;
                } else if cache.renormalize {
                    row.iter_mut().for_each(|x| *x /= n);
                }
            }
            Ok(EffectiveCache { keys, zero_rows })
        }
    }
}
