use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Rng;

/// A k-shot draw from a labeled pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub shots: usize,
    pub seed: u64,
    /// Consecutive same-label rows that make up one support image
    /// (augmented views of it).
    pub views_per_shot: usize,
}

impl EpisodeSpec {
    pub fn new(shots: usize, seed: u64) -> Self {
        Self {
            shots,
            seed,
            views_per_shot: 1,
        }
    }
}

/// Picks `shots` images per class without replacement.
///
/// Rows of each class are grouped, in file order, into images of
/// `views_per_shot` rows. The output is class-major; within a class the
/// images follow sampling order and each contributes all of its view rows.
/// Class `i` draws from child stream `i` of the seed.
pub fn sample_episode(labels: &[usize], num_classes: usize, spec: &EpisodeSpec) -> Result<Vec<usize>> {
    if spec.shots == 0 {
        return Err(Error::Config("shots per class must be >= 1".into()));
    }
    if spec.views_per_shot == 0 {
        return Err(Error::Config("views per shot must be >= 1".into()));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (row, &label) in labels.iter().enumerate() {
        let bucket = by_class.get_mut(label).ok_or(Error::Index {
            what: "classes",
            index: label,
            bound: num_classes,
        })?;
        bucket.push(row);
    }

    let views = spec.views_per_shot;
    let root = Rng::new(spec.seed);
    let mut out = Vec::with_capacity(num_classes * spec.shots * views);
    for (class, rows) in by_class.iter().enumerate() {
        if rows.len() % views != 0 {
            return Err(Error::Validation(format!(
                "class {class} has {} rows, not a multiple of {views} views",
                rows.len()
            )));
        }
        let images = rows.len() / views;
        if images < spec.shots {
            return Err(Error::InsufficientData {
                class,
                available: images,
                required: spec.shots,
            });
        }
        let mut rng = root.child(class as u64);
        for image in rng.sample_indices(images, spec.shots) {
            out.extend_from_slice(&rows[image * views..(image + 1) * views]);
        }
    }
    Ok(out)
}
