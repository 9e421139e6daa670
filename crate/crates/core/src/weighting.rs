//! Adaptive weighting of the distillation term.
//!
//! The weight applied to a distillation term is
//!
//! ```text
//! lambda = lambda_base * ratio * similarity
//! ratio      = sqrt(|old classes| / |new classes|)
//! similarity = || mean(old class means) - mean(new class means) ||_2
//! ```
//!
//! The ratio grows as the old side accumulates classes, shifting the balance
//! toward retention late in a sequence. The "similarity" factor is a
//! distance: the farther the new classes sit from the old ones in feature
//! space, the harder the old knowledge gets pulled back. Either factor can
//! be disabled independently, leaving `lambda_base` alone.
//!
//! Class statistics are mean feature vectors. With `normalize-features` set,
//! each feature vector is scaled to unit length before averaging, so the
//! class mean lives on (inside) the unit ball and distances are scale-free.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pool::ClassId;
use crate::tensor::{Tensor, NORM_EPS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default, deny_unknown_fields)]
pub struct WeightingConfig {
    pub lambda_base: f64,
    pub ratio_enabled: bool,
    pub similarity_enabled: bool,
    pub normalize_features: bool,
}

// Raw feature distances scale with the data and feed back into the loss, so
// the default works on the unit sphere, where the distance factor is bounded
// by 2; lambda_base 1 then keeps the whole weight within a small multiple of
// the classification term. Large published weights assume loss scales this
// small setup does not have.
impl Default for WeightingConfig {
    fn default() -> Self {
        WeightingConfig {
            lambda_base: 1.0,
            ratio_enabled: true,
            similarity_enabled: true,
            normalize_features: true,
        }
    }
}

impl WeightingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_base >= 0.0 && self.lambda_base.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "lambda-base must be non-negative and finite, got {}",
                self.lambda_base
            )));
        }
        Ok(())
    }
}

/// Mean feature vector of one class, plus how many samples produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub class: ClassId,
    pub mean_feature: Vec<f64>,
    pub count: usize,
}

/// Per-class mean features from a feature matrix and its row labels. With
/// `normalize` set, every row is scaled to unit length first (rows of norm
/// below [`NORM_EPS`] are left as-is rather than divided by ~0).
pub fn class_stats_from_features(
    features: &Tensor,
    labels: &[ClassId],
    normalize: bool,
) -> Result<BTreeMap<ClassId, ClassStats>> {
    let (rows, dim) = features.dims2()?;
    if labels.len() != rows {
        return Err(Error::Usage(format!(
            "{} labels for {} feature rows",
            labels.len(),
            rows
        )));
    }
    if rows == 0 {
        return Err(Error::Usage("cannot compute class statistics from zero rows".into()));
    }
    let mut sums: BTreeMap<ClassId, (Vec<f64>, usize)> = BTreeMap::new();
    for (row, label) in labels.iter().enumerate() {
        let mut v = features.data()[row * dim..(row + 1) * dim].to_vec();
        if normalize {
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > NORM_EPS {
                for x in &mut v {
                    *x /= norm;
                }
            }
        }
        let entry = sums.entry(*label).or_insert_with(|| (vec![0.0; dim], 0));
        for (acc, x) in entry.0.iter_mut().zip(&v) {
            *acc += x;
        }
        entry.1 += 1;
    }
    Ok(sums
        .into_iter()
        .map(|(class, (sum, count))| {
            let mean_feature = sum.into_iter().map(|s| s / count as f64).collect();
            (class, ClassStats { class, mean_feature, count })
        })
        .collect())
}

/// `sqrt(old_count / new_count)` over class counts.
pub fn ratio_term(old_count: usize, new_count: usize) -> Result<f64> {
    if old_count == 0 || new_count == 0 {
        return Err(Error::Usage(format!(
            "class-count ratio needs both sides nonempty, got {} old and {} new",
            old_count, new_count
        )));
    }
    Ok((old_count as f64 / new_count as f64).sqrt())
}

/// Euclidean distance between two summary vectors.
pub fn similarity_term(old_mean: &[f64], new_mean: &[f64]) -> Result<f64> {
    if old_mean.len() != new_mean.len() {
        return Err(Error::ShapeMismatch(format!(
            "summary vectors of length {} and {} are incomparable",
            old_mean.len(),
            new_mean.len()
        )));
    }
    if old_mean.is_empty() {
        return Err(Error::Usage("summary vectors are empty".into()));
    }
    Ok(old_mean
        .iter()
        .zip(new_mean)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt())
}

/// Unweighted mean of the per-class mean vectors (each class counts once,
/// regardless of how many samples produced its mean).
pub fn pooled_mean(stats: &[&ClassStats]) -> Result<Vec<f64>> {
    let dim = match stats.first() {
        None => return Err(Error::Usage("no class statistics to pool".into())),
        Some(s) => s.mean_feature.len(),
    };
    let mut out = vec![0.0; dim];
    for s in stats {
        if s.mean_feature.len() != dim {
            return Err(Error::ShapeMismatch(format!(
                "class {} has a {}-dim mean among {}-dim means",
                s.class,
                s.mean_feature.len(),
                dim
            )));
        }
        for (acc, x) in out.iter_mut().zip(&s.mean_feature) {
            *acc += x;
        }
    }
    for acc in &mut out {
        *acc /= stats.len() as f64;
    }
    Ok(out)
}

/// The full adaptive weight for one distillation term: `old` holds the
/// statistics of the classes the term protects, `new` those of the classes
/// currently being learned.
pub fn compute_lambda(
    config: &WeightingConfig,
    old: &[&ClassStats],
    new: &[&ClassStats],
) -> Result<f64> {
    config.validate()?;
    if old.is_empty() || new.is_empty() {
        return Err(Error::Usage(format!(
            "adaptive weighting needs classes on both sides, got {} old and {} new",
            old.len(),
            new.len()
        )));
    }
    let mut lambda = config.lambda_base;
    if config.ratio_enabled {
        lambda *= ratio_term(old.len(), new.len())?;
    }
    if config.similarity_enabled {
        lambda *= similarity_term(&pooled_mean(old)?, &pooled_mean(new)?)?;
    }
    if !lambda.is_finite() {
        return Err(Error::NonFinite(format!("distillation weight came out as {}", lambda)));
    }
    Ok(lambda)
}
