//! Evaluation quantities and analysis probes.
//!
//! The central object is the lower-triangular [`AccuracyMatrix`]: after each
//! protocol step `t` the model is scored on every completed task `j <= t`
//! separately and on all seen classes jointly. Everything the summary
//! reports — average incremental accuracy, the base-task trace, order
//! aggregation — reads from this matrix. Accuracies are percentages.
//!
//! Two probes go beyond accuracy: a stability/plasticity split (old-class
//! vs new-class accuracy under the unified classifier) and a flat-minima
//! probe that measures how fast the training loss rises under elementwise
//! Gaussian parameter noise of increasing scale.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::ModelState;
use crate::pool::ClassId;
use crate::rng::RunRng;

/// `acc[t][j]` = accuracy (%) after step `t` on task `j`'s test data, for
/// `j <= t`; `seen[t]` = accuracy over all classes seen up to step `t`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    acc: Vec<Vec<f64>>,
    seen: Vec<f64>,
}

fn check_percent(context: &str, v: f64) -> Result<()> {
    if !(0.0..=100.0).contains(&v) {
        return Err(Error::Usage(format!("{} {} is outside [0, 100]", context, v)));
    }
    Ok(())
}

impl AccuracyMatrix {
    pub fn new() -> AccuracyMatrix {
        AccuracyMatrix::default()
    }

    /// Append step `t`'s row: one accuracy per completed task (`t + 1` of
    /// them) plus the seen-classes accuracy.
    pub fn push_step(&mut self, per_task: Vec<f64>, seen: f64) -> Result<()> {
        let t = self.acc.len();
        if per_task.len() != t + 1 {
            return Err(Error::Usage(format!(
                "step {} must report {} per-task accuracies, got {}",
                t,
                t + 1,
                per_task.len()
            )));
        }
        for (j, v) in per_task.iter().enumerate() {
            check_percent(&format!("accuracy on task {}", j), *v)?;
        }
        check_percent("seen-class accuracy", seen)?;
        self.acc.push(per_task);
        self.seen.push(seen);
        Ok(())
    }

    pub fn num_steps(&self) -> usize {
        self.seen.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seen.is_empty()
    }

    pub fn per_task(&self, step: usize) -> Option<&[f64]> {
        self.acc.get(step).map(Vec::as_slice)
    }

    pub fn task_accuracy(&self, step: usize, task: usize) -> Option<f64> {
        self.acc.get(step).and_then(|row| row.get(task)).copied()
    }

    pub fn seen(&self) -> &[f64] {
        &self.seen
    }
}

/// Mean over steps of the seen-classes accuracy.
pub fn avg_incremental_accuracy(matrix: &AccuracyMatrix) -> Result<f64> {
    if matrix.is_empty() {
        return Err(Error::Usage("accuracy matrix has no steps".into()));
    }
    Ok(matrix.seen.iter().sum::<f64>() / matrix.seen.len() as f64)
}

/// The base task's accuracy after every step: `[acc[t][0] for all t]`.
pub fn base_task_trace(matrix: &AccuracyMatrix) -> Result<Vec<f64>> {
    if matrix.is_empty() {
        return Err(Error::Usage("accuracy matrix has no steps".into()));
    }
    Ok(matrix.acc.iter().map(|row| row[0]).collect())
}

/// Top-1 accuracy (%) of the model on a dataset, argmax over every
/// registered class column.
pub fn accuracy_percent(model: &ModelState, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Usage("cannot score an empty dataset".into()));
    }
    let predictions = model.predict(&data.inputs)?;
    let correct = predictions
        .iter()
        .zip(&data.labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(100.0 * correct as u64 as f64 / data.len() as u64 as f64)
}

/// Old-class vs new-class accuracy after an incremental step, both under
/// argmax over all seen classes. Errors when `old_classes` is empty (there
/// is no split to report before the first increment).
pub fn stability_plasticity_split(
    model: &ModelState,
    test: &Dataset,
    old_classes: &[ClassId],
    new_classes: &[ClassId],
) -> Result<(f64, f64)> {
    if old_classes.is_empty() {
        return Err(Error::Usage(
            "stability/plasticity split needs at least one completed prior task".into(),
        ));
    }
    if new_classes.is_empty() {
        return Err(Error::Usage("stability/plasticity split needs new classes".into()));
    }
    let old = test.restricted_to(old_classes)?;
    let new = test.restricted_to(new_classes)?;
    if old.is_empty() || new.is_empty() {
        return Err(Error::Usage(format!(
            "test data covers {} old and {} new samples; both sides must be non-empty",
            old.len(),
            new.len()
        )));
    }
    Ok((accuracy_percent(model, &old)?, accuracy_percent(model, &new)?))
}

/// Mean cross-entropy of the model on a dataset, over all registered class
/// columns. This is the loss the flatness probe perturbs, and the quantity
/// the trainer reports as its final training loss.
pub fn mean_ce_loss(model: &ModelState, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Usage("cannot compute a loss over an empty dataset".into()));
    }
    let (_, logits) = model.forward_values(&data.inputs)?;
    let (rows, cols) = logits.dims2()?;
    let mut total = 0.0;
    for (row, label) in data.labels.iter().enumerate() {
        let col = model.column_of(*label).ok_or_else(|| {
            Error::Usage(format!("label {} has no head column", label))
        })?;
        let r = &logits.data()[row * cols..(row + 1) * cols];
        let max = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + r.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - r[col];
    }
    Ok(total / rows as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct FlatnessPoint {
    pub sigma: f64,
    pub mean_loss: f64,
    pub std_loss: f64,
}

/// Loss-vs-noise curve from [`perturbation_sensitivity`]. Sigmas ascend and
/// start at 0, so the first point is the unperturbed training loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlatnessCurve {
    pub points: Vec<FlatnessPoint>,
}

/// For each sigma, perturb every parameter elementwise by `N(0, sigma^2)`,
/// measure the mean training loss, and restore the original parameters
/// bit-exactly; repeat `draws_per_sigma` times and report mean and sample
/// std over draws. Noise is drawn in a fixed order (sigma, draw, parameter
/// tensor, element), so the curve is deterministic for a seeded rng.
pub fn perturbation_sensitivity(
    model: &mut ModelState,
    train: &Dataset,
    sigmas: &[f64],
    draws_per_sigma: usize,
    rng: &mut RunRng,
) -> Result<FlatnessCurve> {
    if sigmas.is_empty() || sigmas[0] != 0.0 {
        return Err(Error::Usage("sigma list must start at 0".into()));
    }
    if sigmas.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Usage("sigma list must be strictly increasing".into()));
    }
    if draws_per_sigma == 0 {
        return Err(Error::Usage("need at least one noise draw per sigma".into()));
    }

    let original: Vec<Vec<f64>> =
        model.param_tensors_mut().iter().map(|p| p.data().to_vec()).collect();

    let mut points = Vec::with_capacity(sigmas.len());
    for &sigma in sigmas {
        let mut losses = Vec::with_capacity(draws_per_sigma);
        for _ in 0..draws_per_sigma {
            {
                let mut params = model.param_tensors_mut();
                for param in params.iter_mut() {
                    for v in param.data_mut() {
                        *v += sigma * rng.sample::<f64, _>(rand_distr::StandardNormal);
                    }
                }
            }
            let loss = mean_ce_loss(model, train);
            {
                let mut params = model.param_tensors_mut();
                for (param, saved) in params.iter_mut().zip(&original) {
                    param.data_mut().copy_from_slice(saved);
                }
            }
            losses.push(loss?);
        }
        let mean = losses.iter().sum::<f64>() / losses.len() as f64;
        let std = if losses.len() < 2 {
            0.0
        } else {
            (losses.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>()
                / (losses.len() - 1) as f64)
                .sqrt()
        };
        points.push(FlatnessPoint { sigma, mean_loss: mean, std_loss: std });
    }

    // Restoration contract: the probe must leave the model untouched.
    for (param, saved) in model.param_tensors_mut().iter().zip(&original) {
        debug_assert_eq!(param.data(), saved.as_slice());
        if param.data() != saved.as_slice() {
            return Err(Error::NonFinite(
                "parameter restoration after the flatness probe failed".into(),
            ));
        }
    }
    Ok(FlatnessCurve { points })
}

/// Sample mean and sample variance (n − 1 divisor) of the average
/// incremental accuracy across runs. Needs at least two runs.
pub fn aggregate_orders(matrices: &[AccuracyMatrix]) -> Result<(f64, f64)> {
    if matrices.len() < 2 {
        return Err(Error::Usage(format!(
            "order aggregation needs at least 2 runs, got {}",
            matrices.len()
        )));
    }
    let values: Vec<f64> = matrices
        .iter()
        .map(avg_incremental_accuracy)
        .collect::<Result<Vec<_>>>()?;
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let variance = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
        / (values.len() - 1) as f64;
    Ok((mean, variance))
}
