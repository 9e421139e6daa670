//! Classification and distillation losses.
//!
//! All distillation variants reduce to the same building block: a tempered
//! KL term between the student's logits restricted to a class group and a
//! frozen teacher's logits over that group (see [`group_kd_loss`]). The
//! variants differ only in which groups they cover:
//!
//! - [`gkd_loss`]: one group containing every class the teacher knows.
//! - [`tkd_loss`]: one group per prior task, summed.
//! - [`fdkd_loss`]: every nonempty subset of prior tasks, summed.
//! - [`rdkd_loss`]: one subset drawn uniformly per call; its expectation over
//!   draws is `fdkd / (2^n - 1)`.
//!
//! Argument-order convention: the objective is `sum teacher * ln(teacher /
//! student)` — the teacher leads, which matches the usual distillation
//! direction and keeps gradients bounded for confident teachers. Setting
//! `literal-kl-direction` flips to the student-led order. No temperature^2
//! rescale is applied unless `tau2-rescale` is set.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pool::{ClassGroup, ClassId, TaskPool, TaskSpec};
use crate::rng::RunRng;
use crate::tensor::{softmax_rows_scaled, KlDirection, Tape, Tensor, Var, LOG_EPS};

/// Which distillation objective the trainer adds to the classification loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistillVariant {
    /// No distillation: plain fine-tuning (replay still applies if enabled).
    None,
    /// Global distillation over all old classes jointly.
    Gkd,
    /// Task-wise distillation: one term per prior task's own classes.
    Tkd,
    /// Full dense distillation over every nonempty prior-task subset.
    Fdkd,
    /// Random dense distillation: one subset sampled uniformly per step.
    Rdkd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default, deny_unknown_fields)]
pub struct DistillConfig {
    pub variant: DistillVariant,
    pub temperature: f64,
    /// Use the literal student-led KL order instead of the teacher-led one.
    pub literal_kl_direction: bool,
    /// Multiply distillation terms by temperature^2.
    pub tau2_rescale: bool,
    /// Restrict distillation to the new-task rows of each batch instead of
    /// the full batch (new + replay).
    pub kd_new_samples_only: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            variant: DistillVariant::Rdkd,
            temperature: 2.0,
            literal_kl_direction: false,
            tau2_rescale: false,
            kd_new_samples_only: false,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "distillation temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }

    fn direction(&self) -> KlDirection {
        if self.literal_kl_direction {
            KlDirection::StudentLed
        } else {
            KlDirection::TeacherLed
        }
    }

    fn rescale(&self) -> f64 {
        if self.tau2_rescale {
            self.temperature * self.temperature
        } else {
            1.0
        }
    }
}

/// Everything a distillation term needs besides the student logits node:
/// the two column registries, the frozen teacher logits for the batch, and
/// which batch rows participate.
pub struct KdContext<'a> {
    /// Student head column order.
    pub student_classes: &'a [ClassId],
    /// Teacher head column order (the old classes).
    pub teacher_classes: &'a [ClassId],
    /// Teacher logits for the same batch the student logits were built from,
    /// one column per teacher class.
    pub teacher_logits: &'a Tensor,
    /// Batch rows the distillation terms cover.
    pub rows: &'a [usize],
    pub config: &'a DistillConfig,
}

impl<'a> KdContext<'a> {
    fn columns_in(registry: &[ClassId], classes: &[ClassId], side: &str) -> Result<Vec<usize>> {
        classes
            .iter()
            .map(|c| {
                registry.iter().position(|r| r == c).ok_or_else(|| {
                    Error::Usage(format!("{} has no column for class {}", side, c))
                })
            })
            .collect()
    }
}

/// Row-wise tempered softmax: `softmax(logits / temperature)` per row.
pub fn softmax_temp(logits: &Tensor, temperature: f64) -> Result<Tensor> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Usage(format!("temperature must be positive, got {}", temperature)));
    }
    let (rows, cols) = logits.dims2()?;
    if cols == 0 {
        return Err(Error::Usage("softmax over zero columns".into()));
    }
    Tensor::matrix(rows, cols, softmax_rows_scaled(logits.data(), rows, cols, temperature))
}

/// Mean over rows of `sum_i p_i * ln(p_i / q_i)`, with probabilities floored
/// at `LOG_EPS` inside the logarithms. Zero entries of `p` contribute zero.
pub fn kl_div(p: &Tensor, q: &Tensor) -> Result<f64> {
    if p.shape() != q.shape() {
        return Err(Error::ShapeMismatch(format!(
            "kl_div shapes {:?} and {:?} differ",
            p.shape(),
            q.shape()
        )));
    }
    let (rows, cols) = p.dims2()?;
    for (name, t) in [("first", p), ("second", q)] {
        for r in 0..rows {
            let row = &t.data()[r * cols..(r + 1) * cols];
            if row.iter().any(|&v| v < -1e-12) {
                return Err(Error::Usage(format!(
                    "{} kl_div argument has a negative entry in row {}",
                    name, r
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::Usage(format!(
                    "{} kl_div argument row {} sums to {}, not 1",
                    name, r, sum
                )));
            }
        }
    }
    let mut total = 0.0;
    for (pv, qv) in p.data().iter().zip(q.data()) {
        if *pv > 0.0 {
            total += pv * (pv.max(LOG_EPS).ln() - qv.max(LOG_EPS).ln());
        }
    }
    Ok(total / rows as f64)
}

/// One tempered KL term over a single class group. This is the unit every
/// variant is assembled from; exposing it keeps gradient checks and variant
/// algebra honest (they exercise the exact code the trainer runs).
///
/// The teacher side is sliced out of `ctx.teacher_logits`, softened, and
/// enters the tape as a constant: gradients reach only the student logits.
pub fn group_kd_loss(
    tape: &mut Tape,
    student_logits: Var,
    ctx: &KdContext,
    group: &ClassGroup,
) -> Result<Var> {
    ctx.config.validate()?;
    if group.classes.is_empty() {
        return Err(Error::Usage("distillation group has no classes".into()));
    }
    let student_cols = KdContext::columns_in(ctx.student_classes, &group.classes, "student")?;
    let teacher_cols = KdContext::columns_in(ctx.teacher_classes, &group.classes, "teacher")?;
    let teacher_slice =
        ctx.teacher_logits.gather_rows(ctx.rows)?.gather_cols(&teacher_cols)?;
    let teacher_probs = softmax_temp(&teacher_slice, ctx.config.temperature)?;
    tape.kd_term(
        student_logits,
        teacher_probs.data().to_vec(),
        ctx.rows,
        &student_cols,
        ctx.config.temperature,
        ctx.config.rescale(),
        ctx.config.direction(),
    )
}

/// Global distillation: one KL over every teacher class jointly.
pub fn gkd_loss(tape: &mut Tape, student_logits: Var, ctx: &KdContext) -> Result<Var> {
    if ctx.teacher_classes.is_empty() {
        return Err(Error::Usage("global distillation needs at least one old class".into()));
    }
    let group = ClassGroup {
        member_tasks: Vec::new(),
        classes: {
            let mut c = ctx.teacher_classes.to_vec();
            c.sort_unstable();
            c
        },
    };
    group_kd_loss(tape, student_logits, ctx, &group)
}

/// Task-wise distillation: one KL per prior task over that task's own
/// classes, summed over all prior tasks.
pub fn tkd_loss(
    tape: &mut Tape,
    student_logits: Var,
    ctx: &KdContext,
    tasks: &[TaskSpec],
) -> Result<Var> {
    if tasks.is_empty() {
        return Err(Error::Usage("task-wise distillation needs at least one prior task".into()));
    }
    let mut total: Option<Var> = None;
    for task in tasks {
        let mut classes = task.classes.clone();
        classes.sort_unstable();
        let group = ClassGroup { member_tasks: vec![task.task_id], classes };
        let term = group_kd_loss(tape, student_logits, ctx, &group)?;
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    Ok(total.expect("tasks is nonempty"))
}

/// Full dense distillation: one KL per nonempty subset of the prior tasks,
/// summed in the pool's enumeration order. Inherits the pool's enumeration
/// limit; beyond it the pool refuses and the error suggests sampling.
pub fn fdkd_loss(
    tape: &mut Tape,
    student_logits: Var,
    ctx: &KdContext,
    pool: &TaskPool,
) -> Result<Var> {
    if pool.is_empty() {
        return Err(Error::Usage("dense distillation needs a nonempty task pool".into()));
    }
    let mut total: Option<Var> = None;
    for group in pool.enumerate_groups()? {
        let term = group_kd_loss(tape, student_logits, ctx, &group)?;
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    Ok(total.expect("pool is nonempty"))
}

/// Random dense distillation: one group drawn uniformly from the pool's
/// `2^n - 1` subsets, so the expectation over draws is `fdkd / (2^n - 1)`.
/// Returns the sampled group so the caller can derive its loss weight.
pub fn rdkd_loss(
    tape: &mut Tape,
    student_logits: Var,
    ctx: &KdContext,
    pool: &TaskPool,
    rng: &mut RunRng,
) -> Result<(Var, ClassGroup)> {
    if pool.is_empty() {
        return Err(Error::Usage("dense distillation needs a nonempty task pool".into()));
    }
    let group = pool.sample_group(rng)?;
    let term = group_kd_loss(tape, student_logits, ctx, &group)?;
    Ok((term, group))
}

/// Dispatch whichever distillation variant the context is configured with,
/// returning the loss and the class group that should set its adaptive
/// weight (the full old-class group for the deterministic variants, the
/// sampled group for the random one). Only the sampling variant draws from
/// `rng`, so swapping variants never perturbs other random streams.
pub fn variant_loss(
    tape: &mut Tape,
    student_logits: Var,
    ctx: &KdContext,
    pool: &TaskPool,
    rng: &mut RunRng,
) -> Result<(Var, ClassGroup)> {
    match ctx.config.variant {
        DistillVariant::None => {
            Err(Error::Usage("distillation variant 'none' has no loss term".into()))
        }
        DistillVariant::Gkd => Ok((gkd_loss(tape, student_logits, ctx)?, pool.full_group()?)),
        DistillVariant::Tkd => {
            Ok((tkd_loss(tape, student_logits, ctx, pool.tasks())?, pool.full_group()?))
        }
        DistillVariant::Fdkd => {
            Ok((fdkd_loss(tape, student_logits, ctx, pool)?, pool.full_group()?))
        }
        DistillVariant::Rdkd => rdkd_loss(tape, student_logits, ctx, pool, rng),
    }
}

/// Cross-entropy for one batch under the incremental protocol: rows labeled
/// with a class inside `new_columns` are scored over the new columns only,
/// every other row (replay exemplars of old classes) over all registered
/// classes. Both parts are divided by the full batch size, so the result is
/// the batch mean regardless of the mix.
pub fn classification_loss(
    tape: &mut Tape,
    logits: Var,
    registry: &[ClassId],
    new_columns: Range<usize>,
    labels: &[ClassId],
) -> Result<Var> {
    let batch = tape.value(logits).dims2()?.0;
    if labels.len() != batch {
        return Err(Error::Usage(format!(
            "{} labels for a batch of {}",
            labels.len(),
            batch
        )));
    }
    if new_columns.start >= new_columns.end || new_columns.end > registry.len() {
        return Err(Error::Usage(format!(
            "new-class column range {:?} invalid for {} registered classes",
            new_columns,
            registry.len()
        )));
    }
    let mut new_rows = Vec::new();
    let mut new_label_pos = Vec::new();
    let mut replay_rows = Vec::new();
    let mut replay_label_pos = Vec::new();
    for (row, label) in labels.iter().enumerate() {
        let col = registry.iter().position(|c| c == label).ok_or_else(|| {
            Error::Usage(format!("label {} has no head column", label))
        })?;
        if new_columns.contains(&col) {
            new_rows.push(row);
            new_label_pos.push(col - new_columns.start);
        } else {
            replay_rows.push(row);
            replay_label_pos.push(col);
        }
    }
    let divisor = batch as f64;
    let new_cols: Vec<usize> = new_columns.collect();
    let all_cols: Vec<usize> = (0..registry.len()).collect();
    let new_term = if new_rows.is_empty() {
        None
    } else {
        Some(tape.cross_entropy(logits, &new_rows, &new_cols, &new_label_pos, divisor)?)
    };
    let replay_term = if replay_rows.is_empty() {
        None
    } else {
        Some(tape.cross_entropy(logits, &replay_rows, &all_cols, &replay_label_pos, divisor)?)
    };
    match (new_term, replay_term) {
        (Some(a), Some(b)) => tape.add(a, b),
        (Some(a), None) => Ok(a),
        (None, Some(b)) => Ok(b),
        (None, None) => Err(Error::Usage("classification loss over an empty batch".into())),
    }
}

/// Scalar values of a composed step loss, for logging.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub classification: f64,
    pub distillation: f64,
    pub lambda: f64,
}

/// A composed step loss: the tape node to run backward from plus the scalar
/// breakdown.
pub struct ComposedLoss {
    pub var: Var,
    pub breakdown: LossBreakdown,
}

/// `total = classification + lambda * distillation`. With no distillation
/// term (or a zero weight) the classification node is returned untouched, so
/// a zero-weight run is structurally identical to plain fine-tuning.
pub fn total_loss(
    tape: &mut Tape,
    classification: Var,
    distillation: Option<Var>,
    lambda: f64,
) -> Result<ComposedLoss> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Usage(format!(
            "distillation weight must be non-negative and finite, got {}",
            lambda
        )));
    }
    let cls = tape.scalar_value(classification)?;
    let (var, kd) = match distillation {
        Some(kd_var) if lambda > 0.0 => {
            let total = tape.add_scaled(classification, kd_var, lambda)?;
            (total, tape.scalar_value(kd_var)?)
        }
        Some(kd_var) => (classification, tape.scalar_value(kd_var)?),
        None => (classification, 0.0),
    };
    let total = tape.scalar_value(var)?;
    debug_assert!(
        (total - (cls + lambda * kd)).abs() <= 1e-9,
        "loss breakdown drifted: {} vs {} + {} * {}",
        total,
        cls,
        lambda,
        kd
    );
    Ok(ComposedLoss {
        var,
        breakdown: LossBreakdown { total, classification: cls, distillation: kd, lambda },
    })
}
