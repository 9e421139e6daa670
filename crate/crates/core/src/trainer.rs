//! The class-incremental training protocol.
//!
//! A run is: train the base task with plain cross-entropy, then for each
//! increment — snapshot the model as the teacher *before* the head grows,
//! expand the head, and train on new-task batches mixed with replay
//! exemplars under `classification + lambda * distillation`. After every
//! task the pool, the exemplar store, and the per-class feature statistics
//! are updated, and the model is scored on every completed task.
//!
//! Reproducibility contract: all randomness flows through four named
//! ChaCha streams derived from the config seed — Init (parameter init and
//! head expansion), Data (epoch shuffles and replay draws), Group (random
//! group sampling). Streams are consumed in a fixed documented order, so a
//! config that merely *skips* a consumer (e.g. a variant that never samples
//! groups) leaves the other streams bit-identical. One run owns its state
//! exclusively; parallelism belongs one level up, across runs.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config::ProtocolConfig;
use crate::data::{Dataset, DatasetPair, TaskAssignment};
use crate::distill::{classification_loss, total_loss, variant_loss, DistillVariant, KdContext};
use crate::error::{Error, Result};
use crate::metrics::{
    accuracy_percent, mean_ce_loss, stability_plasticity_split, AccuracyMatrix,
};
use crate::model::{ModelSnapshot, ModelState};
use crate::optim::SgdOptimizer;
use crate::pool::{ClassId, TaskPool, TaskSpec};
use crate::replay::{replay_batch, update_store, ExemplarStore};
use crate::rng::{stream_rng, RunRng, Stream};
use crate::tensor::{Tape, Tensor};
use crate::weighting::{class_stats_from_features, compute_lambda, ClassStats, WeightingConfig};

/// The named random streams of one run. Constructed once per run and
/// threaded through every phase, so later tasks continue the streams
/// instead of restarting them.
pub struct RunRngs {
    pub init: RunRng,
    pub data: RunRng,
    pub group: RunRng,
}

impl RunRngs {
    pub fn for_seed(seed: u64) -> RunRngs {
        RunRngs {
            init: stream_rng(seed, Stream::Init),
            data: stream_rng(seed, Stream::Data),
            group: stream_rng(seed, Stream::Group),
        }
    }
}

/// Everything that persists across protocol steps.
pub struct TrainerState {
    pub model: ModelState,
    pub pool: TaskPool,
    pub store: ExemplarStore,
    /// Mean feature vectors per class, computed once at each task's
    /// completion and never refreshed.
    pub stats: BTreeMap<ClassId, ClassStats>,
}

/// One protocol step's record: what was learned, how the model scores on
/// every completed task, and the per-epoch loss traces. Wall time lives
/// only here (the run log), never in derived summaries, so summaries stay
/// bit-reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct StepRecord {
    pub step: usize,
    pub task_id: usize,
    pub new_classes: Vec<ClassId>,
    pub classes_seen: Vec<ClassId>,
    /// Accuracy (%) on each completed task's test split, task order.
    pub per_task_accuracy: Vec<f64>,
    /// Accuracy (%) over all seen classes jointly.
    pub seen_accuracy: f64,
    /// (old-class accuracy, new-class accuracy); absent for the base step.
    pub stability_plasticity: Option<(f64, f64)>,
    /// Per-epoch mean classification loss.
    pub epoch_cls_loss: Vec<f64>,
    /// Per-epoch mean distillation loss (0 when no distillation ran).
    pub epoch_kd_loss: Vec<f64>,
    /// Per-epoch mean distillation weight.
    pub epoch_lambda: Vec<f64>,
    pub wall_time_seconds: f64,
}

/// The full log of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct RunLog {
    pub steps: Vec<StepRecord>,
    /// Mean cross-entropy of the final model over the full training set —
    /// the anchor the flatness probe's sigma = 0 point must reproduce.
    pub final_train_loss: f64,
}

impl RunLog {
    /// Rebuild the evaluation matrix from the per-step records.
    pub fn accuracy_matrix(&self) -> Result<AccuracyMatrix> {
        let mut m = AccuracyMatrix::new();
        for step in &self.steps {
            m.push_step(step.per_task_accuracy.clone(), step.seen_accuracy)?;
        }
        Ok(m)
    }
}

/// A completed run: the log plus the final state (model, pool, store,
/// stats) for checkpointing and post-hoc probes.
pub struct RunOutput {
    pub log: RunLog,
    pub state: TrainerState,
}

fn mean_of(t: &[f64]) -> f64 {
    t.iter().sum::<f64>() / t.len().max(1) as f64
}

struct PhaseSetup<'a> {
    train_new: &'a Dataset,
    new_classes: &'a [ClassId],
    teacher: Option<&'a ModelSnapshot>,
    pool: &'a TaskPool,
    store: &'a ExemplarStore,
    old_stats: &'a BTreeMap<ClassId, ClassStats>,
    new_stats: &'a BTreeMap<ClassId, ClassStats>,
    epochs: usize,
    lr: f64,
    milestones: &'a [usize],
}

struct PhaseOutcome {
    epoch_cls: Vec<f64>,
    epoch_kd: Vec<f64>,
    epoch_lambda: Vec<f64>,
}

fn stats_refs<'a>(
    classes: &[ClassId],
    stats: &'a BTreeMap<ClassId, ClassStats>,
) -> Result<Vec<&'a ClassStats>> {
    classes
        .iter()
        .map(|c| {
            stats.get(c).ok_or_else(|| {
                Error::Usage(format!("no stored feature statistics for class {}", c))
            })
        })
        .collect()
}

fn lambda_for_group(
    weighting: &WeightingConfig,
    group_classes: &[ClassId],
    old_stats: &BTreeMap<ClassId, ClassStats>,
    new_stats: &BTreeMap<ClassId, ClassStats>,
) -> Result<f64> {
    let old = stats_refs(group_classes, old_stats)?;
    let new: Vec<&ClassStats> = new_stats.values().collect();
    compute_lambda(weighting, &old, &new)
}

/// How many replay rows ride along with each new-task chunk:
/// `round(batch_size * |old| / (|old| + |new|))`, clamped to at least 1
/// while the store has anything to offer.
fn replay_count(batch_size: usize, num_old: usize, num_new: usize) -> usize {
    if num_old == 0 {
        return 0;
    }
    let raw = batch_size as f64 * num_old as f64 / (num_old + num_new) as f64;
    (raw.round() as usize).max(1)
}

/// One SGD phase over the new task's data (plus replay), shared by the base
/// task and every increment. Per batch: assemble new + replay rows, build
/// the classification loss, add the configured distillation term against
/// the frozen teacher, backpropagate, step.
fn train_phase(
    model: &mut ModelState,
    config: &ProtocolConfig,
    setup: &PhaseSetup,
    rngs: &mut RunRngs,
) -> Result<PhaseOutcome> {
    let n_new_total = setup.train_new.len();
    if n_new_total == 0 {
        return Err(Error::Usage("a training phase needs at least one sample".into()));
    }
    let new_start = model.num_classes() - setup.new_classes.len();
    let new_columns = new_start..model.num_classes();

    let mut optimizer =
        SgdOptimizer::new(setup.lr, config.momentum, config.weight_decay)?;
    let mut lr = setup.lr;

    let distill_on = setup.teacher.is_some()
        && config.distill.variant != DistillVariant::None
        && !setup.pool.is_empty();

    let mut outcome = PhaseOutcome {
        epoch_cls: Vec::with_capacity(setup.epochs),
        epoch_kd: Vec::with_capacity(setup.epochs),
        epoch_lambda: Vec::with_capacity(setup.epochs),
    };

    let mut indices: Vec<usize> = (0..n_new_total).collect();
    for epoch in 0..setup.epochs {
        if setup.milestones.contains(&epoch) {
            lr /= 10.0;
            optimizer.set_learning_rate(lr);
        }
        indices.shuffle(&mut rngs.data);

        let mut batch_cls = Vec::new();
        let mut batch_kd = Vec::new();
        let mut batch_lambda = Vec::new();
        for chunk in indices.chunks(config.batch_size) {
            let new_inputs = setup.train_new.inputs.gather_rows(chunk)?;
            let mut labels: Vec<ClassId> =
                chunk.iter().map(|&i| setup.train_new.labels[i]).collect();
            let n_new = chunk.len();

            let batch = if setup.store.is_empty() {
                new_inputs
            } else {
                let count = replay_count(
                    config.batch_size,
                    setup.store.num_classes(),
                    setup.new_classes.len(),
                );
                let (replay_inputs, replay_labels) =
                    replay_batch(setup.store, count, &mut rngs.data)?;
                labels.extend_from_slice(&replay_labels);
                let mut data = new_inputs.data().to_vec();
                data.extend_from_slice(replay_inputs.data());
                Tensor::matrix(n_new + count, model.input_dim(), data)?
            };

            let mut tape = Tape::new();
            let forward = model.forward_on_tape(&mut tape, &batch)?;
            let cls = classification_loss(
                &mut tape,
                forward.logits,
                model.classes(),
                new_columns.clone(),
                &labels,
            )?;

            let (kd, lambda) = if distill_on {
                let teacher = setup.teacher.expect("distill_on implies a teacher");
                let teacher_logits = teacher.forward_logits(&batch)?;
                let rows: Vec<usize> = if config.distill.kd_new_samples_only {
                    (0..n_new).collect()
                } else {
                    (0..labels.len()).collect()
                };
                let ctx = KdContext {
                    student_classes: model.classes(),
                    teacher_classes: teacher.classes(),
                    teacher_logits: &teacher_logits,
                    rows: &rows,
                    config: &config.distill,
                };
                let (kd_var, group) =
                    variant_loss(&mut tape, forward.logits, &ctx, setup.pool, &mut rngs.group)?;
                let lambda = lambda_for_group(
                    &config.weighting,
                    &group.classes,
                    setup.old_stats,
                    setup.new_stats,
                )?;
                (Some(kd_var), lambda)
            } else {
                (None, 0.0)
            };

            let composed = total_loss(&mut tape, cls, kd, lambda)?;
            tape.backward(composed.var)?;
            forward.accumulate_grads(&tape, model)?;
            optimizer.step(&mut model.param_tensors_mut())?;

            batch_cls.push(composed.breakdown.classification);
            batch_kd.push(composed.breakdown.distillation);
            batch_lambda.push(composed.breakdown.lambda);
        }
        outcome.epoch_cls.push(mean_of(&batch_cls));
        outcome.epoch_kd.push(mean_of(&batch_kd));
        outcome.epoch_lambda.push(mean_of(&batch_lambda));
    }
    Ok(outcome)
}

fn require_class_rows(data: &Dataset, task: &TaskSpec) -> Result<()> {
    for &class in &task.classes {
        if data.rows_of(&[class]).is_empty() {
            return Err(Error::Usage(format!(
                "training data has no rows for class {} of task {}",
                class, task.task_id
            )));
        }
    }
    Ok(())
}

fn evaluate_step(
    model: &ModelState,
    completed: &[TaskSpec],
    pair: &DatasetPair,
) -> Result<(Vec<f64>, f64)> {
    let mut per_task = Vec::with_capacity(completed.len());
    for task in completed {
        let task_test = pair.test.restricted_to(&task.classes)?;
        per_task.push(accuracy_percent(model, &task_test)?);
    }
    let seen_classes: Vec<ClassId> =
        completed.iter().flat_map(|t| t.classes.iter().copied()).collect();
    let seen_test = pair.test.restricted_to(&seen_classes)?;
    let seen = accuracy_percent(model, &seen_test)?;
    Ok((per_task, seen))
}

fn completion_bookkeeping(
    state: &mut TrainerState,
    config: &ProtocolConfig,
    task: &TaskSpec,
    train_new: &Dataset,
) -> Result<()> {
    let completion = state.model.snapshot();
    let features = completion.extract_features(&train_new.inputs)?;
    let new_stats = class_stats_from_features(
        &features,
        &train_new.labels,
        config.weighting.normalize_features,
    )?;
    for (class, stat) in new_stats {
        state.stats.insert(class, stat);
    }
    if config.replay_enabled {
        update_store(
            &mut state.store,
            task,
            &completion,
            &train_new.inputs,
            &train_new.labels,
        )?;
    }
    state.pool = state.pool.extended(task.clone())?;
    Ok(())
}

/// Train the base task with plain cross-entropy, then populate the pool,
/// store, and class statistics.
pub fn train_base(
    config: &ProtocolConfig,
    pair: &DatasetPair,
    base_task: &TaskSpec,
    rngs: &mut RunRngs,
) -> Result<(TrainerState, StepRecord)> {
    let start = Instant::now();
    require_class_rows(&pair.train, base_task)?;
    let input_dim = pair.train.input_dim();

    let spec = config.model.to_spec(input_dim);
    let mut model = ModelState::new(&spec, &mut rngs.init)?;
    model.expand_head(&base_task.classes, &mut rngs.init)?;

    let train_new = pair.train.restricted_to(&base_task.classes)?;
    let empty_stats = BTreeMap::new();
    let store = ExemplarStore::new(config.exemplar_budget, input_dim)?;
    let setup = PhaseSetup {
        train_new: &train_new,
        new_classes: &base_task.classes,
        teacher: None,
        pool: &TaskPool::new(),
        store: &store,
        old_stats: &empty_stats,
        new_stats: &empty_stats,
        epochs: config.epochs_base,
        lr: config.lr_base,
        milestones: &config.lr_milestones.base,
    };
    let outcome = train_phase(&mut model, config, &setup, rngs)?;

    let mut state = TrainerState {
        model,
        pool: TaskPool::new(),
        store,
        stats: BTreeMap::new(),
    };
    completion_bookkeeping(&mut state, config, base_task, &train_new)?;

    let (per_task, seen) = evaluate_step(&state.model, std::slice::from_ref(base_task), pair)?;
    let record = StepRecord {
        step: 0,
        task_id: base_task.task_id,
        new_classes: base_task.classes.clone(),
        classes_seen: base_task.classes.clone(),
        per_task_accuracy: per_task,
        seen_accuracy: seen,
        stability_plasticity: None,
        epoch_cls_loss: outcome.epoch_cls,
        epoch_kd_loss: outcome.epoch_kd,
        epoch_lambda: outcome.epoch_lambda,
        wall_time_seconds: start.elapsed().as_secs_f64(),
    };
    Ok((state, record))
}

/// One incremental step: snapshot the teacher, expand the head, train under
/// classification + weighted distillation with replay, then update pool,
/// statistics, and store.
pub fn train_increment(
    state: &mut TrainerState,
    config: &ProtocolConfig,
    step: usize,
    task: &TaskSpec,
    completed: &[TaskSpec],
    pair: &DatasetPair,
    rngs: &mut RunRngs,
) -> Result<StepRecord> {
    let start = Instant::now();
    // Everything that can fail is checked before the first mutation.
    if step == 0 {
        return Err(Error::Usage("step 0 is the base task; increments start at 1".into()));
    }
    require_class_rows(&pair.train, task)?;
    for &class in &task.classes {
        if state.model.column_of(class).is_some() {
            return Err(Error::Usage(format!(
                "class {} of task {} is already learned",
                class, task.task_id
            )));
        }
    }
    if state.pool.is_empty() {
        return Err(Error::Usage("no completed tasks to distill from".into()));
    }

    // The teacher is frozen before the head learns about the new classes.
    let teacher = state.model.snapshot();
    state.model.expand_head(&task.classes, &mut rngs.init)?;

    let train_new = pair.train.restricted_to(&task.classes)?;
    // Provisional statistics for the classes being learned, from the only
    // trained encoder available — the teacher. Replaced by final statistics
    // at completion.
    let provisional_features = teacher.extract_features(&train_new.inputs)?;
    let provisional_stats = class_stats_from_features(
        &provisional_features,
        &train_new.labels,
        config.weighting.normalize_features,
    )?;

    let setup = PhaseSetup {
        train_new: &train_new,
        new_classes: &task.classes,
        teacher: Some(&teacher),
        pool: &state.pool,
        store: &state.store,
        old_stats: &state.stats,
        new_stats: &provisional_stats,
        epochs: config.epochs_inc,
        lr: config.lr_inc,
        milestones: &config.lr_milestones.inc,
    };
    let outcome = train_phase(&mut state.model, config, &setup, rngs)?;

    let old_classes: Vec<ClassId> =
        completed.iter().flat_map(|t| t.classes.iter().copied()).collect();
    completion_bookkeeping(state, config, task, &train_new)?;

    let mut all_completed: Vec<TaskSpec> = completed.to_vec();
    all_completed.push(task.clone());
    let (per_task, seen) = evaluate_step(&state.model, &all_completed, pair)?;
    let seen_classes: Vec<ClassId> =
        all_completed.iter().flat_map(|t| t.classes.iter().copied()).collect();
    let split = stability_plasticity_split(
        &state.model,
        &pair.test.restricted_to(&seen_classes)?,
        &old_classes,
        &task.classes,
    )?;

    Ok(StepRecord {
        step,
        task_id: task.task_id,
        new_classes: task.classes.clone(),
        classes_seen: seen_classes,
        per_task_accuracy: per_task,
        seen_accuracy: seen,
        stability_plasticity: Some(split),
        epoch_cls_loss: outcome.epoch_cls,
        epoch_kd_loss: outcome.epoch_kd,
        epoch_lambda: outcome.epoch_lambda,
        wall_time_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Execute the full protocol: base task plus every increment of the
/// assignment, evaluating after each step.
pub fn run_experiment(
    config: &ProtocolConfig,
    pair: &DatasetPair,
    assignment: &TaskAssignment,
) -> Result<RunOutput> {
    config.validate()?;
    pair.validate()?;
    if assignment.tasks.len() != config.num_increments + 1 {
        return Err(Error::InvalidConfig(format!(
            "assignment has {} tasks but the config asks for 1 + {} increments",
            assignment.tasks.len(),
            config.num_increments
        )));
    }
    let mut all = assignment.all_classes();
    all.sort_unstable();
    let expected: Vec<ClassId> = (0..config.total_classes as u32).map(ClassId).collect();
    if all != expected {
        return Err(Error::InvalidConfig(format!(
            "assignment covers {:?}, expected exactly 0..{}",
            all, config.total_classes
        )));
    }

    let mut rngs = RunRngs::for_seed(config.seed);
    let (mut state, base_record) = train_base(config, pair, assignment.base(), &mut rngs)?;
    let mut steps = vec![base_record];
    let mut completed: Vec<TaskSpec> = vec![assignment.base().clone()];
    for (i, task) in assignment.increments().iter().enumerate() {
        let record =
            train_increment(&mut state, config, i + 1, task, &completed, pair, &mut rngs)?;
        steps.push(record);
        completed.push(task.clone());
    }

    let final_train_loss = mean_ce_loss(&state.model, &pair.train)?;
    Ok(RunOutput { log: RunLog { steps, final_train_loss }, state })
}
