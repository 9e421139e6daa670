//! Command implementations behind the CLI binary.
//!
//! Everything here is a library function so integration tests (and the
//! acceptance suite) can drive commands in-process and inspect results
//! without spawning subprocesses. The binary is a thin argument-parsing
//! shell around these.
//!
//! Run directories are self-describing: `resolved-config.json` pins every
//! knob, `runlog.jsonl` holds the per-step records (including wall time),
//! and `metrics.json` holds only deterministic quantities — two runs of the
//! same resolved config must produce byte-identical `metrics.json` files.
//! `metrics.json` is written last so its presence marks a completed run,
//! which is what `--resume` checks.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{apply_overrides, load_config, DatasetConfig, ModelConfig, ProtocolConfig};
use crate::data::{generate_blobs, save_cache, write_idx_images, write_idx_labels, DatasetPair};
use crate::distill::{
    classification_loss, total_loss, variant_loss, DistillConfig, DistillVariant, KdContext,
};
use crate::error::{Error, Result};
use crate::metrics::{
    accuracy_percent, avg_incremental_accuracy, base_task_trace, perturbation_sensitivity,
    AccuracyMatrix, FlatnessCurve,
};
use crate::model::{ModelSnapshot, ModelState};
use crate::optim::SgdOptimizer;
use crate::pool::{ClassId, TaskPool, TaskSpec};
use crate::rng::{stream_rng, Stream};
use crate::runner::run_jobs;
use crate::tensor::Tape;
use crate::trainer::{run_experiment, RunLog, RunRngs};

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

fn write_json_pretty<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// Deterministic per-run summary. Everything in here is a pure function of
/// the resolved config, so repeated runs serialize to identical bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct MetricsSummary {
    pub avg_incremental_accuracy: f64,
    pub final_seen_accuracy: f64,
    pub final_train_loss: f64,
    pub base_task_trace: Vec<f64>,
    /// (old, new) accuracy split per step; `null` on the base step.
    pub stability_plasticity: Vec<Option<(f64, f64)>>,
    pub mean_lambda_per_step: Vec<f64>,
    pub accuracy: AccuracyMatrix,
    pub flatness: Option<FlatnessCurve>,
}

pub fn summarize_run(log: &RunLog, flatness: Option<FlatnessCurve>) -> Result<MetricsSummary> {
    let matrix = log.accuracy_matrix()?;
    Ok(MetricsSummary {
        avg_incremental_accuracy: avg_incremental_accuracy(&matrix)?,
        final_seen_accuracy: matrix
            .seen()
            .last()
            .copied()
            .ok_or_else(|| Error::Usage("run produced no steps".into()))?,
        final_train_loss: log.final_train_loss,
        base_task_trace: base_task_trace(&matrix)?,
        stability_plasticity: log.steps.iter().map(|s| s.stability_plasticity).collect(),
        mean_lambda_per_step: log.steps.iter().map(|s| mean(&s.epoch_lambda)).collect(),
        accuracy: matrix,
        flatness,
    })
}

fn push_row(out: &mut String, series: &str, step: usize, x: f64, y: f64, aux: &str) {
    out.push_str(&format!("{},{},{},{},{}\n", series, step, x, y, aux));
}

/// Plot-ready long-format CSV. Column semantics per series are documented
/// in the README; `aux` disambiguates multi-trace series (task id, the
/// old/new side, or the flatness standard deviation).
fn curves_csv(log: &RunLog, summary: &MetricsSummary) -> String {
    let mut out = String::from("series,step,x,y,aux\n");
    for (t, step) in log.steps.iter().enumerate() {
        push_row(&mut out, "seen-accuracy", t, t as f64, step.seen_accuracy, "");
        push_row(&mut out, "base-task-accuracy", t, t as f64, step.per_task_accuracy[0], "");
        for (j, acc) in step.per_task_accuracy.iter().enumerate() {
            push_row(&mut out, "task-accuracy", t, j as f64, *acc, &format!("task-{}", j));
        }
        if let Some((old, new)) = step.stability_plasticity {
            push_row(&mut out, "stability", t, t as f64, old, "old");
            push_row(&mut out, "stability", t, t as f64, new, "new");
        }
        for (e, v) in step.epoch_cls_loss.iter().enumerate() {
            push_row(&mut out, "epoch-cls-loss", t, e as f64, *v, "");
        }
        for (e, v) in step.epoch_kd_loss.iter().enumerate() {
            push_row(&mut out, "epoch-kd-loss", t, e as f64, *v, "");
        }
        for (e, v) in step.epoch_lambda.iter().enumerate() {
            push_row(&mut out, "epoch-lambda", t, e as f64, *v, "");
        }
    }
    if let Some(curve) = &summary.flatness {
        let last = log.steps.len().saturating_sub(1);
        for p in &curve.points {
            push_row(&mut out, "flatness", last, p.sigma, p.mean_loss, &format!("std={}", p.std_loss));
        }
    }
    out
}

/// Run one experiment and write the full artifact set into `out_dir`:
/// resolved-config.json, runlog.jsonl, curves.csv, model.ckpt, the exemplar
/// dump, and (last, as the completion marker) metrics.json.
pub fn execute_run(config: &ProtocolConfig, out_dir: &Path) -> Result<MetricsSummary> {
    config.validate()?;
    fs::create_dir_all(out_dir)?;
    let pair = config.dataset.load(config.total_classes)?;
    let assignment = crate::data::assign_tasks(
        config.total_classes,
        config.base_fraction,
        config.num_increments,
        config.order_seed,
    )?;
    let mut out = run_experiment(config, &pair, &assignment)?;

    let flatness = if config.flatness.enabled {
        let mut rng = stream_rng(config.seed, Stream::Perturb);
        Some(perturbation_sensitivity(
            &mut out.state.model,
            &pair.train,
            &config.flatness.sigmas,
            config.flatness.draws_per_sigma,
            &mut rng,
        )?)
    } else {
        None
    };
    let summary = summarize_run(&out.log, flatness)?;

    write_json_pretty(&out_dir.join("resolved-config.json"), &config.resolved_json()?)?;
    let mut jsonl = String::new();
    for step in &out.log.steps {
        jsonl.push_str(&serde_json::to_string(step)?);
        jsonl.push('\n');
    }
    fs::write(out_dir.join("runlog.jsonl"), jsonl)?;
    fs::write(out_dir.join("curves.csv"), curves_csv(&out.log, &summary))?;
    out.state.model.save(&out_dir.join("model.ckpt"))?;
    out.state.store.dump(&out_dir.join("exemplars"))?;
    write_json_pretty(&out_dir.join("metrics.json"), &summary)?;
    Ok(summary)
}

pub fn cmd_run(config_path: &Path, out_dir: &Path, overrides: &[String]) -> Result<()> {
    let config = load_config(config_path, overrides)?;
    let summary = execute_run(&config, out_dir)?;
    println!("avg-incremental-accuracy: {:.2}", summary.avg_incremental_accuracy);
    println!("final-seen-accuracy:      {:.2}", summary.final_seen_accuracy);
    println!("artifacts: {}", out_dir.display());
    Ok(())
}

/// Parse a variant name the way configs spell it.
pub fn parse_variant(s: &str) -> Result<DistillVariant> {
    serde_json::from_value(serde_json::Value::String(s.trim().to_string()))
        .map_err(|_| Error::Usage(format!("unknown distillation variant '{}'", s)))
}

pub fn variant_slug(v: DistillVariant) -> String {
    match serde_json::to_value(v) {
        Ok(serde_json::Value::String(s)) => s,
        _ => "unknown".into(),
    }
}

/// The sweep cross-product: variants x training seeds x order seeds.
#[derive(Debug, Clone)]
pub struct SweepAxes {
    pub variants: Vec<DistillVariant>,
    pub seeds: Vec<u64>,
    pub order_seeds: Vec<u64>,
}

impl SweepAxes {
    /// Resolve CLI flags against the base config: empty axes fall back to
    /// the config's own value, `--orders n` expands to order seeds `0..n`.
    pub fn resolve(
        config: &ProtocolConfig,
        variants: &[String],
        seeds: &[u64],
        orders: Option<usize>,
    ) -> Result<SweepAxes> {
        let variants = if variants.is_empty() {
            vec![config.distill.variant]
        } else {
            variants.iter().map(|s| parse_variant(s)).collect::<Result<Vec<_>>>()?
        };
        let seeds = if seeds.is_empty() { vec![config.seed] } else { seeds.to_vec() };
        let order_seeds = match orders {
            None => vec![config.order_seed],
            Some(0) => return Err(Error::Usage("--orders must be at least 1".into())),
            Some(n) => (0..n as u64).collect(),
        };
        Ok(SweepAxes { variants, seeds, order_seeds })
    }
}

#[derive(Debug, Clone)]
struct SweepCell {
    variant: DistillVariant,
    seed: u64,
    order_seed: u64,
    dir_name: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SweepOutcome {
    pub total: usize,
    pub executed: usize,
    pub skipped: usize,
    pub failed: usize,
}

/// Run the cross-product as independent runs. Cell failures are recorded in
/// the summary and do not stop the sweep; the caller turns a nonzero
/// `failed` count into exit code 1. With `resume`, cells whose directory
/// already holds a `metrics.json` are skipped. The summary CSVs are
/// re-derived from the per-cell `metrics.json` files, never from in-memory
/// results, so resumed and fresh cells are treated identically.
pub fn cmd_sweep(
    config_path: &Path,
    out_dir: &Path,
    overrides: &[String],
    axes: &SweepAxes,
    parallel: Option<usize>,
    resume: bool,
) -> Result<SweepOutcome> {
    let base = load_config(config_path, overrides)?;
    fs::create_dir_all(out_dir)?;

    let mut cells = Vec::new();
    for &variant in &axes.variants {
        for &seed in &axes.seeds {
            for &order_seed in &axes.order_seeds {
                let dir_name =
                    format!("{}-s{}-o{}", variant_slug(variant), seed, order_seed);
                cells.push(SweepCell { variant, seed, order_seed, dir_name });
            }
        }
    }

    let cell_config = |cell: &SweepCell| -> ProtocolConfig {
        let mut c = base.clone();
        c.distill.variant = cell.variant;
        c.seed = cell.seed;
        c.order_seed = cell.order_seed;
        c
    };

    let to_run: Vec<SweepCell> = cells
        .iter()
        .filter(|cell| !(resume && out_dir.join(&cell.dir_name).join("metrics.json").exists()))
        .cloned()
        .collect();
    let skipped = cells.len() - to_run.len();

    // Spawned cells are single-threaded runs sharing nothing; parallelism
    // defaults to available cores minus one.
    let threads = parallel.or_else(|| {
        std::thread::available_parallelism().ok().map(|n| n.get().saturating_sub(1).max(1))
    });
    let results = run_jobs(
        to_run.clone(),
        |cell| {
            log::info!("sweep cell {} starting", cell.dir_name);
            execute_run(&cell_config(&cell), &out_dir.join(&cell.dir_name)).map(|_| ())
        },
        threads,
    )?;
    let mut failed = 0usize;
    for (cell, result) in to_run.iter().zip(&results) {
        if let Err(e) = result {
            failed += 1;
            log::warn!("sweep cell {} failed: {}", cell.dir_name, e);
        }
    }

    // Summaries come from disk so they equal what any later reader derives.
    let mut summary_csv =
        String::from("variant,seed,order-seed,status,avg-incremental-accuracy,final-seen-accuracy\n");
    let mut by_variant: BTreeMap<String, Vec<AccuracyMatrix>> = BTreeMap::new();
    for cell in &cells {
        let slug = variant_slug(cell.variant);
        let metrics_path = out_dir.join(&cell.dir_name).join("metrics.json");
        match read_json::<MetricsSummary>(&metrics_path) {
            Ok(m) => {
                summary_csv.push_str(&format!(
                    "{},{},{},ok,{},{}\n",
                    slug, cell.seed, cell.order_seed, m.avg_incremental_accuracy,
                    m.final_seen_accuracy
                ));
                by_variant.entry(slug).or_default().push(m.accuracy);
            }
            Err(_) => {
                summary_csv.push_str(&format!(
                    "{},{},{},failed,,\n",
                    slug, cell.seed, cell.order_seed
                ));
            }
        }
    }
    fs::write(out_dir.join("summary.csv"), summary_csv)?;

    let mut stats_csv =
        String::from("variant,cells,mean-avg-incremental-accuracy,variance\n");
    for (slug, matrices) in &by_variant {
        if matrices.len() >= 2 {
            let (m, v) = crate::metrics::aggregate_orders(matrices)?;
            stats_csv.push_str(&format!("{},{},{},{}\n", slug, matrices.len(), m, v));
        }
    }
    fs::write(out_dir.join("variant-stats.csv"), stats_csv)?;

    let outcome = SweepOutcome {
        total: cells.len(),
        executed: to_run.len(),
        skipped,
        failed,
    };
    println!(
        "sweep: {} cells ({} executed, {} skipped, {} failed); summary: {}",
        outcome.total,
        outcome.executed,
        outcome.skipped,
        outcome.failed,
        out_dir.join("summary.csv").display()
    );
    Ok(outcome)
}

/// Offline model-compression settings: distill a loaded teacher checkpoint
/// into a (typically smaller) student on a static dataset, treating the
/// teacher's classes as `pseudo-task-count` equal pseudo-tasks.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default, deny_unknown_fields)]
pub struct CompressConfig {
    pub pseudo_task_count: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub lr_milestones: Vec<usize>,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Fixed distillation weight; compression has no old/new split, so the
    /// adaptive rule does not apply.
    pub lambda: f64,
    pub model: ModelConfig,
    pub dataset: DatasetConfig,
    pub distill: DistillConfig,
}

impl Default for CompressConfig {
    fn default() -> CompressConfig {
        CompressConfig {
            pseudo_task_count: 4,
            epochs: 30,
            learning_rate: 0.1,
            lr_milestones: vec![15, 25],
            batch_size: 16,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
            lambda: 1.0,
            model: ModelConfig { hidden: vec![16], ..ModelConfig::default() },
            dataset: DatasetConfig::default(),
            distill: DistillConfig::default(),
        }
    }
}

impl CompressConfig {
    pub fn validation_errors(&self) -> Vec<String> {
        let mut errs = Vec::new();
        let mut check = |ok: bool, msg: String| {
            if !ok {
                errs.push(msg);
            }
        };
        check(self.pseudo_task_count >= 1, "pseudo-task-count must be at least 1".into());
        check(self.epochs >= 1, "epochs must be at least 1".into());
        check(
            self.learning_rate > 0.0 && self.learning_rate.is_finite(),
            format!("learning-rate must be positive, got {}", self.learning_rate),
        );
        for w in self.lr_milestones.windows(2) {
            check(w[0] < w[1], format!("lr-milestones must be strictly increasing: {:?}", self.lr_milestones));
        }
        for &m in &self.lr_milestones {
            check(
                m >= 1 && m < self.epochs,
                format!("lr-milestone {} is outside 1..{}", m, self.epochs),
            );
        }
        check(self.batch_size >= 1, "batch-size must be at least 1".into());
        check(
            (0.0..1.0).contains(&self.momentum),
            format!("momentum must be in [0, 1), got {}", self.momentum),
        );
        check(
            self.weight_decay >= 0.0 && self.weight_decay.is_finite(),
            format!("weight-decay must be nonnegative, got {}", self.weight_decay),
        );
        check(
            self.lambda >= 0.0 && self.lambda.is_finite(),
            format!("lambda must be nonnegative, got {}", self.lambda),
        );
        for &h in &self.model.hidden {
            check(h >= 1, "hidden layer widths must be at least 1".into());
        }
        if let Err(e) = self.distill.validate() {
            errs.push(e.to_string());
        }
        errs
    }

    pub fn validate(&self) -> Result<()> {
        let errs = self.validation_errors();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(errs.join("; ")))
        }
    }
}

pub fn load_compress_config(path: &Path, overrides: &[String]) -> Result<CompressConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::InvalidConfig(format!("{}: {}", path.display(), e)))?;
    let mut value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::InvalidConfig(format!("{}: {}", path.display(), e)))?;
    apply_overrides(&mut value, overrides)?;
    let config: CompressConfig = serde_json::from_value(value)
        .map_err(|e| Error::InvalidConfig(format!("{}: {}", path.display(), e)))?;
    config.validate()?;
    Ok(config)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct CompressReport {
    pub pseudo_task_count: usize,
    pub variant: DistillVariant,
    pub seed: u64,
    pub lambda: f64,
    pub teacher_test_accuracy: f64,
    pub student_test_accuracy: f64,
    pub control_test_accuracy: f64,
}

pub struct CompressionOutcome {
    pub report: CompressReport,
    pub student: ModelState,
    pub control: ModelState,
}

/// Static distillation: train a fresh student on the full dataset with
/// cross-entropy over all classes plus a fixed-weight distillation term
/// over `pool`'s groups.
fn static_distill_train(
    config: &CompressConfig,
    variant: DistillVariant,
    teacher: &ModelSnapshot,
    pool: &TaskPool,
    pair: &DatasetPair,
) -> Result<ModelState> {
    let mut rngs = RunRngs::for_seed(config.seed);
    let spec = config.model.to_spec(pair.train.input_dim());
    let mut model = ModelState::new(&spec, &mut rngs.init)?;
    model.expand_head(teacher.classes(), &mut rngs.init)?;
    let num_classes = model.num_classes();

    let mut distill_cfg = config.distill.clone();
    distill_cfg.variant = variant;

    let mut optimizer =
        SgdOptimizer::new(config.learning_rate, config.momentum, config.weight_decay)?;
    let mut lr = config.learning_rate;
    let mut indices: Vec<usize> = (0..pair.train.len()).collect();
    for epoch in 0..config.epochs {
        if config.lr_milestones.contains(&epoch) {
            lr /= 10.0;
            optimizer.set_learning_rate(lr);
        }
        indices.shuffle(&mut rngs.data);
        for chunk in indices.chunks(config.batch_size) {
            let batch = pair.train.inputs.gather_rows(chunk)?;
            let labels: Vec<ClassId> = chunk.iter().map(|&i| pair.train.labels[i]).collect();
            let mut tape = Tape::new();
            let forward = model.forward_on_tape(&mut tape, &batch)?;
            // All classes are "new": plain cross-entropy over the full head.
            let cls = classification_loss(
                &mut tape,
                forward.logits,
                model.classes(),
                0..num_classes,
                &labels,
            )?;
            let kd = if variant == DistillVariant::None {
                None
            } else {
                let teacher_logits = teacher.forward_logits(&batch)?;
                let rows: Vec<usize> = (0..labels.len()).collect();
                let ctx = KdContext {
                    student_classes: model.classes(),
                    teacher_classes: teacher.classes(),
                    teacher_logits: &teacher_logits,
                    rows: &rows,
                    config: &distill_cfg,
                };
                let (kd_var, _group) =
                    variant_loss(&mut tape, forward.logits, &ctx, pool, &mut rngs.group)?;
                Some(kd_var)
            };
            let lambda = if kd.is_some() { config.lambda } else { 0.0 };
            let composed = total_loss(&mut tape, cls, kd, lambda)?;
            tape.backward(composed.var)?;
            forward.accumulate_grads(&tape, &mut model)?;
            optimizer.step(&mut model.param_tensors_mut())?;
        }
    }
    Ok(model)
}

/// Distill `teacher` into two students — one with the configured variant
/// over `pseudo-task-count` equal pseudo-tasks, one plain-KD control whose
/// pool is the single all-classes group — and report test accuracies.
pub fn run_compression(config: &CompressConfig, teacher: &ModelState) -> Result<CompressionOutcome> {
    config.validate()?;
    let num_classes = teacher.num_classes();
    let k = config.pseudo_task_count;
    if num_classes == 0 {
        return Err(Error::Usage("teacher checkpoint has no classes".into()));
    }
    if num_classes % k != 0 {
        return Err(Error::Usage(format!(
            "cannot split {} classes into {} equal pseudo-tasks",
            num_classes, k
        )));
    }
    let mut sorted = teacher.classes().to_vec();
    sorted.sort_unstable();
    let expected: Vec<ClassId> = (0..num_classes as u32).map(ClassId).collect();
    if sorted != expected {
        return Err(Error::Usage(format!(
            "teacher classes {:?} are not exactly 0..{}",
            sorted, num_classes
        )));
    }

    let pair = config.dataset.load(num_classes)?;
    if pair.train.input_dim() != teacher.input_dim() {
        return Err(Error::Usage(format!(
            "dataset input dim {} does not match the teacher's {}",
            pair.train.input_dim(),
            teacher.input_dim()
        )));
    }

    // Pseudo-tasks follow the teacher's head order in equal chunks.
    let mut pool = TaskPool::new();
    for (i, chunk) in teacher.classes().chunks(num_classes / k).enumerate() {
        pool = pool.extended(TaskSpec::new(i, chunk.to_vec())?)?;
    }
    let control_pool =
        TaskPool::new().extended(TaskSpec::new(0, teacher.classes().to_vec())?)?;

    let snapshot = teacher.snapshot();
    let student =
        static_distill_train(config, config.distill.variant, &snapshot, &pool, &pair)?;
    let control =
        static_distill_train(config, DistillVariant::Gkd, &snapshot, &control_pool, &pair)?;

    let report = CompressReport {
        pseudo_task_count: k,
        variant: config.distill.variant,
        seed: config.seed,
        lambda: config.lambda,
        teacher_test_accuracy: accuracy_percent(teacher, &pair.test)?,
        student_test_accuracy: accuracy_percent(&student, &pair.test)?,
        control_test_accuracy: accuracy_percent(&control, &pair.test)?,
    };
    Ok(CompressionOutcome { report, student, control })
}

pub fn cmd_compress(
    config_path: &Path,
    teacher_path: &Path,
    out_dir: &Path,
    overrides: &[String],
) -> Result<()> {
    let config = load_compress_config(config_path, overrides)?;
    let teacher = ModelState::load(teacher_path)?;
    let outcome = run_compression(&config, &teacher)?;
    fs::create_dir_all(out_dir)?;
    write_json_pretty(&out_dir.join("resolved-compress-config.json"), &config)?;
    outcome.student.save(&out_dir.join("student.ckpt"))?;
    outcome.control.save(&out_dir.join("control.ckpt"))?;
    write_json_pretty(&out_dir.join("compress-report.json"), &outcome.report)?;
    let r = &outcome.report;
    println!("teacher: {:.2}%", r.teacher_test_accuracy);
    println!("student ({}): {:.2}%", variant_slug(r.variant), r.student_test_accuracy);
    println!("control (plain kd): {:.2}%", r.control_test_accuracy);
    Ok(())
}

/// Check a config file (with overrides) and print either every violation or
/// the fully resolved config.
pub fn cmd_validate_config(config_path: &Path, overrides: &[String]) -> Result<()> {
    let text = fs::read_to_string(config_path)
        .map_err(|e| Error::InvalidConfig(format!("{}: {}", config_path.display(), e)))?;
    let mut value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::InvalidConfig(format!("{}: {}", config_path.display(), e)))?;
    apply_overrides(&mut value, overrides)?;
    let config: ProtocolConfig = match serde_json::from_value(value) {
        Ok(c) => c,
        Err(e) => {
            println!("{}", e);
            return Err(Error::InvalidConfig(format!("{}: {}", config_path.display(), e)));
        }
    };
    let errs = config.validation_errors();
    if !errs.is_empty() {
        for e in &errs {
            println!("{}", e);
        }
        return Err(Error::InvalidConfig(format!(
            "{}: {} violation(s)",
            config_path.display(),
            errs.len()
        )));
    }
    println!("{}", serde_json::to_string_pretty(&config.resolved_json()?)?);
    Ok(())
}

/// Write ready-to-use fixtures: a tiny IDX image/label quartet, a cached
/// blob dataset, and example configs for every command.
pub fn cmd_make_fixtures(out_dir: &Path) -> Result<()> {
    let idx_dir = out_dir.join("idx");
    let cache_dir = out_dir.join("blob-cache");
    let config_dir = out_dir.join("configs");
    fs::create_dir_all(&idx_dir)?;
    fs::create_dir_all(&config_dir)?;

    // Four 8x8 "striped" image classes: class c lights up row band c. Four
    // classes rather than three so the generated config gets a two-class
    // increment, which is the smallest one where new-task rows carry a
    // classification gradient.
    let mut rng = stream_rng(11, Stream::Data);
    let mut make_split = |per_class: usize| -> (Vec<Vec<u8>>, Vec<u8>) {
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for class in 0..4u8 {
            for _ in 0..per_class {
                let mut img = vec![0u8; 64];
                for (p, px) in img.iter_mut().enumerate() {
                    let band = (p / 8) / 2;
                    let base: i32 = if band == class as usize { 170 } else { 30 };
                    *px = (base + rng.gen_range(0..60)).min(255) as u8;
                }
                images.push(img);
                labels.push(class);
            }
        }
        (images, labels)
    };
    let (train_images, train_labels) = make_split(30);
    let (test_images, test_labels) = make_split(8);
    let train_images_path = idx_dir.join("train-images.idx");
    let train_labels_path = idx_dir.join("train-labels.idx");
    let test_images_path = idx_dir.join("test-images.idx");
    let test_labels_path = idx_dir.join("test-labels.idx");
    write_idx_images(&train_images_path, &train_images, 8, 8)?;
    write_idx_labels(&train_labels_path, &train_labels)?;
    write_idx_images(&test_images_path, &test_images, 8, 8)?;
    write_idx_labels(&test_labels_path, &test_labels)?;

    let pair = generate_blobs(4, 8, 25, 4.0, 1.0, 7)?;
    save_cache(&pair, &cache_dir)?;

    write_json_pretty(&config_dir.join("run-blobs.json"), &ProtocolConfig::default())?;
    let mut idx_config = ProtocolConfig::default();
    idx_config.total_classes = 4;
    idx_config.num_increments = 1;
    idx_config.dataset = DatasetConfig::Idx {
        train_images: train_images_path,
        train_labels: train_labels_path,
        test_images: test_images_path,
        test_labels: test_labels_path,
    };
    write_json_pretty(&config_dir.join("run-idx.json"), &idx_config)?;
    write_json_pretty(&config_dir.join("compress.json"), &CompressConfig::default())?;

    println!("fixtures: {}", out_dir.display());
    println!("  idx/          4-class 8x8 image quartet");
    println!("  blob-cache/   4-class cached blob dataset");
    println!("  configs/      run-blobs.json, run-idx.json, compress.json");
    Ok(())
}
