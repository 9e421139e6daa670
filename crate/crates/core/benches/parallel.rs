//! Sequential-vs-parallel comparison points.
//!
//! Two levels matter:
//! - the matmul kernel inside `forward_values`, which switches to row-level
//!   parallelism above a work threshold when the `parallel` feature is on;
//! - the job runner, which fans independent runs across threads.
//!
//! Run `cargo bench` (parallel, the default) and
//! `cargo bench --no-default-features` (sequential) and diff the reports;
//! within one binary, `jobs/sequential` vs `jobs/parallel` compares the
//! runner paths directly. Results must be identical either way — these
//! benches exist to measure the cost/benefit, not correctness.

use criterion::{criterion_group, criterion_main, Criterion};
use rand::Rng;

use cldistill::config::{DatasetConfig, ProtocolConfig};
use cldistill::data::assign_tasks;
use cldistill::model::{ModelSpec, ModelState};
use cldistill::pool::ClassId;
use cldistill::rng::{stream_rng, Stream};
use cldistill::runner::{run_jobs, run_jobs_seq};
use cldistill::tensor::Tensor;
use cldistill::trainer::run_experiment;

fn forward_bench(c: &mut Criterion) {
    // 512 x 128 through a 256-wide layer: 512*128*256 ~ 17M multiply-adds,
    // past the kernel's parallel-work threshold.
    let spec = ModelSpec {
        input_dim: 128,
        hidden: vec![256],
        cosine_head: false,
        cosine_scale_init: 10.0,
    };
    let mut rng = stream_rng(3, Stream::Init);
    let mut model = ModelState::new(&spec, &mut rng).unwrap();
    let classes: Vec<ClassId> = (0..32).map(ClassId).collect();
    model.expand_head(&classes, &mut rng).unwrap();

    let rows = 512;
    let data: Vec<f64> = (0..rows * 128).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let batch = Tensor::matrix(rows, 128, data).unwrap();
    c.bench_function("forward/batch512", |b| {
        b.iter(|| model.forward_values(&batch).unwrap())
    });
}

fn bench_config(seed: u64) -> ProtocolConfig {
    let mut cfg = ProtocolConfig::default();
    cfg.total_classes = 2;
    cfg.base_fraction = 1.0;
    cfg.num_increments = 0;
    cfg.epochs_base = 2;
    cfg.lr_milestones.base = vec![];
    cfg.lr_milestones.inc = vec![];
    cfg.batch_size = 8;
    cfg.exemplar_budget = 2;
    cfg.model.hidden = vec![8];
    cfg.seed = seed;
    cfg.flatness.enabled = false;
    cfg.dataset = DatasetConfig::Blobs {
        dim: 4,
        samples_per_class: 10,
        class_separation: 4.0,
        noise_sigma: 0.5,
        seed: 5,
    };
    cfg
}

fn jobs_bench(c: &mut Criterion) {
    let pair = bench_config(0).dataset.load(2).unwrap();
    let assignment = assign_tasks(2, 1.0, 0, 0).unwrap();
    let seeds: Vec<u64> = (0..4).collect();
    let run_one = |seed: u64| {
        let cfg = bench_config(seed);
        run_experiment(&cfg, &pair, &assignment).map(|out| out.log.final_train_loss)
    };
    c.bench_function("jobs/sequential", |b| {
        b.iter(|| run_jobs_seq(seeds.clone(), run_one))
    });
    c.bench_function("jobs/parallel", |b| {
        b.iter(|| run_jobs(seeds.clone(), run_one, None).unwrap())
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = forward_bench, jobs_bench
}
criterion_main!(benches);
