//! Dataset sources and protocol splitting.
//!
//! Two sources feed the trainer: a synthetic Gaussian-blob generator
//! (controllable difficulty, no files needed) and an IDX-format image loader
//! (the classic big-endian magic-number layout). Both produce the same
//! [`Dataset`] shape: flattened f64 inputs in `[0,1]`-ish ranges and one
//! [`ClassId`] per row.
//!
//! [`assign_tasks`] turns a class count into the incremental protocol's task
//! list: a base task holding `round(total * base_fraction)` classes and `T`
//! equal increments over the rest. The shuffle seed is deliberately separate
//! from the training seed so order-robustness studies vary one factor at a
//! time.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pool::{ClassId, TaskSpec};
use crate::rng::{stream_rng, Stream};
use crate::tensor::{Tensor, NORM_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Test,
}

/// A labeled design matrix: `inputs[i]` is a flattened sample, `labels[i]`
/// its class. Immutable after construction; clone freely.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Vec<ClassId>,
    pub split: Split,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<ClassId>, split: Split) -> Result<Dataset> {
        let (rows, _) = inputs.dims2()?;
        if labels.len() != rows {
            return Err(Error::Usage(format!(
                "{} labels for {} input rows",
                labels.len(),
                rows
            )));
        }
        Ok(Dataset { inputs, labels, split })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.dims2().expect("dataset inputs are 2-d by construction").1
    }

    /// Distinct classes present, ascending.
    pub fn classes(&self) -> Vec<ClassId> {
        let set: BTreeSet<ClassId> = self.labels.iter().copied().collect();
        set.into_iter().collect()
    }

    /// Row indices whose label is in `classes`, in row order.
    pub fn rows_of(&self, classes: &[ClassId]) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, l)| classes.contains(l))
            .map(|(i, _)| i)
            .collect()
    }

    /// A new dataset of the given rows, same split tag.
    pub fn subset(&self, rows: &[usize]) -> Result<Dataset> {
        let inputs = self.inputs.gather_rows(rows)?;
        let labels = rows
            .iter()
            .map(|&r| {
                self.labels
                    .get(r)
                    .copied()
                    .ok_or_else(|| Error::Usage(format!("row {} out of range", r)))
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(inputs, labels, self.split)
    }

    /// The rows belonging to the given classes, as a smaller dataset.
    pub fn restricted_to(&self, classes: &[ClassId]) -> Result<Dataset> {
        self.subset(&self.rows_of(classes))
    }
}

/// Matched train/test datasets over the same class set.
#[derive(Debug, Clone)]
pub struct DatasetPair {
    pub train: Dataset,
    pub test: Dataset,
}

impl DatasetPair {
    /// Every class must appear in both splits and input dims must agree.
    pub fn validate(&self) -> Result<()> {
        if self.train.is_empty() || self.test.is_empty() {
            return Err(Error::InvalidConfig("both splits must be non-empty".into()));
        }
        if self.train.input_dim() != self.test.input_dim() {
            return Err(Error::InvalidConfig(format!(
                "train inputs are {}-dim but test inputs are {}-dim",
                self.train.input_dim(),
                self.test.input_dim()
            )));
        }
        let train_classes = self.train.classes();
        let test_classes = self.test.classes();
        if train_classes != test_classes {
            return Err(Error::InvalidConfig(format!(
                "train split has classes {:?} but test split has {:?}",
                train_classes, test_classes
            )));
        }
        Ok(())
    }
}

const CENTER_ATTEMPTS: usize = 200;

/// Synthetic blobs: class centers on a sphere of radius
/// `class_separation * sqrt(num_classes)` with pairwise distance at least
/// `class_separation` (rejection-resampled, bounded attempts), samples drawn
/// as center + N(0, sigma^2) noise. The last fifth of each class's samples
/// (at least one) becomes the test split. Deterministic per seed.
pub fn generate_blobs(
    num_classes: usize,
    dim: usize,
    samples_per_class: usize,
    class_separation: f64,
    noise_sigma: f64,
    seed: u64,
) -> Result<DatasetPair> {
    if num_classes == 0 || dim == 0 {
        return Err(Error::InvalidConfig(
            "blob generation needs at least one class and one dimension".into(),
        ));
    }
    if samples_per_class < 2 {
        return Err(Error::InvalidConfig(
            "need at least 2 samples per class (one train, one test)".into(),
        ));
    }
    if !(class_separation > 0.0 && class_separation.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "class separation must be positive, got {}",
            class_separation
        )));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "noise sigma must be non-negative, got {}",
            noise_sigma
        )));
    }
    let mut rng = stream_rng(seed, Stream::Data);
    let radius = class_separation * (num_classes as f64).sqrt();

    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(num_classes);
    for class in 0..num_classes {
        let mut placed = false;
        for _ in 0..CENTER_ATTEMPTS {
            let raw: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm <= NORM_EPS {
                continue;
            }
            let candidate: Vec<f64> = raw.iter().map(|v| v / norm * radius).collect();
            let well_separated = centers.iter().all(|c| {
                let d2: f64 =
                    c.iter().zip(&candidate).map(|(a, b)| (a - b) * (a - b)).sum();
                d2.sqrt() >= class_separation
            });
            if well_separated {
                centers.push(candidate);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Usage(format!(
                "could not place a center for class {} with separation {} after {} attempts; \
                 lower the separation, the class count, or raise the dimension",
                class, class_separation, CENTER_ATTEMPTS
            )));
        }
    }

    let n_test = (samples_per_class / 5).max(1);
    let n_train = samples_per_class - n_test;
    let mut train_inputs = Vec::with_capacity(num_classes * n_train * dim);
    let mut train_labels = Vec::with_capacity(num_classes * n_train);
    let mut test_inputs = Vec::with_capacity(num_classes * n_test * dim);
    let mut test_labels = Vec::with_capacity(num_classes * n_test);
    for (class, center) in centers.iter().enumerate() {
        for s in 0..samples_per_class {
            let sample: Vec<f64> = center
                .iter()
                .map(|c| c + noise_sigma * rng.sample::<f64, _>(StandardNormal))
                .collect();
            if s < n_train {
                train_inputs.extend_from_slice(&sample);
                train_labels.push(ClassId(class as u32));
            } else {
                test_inputs.extend_from_slice(&sample);
                test_labels.push(ClassId(class as u32));
            }
        }
    }
    let pair = DatasetPair {
        train: Dataset::new(
            Tensor::matrix(train_labels.len(), dim, train_inputs)?,
            train_labels,
            Split::Train,
        )?,
        test: Dataset::new(
            Tensor::matrix(test_labels.len(), dim, test_inputs)?,
            test_labels,
            Split::Test,
        )?,
    };
    pair.validate()?;
    Ok(pair)
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

struct IdxReader<'a> {
    bytes: &'a [u8],
    offset: usize,
    path: String,
}

impl<'a> IdxReader<'a> {
    fn new(bytes: &'a [u8], path: &Path) -> IdxReader<'a> {
        IdxReader { bytes, offset: 0, path: path.display().to_string() }
    }

    fn read_u32_be(&mut self) -> Result<u32> {
        let end = self.offset + 4;
        let slice = self.bytes.get(self.offset..end).ok_or_else(|| {
            Error::Format(format!(
                "{}: truncated at byte {} (wanted a 4-byte big-endian integer)",
                self.path, self.offset
            ))
        })?;
        let v = u32::from_be_bytes(slice.try_into().expect("length checked"));
        self.offset = end;
        Ok(v)
    }

    fn read_bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.offset + n;
        let slice = self.bytes.get(self.offset..end).ok_or_else(|| {
            Error::Format(format!(
                "{}: truncated at byte {} (wanted {} data bytes, file has {})",
                self.path,
                self.offset,
                n,
                self.bytes.len()
            ))
        })?;
        self.offset = end;
        Ok(slice)
    }

    fn finish(&self) -> Result<()> {
        if self.offset != self.bytes.len() {
            return Err(Error::Format(format!(
                "{}: {} trailing bytes after offset {}",
                self.path,
                self.bytes.len() - self.offset,
                self.offset
            )));
        }
        Ok(())
    }
}

/// Load an IDX image/label file pair (images magic `0x00000803`, labels
/// magic `0x00000801`, big-endian dimensions). Pixels are scaled to
/// `[0, 1]` by dividing by 255; images are flattened row-major.
pub fn load_idx(images_path: &Path, labels_path: &Path, split: Split) -> Result<Dataset> {
    let image_bytes = fs::read(images_path)?;
    let mut r = IdxReader::new(&image_bytes, images_path);
    let magic = r.read_u32_be()?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "{}: bad image magic {:#010x} at byte 0 (expected {:#010x})",
            images_path.display(),
            magic,
            IDX_IMAGES_MAGIC
        )));
    }
    let count = r.read_u32_be()? as usize;
    let rows = r.read_u32_be()? as usize;
    let cols = r.read_u32_be()? as usize;
    let pixels = r.read_bytes(count * rows * cols)?;
    r.finish()?;

    let label_bytes = fs::read(labels_path)?;
    let mut r = IdxReader::new(&label_bytes, labels_path);
    let magic = r.read_u32_be()?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "{}: bad label magic {:#010x} at byte 0 (expected {:#010x})",
            labels_path.display(),
            magic,
            IDX_LABELS_MAGIC
        )));
    }
    let label_count = r.read_u32_be()? as usize;
    let raw_labels = r.read_bytes(label_count)?;
    r.finish()?;

    if label_count != count {
        return Err(Error::Format(format!(
            "{} images but {} labels",
            count, label_count
        )));
    }
    if count == 0 || rows * cols == 0 {
        return Err(Error::Format("IDX pair holds no data".into()));
    }
    let inputs: Vec<f64> = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let labels: Vec<ClassId> = raw_labels.iter().map(|&l| ClassId(l as u32)).collect();
    Dataset::new(Tensor::matrix(count, rows * cols, inputs)?, labels, split)
}

/// Write an IDX image file (fixture/test helper, also used by the fixture
/// generator command). Every image must be `rows * cols` bytes.
pub fn write_idx_images(path: &Path, images: &[Vec<u8>], rows: u32, cols: u32) -> Result<()> {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    bytes.extend_from_slice(&(images.len() as u32).to_be_bytes());
    bytes.extend_from_slice(&rows.to_be_bytes());
    bytes.extend_from_slice(&cols.to_be_bytes());
    for image in images {
        if image.len() != (rows * cols) as usize {
            return Err(Error::Usage(format!(
                "image has {} pixels, expected {}",
                image.len(),
                rows * cols
            )));
        }
        bytes.extend_from_slice(image);
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Write an IDX label file (fixture/test helper).
pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    bytes.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    bytes.extend_from_slice(labels);
    fs::write(path, bytes)?;
    Ok(())
}

/// The protocol's task list: task 0 is the base task, tasks `1..=T` the
/// increments, together covering every class exactly once.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskAssignment {
    pub tasks: Vec<TaskSpec>,
    pub order_seed: u64,
}

impl TaskAssignment {
    pub fn base(&self) -> &TaskSpec {
        &self.tasks[0]
    }

    pub fn increments(&self) -> &[TaskSpec] {
        &self.tasks[1..]
    }

    /// All classes in arrival order.
    pub fn all_classes(&self) -> Vec<ClassId> {
        self.tasks.iter().flat_map(|t| t.classes.iter().copied()).collect()
    }
}

/// Split `num_classes` into a base task of `round(num_classes *
/// base_fraction)` classes plus `num_increments` equal increments, after
/// shuffling class ids with `order_seed`. Errors when the remaining classes
/// do not divide evenly.
pub fn assign_tasks(
    num_classes: usize,
    base_fraction: f64,
    num_increments: usize,
    order_seed: u64,
) -> Result<TaskAssignment> {
    if num_classes == 0 {
        return Err(Error::InvalidConfig("need at least one class".into()));
    }
    if !(base_fraction > 0.0 && base_fraction <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "base-fraction must be in (0, 1], got {}",
            base_fraction
        )));
    }
    let base_count = (num_classes as f64 * base_fraction).round() as usize;
    if base_count == 0 {
        return Err(Error::InvalidConfig(format!(
            "base-fraction {} rounds to an empty base task for {} classes",
            base_fraction, num_classes
        )));
    }
    if base_count > num_classes {
        return Err(Error::InvalidConfig(format!(
            "base task of {} classes exceeds the {} available",
            base_count, num_classes
        )));
    }
    let rest = num_classes - base_count;
    if num_increments == 0 {
        if rest != 0 {
            return Err(Error::InvalidConfig(format!(
                "{} classes remain after the base task but num-increments is 0",
                rest
            )));
        }
    } else {
        if rest == 0 {
            return Err(Error::InvalidConfig(format!(
                "num-increments is {} but the base task already takes all {} classes",
                num_increments, num_classes
            )));
        }
        if rest % num_increments != 0 {
            return Err(Error::InvalidConfig(format!(
                "{} classes remain after the base task; not divisible into {} increments",
                rest, num_increments
            )));
        }
    }

    let mut ids: Vec<ClassId> = (0..num_classes as u32).map(ClassId).collect();
    let mut rng = stream_rng(order_seed, Stream::Data);
    ids.shuffle(&mut rng);

    let mut tasks = Vec::with_capacity(1 + num_increments);
    tasks.push(TaskSpec::new(0, ids[..base_count].to_vec())?);
    if num_increments > 0 {
        let per = rest / num_increments;
        for t in 0..num_increments {
            let start = base_count + t * per;
            tasks.push(TaskSpec::new(t + 1, ids[start..start + per].to_vec())?);
        }
    }
    Ok(TaskAssignment { tasks, order_seed })
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
struct CacheManifest {
    input_dim: usize,
    train: CacheSplit,
    test: CacheSplit,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
struct CacheSplit {
    count: usize,
    labels: Vec<ClassId>,
}

/// Export a dataset pair to `dir` as two raw little-endian f64 blobs
/// (`train.bin`, `test.bin`, row-major) plus `cache-manifest.json` carrying
/// dimensions and labels. Round-trips bit-exactly through [`load_cache`].
pub fn save_cache(pair: &DatasetPair, dir: &Path) -> Result<()> {
    pair.validate()?;
    fs::create_dir_all(dir)?;
    let write_split = |name: &str, ds: &Dataset| -> Result<()> {
        let mut bytes = Vec::with_capacity(ds.inputs.data().len() * 8);
        for v in ds.inputs.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(dir.join(name), bytes)?;
        Ok(())
    };
    write_split("train.bin", &pair.train)?;
    write_split("test.bin", &pair.test)?;
    let manifest = CacheManifest {
        input_dim: pair.train.input_dim(),
        train: CacheSplit { count: pair.train.len(), labels: pair.train.labels.clone() },
        test: CacheSplit { count: pair.test.len(), labels: pair.test.labels.clone() },
    };
    fs::write(dir.join("cache-manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

/// Load a dataset pair written by [`save_cache`].
pub fn load_cache(dir: &Path) -> Result<DatasetPair> {
    let manifest: CacheManifest =
        serde_json::from_slice(&fs::read(dir.join("cache-manifest.json"))?)?;
    let read_split = |name: &str, meta: &CacheSplit, split: Split| -> Result<Dataset> {
        let bytes = fs::read(dir.join(name))?;
        let expected = meta.count * manifest.input_dim * 8;
        if bytes.len() != expected {
            return Err(Error::Format(format!(
                "{}: {} bytes, manifest expects {}",
                dir.join(name).display(),
                bytes.len(),
                expected
            )));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("chunks of 8")))
            .collect();
        Dataset::new(
            Tensor::matrix(meta.count, manifest.input_dim, values)?,
            meta.labels.clone(),
            split,
        )
    };
    let pair = DatasetPair {
        train: read_split("train.bin", &manifest.train, Split::Train)?,
        test: read_split("test.bin", &manifest.test, Split::Test)?,
    };
    pair.validate()?;
    Ok(pair)
}
