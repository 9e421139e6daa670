//! Fixed-budget exemplar memory with herding selection.
//!
//! After a task completes, [`update_store`] picks up to `budget_per_class`
//! training samples per class by greedy mean-matching over features from the
//! completion snapshot ([`herding_select`]), and [`replay_batch`] later mixes
//! stored exemplars into new-task minibatches.
//!
//! The store keeps raw *input* rows (so replay feeds the current model, not
//! stale features) together with the source row indices for auditability.
//! It is only mutated between tasks; during training it is read-only.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::ModelSnapshot;
use crate::pool::{ClassId, TaskSpec};
use crate::rng::RunRng;
use crate::tensor::Tensor;

/// Exemplars of one class, in selection order.
#[derive(Debug, Clone)]
struct StoredClass {
    /// `count * input_dim` values, row-major.
    rows: Vec<f64>,
    /// For each stored row, the row index it came from in the dataset it was
    /// selected out of.
    source_indices: Vec<usize>,
}

/// Per-class exemplar memory. Class ids are only ever inserted for completed
/// tasks (the trainer updates the store strictly between tasks).
#[derive(Debug, Clone)]
pub struct ExemplarStore {
    budget_per_class: usize,
    input_dim: usize,
    by_class: BTreeMap<ClassId, StoredClass>,
}

impl ExemplarStore {
    pub fn new(budget_per_class: usize, input_dim: usize) -> Result<ExemplarStore> {
        if budget_per_class == 0 {
            return Err(Error::InvalidConfig("exemplar budget must be at least 1".into()));
        }
        if input_dim == 0 {
            return Err(Error::InvalidConfig("exemplar input dimension must be positive".into()));
        }
        Ok(ExemplarStore { budget_per_class, input_dim, by_class: BTreeMap::new() })
    }

    pub fn budget_per_class(&self) -> usize {
        self.budget_per_class
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.by_class.len()
    }

    pub fn total_stored(&self) -> usize {
        self.by_class.values().map(|c| c.source_indices.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.by_class.is_empty()
    }

    pub fn classes(&self) -> Vec<ClassId> {
        self.by_class.keys().copied().collect()
    }

    /// Stored exemplar rows of one class as an `[count, input_dim]` tensor,
    /// plus the source row indices, in selection order.
    pub fn exemplars_of(&self, class: ClassId) -> Option<(Tensor, &[usize])> {
        self.by_class.get(&class).map(|sc| {
            let t = Tensor::matrix(sc.source_indices.len(), self.input_dim, sc.rows.clone())
                .expect("stored rows are consistent by construction");
            (t, sc.source_indices.as_slice())
        })
    }

    /// Write the store to `dir` as `exemplars.bin` (raw little-endian f64
    /// rows, classes in ascending id order, selection order within a class)
    /// plus `exemplars-index.json` describing the layout.
    pub fn dump(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut blob: Vec<u8> =
            Vec::with_capacity(self.total_stored() * self.input_dim * 8);
        let mut index = DumpIndex {
            input_dim: self.input_dim,
            budget_per_class: self.budget_per_class,
            classes: Vec::with_capacity(self.by_class.len()),
        };
        let mut row_offset = 0usize;
        for (class, sc) in &self.by_class {
            for v in &sc.rows {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            index.classes.push(DumpClass {
                class: *class,
                count: sc.source_indices.len(),
                row_offset,
                source_indices: sc.source_indices.clone(),
            });
            row_offset += sc.source_indices.len();
        }
        let mut bin = fs::File::create(dir.join("exemplars.bin"))?;
        bin.write_all(&blob)?;
        let json = serde_json::to_vec_pretty(&index)?;
        fs::write(dir.join("exemplars-index.json"), json)?;
        Ok(())
    }
}

#[derive(Serialize)]
#[serde(rename_all = "kebab-case")]
struct DumpIndex {
    input_dim: usize,
    budget_per_class: usize,
    classes: Vec<DumpClass>,
}

#[derive(Serialize)]
#[serde(rename_all = "kebab-case")]
struct DumpClass {
    class: ClassId,
    count: usize,
    row_offset: usize,
    source_indices: Vec<usize>,
}

/// Greedy mean-matching selection: pick `budget` row indices so that after
/// each pick the mean of the selected rows is closest (Euclidean) to the
/// mean of all rows. Returns picks in selection order; score ties go to the
/// lowest index.
///
/// Comparisons use the squared distance (same argmin, same ties) and the
/// selected-row sum is accumulated in pick order, so an oracle that re-sums
/// the picked rows in that order reproduces the scores bit-for-bit.
pub fn herding_select(features: &Tensor, budget: usize) -> Result<Vec<usize>> {
    let (n, d) = features.dims2()?;
    if n == 0 {
        return Err(Error::Usage("herding over zero rows".into()));
    }
    if budget == 0 || budget > n {
        return Err(Error::Usage(format!(
            "herding budget must be in 1..={}, got {}",
            n, budget
        )));
    }
    let data = features.data();
    let mut mean = vec![0.0; d];
    for row in data.chunks_exact(d) {
        for (m, x) in mean.iter_mut().zip(row) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }

    let mut picked = vec![false; n];
    let mut selected_sum = vec![0.0; d];
    let mut order = Vec::with_capacity(budget);
    for k in 0..budget {
        let divisor = (k + 1) as f64;
        let mut best: Option<(f64, usize)> = None;
        for i in 0..n {
            if picked[i] {
                continue;
            }
            let row = &data[i * d..(i + 1) * d];
            let mut dist2 = 0.0;
            for c in 0..d {
                let diff = mean[c] - (selected_sum[c] + row[c]) / divisor;
                dist2 += diff * diff;
            }
            if best.map_or(true, |(bd, _)| dist2 < bd) {
                best = Some((dist2, i));
            }
        }
        let (_, idx) = best.expect("n > budget picks so far");
        picked[idx] = true;
        for (s, x) in selected_sum.iter_mut().zip(&data[idx * d..(idx + 1) * d]) {
            *s += x;
        }
        order.push(idx);
    }
    Ok(order)
}

/// Select and store exemplars for every class of a just-completed task.
///
/// Features come from the completion snapshot (the model as it stood when
/// the task finished). Classes with fewer samples than the budget keep all
/// their samples. Re-inserting a class replaces its previous exemplars.
pub fn update_store(
    store: &mut ExemplarStore,
    task: &TaskSpec,
    completion_snapshot: &ModelSnapshot,
    inputs: &Tensor,
    labels: &[ClassId],
) -> Result<()> {
    let (n, d) = inputs.dims2()?;
    if labels.len() != n {
        return Err(Error::Usage(format!("{} labels for {} input rows", labels.len(), n)));
    }
    if d != store.input_dim {
        return Err(Error::ShapeMismatch(format!(
            "store holds {}-dim inputs, got {}-dim",
            store.input_dim, d
        )));
    }
    for &class in &task.classes {
        let rows: Vec<usize> = labels
            .iter()
            .enumerate()
            .filter(|(_, l)| **l == class)
            .map(|(i, _)| i)
            .collect();
        if rows.is_empty() {
            return Err(Error::Usage(format!(
                "task {} class {} has no training rows to select exemplars from",
                task.task_id, class
            )));
        }
        let class_inputs = inputs.gather_rows(&rows)?;
        let features = completion_snapshot.extract_features(&class_inputs)?;
        let budget = store.budget_per_class.min(rows.len());
        let picks = herding_select(&features, budget)?;
        let mut stored_rows = Vec::with_capacity(picks.len() * d);
        for &p in &picks {
            stored_rows.extend_from_slice(&class_inputs.data()[p * d..(p + 1) * d]);
        }
        let source_indices = picks.iter().map(|&p| rows[p]).collect();
        store
            .by_class
            .insert(class, StoredClass { rows: stored_rows, source_indices });
    }
    Ok(())
}

/// Draw `size` exemplars uniformly with replacement across everything
/// stored, returning inputs and labels. The flattened index space orders
/// classes ascending and exemplars in selection order, so a seeded rng gives
/// a reproducible batch.
pub fn replay_batch(
    store: &ExemplarStore,
    size: usize,
    rng: &mut RunRng,
) -> Result<(Tensor, Vec<ClassId>)> {
    if store.is_empty() {
        return Err(Error::Usage("cannot draw a replay batch from an empty store".into()));
    }
    if size == 0 {
        return Err(Error::Usage("replay batch size must be at least 1".into()));
    }
    let total = store.total_stored();
    let d = store.input_dim;
    let mut batch = Vec::with_capacity(size * d);
    let mut labels = Vec::with_capacity(size);
    for _ in 0..size {
        let mut idx = rng.gen_range(0..total);
        for (class, sc) in &store.by_class {
            let count = sc.source_indices.len();
            if idx < count {
                batch.extend_from_slice(&sc.rows[idx * d..(idx + 1) * d]);
                labels.push(*class);
                break;
            }
            idx -= count;
        }
    }
    let inputs = Tensor::matrix(size, d, batch)?;
    Ok((inputs, labels))
}
