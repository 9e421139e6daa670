//! Dense f64 tensors and a tape-based reverse-mode autodiff core.
//!
//! Design notes:
//! - Tensors are plain row-major buffers. There is no broadcasting beyond the
//!   bias add in [`Tape::affine`]; every other binary op requires exact shape
//!   agreement, and shape mismatches are errors rather than panics.
//! - The tape is a Wengert list: each forward op appends a record holding the
//!   node indices involved plus whatever forward quantities its backward rule
//!   needs (softmax probabilities, unit vectors, ...). [`Tape::backward`]
//!   walks the records in reverse and accumulates gradients additively, so a
//!   node used several times receives the sum of its contributions.
//! - Losses with structured backward rules (cross-entropy over a column
//!   subset, tempered KL against a frozen teacher) are single fused records.
//!   Their gradients are hand-derived and checked against central finite
//!   differences in the test suites.
//! - Every op validates its output for finiteness; a NaN or infinity anywhere
//!   turns into an error instead of silently poisoning the run.
//! - A tape lives for one forward/backward pass. Persistent parameters are
//!   `Tensor`s owned outside the tape; gradients are harvested back into them
//!   (see `model::TapedForward`) and consumed by the optimizer.

use crate::error::{Error, Result};

/// Floor applied inside logarithms so that vanishing probabilities produce
/// large finite losses instead of infinities.
pub const LOG_EPS: f64 = 1e-12;

/// Floor applied to vector norms before dividing by them.
pub const NORM_EPS: f64 = 1e-12;

/// Minimum `m * k * n` before the matmul kernel fans rows out to threads.
/// Below this the serial loop wins; above it the row split is bit-identical
/// to the serial result because each output row is still computed serially.
#[cfg(feature = "parallel")]
const PAR_WORK_THRESHOLD: usize = 1 << 21;

/// A dense row-major f64 tensor.
///
/// `grad` is populated for parameters after gradients are harvested from a
/// tape; it accumulates across harvests until the optimizer consumes and
/// clears it.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor { shape, data: vec![0.0; n], requires_grad: false, grad: None }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor { shape: vec![1], data: vec![v], requires_grad: false, grad: None }
    }

    /// A `rows x cols` matrix from row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Tensor> {
        Tensor::from_vec(vec![rows, cols], data)
    }

    /// Marks the tensor as a trainable parameter.
    pub fn with_grad(mut self) -> Tensor {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the raw buffer; used by the optimizer and by probes
    /// that perturb and restore parameters in place.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Adds `delta` into the stored gradient, allocating zeros on first use.
    pub fn accumulate_grad(&mut self, delta: &[f64]) -> Result<()> {
        if delta.len() != self.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "gradient of length {} for tensor of length {}",
                delta.len(),
                self.data.len()
            )));
        }
        let grad = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// The two dimensions of a matrix, or an error for other ranks.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        if self.shape.len() == 2 {
            Ok((self.shape[0], self.shape[1]))
        } else {
            Err(Error::ShapeMismatch(format!("expected a matrix, got shape {:?}", self.shape)))
        }
    }

    /// A new matrix holding the given rows of `self`, in the given order.
    pub fn gather_rows(&self, rows: &[usize]) -> Result<Tensor> {
        let (n, cols) = self.dims2()?;
        let mut out = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            if r >= n {
                return Err(Error::Usage(format!("row {} out of range for {} rows", r, n)));
            }
            out.extend_from_slice(&self.data[r * cols..(r + 1) * cols]);
        }
        Tensor::matrix(rows.len(), cols, out)
    }

    /// A new matrix holding the given columns of `self`, in the given order.
    pub fn gather_cols(&self, cols: &[usize]) -> Result<Tensor> {
        let (rows, n) = self.dims2()?;
        let mut out = Vec::with_capacity(rows * cols.len());
        for r in 0..rows {
            for &c in cols {
                if c >= n {
                    return Err(Error::Usage(format!("column {} out of range for {} columns", c, n)));
                }
                out.push(self.data[r * n + c]);
            }
        }
        Tensor::matrix(rows, cols.len(), out)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// A copy sharing no state, with gradients dropped and the parameter flag
    /// cleared. Snapshots and tape leaves are built from this.
    pub fn detached(&self) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.clone(), requires_grad: false, grad: None }
    }
}

fn ensure_finite(data: &[f64], what: &str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{} contains NaN or infinity", what)))
    }
}

// ---------------------------------------------------------------------------
// Kernels shared by taped ops and the value-level (no-grad) forward paths.
// ---------------------------------------------------------------------------

/// `a [m,k] . b [k,n] -> [m,n]`. Row-parallel above a work threshold; the
/// per-element summation order is identical either way, so results do not
/// depend on thread count.
pub(crate) fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    #[cfg(feature = "parallel")]
    {
        if m * k * n >= PAR_WORK_THRESHOLD && m > 1 {
            use rayon::prelude::*;
            out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
                matmul_row(a, b, k, n, i, row);
            });
            return out;
        }
    }
    for (i, row) in out.chunks_mut(n).enumerate() {
        matmul_row(a, b, k, n, i, row);
    }
    out
}

#[inline]
fn matmul_row(a: &[f64], b: &[f64], k: usize, n: usize, i: usize, row: &mut [f64]) {
    for p in 0..k {
        let a_ip = a[i * k + p];
        let b_row = &b[p * n..(p + 1) * n];
        for (o, bv) in row.iter_mut().zip(b_row) {
            *o += a_ip * bv;
        }
    }
}

/// `a [m,k] . b^T` where `b` is `[n,k]` -> `[m,n]`.
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[j * k + p];
            }
            out[i * n + j] = s;
        }
    }
    out
}

/// `a^T . b` where `a` is `[k,m]`, `b` is `[k,n]` -> `[m,n]`.
pub(crate) fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        for i in 0..m {
            let a_pi = a[p * m + i];
            let b_row = &b[p * n..(p + 1) * n];
            for j in 0..n {
                out[i * n + j] += a_pi * b_row[j];
            }
        }
    }
    out
}

/// Forward quantities of the cosine head, shared by the taped op (which keeps
/// the caches for backward) and the value-level model forward.
pub(crate) struct CosineForward {
    pub unit_x: Vec<f64>,
    pub unit_w: Vec<f64>,
    pub norms_x: Vec<f64>,
    pub norms_w: Vec<f64>,
    pub cos: Vec<f64>,
}

pub(crate) fn cosine_forward(
    xd: &[f64],
    wd: &[f64],
    bsz: usize,
    din: usize,
    dout: usize,
) -> CosineForward {
    let mut norms_x = vec![0.0; bsz];
    let mut unit_x = vec![0.0; bsz * din];
    for i in 0..bsz {
        let row = &xd[i * din..(i + 1) * din];
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
        norms_x[i] = n;
        for (u, &v) in unit_x[i * din..(i + 1) * din].iter_mut().zip(row) {
            *u = v / n;
        }
    }
    let mut norms_w = vec![0.0; dout];
    let mut unit_w = vec![0.0; din * dout];
    for j in 0..dout {
        let mut n = 0.0;
        for p in 0..din {
            n += wd[p * dout + j] * wd[p * dout + j];
        }
        let n = n.sqrt().max(NORM_EPS);
        norms_w[j] = n;
        for p in 0..din {
            unit_w[p * dout + j] = wd[p * dout + j] / n;
        }
    }
    let cos = matmul_nn(&unit_x, &unit_w, bsz, din, dout);
    CosineForward { unit_x, unit_w, norms_x, norms_w, cos }
}

/// Row-wise softmax of `data / temperature` for a `rows x cols` buffer, with
/// the row maximum subtracted before exponentiation for stability.
pub(crate) fn softmax_rows_scaled(data: &[f64], rows: usize, cols: usize, temperature: f64) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &data[r * cols..(r + 1) * cols];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (j, &v) in row.iter().enumerate() {
            let e = ((v - m) / temperature).exp();
            out[r * cols + j] = e;
            sum += e;
        }
        for j in 0..cols {
            out[r * cols + j] /= sum;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// The tape.
// ---------------------------------------------------------------------------

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

struct Node {
    value: Tensor,
    needs_grad: bool,
}

/// Which probability sits in front of the logarithm in a tempered KL term.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KlDirection {
    /// `sum teacher * ln(teacher / student)`: the frozen teacher leads.
    TeacherLed,
    /// `sum student * ln(student / teacher)`: the student leads.
    StudentLed,
}

enum Op {
    Affine { x: Var, w: Var, b: Var, out: Var },
    Relu { x: Var, out: Var },
    Add { a: Var, b: Var, out: Var },
    Mul { a: Var, b: Var, out: Var },
    Sum { x: Var, out: Var },
    Scale { x: Var, c: f64, out: Var },
    AddScaled { a: Var, b: Var, c: f64, out: Var },
    CosineAffine {
        x: Var,
        w: Var,
        s: Var,
        out: Var,
        unit_x: Vec<f64>,
        unit_w: Vec<f64>,
        norms_x: Vec<f64>,
        norms_w: Vec<f64>,
        cos: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        rows: Vec<usize>,
        cols: Vec<usize>,
        label_pos: Vec<usize>,
        divisor: f64,
        probs: Vec<f64>,
        out: Var,
    },
    KlTerm {
        student: Var,
        rows: Vec<usize>,
        cols: Vec<usize>,
        temperature: f64,
        rescale: f64,
        direction: KlDirection,
        student_probs: Vec<f64>,
        teacher_probs: Vec<f64>,
        out: Var,
    },
}

/// A single-use record of one forward pass, consumed by [`Tape::backward`].
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    ops: Vec<Op>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    fn push_node(&mut self, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn check_var(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::Usage(format!("variable #{} does not belong to this tape", v.0)))
        }
    }

    /// Copies a tensor onto the tape. The node participates in backward iff
    /// the tensor is marked `requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let needs = t.requires_grad();
        self.push_node(t.detached(), needs)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// The single element of a scalar node.
    pub fn scalar_value(&self, v: Var) -> Result<f64> {
        let t = self.value(v);
        if t.len() == 1 {
            Ok(t.data()[0])
        } else {
            Err(Error::Usage(format!("expected a scalar, got shape {:?}", t.shape())))
        }
    }

    /// Gradient of the last `backward` target with respect to node `v`, if
    /// the node participated.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    // -- ops ----------------------------------------------------------------

    /// `x [b,i] . w [i,j] + bias [j]`, the bias added to every row.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.check_var(x)?;
        self.check_var(w)?;
        self.check_var(b)?;
        let (bsz, din) = self.value(x).dims2()?;
        let (win, dout) = self.value(w).dims2()?;
        if din != win {
            return Err(Error::ShapeMismatch(format!(
                "affine input has {} features but weight expects {}",
                din, win
            )));
        }
        if self.value(b).shape() != [dout] {
            return Err(Error::ShapeMismatch(format!(
                "bias shape {:?} does not match {} output columns",
                self.value(b).shape(),
                dout
            )));
        }
        let mut out = matmul_nn(self.value(x).data(), self.value(w).data(), bsz, din, dout);
        let bias = self.value(b).data();
        for row in out.chunks_mut(dout) {
            for (o, bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        ensure_finite(&out, "affine output")?;
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        let out = self.push_node(Tensor::matrix(bsz, dout, out)?, needs);
        self.ops.push(Op::Affine { x, w, b, out });
        Ok(out)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.check_var(x)?;
        let t = self.value(x);
        let data: Vec<f64> = t.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let shape = t.shape().to_vec();
        let needs = self.needs(x);
        let out = self.push_node(Tensor::from_vec(shape, data)?, needs);
        self.ops.push(Op::Relu { x, out });
        Ok(out)
    }

    /// Elementwise sum of two same-shape nodes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_var(a)?;
        self.check_var(b)?;
        self.binary_same_shape(a, b, "add")?;
        let data: Vec<f64> =
            self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        ensure_finite(&data, "add output")?;
        let shape = self.value(a).shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        let out = self.push_node(Tensor::from_vec(shape, data)?, needs);
        self.ops.push(Op::Add { a, b, out });
        Ok(out)
    }

    /// Elementwise product of two same-shape nodes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_var(a)?;
        self.check_var(b)?;
        self.binary_same_shape(a, b, "mul")?;
        let data: Vec<f64> =
            self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        ensure_finite(&data, "mul output")?;
        let shape = self.value(a).shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        let out = self.push_node(Tensor::from_vec(shape, data)?, needs);
        self.ops.push(Op::Mul { a, b, out });
        Ok(out)
    }

    fn binary_same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::ShapeMismatch(format!(
                "{}: shapes {:?} and {:?} differ",
                what,
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check_var(x)?;
        let s: f64 = self.value(x).data().iter().sum();
        ensure_finite(&[s], "sum output")?;
        let needs = self.needs(x);
        let out = self.push_node(Tensor::scalar(s), needs);
        self.ops.push(Op::Sum { x, out });
        Ok(out)
    }

    /// `c * x` for a constant `c`.
    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.check_var(x)?;
        let data: Vec<f64> = self.value(x).data().iter().map(|v| c * v).collect();
        ensure_finite(&data, "scale output")?;
        let shape = self.value(x).shape().to_vec();
        let needs = self.needs(x);
        let out = self.push_node(Tensor::from_vec(shape, data)?, needs);
        self.ops.push(Op::Scale { x, c, out });
        Ok(out)
    }

    /// `a + c * b` for a constant `c`; shapes must match.
    pub fn add_scaled(&mut self, a: Var, b: Var, c: f64) -> Result<Var> {
        self.check_var(a)?;
        self.check_var(b)?;
        self.binary_same_shape(a, b, "add_scaled")?;
        let data: Vec<f64> =
            self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + c * y).collect();
        ensure_finite(&data, "add_scaled output")?;
        let shape = self.value(a).shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        let out = self.push_node(Tensor::from_vec(shape, data)?, needs);
        self.ops.push(Op::AddScaled { a, b, c, out });
        Ok(out)
    }

    /// Cosine classifier head: `out = s * normalize_rows(x) . normalize_cols(w)`
    /// with no bias and a learnable scalar scale `s`. Every logit therefore
    /// lies in `[-s, s]`.
    pub fn cosine_affine(&mut self, x: Var, w: Var, s: Var) -> Result<Var> {
        self.check_var(x)?;
        self.check_var(w)?;
        self.check_var(s)?;
        let (bsz, din) = self.value(x).dims2()?;
        let (win, dout) = self.value(w).dims2()?;
        if din != win {
            return Err(Error::ShapeMismatch(format!(
                "cosine head input has {} features but weight expects {}",
                din, win
            )));
        }
        if self.value(s).len() != 1 {
            return Err(Error::ShapeMismatch("cosine scale must be a scalar".into()));
        }
        let scale = self.value(s).data()[0];
        let CosineForward { unit_x, unit_w, norms_x, norms_w, cos } =
            cosine_forward(self.value(x).data(), self.value(w).data(), bsz, din, dout);
        let out_data: Vec<f64> = cos.iter().map(|c| scale * c).collect();
        ensure_finite(&out_data, "cosine head output")?;
        let needs = self.needs(x) || self.needs(w) || self.needs(s);
        let out = self.push_node(Tensor::matrix(bsz, dout, out_data)?, needs);
        self.ops.push(Op::CosineAffine { x, w, s, out, unit_x, unit_w, norms_x, norms_w, cos });
        Ok(out)
    }

    /// Mean cross-entropy of `softmax(logits[rows, cols])` against per-row
    /// label positions, divided by `divisor` instead of `rows.len()` so that
    /// several row groups of one batch can share a single batch-mean scale.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        rows: &[usize],
        cols: &[usize],
        label_pos: &[usize],
        divisor: f64,
    ) -> Result<Var> {
        self.check_var(logits)?;
        let (bsz, width) = self.value(logits).dims2()?;
        if rows.is_empty() || cols.is_empty() {
            return Err(Error::Usage("cross_entropy over an empty row or column set".into()));
        }
        if label_pos.len() != rows.len() {
            return Err(Error::Usage(format!(
                "{} labels for {} rows",
                label_pos.len(),
                rows.len()
            )));
        }
        if divisor <= 0.0 {
            return Err(Error::Usage("cross_entropy divisor must be positive".into()));
        }
        if let Some(&r) = rows.iter().find(|&&r| r >= bsz) {
            return Err(Error::Usage(format!("row {} out of range for batch of {}", r, bsz)));
        }
        if let Some(&c) = cols.iter().find(|&&c| c >= width) {
            return Err(Error::Usage(format!("column {} out of range for {} logits", c, width)));
        }
        if let Some(&l) = label_pos.iter().find(|&&l| l >= cols.len()) {
            return Err(Error::Usage(format!(
                "label position {} out of range for {} columns",
                l,
                cols.len()
            )));
        }
        let ld = self.value(logits).data();
        let mut sliced = Vec::with_capacity(rows.len() * cols.len());
        for &r in rows {
            for &c in cols {
                sliced.push(ld[r * width + c]);
            }
        }
        let probs = softmax_rows_scaled(&sliced, rows.len(), cols.len(), 1.0);
        let mut loss = 0.0;
        for (r, &lp) in label_pos.iter().enumerate() {
            loss -= probs[r * cols.len() + lp].max(LOG_EPS).ln();
        }
        loss /= divisor;
        ensure_finite(&[loss], "cross_entropy output")?;
        let needs = self.needs(logits);
        let out = self.push_node(Tensor::scalar(loss), needs);
        self.ops.push(Op::CrossEntropy {
            logits,
            rows: rows.to_vec(),
            cols: cols.to_vec(),
            label_pos: label_pos.to_vec(),
            divisor,
            probs,
            out,
        });
        Ok(out)
    }

    /// One tempered KL term between the student logits restricted to
    /// `(rows, cols)` and fixed teacher probabilities over the same slice.
    ///
    /// `teacher_probs` must already be softened probabilities, row-major with
    /// `rows.len()` rows and `cols.len()` columns; the teacher side is a
    /// constant, so gradients flow only into the student logits. The mean is
    /// taken over the included rows, and `rescale` multiplies the result
    /// (1 normally, temperature^2 when the classic rescale is enabled).
    #[allow(clippy::too_many_arguments)]
    pub fn kd_term(
        &mut self,
        student: Var,
        teacher_probs: Vec<f64>,
        rows: &[usize],
        cols: &[usize],
        temperature: f64,
        rescale: f64,
        direction: KlDirection,
    ) -> Result<Var> {
        self.check_var(student)?;
        let (bsz, width) = self.value(student).dims2()?;
        if rows.is_empty() || cols.is_empty() {
            return Err(Error::Usage("kd_term over an empty row or column set".into()));
        }
        if temperature <= 0.0 {
            return Err(Error::Usage("kd_term temperature must be positive".into()));
        }
        if teacher_probs.len() != rows.len() * cols.len() {
            return Err(Error::ShapeMismatch(format!(
                "teacher probabilities have {} entries, expected {}",
                teacher_probs.len(),
                rows.len() * cols.len()
            )));
        }
        if let Some(&r) = rows.iter().find(|&&r| r >= bsz) {
            return Err(Error::Usage(format!("row {} out of range for batch of {}", r, bsz)));
        }
        if let Some(&c) = cols.iter().find(|&&c| c >= width) {
            return Err(Error::Usage(format!("column {} out of range for {} logits", c, width)));
        }
        let sd = self.value(student).data();
        let k = cols.len();
        let mut sliced = Vec::with_capacity(rows.len() * k);
        for &r in rows {
            for &c in cols {
                sliced.push(sd[r * width + c]);
            }
        }
        let student_probs = softmax_rows_scaled(&sliced, rows.len(), k, temperature);
        let mut total = 0.0;
        for r in 0..rows.len() {
            for j in 0..k {
                let p = student_probs[r * k + j];
                let q = teacher_probs[r * k + j];
                let (lead, follow) = match direction {
                    KlDirection::TeacherLed => (q, p),
                    KlDirection::StudentLed => (p, q),
                };
                if lead > 0.0 {
                    total += lead * (lead.max(LOG_EPS).ln() - follow.max(LOG_EPS).ln());
                }
            }
        }
        let loss = rescale * total / rows.len() as f64;
        ensure_finite(&[loss], "kd_term output")?;
        let needs = self.needs(student);
        let out = self.push_node(Tensor::scalar(loss), needs);
        self.ops.push(Op::KlTerm {
            student,
            rows: rows.to_vec(),
            cols: cols.to_vec(),
            temperature,
            rescale,
            direction,
            student_probs,
            teacher_probs,
            out,
        });
        Ok(out)
    }

    // -- backward -----------------------------------------------------------

    /// Reverse pass from a scalar `loss`. Gradients accumulate additively
    /// into every node along the way and are readable via [`Tape::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check_var(loss)?;
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward target must be a scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        ensure_finite(self.value(loss).data(), "backward target")?;
        self.grads = vec![None; self.nodes.len()];
        self.acc_into(loss, &[1.0]);

        for idx in (0..self.ops.len()).rev() {
            self.backward_op(idx);
        }
        for g in self.grads.iter().flatten() {
            ensure_finite(g, "gradient")?;
        }
        Ok(())
    }

    fn acc_into(&mut self, v: Var, delta: &[f64]) {
        if !self.needs(v) {
            return;
        }
        let len = self.nodes[v.0].value.len();
        let slot = self.grads[v.0].get_or_insert_with(|| vec![0.0; len]);
        for (g, d) in slot.iter_mut().zip(delta) {
            *g += d;
        }
    }

    fn out_grad(&self, v: Var) -> Option<Vec<f64>> {
        self.grads[v.0].clone()
    }

    fn backward_op(&mut self, idx: usize) {
        // Records are taken apart immutably first; the cached forward data is
        // cloned where the borrow checker needs it. All buffers involved are
        // batch-sized, so the copies are cheap.
        match &self.ops[idx] {
            &Op::Affine { x, w, b, out } => {
                let Some(dy) = self.out_grad(out) else { return };
                let (bsz, din) = self.value(x).dims2().expect("affine input was a matrix");
                let dout = self.value(w).dims2().expect("affine weight was a matrix").1;
                if self.needs(x) {
                    let dx = matmul_nt(&dy, self.value(w).data(), bsz, dout, din);
                    self.acc_into(x, &dx);
                }
                if self.needs(w) {
                    let dw = matmul_tn(self.value(x).data(), &dy, din, bsz, dout);
                    self.acc_into(w, &dw);
                }
                if self.needs(b) {
                    let mut db = vec![0.0; dout];
                    for row in dy.chunks(dout) {
                        for (g, d) in db.iter_mut().zip(row) {
                            *g += d;
                        }
                    }
                    self.acc_into(b, &db);
                }
            }
            &Op::Relu { x, out } => {
                let Some(dy) = self.out_grad(out) else { return };
                if self.needs(x) {
                    let dx: Vec<f64> = self
                        .value(x)
                        .data()
                        .iter()
                        .zip(&dy)
                        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                        .collect();
                    self.acc_into(x, &dx);
                }
            }
            &Op::Add { a, b, out } => {
                let Some(dy) = self.out_grad(out) else { return };
                self.acc_into(a, &dy);
                self.acc_into(b, &dy);
            }
            &Op::Mul { a, b, out } => {
                let Some(dy) = self.out_grad(out) else { return };
                if self.needs(a) {
                    let da: Vec<f64> =
                        self.value(b).data().iter().zip(&dy).map(|(&v, &g)| v * g).collect();
                    self.acc_into(a, &da);
                }
                if self.needs(b) {
                    let db: Vec<f64> =
                        self.value(a).data().iter().zip(&dy).map(|(&v, &g)| v * g).collect();
                    self.acc_into(b, &db);
                }
            }
            &Op::Sum { x, out } => {
                let Some(dy) = self.out_grad(out) else { return };
                if self.needs(x) {
                    let dx = vec![dy[0]; self.value(x).len()];
                    self.acc_into(x, &dx);
                }
            }
            &Op::Scale { x, c, out } => {
                let Some(dy) = self.out_grad(out) else { return };
                if self.needs(x) {
                    let dx: Vec<f64> = dy.iter().map(|g| c * g).collect();
                    self.acc_into(x, &dx);
                }
            }
            &Op::AddScaled { a, b, c, out } => {
                let Some(dy) = self.out_grad(out) else { return };
                self.acc_into(a, &dy);
                if self.needs(b) {
                    let db: Vec<f64> = dy.iter().map(|g| c * g).collect();
                    self.acc_into(b, &db);
                }
            }
            Op::CosineAffine { x, w, s, out, .. } => {
                let (x, w, s, out) = (*x, *w, *s, *out);
                let Some(dy) = self.out_grad(out) else { return };
                let (unit_x, unit_w, norms_x, norms_w, cos) = match &self.ops[idx] {
                    Op::CosineAffine { unit_x, unit_w, norms_x, norms_w, cos, .. } => (
                        unit_x.clone(),
                        unit_w.clone(),
                        norms_x.clone(),
                        norms_w.clone(),
                        cos.clone(),
                    ),
                    _ => unreachable!(),
                };
                let bsz = norms_x.len();
                let dout = norms_w.len();
                let din = if bsz > 0 { unit_x.len() / bsz } else { 0 };
                let scale = self.value(s).data()[0];

                if self.needs(s) {
                    let ds: f64 = dy.iter().zip(&cos).map(|(g, c)| g * c).sum();
                    self.acc_into(s, &[ds]);
                }
                if self.needs(x) {
                    let mut dx = vec![0.0; bsz * din];
                    for i in 0..bsz {
                        // d(unit) = scale * dY . unit_w^T, then project out the
                        // radial component and divide by the original norm.
                        let mut du = vec![0.0; din];
                        for j in 0..dout {
                            let g = scale * dy[i * dout + j];
                            for p in 0..din {
                                du[p] += g * unit_w[p * dout + j];
                            }
                        }
                        let u = &unit_x[i * din..(i + 1) * din];
                        let radial: f64 = du.iter().zip(u).map(|(a, b)| a * b).sum();
                        for p in 0..din {
                            dx[i * din + p] = (du[p] - radial * u[p]) / norms_x[i];
                        }
                    }
                    self.acc_into(x, &dx);
                }
                if self.needs(w) {
                    let mut dw = vec![0.0; din * dout];
                    for j in 0..dout {
                        let mut du = vec![0.0; din];
                        for i in 0..bsz {
                            let g = scale * dy[i * dout + j];
                            for p in 0..din {
                                du[p] += g * unit_x[i * din + p];
                            }
                        }
                        let mut radial = 0.0;
                        for p in 0..din {
                            radial += du[p] * unit_w[p * dout + j];
                        }
                        for p in 0..din {
                            dw[p * dout + j] = (du[p] - radial * unit_w[p * dout + j]) / norms_w[j];
                        }
                    }
                    self.acc_into(w, &dw);
                }
            }
            Op::CrossEntropy { logits, rows, cols, label_pos, divisor, probs, out } => {
                let (logits, divisor, out) = (*logits, *divisor, *out);
                let Some(dy) = self.out_grad(out) else { return };
                if !self.needs(logits) {
                    return;
                }
                let (rows, cols, label_pos, probs) =
                    (rows.clone(), cols.clone(), label_pos.clone(), probs.clone());
                let width = self.value(logits).dims2().expect("logits was a matrix").1;
                let k = cols.len();
                let mut dl = vec![0.0; self.value(logits).len()];
                for (r, &row) in rows.iter().enumerate() {
                    for (j, &col) in cols.iter().enumerate() {
                        let onehot = if label_pos[r] == j { 1.0 } else { 0.0 };
                        dl[row * width + col] += dy[0] * (probs[r * k + j] - onehot) / divisor;
                    }
                }
                self.acc_into(logits, &dl);
            }
            Op::KlTerm {
                student,
                rows,
                cols,
                temperature,
                rescale,
                direction,
                student_probs,
                teacher_probs,
                out,
            } => {
                let (student, temperature, rescale, direction, out) =
                    (*student, *temperature, *rescale, *direction, *out);
                let Some(dy) = self.out_grad(out) else { return };
                if !self.needs(student) {
                    return;
                }
                let (rows, cols) = (rows.clone(), cols.clone());
                let (sp, tp) = (student_probs.clone(), teacher_probs.clone());
                let width = self.value(student).dims2().expect("student was a matrix").1;
                let k = cols.len();
                let n = rows.len() as f64;
                let mut dl = vec![0.0; self.value(student).len()];
                for (r, &row) in rows.iter().enumerate() {
                    match direction {
                        KlDirection::TeacherLed => {
                            // d/dz of -sum(q ln p) with p = softmax(z / T).
                            for (j, &col) in cols.iter().enumerate() {
                                let p = sp[r * k + j];
                                let q = tp[r * k + j];
                                dl[row * width + col] +=
                                    dy[0] * rescale * (p - q) / (temperature * n);
                            }
                        }
                        KlDirection::StudentLed => {
                            // d/dz of sum(p ln(p/q)); the per-row KL re-enters
                            // through the softmax Jacobian.
                            let mut row_kl = 0.0;
                            let mut g = vec![0.0; k];
                            for j in 0..k {
                                let p = sp[r * k + j];
                                let q = tp[r * k + j];
                                g[j] = p.max(LOG_EPS).ln() - q.max(LOG_EPS).ln();
                                row_kl += p * g[j];
                            }
                            for (j, &col) in cols.iter().enumerate() {
                                let p = sp[r * k + j];
                                dl[row * width + col] +=
                                    dy[0] * rescale * p * (g[j] - row_kl) / (temperature * n);
                            }
                        }
                    }
                }
                self.acc_into(student, &dl);
            }
        }
    }
}
