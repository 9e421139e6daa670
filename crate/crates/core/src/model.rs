//! MLP encoder with an expandable classification head.
//!
//! The encoder is a chain of affine+relu layers (possibly empty, in which
//! case features are the raw inputs). The head maps features to one logit
//! column per registered class; learning a new task appends columns while
//! every existing column keeps its exact values. The head is either a plain
//! affine layer or a cosine classifier (normalized features against
//! normalized columns, scaled by one learnable scalar, no bias).
//!
//! Snapshots are deep copies with gradients detached. The incremental trainer
//! takes its teacher snapshot *before* expanding the head, so a teacher never
//! has columns for classes of the step in which it was frozen.
//!
//! Checkpoints use a small binary layout, documented at [`ModelState::save`].

use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::pool::ClassId;
use crate::rng::RunRng;
use crate::tensor::{cosine_forward, matmul_nn, Tape, Tensor, Var};

const CHECKPOINT_MAGIC: &[u8; 8] = b"CLDCKPT1";

#[derive(Debug, Clone)]
struct EncoderLayer {
    weight: Tensor, // [fan_in, fan_out]
    bias: Tensor,   // [fan_out]
}

#[derive(Debug, Clone)]
enum Head {
    Linear { weight: Tensor, bias: Tensor }, // [feat, classes], [classes]
    Cosine { weight: Tensor, scale: Tensor }, // [feat, classes], [1]
}

/// Architecture choices that do not change during a run.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub cosine_head: bool,
    pub cosine_scale_init: f64,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::InvalidConfig("model input dimension must be positive".into()));
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::InvalidConfig("hidden layer widths must be positive".into()));
        }
        if self.cosine_head && !(self.cosine_scale_init > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "cosine scale init must be positive, got {}",
                self.cosine_scale_init
            )));
        }
        Ok(())
    }
}

/// Trainable model: encoder, head, and the registry mapping head columns to
/// class ids (column `i` scores `classes()[i]`).
#[derive(Debug, Clone)]
pub struct ModelState {
    input_dim: usize,
    feature_dim: usize,
    encoder: Vec<EncoderLayer>,
    head: Head,
    classes: Vec<ClassId>,
}

/// Frozen deep copy of a model. Only shared references escape, so a snapshot
/// can never drift while it serves as a distillation teacher.
#[derive(Debug, Clone)]
pub struct ModelSnapshot {
    state: ModelState,
}

/// Handles produced by one taped forward pass: the logits/features nodes and
/// the parameter leaves, in the same order as [`ModelState::param_tensors_mut`].
pub struct TapedForward {
    pub logits: Var,
    pub features: Var,
    param_vars: Vec<Var>,
}

fn uniform_init(rng: &mut RunRng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
}

impl ModelState {
    /// A model with randomly initialized encoder layers and an empty head;
    /// call [`ModelState::expand_head`] to register classes.
    pub fn new(spec: &ModelSpec, rng: &mut RunRng) -> Result<ModelState> {
        spec.validate()?;
        let mut encoder = Vec::with_capacity(spec.hidden.len());
        let mut fan_in = spec.input_dim;
        for &width in &spec.hidden {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let weight =
                Tensor::matrix(fan_in, width, uniform_init(rng, fan_in * width, bound))?
                    .with_grad();
            let bias = Tensor::from_vec(vec![width], vec![0.0; width])?.with_grad();
            encoder.push(EncoderLayer { weight, bias });
            fan_in = width;
        }
        let feature_dim = fan_in;
        let head = if spec.cosine_head {
            Head::Cosine {
                weight: Tensor::matrix(feature_dim, 0, Vec::new())?.with_grad(),
                scale: Tensor::scalar(spec.cosine_scale_init).with_grad(),
            }
        } else {
            Head::Linear {
                weight: Tensor::matrix(feature_dim, 0, Vec::new())?.with_grad(),
                bias: Tensor::from_vec(vec![0], Vec::new())?.with_grad(),
            }
        };
        Ok(ModelState { input_dim: spec.input_dim, feature_dim, encoder, head, classes: Vec::new() })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Head column order: column `i` scores class `classes()[i]`.
    pub fn classes(&self) -> &[ClassId] {
        &self.classes
    }

    pub fn column_of(&self, class: ClassId) -> Option<usize> {
        self.classes.iter().position(|&c| c == class)
    }

    pub fn has_cosine_head(&self) -> bool {
        matches!(self.head, Head::Cosine { .. })
    }

    /// Appends one head column per new class. Existing columns keep their
    /// exact values; new columns get zero-mean uniform entries with bound
    /// `1/sqrt(feature_dim)` (new linear-head bias entries start at zero).
    pub fn expand_head(&mut self, new_classes: &[ClassId], rng: &mut RunRng) -> Result<()> {
        if new_classes.is_empty() {
            return Err(Error::Usage("expand_head needs at least one class".into()));
        }
        let mut dedup = new_classes.to_vec();
        dedup.sort_unstable();
        dedup.dedup();
        if dedup.len() != new_classes.len() {
            return Err(Error::Usage("expand_head received a repeated class".into()));
        }
        for c in new_classes {
            if self.classes.contains(c) {
                return Err(Error::Usage(format!("class {} already has a head column", c)));
            }
        }
        let old_n = self.classes.len();
        let add = new_classes.len();
        let new_n = old_n + add;
        let bound = 1.0 / (self.feature_dim as f64).sqrt();

        let grow = |weight: &Tensor, rng: &mut RunRng| -> Result<Tensor> {
            let old = weight.data();
            let mut data = Vec::with_capacity(self.feature_dim * new_n);
            for p in 0..self.feature_dim {
                data.extend_from_slice(&old[p * old_n..(p + 1) * old_n]);
                data.extend(uniform_init(rng, add, bound));
            }
            Ok(Tensor::matrix(self.feature_dim, new_n, data)?.with_grad())
        };
        match &mut self.head {
            Head::Linear { weight, bias } => {
                let new_weight = grow(weight, rng)?;
                let mut bias_data = bias.data().to_vec();
                bias_data.extend(std::iter::repeat(0.0).take(add));
                *weight = new_weight;
                *bias = Tensor::from_vec(vec![new_n], bias_data)?.with_grad();
            }
            Head::Cosine { weight, .. } => {
                *weight = grow(weight, rng)?;
            }
        }
        self.classes.extend_from_slice(new_classes);
        Ok(())
    }

    /// Parameters in a fixed order: encoder (weight, bias) pairs from input
    /// to features, then the head tensors.
    pub fn param_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for layer in &mut self.encoder {
            out.push(&mut layer.weight);
            out.push(&mut layer.bias);
        }
        match &mut self.head {
            Head::Linear { weight, bias } => {
                out.push(weight);
                out.push(bias);
            }
            Head::Cosine { weight, scale } => {
                out.push(weight);
                out.push(scale);
            }
        }
        out
    }

    fn param_tensors(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = Vec::new();
        for layer in &self.encoder {
            out.push(&layer.weight);
            out.push(&layer.bias);
        }
        match &self.head {
            Head::Linear { weight, bias } => {
                out.push(weight);
                out.push(bias);
            }
            Head::Cosine { weight, scale } => {
                out.push(weight);
                out.push(scale);
            }
        }
        out
    }

    /// Total number of scalar parameters.
    pub fn num_params(&self) -> usize {
        self.param_tensors().iter().map(|t| t.len()).sum()
    }

    fn check_batch(&self, batch: &Tensor) -> Result<usize> {
        let (bsz, din) = batch.dims2()?;
        if din != self.input_dim {
            return Err(Error::ShapeMismatch(format!(
                "batch has {} input features, model expects {}",
                din, self.input_dim
            )));
        }
        Ok(bsz)
    }

    /// Records the forward pass on `tape` and returns the node handles plus
    /// the parameter leaves for gradient harvesting.
    pub fn forward_on_tape(&self, tape: &mut Tape, batch: &Tensor) -> Result<TapedForward> {
        self.check_batch(batch)?;
        let mut param_vars = Vec::new();
        let mut x = tape.leaf(batch);
        for layer in &self.encoder {
            let w = tape.leaf(&layer.weight);
            let b = tape.leaf(&layer.bias);
            param_vars.push(w);
            param_vars.push(b);
            let pre = tape.affine(x, w, b)?;
            x = tape.relu(pre)?;
        }
        let features = x;
        let logits = match &self.head {
            Head::Linear { weight, bias } => {
                let w = tape.leaf(weight);
                let b = tape.leaf(bias);
                param_vars.push(w);
                param_vars.push(b);
                tape.affine(features, w, b)?
            }
            Head::Cosine { weight, scale } => {
                let w = tape.leaf(weight);
                let s = tape.leaf(scale);
                param_vars.push(w);
                param_vars.push(s);
                tape.cosine_affine(features, w, s)?
            }
        };
        Ok(TapedForward { logits, features, param_vars })
    }

    /// Forward pass without a tape. Uses the same kernels as the taped path,
    /// so the numbers are bit-identical; returns `(features, logits)`.
    pub fn forward_values(&self, batch: &Tensor) -> Result<(Tensor, Tensor)> {
        let bsz = self.check_batch(batch)?;
        let mut x = batch.detached();
        for layer in &self.encoder {
            let (fan_in, fan_out) = layer.weight.dims2()?;
            let mut out = matmul_nn(x.data(), layer.weight.data(), bsz, fan_in, fan_out);
            for row in out.chunks_mut(fan_out) {
                for (o, b) in row.iter_mut().zip(layer.bias.data()) {
                    *o += b;
                }
            }
            for v in out.iter_mut() {
                if !(*v > 0.0) {
                    *v = 0.0;
                }
            }
            x = Tensor::matrix(bsz, fan_out, out)?;
        }
        let features = x;
        let n = self.classes.len();
        let logits = match &self.head {
            Head::Linear { weight, bias } => {
                let mut out =
                    matmul_nn(features.data(), weight.data(), bsz, self.feature_dim, n);
                for row in out.chunks_mut(n.max(1)) {
                    for (o, b) in row.iter_mut().zip(bias.data()) {
                        *o += b;
                    }
                }
                Tensor::matrix(bsz, n, out)?
            }
            Head::Cosine { weight, scale } => {
                let fwd = cosine_forward(features.data(), weight.data(), bsz, self.feature_dim, n);
                let s = scale.data()[0];
                Tensor::matrix(bsz, n, fwd.cos.iter().map(|c| s * c).collect())?
            }
        };
        if !features.all_finite() || !logits.all_finite() {
            return Err(Error::NonFinite("model forward produced NaN or infinity".into()));
        }
        Ok((features, logits))
    }

    /// Features only (the encoder output; inputs themselves for an empty
    /// encoder). Global average pooling over a vector feature is the
    /// identity, so this is also the pooled representation used for class
    /// statistics and herding.
    pub fn extract_features(&self, batch: &Tensor) -> Result<Tensor> {
        Ok(self.forward_values(batch)?.0)
    }

    /// Argmax prediction over all registered classes; ties resolve to the
    /// lowest column index.
    pub fn predict(&self, batch: &Tensor) -> Result<Vec<ClassId>> {
        if self.classes.is_empty() {
            return Err(Error::Usage("model has no registered classes".into()));
        }
        let (_, logits) = self.forward_values(batch)?;
        let (bsz, n) = logits.dims2()?;
        let mut out = Vec::with_capacity(bsz);
        for r in 0..bsz {
            let row = &logits.data()[r * n..(r + 1) * n];
            let mut best = 0;
            for j in 1..n {
                if row[j] > row[best] {
                    best = j;
                }
            }
            out.push(self.classes[best]);
        }
        Ok(out)
    }

    /// Deep copy with gradients detached; the copy only exposes `&self`
    /// methods, so it cannot drift from the moment it was taken.
    pub fn snapshot(&self) -> ModelSnapshot {
        let mut state = self.clone();
        for p in state.param_tensors_mut() {
            p.zero_grad();
        }
        ModelSnapshot { state }
    }

    // -- checkpoint io -------------------------------------------------------

    /// Serializes the model. Layout, all integers little-endian u32 and all
    /// floats little-endian f64:
    ///
    /// ```text
    /// magic "CLDCKPT1" (8 bytes)
    /// head kind (0 = linear, 1 = cosine)
    /// input_dim
    /// encoder layer count, then (fan_in, fan_out) per layer
    /// class count, then one class id per column
    /// tensor count, then per tensor: rank and dims   (the shape table)
    /// per tensor, in table order: product(dims) f64 values
    /// ```
    ///
    /// Tensor order matches [`ModelState::param_tensors_mut`]: encoder
    /// (weight, bias) pairs, then head weight, then head bias or scale.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        let push_u32 = |buf: &mut Vec<u8>, v: usize| {
            buf.extend_from_slice(&(v as u32).to_le_bytes());
        };
        push_u32(&mut buf, if self.has_cosine_head() { 1 } else { 0 });
        push_u32(&mut buf, self.input_dim);
        push_u32(&mut buf, self.encoder.len());
        for layer in &self.encoder {
            let (fan_in, fan_out) = layer.weight.dims2()?;
            push_u32(&mut buf, fan_in);
            push_u32(&mut buf, fan_out);
        }
        push_u32(&mut buf, self.classes.len());
        for c in &self.classes {
            buf.extend_from_slice(&c.0.to_le_bytes());
        }
        let tensors = self.param_tensors();
        push_u32(&mut buf, tensors.len());
        for t in &tensors {
            push_u32(&mut buf, t.shape().len());
            for &d in t.shape() {
                push_u32(&mut buf, d);
            }
        }
        for t in &tensors {
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::write(path, buf)?;
        Ok(())
    }

    /// Reads a checkpoint written by [`ModelState::save`]. Errors name the
    /// byte offset of the first malformed field.
    pub fn load(path: &Path) -> Result<ModelState> {
        let buf = std::fs::read(path)?;
        let mut reader = ByteReader { buf: &buf, offset: 0 };
        let magic = reader.take(8)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Format(
                "bad checkpoint magic at offset 0 (expected \"CLDCKPT1\")".into(),
            ));
        }
        let head_kind = reader.u32()?;
        if head_kind > 1 {
            return Err(Error::Format(format!(
                "unknown head kind {} at offset {}",
                head_kind,
                reader.offset - 4
            )));
        }
        let input_dim = reader.u32()? as usize;
        let n_layers = reader.u32()? as usize;
        let mut layer_dims = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let fan_in = reader.u32()? as usize;
            let fan_out = reader.u32()? as usize;
            layer_dims.push((fan_in, fan_out));
        }
        let n_classes = reader.u32()? as usize;
        let mut classes = Vec::with_capacity(n_classes);
        for _ in 0..n_classes {
            classes.push(ClassId(reader.u32()?));
        }
        {
            let mut dedup = classes.clone();
            dedup.sort_unstable();
            dedup.dedup();
            if dedup.len() != classes.len() {
                return Err(Error::Format("checkpoint repeats a class id".into()));
            }
        }
        let n_tensors = reader.u32()? as usize;
        let expected_tensors = 2 * n_layers + 2;
        if n_tensors != expected_tensors {
            return Err(Error::Format(format!(
                "checkpoint declares {} tensors, structure implies {}",
                n_tensors, expected_tensors
            )));
        }
        let mut shapes = Vec::with_capacity(n_tensors);
        for _ in 0..n_tensors {
            let rank = reader.u32()? as usize;
            if rank > 2 {
                return Err(Error::Format(format!(
                    "tensor rank {} at offset {} exceeds 2",
                    rank,
                    reader.offset - 4
                )));
            }
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(reader.u32()? as usize);
            }
            shapes.push(dims);
        }
        let mut tensors = Vec::with_capacity(n_tensors);
        for dims in &shapes {
            let n: usize = dims.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(reader.f64()?);
            }
            tensors.push(Tensor::from_vec(dims.clone(), data)?.with_grad());
        }
        if reader.offset != buf.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after offset {}",
                buf.len() - reader.offset,
                reader.offset
            )));
        }

        let mut iter = tensors.into_iter();
        let mut encoder = Vec::with_capacity(n_layers);
        let mut fan_in = input_dim;
        for &(w_in, w_out) in &layer_dims {
            if w_in != fan_in {
                return Err(Error::Format(format!(
                    "encoder layer expects fan-in {}, previous layer produces {}",
                    w_in, fan_in
                )));
            }
            let weight = iter.next().expect("tensor count checked above");
            let bias = iter.next().expect("tensor count checked above");
            if weight.shape() != [w_in, w_out] || bias.shape() != [w_out] {
                return Err(Error::Format(
                    "encoder tensor shapes disagree with the layer table".into(),
                ));
            }
            encoder.push(EncoderLayer { weight, bias });
            fan_in = w_out;
        }
        let feature_dim = fan_in;
        let head_weight = iter.next().expect("tensor count checked above");
        let head_rest = iter.next().expect("tensor count checked above");
        if head_weight.shape() != [feature_dim, n_classes] {
            return Err(Error::Format(format!(
                "head weight shape {:?} does not match features {} x classes {}",
                head_weight.shape(),
                feature_dim,
                n_classes
            )));
        }
        let head = if head_kind == 1 {
            if head_rest.len() != 1 {
                return Err(Error::Format("cosine head scale must hold one value".into()));
            }
            Head::Cosine { weight: head_weight, scale: head_rest }
        } else {
            if head_rest.shape() != [n_classes] {
                return Err(Error::Format(format!(
                    "head bias shape {:?} does not match {} classes",
                    head_rest.shape(),
                    n_classes
                )));
            }
            Head::Linear { weight: head_weight, bias: head_rest }
        };
        Ok(ModelState { input_dim, feature_dim, encoder, head, classes })
    }
}

struct ByteReader<'a> {
    buf: &'a [u8],
    offset: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.offset + n > self.buf.len() {
            return Err(Error::Format(format!(
                "checkpoint truncated: needed {} bytes at offset {}, file has {}",
                n,
                self.offset,
                self.buf.len()
            )));
        }
        let s = &self.buf[self.offset..self.offset + n];
        self.offset += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]]))
    }
}

impl TapedForward {
    /// Adds the tape's parameter gradients into the model's tensors. A
    /// parameter the loss never touched receives an explicit zero gradient so
    /// the optimizer still applies weight decay uniformly.
    pub fn accumulate_grads(&self, tape: &Tape, model: &mut ModelState) -> Result<()> {
        let mut params = model.param_tensors_mut();
        if params.len() != self.param_vars.len() {
            return Err(Error::Usage(format!(
                "forward recorded {} parameters, model now has {}",
                self.param_vars.len(),
                params.len()
            )));
        }
        for (var, param) in self.param_vars.iter().zip(params.iter_mut()) {
            match tape.grad(*var) {
                Some(g) => param.accumulate_grad(g)?,
                None => param.accumulate_grad(&vec![0.0; param.len()])?,
            }
        }
        Ok(())
    }
}

impl ModelSnapshot {
    pub fn state(&self) -> &ModelState {
        &self.state
    }

    pub fn classes(&self) -> &[ClassId] {
        self.state.classes()
    }

    pub fn num_classes(&self) -> usize {
        self.state.num_classes()
    }

    pub fn forward_logits(&self, batch: &Tensor) -> Result<Tensor> {
        Ok(self.state.forward_values(batch)?.1)
    }

    pub fn extract_features(&self, batch: &Tensor) -> Result<Tensor> {
        self.state.extract_features(batch)
    }

    /// Snapshot of a snapshot: another identical frozen copy.
    pub fn resnapshot(&self) -> ModelSnapshot {
        self.state.snapshot()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::SgdOptimizer;
    use crate::rng::{stream_rng, Stream};

    fn rng() -> RunRng {
        stream_rng(99, Stream::Init)
    }

    fn linear_spec(input_dim: usize, hidden: Vec<usize>) -> ModelSpec {
        ModelSpec { input_dim, hidden, cosine_head: false, cosine_scale_init: 10.0 }
    }

    #[test]
    fn identity_encoder_with_identity_head_passes_input_through() {
        let mut model = ModelState::new(&linear_spec(2, vec![]), &mut rng()).unwrap();
        model.expand_head(&[ClassId(0), ClassId(1)], &mut rng()).unwrap();
        {
            let mut params = model.param_tensors_mut();
            params[0].data_mut().copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
            params[1].data_mut().copy_from_slice(&[0.0, 0.0]);
        }
        let batch = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        let (features, logits) = model.forward_values(&batch).unwrap();
        assert_eq!(features.data(), &[1.0, 2.0], "empty encoder returns the input");
        assert_eq!(logits.data(), &[1.0, 2.0]);
    }

    #[test]
    fn taped_and_value_forwards_agree_bitwise() {
        let mut model = ModelState::new(&linear_spec(3, vec![5, 4]), &mut rng()).unwrap();
        model.expand_head(&[ClassId(0), ClassId(1), ClassId(2)], &mut rng()).unwrap();
        let batch =
            Tensor::matrix(2, 3, vec![0.3, -1.0, 0.7, 1.5, 0.2, -0.4]).unwrap();
        let (_, value_logits) = model.forward_values(&batch).unwrap();
        let mut tape = Tape::new();
        let fwd = model.forward_on_tape(&mut tape, &batch).unwrap();
        assert_eq!(tape.value(fwd.logits).data(), value_logits.data());
    }

    #[test]
    fn expansion_keeps_old_columns_bitwise_and_bounds_new_entries() {
        let mut model = ModelState::new(&linear_spec(4, vec![6]), &mut rng()).unwrap();
        model.expand_head(&[ClassId(0), ClassId(1)], &mut rng()).unwrap();
        let batch = Tensor::matrix(1, 4, vec![0.5, -0.3, 0.9, 0.1]).unwrap();
        let (_, before) = model.forward_values(&batch).unwrap();

        model.expand_head(&[ClassId(2)], &mut rng()).unwrap();
        assert_eq!(model.num_classes(), 3);
        let (_, after) = model.forward_values(&batch).unwrap();
        assert_eq!(before.data()[0], after.data()[0]);
        assert_eq!(before.data()[1], after.data()[1]);

        let bound = 1.0 / (model.feature_dim() as f64).sqrt();
        let params = model.param_tensors_mut();
        let head_weight = &params[2];
        for p in 0..6 {
            let v = head_weight.data()[p * 3 + 2];
            assert!(v.abs() < bound, "new column entry {} exceeds bound {}", v, bound);
        }
    }

    #[test]
    fn expand_head_rejects_duplicates() {
        let mut model = ModelState::new(&linear_spec(2, vec![]), &mut rng()).unwrap();
        model.expand_head(&[ClassId(0)], &mut rng()).unwrap();
        assert!(model.expand_head(&[ClassId(0)], &mut rng()).is_err());
        assert!(model.expand_head(&[ClassId(1), ClassId(1)], &mut rng()).is_err());
    }

    #[test]
    fn snapshot_is_frozen_while_the_model_trains_on() {
        let mut model = ModelState::new(&linear_spec(2, vec![3]), &mut rng()).unwrap();
        model.expand_head(&[ClassId(0), ClassId(1)], &mut rng()).unwrap();
        let batch = Tensor::matrix(1, 2, vec![0.4, -0.8]).unwrap();
        let snap = model.snapshot();
        let frozen = snap.forward_logits(&batch).unwrap();

        // One training step on the live model.
        let mut tape = Tape::new();
        let fwd = model.forward_on_tape(&mut tape, &batch).unwrap();
        let loss = tape.cross_entropy(fwd.logits, &[0], &[0, 1], &[0], 1.0).unwrap();
        tape.backward(loss).unwrap();
        fwd.accumulate_grads(&tape, &mut model).unwrap();
        let mut opt = SgdOptimizer::new(0.5, 0.0, 0.0).unwrap();
        opt.step(&mut model.param_tensors_mut()).unwrap();

        let (_, live) = model.forward_values(&batch).unwrap();
        assert_ne!(live.data(), frozen.data(), "training must move the live model");
        assert_eq!(snap.forward_logits(&batch).unwrap().data(), frozen.data());
        // Snapshot of a snapshot is the same frozen state.
        assert_eq!(snap.resnapshot().forward_logits(&batch).unwrap().data(), frozen.data());
    }

    #[test]
    fn gradients_flow_into_every_parameter_and_optimizer_clears_them() {
        let mut model = ModelState::new(&linear_spec(3, vec![4]), &mut rng()).unwrap();
        model.expand_head(&[ClassId(0), ClassId(1)], &mut rng()).unwrap();
        let batch = Tensor::matrix(2, 3, vec![0.1, 0.2, 0.3, -0.1, 0.5, 0.0]).unwrap();
        let mut tape = Tape::new();
        let fwd = model.forward_on_tape(&mut tape, &batch).unwrap();
        let loss = tape.cross_entropy(fwd.logits, &[0, 1], &[0, 1], &[0, 1], 2.0).unwrap();
        tape.backward(loss).unwrap();
        fwd.accumulate_grads(&tape, &mut model).unwrap();
        for p in model.param_tensors_mut() {
            assert!(p.grad().is_some());
        }
        let mut opt = SgdOptimizer::new(0.1, 0.9, 1e-4).unwrap();
        opt.step(&mut model.param_tensors_mut()).unwrap();
        for p in model.param_tensors_mut() {
            assert!(p.grad().is_none());
        }
    }

    #[test]
    fn cosine_head_logits_stay_within_scale() {
        let spec = ModelSpec { input_dim: 3, hidden: vec![4], cosine_head: true, cosine_scale_init: 10.0 };
        let mut model = ModelState::new(&spec, &mut rng()).unwrap();
        model.expand_head(&[ClassId(0), ClassId(1), ClassId(2)], &mut rng()).unwrap();
        let batch = Tensor::matrix(4, 3, vec![1.0, -2.0, 0.5, 3.0, 0.0, -1.0, 0.2, 0.2, 0.2, -5.0, 4.0, 1.0])
            .unwrap();
        let (_, logits) = model.forward_values(&batch).unwrap();
        for &v in logits.data() {
            assert!(v.abs() <= 10.0 + 1e-9);
        }
    }

    #[test]
    fn predict_breaks_ties_toward_the_lowest_column() {
        let mut model = ModelState::new(&linear_spec(2, vec![]), &mut rng()).unwrap();
        model.expand_head(&[ClassId(7), ClassId(3)], &mut rng()).unwrap();
        {
            let mut params = model.param_tensors_mut();
            params[0].data_mut().copy_from_slice(&[1.0, 1.0, 1.0, 1.0]);
            params[1].data_mut().copy_from_slice(&[0.0, 0.0]);
        }
        let batch = Tensor::matrix(1, 2, vec![0.5, 0.5]).unwrap();
        assert_eq!(model.predict(&batch).unwrap(), vec![ClassId(7)]);
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let spec = ModelSpec { input_dim: 5, hidden: vec![7, 3], cosine_head: true, cosine_scale_init: 8.5 };
        let mut model = ModelState::new(&spec, &mut rng()).unwrap();
        model.expand_head(&[ClassId(2), ClassId(9), ClassId(4)], &mut rng()).unwrap();
        model.save(&path).unwrap();
        let loaded = ModelState::load(&path).unwrap();
        assert_eq!(loaded.classes(), model.classes());
        assert_eq!(loaded.input_dim(), model.input_dim());
        assert_eq!(loaded.feature_dim(), model.feature_dim());
        let a = model.param_tensors();
        let b = loaded.param_tensors();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.shape(), y.shape());
            let xb: Vec<u64> = x.data().iter().map(|v| v.to_bits()).collect();
            let yb: Vec<u64> = y.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(xb, yb);
        }
    }

    #[test]
    fn checkpoint_with_bad_magic_is_rejected_with_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bogus.ckpt");
        std::fs::write(&path, b"NOTMAGIC0000").unwrap();
        match ModelState::load(&path) {
            Err(Error::Format(msg)) => assert!(msg.contains("offset 0")),
            other => panic!("expected format error, got {:?}", other),
        }
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut model = ModelState::new(&linear_spec(2, vec![3]), &mut rng()).unwrap();
        model.expand_head(&[ClassId(0)], &mut rng()).unwrap();
        model.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(ModelState::load(&path), Err(Error::Format(_))));
    }

    #[test]
    fn batch_with_wrong_input_dim_is_rejected() {
        let mut model = ModelState::new(&linear_spec(3, vec![]), &mut rng()).unwrap();
        model.expand_head(&[ClassId(0)], &mut rng()).unwrap();
        let batch = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        assert!(matches!(model.forward_values(&batch), Err(Error::ShapeMismatch(_))));
    }
}
