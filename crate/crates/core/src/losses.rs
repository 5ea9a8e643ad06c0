//! Cross-modal training objectives.
//!
//! All three losses come in two forms: a tape form used for training, and a
//! value form over a [`PairBatch`] for evaluation and tests. Multi-way losses
//! draw their negatives from within the batch, so the number of candidates
//! per audio feature equals the batch size.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default hinge margin of the contrastive loss.
pub const DEFAULT_MARGIN: f64 = 1.0;
/// Added to Euclidean distances before inversion in the multi-way loss.
pub const INVERSE_DISTANCE_EPS: f64 = 1e-8;
/// Lower bound enforced on the angular scale after each update.
pub const MIN_ANGULAR_W: f64 = 1e-3;

/// Matched audio/visual features, one pair per row.
#[derive(Clone, Debug, PartialEq)]
pub struct PairBatch {
    pub audio: Tensor,
    pub visual: Tensor,
    /// Per-pair match labels; only used by the contrastive loss.
    pub labels: Option<Vec<bool>>,
}

impl PairBatch {
    pub fn new(audio: Tensor, visual: Tensor) -> Result<Self> {
        let (n, d) = audio.dims2()?;
        let (n2, d2) = visual.dims2()?;
        if n != n2 || d != d2 {
            return Err(Error::Dimension(format!("audio {n}x{d} vs visual {n2}x{d2}")));
        }
        if n == 0 {
            return Err(Error::Empty("pair batch has no pairs".into()));
        }
        Ok(Self { audio, visual, labels: None })
    }

    pub fn with_labels(mut self, labels: Vec<bool>) -> Result<Self> {
        if labels.len() != self.n() {
            return Err(Error::Dimension(format!("{} labels for {} pairs", labels.len(), self.n())));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.audio.shape()[0]
    }
}

/// Learnable affine map applied to cosine similarities before the softmax.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AngularScale {
    pub w: f64,
    pub b: f64,
}

impl Default for AngularScale {
    fn default() -> Self {
        Self { w: 10.0, b: -5.0 }
    }
}

impl AngularScale {
    pub fn clamp(&mut self) {
        self.w = self.w.max(MIN_ANGULAR_W);
    }
}

/// Which objective trains the embeddings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EmbedLoss {
    Contrastive { margin: f64 },
    MultiwayEuclidean,
    Angular,
}

fn rows(tape: &Tape, x: Var) -> Result<usize> {
    Ok(tape.value(x).dims2()?.0)
}

/// `(1/2N) * sum[y d^2 + (1-y) max(margin - d, 0)^2]` with `d` the Euclidean
/// distance between paired rows.
pub fn contrastive_on_tape(tape: &mut Tape, audio: Var, visual: Var, labels: &[bool], margin: f64) -> Result<Var> {
    if margin <= 0.0 {
        return Err(Error::Argument(format!("margin must be positive, got {margin}")));
    }
    let n = rows(tape, audio)?;
    if n == 0 {
        return Err(Error::Empty("contrastive loss over an empty batch".into()));
    }
    if labels.len() != n {
        return Err(Error::Dimension(format!("{} labels for {n} pairs", labels.len())));
    }
    let y = tape.constant(Tensor::vector(labels.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect()));
    let not_y = tape.constant(Tensor::vector(labels.iter().map(|&m| if m { 0.0 } else { 1.0 }).collect()));
    let d = tape.row_distance(audio, visual)?;
    let d2 = tape.square(d);
    let pos = tape.mul(d2, y)?;
    let neg_d = tape.neg(d);
    let slack = tape.add_scalar(neg_d, margin);
    let hinge = tape.relu(slack);
    let hinge2 = tape.square(hinge);
    let neg = tape.mul(hinge2, not_y)?;
    let both = tape.add(pos, neg)?;
    let total = tape.sum(both);
    Ok(tape.scale(total, 1.0 / (2.0 * n as f64)))
}

fn check_multiway(tape: &Tape, audio: Var, visual: Var) -> Result<usize> {
    let n = rows(tape, audio)?;
    if n == 0 {
        return Err(Error::Empty("multi-way loss over an empty batch".into()));
    }
    if n < 2 {
        return Err(Error::Argument("multi-way loss needs at least two pairs".into()));
    }
    if rows(tape, visual)? != n {
        return Err(Error::Dimension("audio and visual batch sizes differ".into()));
    }
    Ok(n)
}

/// Softmax cross-entropy over inverse Euclidean distances, matching pair on the diagonal.
pub fn multiway_euclidean_on_tape(tape: &mut Tape, audio: Var, visual: Var) -> Result<Var> {
    let n = check_multiway(tape, audio, visual)?;
    let d = tape.pairwise_distance(audio, visual)?;
    if !tape.value(d).is_finite() {
        return Err(Error::Numeric("non-finite feature distance".into()));
    }
    let shifted = tape.add_scalar(d, INVERSE_DISTANCE_EPS);
    let logits = tape.recip(shifted)?;
    let targets: Vec<usize> = (0..n).collect();
    tape.cross_entropy(logits, &targets)
}

/// Softmax cross-entropy over `w * cos + b`, matching pair on the diagonal.
/// `w` and `b` are scalar nodes.
pub fn angular_multiway_on_tape(tape: &mut Tape, audio: Var, visual: Var, w: Var, b: Var) -> Result<Var> {
    let n = check_multiway(tape, audio, visual)?;
    let a = tape.l2_normalize_rows(audio)?;
    let v = tape.l2_normalize_rows(visual)?;
    let vt = tape.transpose(v)?;
    let s = tape.matmul(a, vt)?;
    let scaled = tape.scale_by(s, w)?;
    let logits = tape.shift_by(scaled, b)?;
    let targets: Vec<usize> = (0..n).collect();
    tape.cross_entropy(logits, &targets)
}

fn scalar(tape: &Tape, v: Var) -> f64 {
    tape.value(v).data()[0]
}

pub fn contrastive_loss(batch: &PairBatch, margin: f64) -> Result<f64> {
    let labels = batch.labels.as_deref().ok_or_else(|| Error::Argument("contrastive loss needs labels".into()))?;
    let mut tape = Tape::new();
    let a = tape.constant(batch.audio.clone());
    let v = tape.constant(batch.visual.clone());
    let l = contrastive_on_tape(&mut tape, a, v, labels, margin)?;
    Ok(scalar(&tape, l))
}

pub fn multiway_euclidean_loss(batch: &PairBatch) -> Result<f64> {
    let mut tape = Tape::new();
    let a = tape.constant(batch.audio.clone());
    let v = tape.constant(batch.visual.clone());
    let l = multiway_euclidean_on_tape(&mut tape, a, v)?;
    Ok(scalar(&tape, l))
}

pub fn angular_multiway_loss(batch: &PairBatch, scale: AngularScale) -> Result<f64> {
    let mut tape = Tape::new();
    let a = tape.constant(batch.audio.clone());
    let v = tape.constant(batch.visual.clone());
    let w = tape.constant(Tensor::scalar(scale.w));
    let b = tape.constant(Tensor::scalar(scale.b));
    let l = angular_multiway_on_tape(&mut tape, a, v, w, b)?;
    Ok(scalar(&tape, l))
}
