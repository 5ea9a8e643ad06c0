//! Cross-modal similarity matrices and the offset/band geometry.
//!
//! Rows index audio features and columns index visual features. A clip whose
//! visual stream is displaced by `o` frames shows its high-similarity band
//! along `i - j = -o`: negative offsets (video leading) fall below the main
//! diagonal, positive offsets above it.

use std::fmt;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Largest offset magnitude searched, in frames.
pub const MAX_OFFSET: i32 = 5;
/// Number of offset classes, `[-MAX_OFFSET, MAX_OFFSET]`.
pub const NUM_CLASSES: usize = (2 * MAX_OFFSET + 1) as usize;
/// Nominal feature rate, features per second.
pub const NOMINAL_FRAME_RATE: f64 = 25.0;

/// An audio-visual offset in frames. Negative means the visual stream leads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct OffsetLabel(i32);

impl OffsetLabel {
    pub fn new(offset: i32) -> Result<Self> {
        if offset.abs() > MAX_OFFSET {
            return Err(Error::Argument(format!("offset {offset} outside [-{MAX_OFFSET}, {MAX_OFFSET}]")));
        }
        Ok(Self(offset))
    }

    pub fn from_class(class_index: usize) -> Result<Self> {
        if class_index >= NUM_CLASSES {
            return Err(Error::Argument(format!("class {class_index} outside [0, {NUM_CLASSES})")));
        }
        Ok(Self(class_index as i32 - MAX_OFFSET))
    }

    pub fn offset(self) -> i32 {
        self.0
    }

    pub fn class_index(self) -> usize {
        (self.0 + MAX_OFFSET) as usize
    }

    /// All labels in class order.
    pub fn all() -> impl Iterator<Item = OffsetLabel> {
        (-MAX_OFFSET..=MAX_OFFSET).map(OffsetLabel)
    }

    /// All labels in tie-break priority order: `0, -1, 1, -2, 2, ...`.
    pub fn by_priority() -> impl Iterator<Item = OffsetLabel> {
        std::iter::once(OffsetLabel(0)).chain((1..=MAX_OFFSET).flat_map(|k| [OffsetLabel(-k), OffsetLabel(k)]))
    }
}

impl fmt::Display for OffsetLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:+}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Audio,
    Visual,
}

/// One embedding per time step for a single modality of a clip.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStream {
    pub modality: Modality,
    features: Tensor,
    pub frame_rate: f64,
}

impl FeatureStream {
    /// `features` is an `N x D` matrix with `N >= 1`.
    pub fn new(modality: Modality, features: Tensor) -> Result<Self> {
        let (n, d) = features.dims2()?;
        if n == 0 || d == 0 {
            return Err(Error::Empty("feature stream needs at least one non-empty feature".into()));
        }
        Ok(Self { modality, features, frame_rate: NOMINAL_FRAME_RATE })
    }

    pub fn len(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    /// Keeps the first `n` features.
    pub fn truncated(&self, n: usize) -> Self {
        let n = n.min(self.len());
        let d = self.dim();
        let data = self.features.data()[..n * d].to_vec();
        Self {
            modality: self.modality,
            features: Tensor::new(vec![n, d], data).expect("prefix shape"),
            frame_rate: self.frame_rate,
        }
    }
}

/// Truncates both streams to their common length.
pub fn truncate_to_common(a: &FeatureStream, v: &FeatureStream) -> (FeatureStream, FeatureStream) {
    let n = a.len().min(v.len());
    (a.truncated(n), v.truncated(n))
}

/// Square matrix of audio-visual similarities; `(i, j)` pairs audio `i` with visual `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    values: Tensor,
}

impl SimilarityMatrix {
    pub fn from_tensor(values: Tensor) -> Result<Self> {
        let (r, c) = values.dims2()?;
        if r != c || r == 0 {
            return Err(Error::Dimension(format!("similarity matrix must be square and non-empty, got {r}x{c}")));
        }
        Ok(Self { values })
    }

    pub fn n(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values.at(i, j)
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn into_tensor(self) -> Tensor {
        self.values
    }

    /// Mean of the entries on the band of `offset`.
    pub fn band_mean(&self, offset: OffsetLabel) -> Result<f64> {
        let idx = band_indices(self.n(), offset)?;
        Ok(idx.iter().map(|&(i, j)| self.at(i, j)).sum::<f64>() / idx.len() as f64)
    }

    pub fn transposed(&self) -> Self {
        let n = self.n();
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                data[j * n + i] = self.at(i, j);
            }
        }
        Self { values: Tensor::new(vec![n, n], data).expect("square") }
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Cosine similarity; `None` when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// Pairwise cosine similarities between every audio and every visual feature.
pub fn build_similarity_matrix(a: &FeatureStream, v: &FeatureStream) -> Result<SimilarityMatrix> {
    if a.len() != v.len() {
        return Err(Error::Dimension(format!("stream lengths differ: {} vs {}", a.len(), v.len())));
    }
    if a.dim() != v.dim() {
        return Err(Error::Dimension(format!("feature dims differ: {} vs {}", a.dim(), v.dim())));
    }
    let n = a.len();
    let an: Vec<f64> = (0..n).map(|i| norm(a.feature(i))).collect();
    let vn: Vec<f64> = (0..n).map(|j| norm(v.feature(j))).collect();
    if let Some(i) = an.iter().chain(&vn).position(|&x| x == 0.0) {
        return Err(Error::Degenerate(format!("zero-norm feature at row {}", i % n)));
    }
    let mut data = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let dot: f64 = a.feature(i).iter().zip(v.feature(j)).map(|(x, y)| x * y).sum();
            data.push(dot / (an[i] * vn[j]));
        }
    }
    SimilarityMatrix::from_tensor(Tensor::new(vec![n, n], data)?)
}

/// Entries `(i, j)` with `i - j = -offset` inside an `n x n` matrix.
pub fn band_indices(n: usize, offset: OffsetLabel) -> Result<Vec<(usize, usize)>> {
    let o = offset.offset();
    if o.unsigned_abs() as usize >= n {
        return Err(Error::Argument(format!("offset {o} does not fit a {n}x{n} matrix")));
    }
    let len = n - o.unsigned_abs() as usize;
    Ok((0..len).map(|k| if o >= 0 { (k, k + o as usize) } else { (k + (-o) as usize, k) }).collect())
}

/// Differentiable batch of similarity matrices: `[B, N, D] x [B, N, D] -> [B, N, N]`.
pub fn similarity_on_tape(tape: &mut Tape, audio: Var, visual: Var) -> Result<Var> {
    let a = tape.l2_normalize_rows(audio)?;
    let v = tape.l2_normalize_rows(visual)?;
    tape.bmm_nt(a, v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stream(rows: &[Vec<f64>]) -> FeatureStream {
        FeatureStream::new(Modality::Audio, Tensor::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn offset_class_round_trip() {
        for label in OffsetLabel::all() {
            assert_eq!(label.class_index() as i32, label.offset() + 5);
            assert_eq!(OffsetLabel::from_class(label.class_index()).unwrap(), label);
        }
        assert!(OffsetLabel::new(6).is_err());
        assert!(OffsetLabel::from_class(11).is_err());
        assert_eq!(OffsetLabel::all().count(), 11);
    }

    #[test]
    fn priority_order() {
        let order: Vec<i32> = OffsetLabel::by_priority().map(OffsetLabel::offset).collect();
        assert_eq!(order, vec![0, -1, 1, -2, 2, -3, 3, -4, 4, -5, 5]);
    }

    #[test]
    fn main_diagonal_band() {
        let b = band_indices(5, OffsetLabel::new(0).unwrap()).unwrap();
        assert_eq!(b, (0..5).map(|k| (k, k)).collect::<Vec<_>>());
    }

    #[test]
    fn negative_offset_lies_below_diagonal() {
        let b = band_indices(5, OffsetLabel::new(-2).unwrap()).unwrap();
        assert_eq!(b, vec![(2, 0), (3, 1), (4, 2)]);
    }

    #[test]
    fn positive_offset_lies_above_diagonal() {
        let b = band_indices(11, OffsetLabel::new(5).unwrap()).unwrap();
        assert_eq!(b.len(), 6);
        assert!(b.iter().all(|&(i, j)| j == i + 5));
    }

    #[test]
    fn band_rejects_offset_at_least_n() {
        assert!(matches!(band_indices(3, OffsetLabel::new(3).unwrap()), Err(Error::Argument(_))));
    }

    #[test]
    fn hand_chosen_vectors_match_per_pair_cosine() {
        let a = stream(&[vec![1.0, 0.0], vec![0.0, 2.0], vec![3.0, 4.0]]);
        let v = stream(&[vec![0.0, 1.0], vec![3.0, 4.0], vec![-1.0, 0.0]]);
        let m = build_similarity_matrix(&a, &v).unwrap();
        let want = [[0.0, 0.6, -1.0], [1.0, 0.8, 0.0], [0.8, 1.0, -0.6]];
        for (i, row) in want.iter().enumerate() {
            for (j, w) in row.iter().enumerate() {
                assert_eq!(m.at(i, j), *w, "entry ({i},{j})");
            }
        }
    }

    #[test]
    fn identical_streams_have_unit_diagonal() {
        let a = stream(&[vec![0.6, 0.8], vec![1.0, 0.0], vec![0.0, -1.0]]);
        let m = build_similarity_matrix(&a, &a).unwrap();
        for i in 0..3 {
            assert!((m.at(i, i) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_row_is_degenerate() {
        let a = stream(&[vec![1.0, 0.0], vec![0.0, 0.0]]);
        let v = stream(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!(matches!(build_similarity_matrix(&a, &v), Err(Error::Degenerate(_))));
    }

    #[test]
    fn length_mismatch_is_dimension_error() {
        let a = stream(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let v = stream(&[vec![1.0, 0.0]]);
        assert!(matches!(build_similarity_matrix(&a, &v), Err(Error::Dimension(_))));
        let (a2, v2) = truncate_to_common(&a, &v);
        assert_eq!(build_similarity_matrix(&a2, &v2).unwrap().n(), 1);
    }

    #[test]
    fn tape_similarity_matches_direct_construction() {
        let a = stream(&[vec![1.0, 2.0, -1.0], vec![0.5, -0.3, 2.0]]);
        let v = stream(&[vec![-1.0, 0.2, 0.4], vec![2.0, 2.0, 1.0]]);
        let direct = build_similarity_matrix(&a, &v).unwrap();
        let mut tape = Tape::new();
        let av = tape.constant(a.features().clone().reshape(&[1, 2, 3]).unwrap());
        let vv = tape.constant(v.features().clone().reshape(&[1, 2, 3]).unwrap());
        let s = similarity_on_tape(&mut tape, av, vv).unwrap();
        for (x, y) in tape.value(s).data().iter().zip(direct.values().data()) {
            assert!((x - y).abs() < 1e-14);
        }
    }
}
