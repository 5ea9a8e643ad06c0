//! Offset estimators: sliding-window baseline, Diag-avg, and the Sync-cls
//! classifier (also used by the jointly trained Sync-e2e model).

mod synccls;

pub use synccls::{saliency, synccls_predict, Forward, SyncClsConfig, SyncClsNet};

use crate::error::{Error, Result};
use crate::similarity::{cosine, FeatureStream, OffsetLabel, SimilarityMatrix, MAX_OFFSET, NUM_CLASSES};

/// An offset estimate with the per-class scores it was chosen from.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub offset: OffsetLabel,
    /// Indexed by class (`offset + 5`).
    pub scores: [f64; NUM_CLASSES],
}

/// Best-scoring label; ties go to the smallest `|o|`, then to the negative side.
pub fn pick(scores: &[f64; NUM_CLASSES], higher_is_better: bool) -> OffsetLabel {
    let mut best: Option<OffsetLabel> = None;
    for label in OffsetLabel::by_priority() {
        let s = scores[label.class_index()];
        let better = match best {
            None => true,
            Some(b) => {
                let bs = scores[b.class_index()];
                if higher_is_better {
                    s > bs
                } else {
                    s < bs
                }
            }
        };
        if better {
            best = Some(label);
        }
    }
    best.expect("at least one label")
}

/// Mean of `1 - cos(a[t - o], v[t])` for each candidate offset, with audio
/// outside the clip treated as a zero vector (distance 1). Picks the minimum.
pub fn sliding_window_offset(a: &FeatureStream, v: &FeatureStream) -> Result<Prediction> {
    if a.is_empty() || v.is_empty() {
        return Err(Error::Empty("sliding window over empty streams".into()));
    }
    if a.len() != v.len() {
        return Err(Error::Dimension(format!("stream lengths differ: {} vs {}", a.len(), v.len())));
    }
    if a.dim() != v.dim() {
        return Err(Error::Dimension(format!("feature dims differ: {} vs {}", a.dim(), v.dim())));
    }
    let n = a.len() as i32;
    let mut scores = [0.0; NUM_CLASSES];
    for label in OffsetLabel::all() {
        let o = label.offset();
        let total: f64 = (0..n)
            .map(|t| {
                let s = t - o;
                let c = if (0..n).contains(&s) { cosine(a.feature(s as usize), v.feature(t as usize)) } else { None };
                1.0 - c.unwrap_or(0.0)
            })
            .sum();
        scores[label.class_index()] = total / n as f64;
    }
    Ok(Prediction { offset: pick(&scores, false), scores })
}

/// Picks the band with the largest mean similarity.
pub fn diag_avg_offset(m: &SimilarityMatrix) -> Result<Prediction> {
    if m.n() <= MAX_OFFSET as usize {
        return Err(Error::InsufficientLength(format!(
            "Diag-avg needs more than {MAX_OFFSET} features, got {}",
            m.n()
        )));
    }
    let mut scores = [0.0; NUM_CLASSES];
    for label in OffsetLabel::all() {
        scores[label.class_index()] = m.band_mean(label)?;
    }
    Ok(Prediction { offset: pick(&scores, true), scores })
}
