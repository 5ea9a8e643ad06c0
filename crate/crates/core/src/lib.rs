//! Audio-visual synchronisation from cross-modal similarity matrices.
//!
//! ```
//! use syncmatrix_core::estimators::diag_avg_offset;
//! use syncmatrix_core::synthdata::{GenConfig, Generator};
//! use syncmatrix_core::{build_similarity_matrix, Modality, OffsetLabel};
//!
//! let gen = Generator::new(GenConfig::noiseless())?;
//! let clip = gen.clip_at(7, 0, OffsetLabel::new(-3)?);
//! let enc = gen.innovation_encoder()?;
//! let a = enc.encode(Modality::Audio, &clip.audio_raw)?;
//! let v = enc.encode(Modality::Visual, &clip.video_raw)?;
//! let pred = diag_avg_offset(&build_similarity_matrix(&a, &v)?)?;
//! assert_eq!(pred.offset.offset(), -3);
//! # Ok::<(), syncmatrix_core::Error>(())
//! ```

pub mod autodiff;
pub mod checkpoint;
pub mod encoders;
pub mod error;
pub mod estimators;
pub mod eval;
pub mod export;
pub mod losses;
pub mod nn;
pub mod seed;
pub mod similarity;
pub mod synthdata;
pub mod tensor;
pub mod train;

pub use checkpoint::Checkpoint;
pub use encoders::{Encoder, EncoderConfig};
pub use error::{Error, Result};
pub use losses::{AngularScale, EmbedLoss, PairBatch};
pub use similarity::{build_similarity_matrix, FeatureStream, Modality, OffsetLabel, SimilarityMatrix};
pub use tensor::Tensor;
