//! Listwise and pairwise ranking objectives for cross-modal retrieval.
//!
//! The crate provides a differentiable NDCG surrogate (Smooth-NDCG) and a
//! hardest-negative triplet loss over batch similarity matrices, relevance
//! scores derived from precomputed caption embeddings, hard retrieval
//! metrics, a synthetic dataset generator and a small linear bi-encoder
//! trainer that ties them together.
//!
//! ```
//! use rankforge_core::losses::{s_ndcg_loss, SimilarityMatrix, SmoothConfig};
//! use rankforge_core::relevance::RelevanceMatrix;
//! use rankforge_core::Matrix;
//!
//! let s = SimilarityMatrix::new(Matrix::from_rows(&[vec![0.9, 0.1], vec![0.2, 0.8]])?)?;
//! let r = RelevanceMatrix::new(Matrix::from_rows(&[vec![1.0, 0.4], vec![0.4, 1.0]])?)?;
//! let out = s_ndcg_loss(&s, &r, &SmoothConfig::default())?;
//! assert!(out.value < 1e-3);
//! # Ok::<(), rankforge_core::Error>(())
//! ```

// NaN must fail validation, so `!(x > 0.0)` is intended.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod matrix;
pub mod metrics;
pub mod relevance;
pub mod synth;
pub mod tensorio;
pub mod trainer;

pub use error::{Error, Result};
pub use losses::{LossKind, LossResult, SimilarityMatrix, SmoothConfig};
pub use matrix::Matrix;
pub use metrics::MetricReport;
pub use relevance::{CaptionEmbeddings, RelevanceMatrix};
pub use synth::SynthSpec;
pub use tensorio::{DatasetManifest, Split, TensorFile};
pub use trainer::{EncoderParams, TrainConfig, TrainTrace};
