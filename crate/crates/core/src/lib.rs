//! Knowledge-graph embedding toolkit built around the equivariance regularizer (ER).
//!
//! The crate covers the whole pipeline for 1-vs-All link prediction:
//!
//! - [`data`]: triple/category loading, reciprocal augmentation, filter index.
//! - [`synth`]: seeded synthetic KGs whose relations follow category patterns.
//! - [`model`]: CP, DistMult, ComplEx, RESCAL, TransE and RotatE scorers with
//!   hand-written gradients.
//! - [`regularizer`]: FRO, N3, DURA and the ER family (proximity, dissimilarity,
//!   joint with learned per-relation thresholds, second-order paths).
//! - [`trainer`]: cross-entropy training with Adagrad, and [`checkpoint`] I/O.
//! - [`eval`]: filtered MRR / Hits@k.
//! - [`theorem`]: a small-tensor lab comparing ER-style objectives with the
//!   tensor nuclear norm over exact CP factorizations.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod grad;
pub mod model;
pub mod presets;
pub mod regularizer;
pub mod rng;
pub mod synth;
pub mod theorem;
pub mod trainer;

pub use error::{KgError, Result};
