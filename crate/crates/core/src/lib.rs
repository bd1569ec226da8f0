//! Dynamic-sparsity attention for video diffusion transformers.
//!
//! The crate covers the single-device pipeline: dense and sparse reference
//! attention, the cumulative-mass critical-KV oracle, sparsity profiling,
//! low-rank score predictors, streaming top-k selection, voxel query
//! grouping, the sparse/dense dispatcher and a toy two-stage trainer.

pub mod analysis;
pub mod attention;
pub mod dispatcher;
pub mod error;
pub mod grid;
pub mod grouping;
pub mod io;
pub mod optim;
pub mod predictor;
pub mod profiler;
pub mod selection;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use attention::{AttentionScores, CriticalIndexSet};
pub use error::{CoreError, Result};
pub use grid::TokenGrid;
pub use tensor::{HeadTensor, Matrix};
