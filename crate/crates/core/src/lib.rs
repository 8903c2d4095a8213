//! Mixed-precision training laboratory for graph convolutional networks.
//!
//! The crate trains a two-layer GCN vertex classifier and a graph auto-encoder
//! link predictor under four precision policies (`O0`..`O3`), on top of a
//! software binary16 implementation, dense precision-tagged matrices with
//! byte-accurate memory accounting, and a reverse-mode tape with dynamic loss
//! scaling. The [`harness`] module drives parameter sweeps and reports.

pub mod halfnum;
pub mod autodiff;
pub mod graph;
pub mod harness;
pub mod metrics;
pub mod models;
pub mod tensor;

pub use halfnum::Half;
pub use tensor::{MemoryAccountant, Precision, PrecisionMatrix, TensorError};
