//! Weighted-residual flows of positive operators on finite-dimensional
//! complex spaces.
//!
//! A root PSD operator is pushed through a tree of one-step updates
//! `R -> R^{1/2} (I - P_j) R^{1/2}`, one branch per projection in a finite
//! family. The crate provides:
//!
//! * validated operator arithmetic and the per-family leakage constant
//!   ([`operator`]);
//! * cached traversal of the residual tree ([`tree`]);
//! * intrinsic branch measures with dead-node fallback ([`measure`]);
//! * seeded branch sampling, level statistics, supermartingale and
//!   energy-balance diagnostics, and extinction summaries ([`sampler`]);
//! * normalized-eigenvector atom extraction along extinct branches, with
//!   frame verification against the root operator ([`frame`]);
//! * reproducible scenario configs, instance generation, and report output
//!   ([`scenario`]).

pub mod error;
pub mod frame;
pub mod measure;
pub mod operator;
pub mod random;
pub mod sampler;
pub mod scenario;
pub mod tree;

pub use error::{Result, WrError};
