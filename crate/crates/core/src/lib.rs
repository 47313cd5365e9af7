//! Desk-scale knowledge-editing laboratory.
//!
//! Builds a synthetic fact world, pretrains a tiny decoder-only transformer on
//! it, applies rank-one (ROME-style) and batched (MEMIT-style) edits to an MLP
//! down-projection, trains a single binary mask that reverses many edits at
//! once, and analyses the result through residual-stream decomposition,
//! pruning baselines and edit blocking.

pub mod corpus;
pub mod editor;
pub mod evaluator;
pub mod interventions;
pub mod lens;
pub mod error;
pub mod linalg;
pub mod maskforge;
pub mod nanomodel;
pub mod runner;

pub use error::{Error, Result};
