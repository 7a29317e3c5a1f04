//! Attributed-graph clustering built on multi-task self-supervision.
//!
//! The library trains a two-layer graph-convolution encoder against a set of
//! self-supervised pretext tasks, then fuses per-task expert features with a
//! per-node gating network. The fusion stage is supervised by high-confidence
//! pseudo labels, by the graph structure itself, and by a self-training
//! clustering objective. Clustering quality is reported as accuracy (optimal
//! cluster-to-class matching), normalized mutual information, and macro F1.

pub mod error;
pub mod evaluate;
pub mod fusion;
pub mod graph;
pub mod numerics;
pub mod pipeline;
pub mod pretrain;
pub mod selfsup;
pub mod tasks;

pub use error::{Error, Result};
