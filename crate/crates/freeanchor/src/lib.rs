//! Desk-scale anchor-free-matching object detection engine.
//!
//! The crate trains a tiny detection head on synthetic raster scenes with a
//! learning-to-match objective: each object owns a bag of candidate anchors,
//! and a likelihood built from classification confidence, localization
//! confidence, and soft match probabilities selects the anchor-object
//! assignment jointly with the network weights.
//!
//! Modules, bottom to top:
//! - [`geometry`]: boxes, IoU, anchor layouts, delta coding, smooth L1, NMS
//! - [`matching`]: anchor bags, hard IoU assignment, soft match probabilities
//! - [`loss`]: the matching-aware likelihood and its final loss with gradients
//! - [`model`]: pooled raster features plus a small MLP head
//! - [`synthdata`]: deterministic synthetic scene generator and JSONL storage
//! - [`eval`]: COCO-style AP, NMS recall, and breakdown reports
//! - [`trainer`]: SGD training loop, inference, and matching traces
//! - [`gradcheck`]: finite-difference verification of the pipeline gradient
//!
//! See the `examples/` directory for runnable end-to-end workflows.

pub mod cli;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod geometry;
pub mod gradcheck;
pub mod loss;
pub mod matching;
pub mod model;
pub mod oracles;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
