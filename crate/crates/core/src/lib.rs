//! MatrixNet ("xNet") object detection at desk scale.
//!
//! A matrix of feature layers indexed by height scale (row) and width scale
//! (column) replaces the single-axis feature pyramid. Two heads sit on top of
//! it: a center-based head that regresses box corners from object centers,
//! and a corner-based head that matches top-left and bottom-right corners by
//! their regressed object centers.
//!
//! Module map:
//! - [`lattice`]: layer matrix, strides, ranges, object-to-layer assignment.
//! - [`targets`]: ground-truth encoders for both heads.
//! - [`decode`]: peak extraction, corner matching, flip merge, soft-NMS.
//! - [`losses`]: penalty-reduced focal loss and smooth L1 with gradients.
//! - [`net`]: a small differentiable core and the xNet model.
//! - [`data`]: synthetic scenes, COCO annotations, augmentation, statistics.
//! - [`eval`]: COCO-style AP/AR.
//! - [`pipeline`]: training loop and end-to-end inference.

pub mod boxes;
pub mod config;
pub mod data;
pub mod decode;
pub mod error;
pub mod eval;
pub mod lattice;
pub mod losses;
pub mod net;
pub mod pipeline;
pub mod targets;

pub use boxes::BBox;
pub use error::{Error, Result};
pub use lattice::{Lattice, LatticeSpec, Layer, LayerId};
