//! On-line object detection with weakly-supervised refinement.
//!
//! The engine learns per-class kernel classifiers and box refiners from
//! depth-derived labels, then adapts them to a new scene by mixing
//! self-labeling of confident frames, human queries for uncertain ones and
//! tracker propagation of the human's boxes. A synthetic world stands in
//! for the robot's cameras so every stage can be run and measured offline.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod annotation;
pub mod benchmark;
pub mod bootstrap;
pub mod config;
pub mod depth;
pub mod detector;
pub mod error;
pub mod evaluation;
pub mod eventlog;
pub mod frontend;
pub mod geometry;
pub mod kernel;
pub mod orchestrator;
pub mod selection;
pub mod store;
pub mod tracker;
pub mod world;

pub use error::{Error, Result};
pub use geometry::{BoundingBox, BoxDelta, Detection, LabeledBox};
pub use world::{ExplorationSequence, FrameRecord, Proposal};
