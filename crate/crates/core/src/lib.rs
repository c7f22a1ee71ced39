//! Few-shot object detection laboratory: synthetic scenes with an analytic
//! feature model, an anchor-based region proposal network, a multi-stage
//! cascade of box refiners, the base-then-novel training protocol, and
//! PASCAL/COCO-style evaluation.

// `!(x > 0.0)`-style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cascade;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod ingest;
pub mod linear;
pub mod loss;
pub mod proposals;
pub mod protocol;
pub mod rng;
pub mod synth;

pub use error::{Error, Result};
pub use geometry::{clip, decode_delta, encode_delta, iou, BBox, BoxDelta};
pub use synth::{Annotation, ClassId, ClassSplit, Phase, Scene};
