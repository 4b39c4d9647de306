//! Instant-response few-shot object detection.
//!
//! A two-stage detector whose region proposal network is trained with
//! pseudo-positive anchors, whose box classifier is a learned comparison
//! head during training and a parameter-free cosine distance head at
//! inference, and whose box regressor reads the pixel-to-pixel cosine
//! correspondence between a proposal and the support prototype.

pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod features;
pub mod geometry;
pub mod heads;
pub mod model;
pub mod nn;
pub mod ss_rpn;
pub mod training;

pub use error::{Error, Result};
