//! Curb detection from lidar without manual labels.
//!
//! Sensor points are projected into the camera image as altitude difference
//! images; curbs found in 3D are rendered as training labels; network
//! output is fitted and scored in bird's-eye view.

pub mod adi;
pub mod annotator;
pub mod beam_classify;
pub mod curb_features;
pub mod error;
pub mod evaluation;
pub mod gpr_filter;
pub mod ground_seg;
pub mod kitti_io;
pub mod postprocess;
pub mod projection;
pub mod reparam;
pub mod synth;

pub use error::{Error, Result};
