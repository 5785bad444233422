//! LIDAR scan segmentation on spherical range images.
//!
//! A scan is projected onto a `W x H` range image, partitioned into `k x k` point
//! groups that are augmented with group-relative features, turned into a learned
//! 2-D representation, segmented by a lightweight encoder/decoder, and the pixel
//! labels are carried back to every 3-D point, optionally refined by a depth-based
//! nearest-neighbor vote.

pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod grouping;
pub mod model;
pub mod pipeline;
pub mod postprocess;
pub mod projection;
pub mod scan_io;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
pub use rangeseg_tensor as tensor;
