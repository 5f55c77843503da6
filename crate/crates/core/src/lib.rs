//! Direct RGB-D visual odometry for scenes with moving objects.
//!
//! Moving objects are first pre-eliminated from depth alone (depth k-means,
//! grid regions and edge depth-gap constraints), then the camera motion is
//! estimated by jointly minimising photometric and depth residuals. Residual
//! outliers are folded back into the motion mask and the pose is re-estimated
//! on the shrinking static background.

pub mod error;
pub mod geometry;
pub mod clustering;
pub mod imaging;
pub mod motion_mask;
pub mod alignment;
pub mod refine;
pub mod dataset_io;
pub mod synth;
pub mod evaluation;

pub use error::{Error, Result};
