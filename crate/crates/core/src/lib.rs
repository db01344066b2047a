#![no_std]

//! Single-model multi-person age estimation.
//!
//! A keypoint-heatmap face detector feeds an age/gender network through two
//! paths: margin-expanded face crops taken from the full-resolution image, and
//! a bilinear ROI transform of the detector's stride-4 intermediate feature
//! that is concatenated inside the age backbone. Training uses a masked
//! multi-task loss so that images with box-only annotations still supervise
//! detection without touching the age heads.
//!
//! The crate is `no_std` + `alloc`. Enable the `std` feature for runtime CPU
//! feature detection in the matrix kernels.

extern crate alloc;
#[cfg(feature = "std")]
extern crate std;

pub mod age_estimator;
pub mod augment;
pub mod detector;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use geometry::{BBox, Detection, MatchResult};
pub use tensor::{Image, Real, Tensor3};
