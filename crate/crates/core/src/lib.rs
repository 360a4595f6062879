//! Virtual-view selection and fusion for 3D hand pose estimation from a
//! single depth image.
//!
//! The input depth map is lifted to a point cloud, re-rendered from a lattice
//! of virtual cameras on a sphere around the hand, and a per-view estimator
//! predicts joints in every view. A confidence network scores the views, the
//! best `N` are kept, and their poses are fused in the original camera frame.

pub mod checkpoint;
pub mod confidence;
pub mod error;
pub mod estimator;
pub mod fusion;
pub mod geometry;
pub mod metrics;
pub mod nn;
pub mod parallel;
pub mod renderer;
pub mod seed;
pub mod synthdata;

pub use error::{Error, ErrorCategory, Result};
