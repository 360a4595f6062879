//! Per-view 3D pose estimators.
//!
//! Two implementations share the [`ViewEstimator`] interface: a small
//! anchor-voting regressor ([`EstimatorParams`]) and an occlusion-aware
//! ground-truth perturbation model ([`OracleEstimator`]) used for controlled
//! selection and fusion experiments.

mod a2j;
mod oracle;

pub use a2j::*;
pub use oracle::*;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geometry::{DepthImage, HandPose, Intrinsics, VirtualView};
use crate::nn::FeatureMap;
use crate::renderer::HandCrop;

/// Raw anchor responses kept for loss computation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorResponses {
    /// Anchor positions in crop pixels.
    pub anchors: Vec<[f64; 2]>,
    /// `K x A` pre-softmax anchor weights, joint-major.
    pub logits: Vec<f64>,
    /// `K x A` in-plane offsets in crop pixels.
    pub offsets: Vec<[f64; 2]>,
    /// `K x A` depth offsets in units of the crop cube half-extent.
    pub depth: Vec<f64>,
    pub crop_intrinsics: Intrinsics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorOutput {
    /// Joints in the view's camera frame, millimeters.
    pub pose: HandPose,
    /// Summary feature map consumed by the teacher confidence network.
    pub feature: FeatureMap,
    pub per_anchor: Option<AnchorResponses>,
}

/// Everything an estimator may look at for one virtual view.
pub struct ViewInput<'a> {
    pub view: &'a VirtualView,
    pub rendered: &'a DepthImage,
    pub crop: &'a HandCrop,
    /// Ground truth in the original frame; only oracle estimators read it.
    pub gt_original: Option<&'a HandPose>,
    /// Seed for stochastic estimators, derived from the frame and pass.
    pub sample_seed: u64,
}

pub trait ViewEstimator: Sync {
    /// Shape `[C, H, W]` of [`EstimatorOutput::feature`].
    fn feature_shape(&self) -> [usize; 3];

    fn estimate_view(&self, input: &ViewInput<'_>) -> Result<EstimatorOutput>;
}
