//! Training objectives.
//!
//! Repeatability: patch-wise cosine agreement between a heatmap and its
//! counterpart warped through the ground-truth correspondences, plus a
//! peakiness term that rewards sharp local maxima.
//!
//! Reliability: a differentiable average precision over a quantized
//! distance histogram, gated per query by the reliability map so that
//! `loss = 1 − (AP·R + κ·(1 − R))`.

mod ap;
mod batch;
mod repeatability;
mod total;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use ap::{
    ap_kappa_loss, exact_ap, exact_ap_from_distances, pairwise_distances, soft_ap, soft_ap_descriptors, soft_ap_tape,
    ApLabel,
};
pub use batch::{sample_training_batch, Query, TrainingBatch};
pub use repeatability::{cosim_loss, peakiness_loss, repeatability_loss, warp_heatmap, RepeatabilityTerms};
pub use total::{total_loss, AblationMode, LossBreakdown, LossValues};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Side of the square patches of the repeatability losses.
    pub patch_size: usize,
    /// Stride between patches; 1 visits every patch.
    pub patch_stride: usize,
    /// Weight of the two peakiness terms.
    pub peaky_weight: f64,
    /// AP below which a pixel is better declared unreliable.
    pub kappa: f64,
    /// Number of distance bins of the soft AP.
    pub ap_bins: usize,
    /// Spacing of the query grid, in pixels.
    pub query_step: usize,
    /// Database points within this distance of the target are positives.
    pub positive_radius: f64,
    /// Database points beyond this distance of the target are negatives.
    pub negative_radius: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            patch_size: 16,
            patch_stride: 1,
            peaky_weight: 0.5,
            kappa: 0.5,
            ap_bins: 25,
            query_step: 8,
            positive_radius: 4.0,
            negative_radius: 8.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.patch_size < 2 {
            return bad(format!("patch_size {} < 2", self.patch_size));
        }
        if self.patch_stride == 0 || self.query_step == 0 {
            return bad("patch_stride and query_step must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.kappa) {
            return bad(format!("kappa {} outside [0, 1]", self.kappa));
        }
        if self.ap_bins < 2 {
            return bad(format!("ap_bins {} < 2", self.ap_bins));
        }
        if !self.peaky_weight.is_finite() || self.peaky_weight < 0.0 {
            return bad(format!("peaky_weight {} must be finite and >= 0", self.peaky_weight));
        }
        if !(self.positive_radius >= 0.0 && self.positive_radius < self.negative_radius && self.negative_radius.is_finite()) {
            return bad(format!(
                "need 0 <= positive_radius ({}) < negative_radius ({})",
                self.positive_radius, self.negative_radius
            ));
        }
        Ok(())
    }
}
