//! Surprise bonus: the scaled disagreement between what the model predicted
//! for the next latent and what it inferred after seeing the observation.

use serde::{Deserialize, Serialize};

use crate::world_model::{kl_diag_gaussians, DiagonalGaussian};

/// Upper clip on a single intrinsic reward.
pub const INTRINSIC_MAX: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CuriosityConfig {
    pub alpha: f64,
    pub enabled: bool,
}

impl Default for CuriosityConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            enabled: true,
        }
    }
}

impl CuriosityConfig {
    /// Whether the bonus contributes anything at all.
    pub fn active(&self) -> bool {
        self.enabled && self.alpha > 0.0
    }
}

/// `α · KL(posterior || prior)`, clipped to `[0, INTRINSIC_MAX]`.
pub fn intrinsic_reward(posterior: &DiagonalGaussian, prior: &DiagonalGaussian, alpha: f64) -> f64 {
    intrinsic_from_kl(kl_diag_gaussians(posterior, prior), alpha)
}

/// Same clip applied to a KL computed elsewhere.
pub fn intrinsic_from_kl(kl: f64, alpha: f64) -> f64 {
    (alpha * kl).clamp(0.0, INTRINSIC_MAX)
}

pub fn total_reward(r_ext: f64, r_int: f64) -> f64 {
    r_ext + r_int
}
