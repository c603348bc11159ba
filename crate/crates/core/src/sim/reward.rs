use serde::{Deserialize, Serialize};

pub const EXPLORATION_SCALE: f64 = 10.0;
pub const COLLISION_PENALTY: f64 = -50.0;
pub const SAFETY_DISTANCE: f64 = 0.5;
pub const SAFETY_SCALE: f64 = 5.0;
pub const STEP_PENALTY: f64 = -0.01;

/// The three additive parts of the per-step reward.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardTerms {
    pub exploration: f64,
    pub safety: f64,
    pub step: f64,
}

impl RewardTerms {
    pub fn new(explored_delta: f64, d_min: f64, collided: bool) -> Self {
        let safety = if collided {
            COLLISION_PENALTY
        } else if d_min < SAFETY_DISTANCE {
            -SAFETY_SCALE * (1.0 - d_min / SAFETY_DISTANCE)
        } else {
            0.0
        };
        Self {
            exploration: EXPLORATION_SCALE * explored_delta,
            safety,
            step: STEP_PENALTY,
        }
    }

    pub fn total(&self) -> f64 {
        self.exploration + self.safety + self.step
    }
}

pub fn compute_reward(explored_delta: f64, d_min: f64, collided: bool) -> f64 {
    RewardTerms::new(explored_delta, d_min, collided).total()
}
