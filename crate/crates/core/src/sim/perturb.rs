use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::lidar::LidarScan;
use super::world::Action;
use super::{MAX_RANGE, NUM_BEAMS};
use crate::error::{Error, Result};

pub const SENSOR_NOISE_STD: f64 = 0.1;
pub const ACTUATOR_NOISE_STD: f64 = 0.1;
pub const OCCLUSION_FRACTION: f64 = 0.2;

/// Test-time corruption of the sensor or actuators.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Perturbation {
    None,
    SensorNoise { std: f64 },
    ActuatorNoise { std: f64 },
    Occlusion { fraction: f64 },
}

impl Perturbation {
    pub const MODES: [&'static str; 4] = ["none", "sensor_noise", "actuator_noise", "occlusion"];

    pub fn parse(mode: &str) -> Result<Self> {
        match mode {
            "none" => Ok(Self::None),
            "sensor_noise" => Ok(Self::SensorNoise { std: SENSOR_NOISE_STD }),
            "actuator_noise" => Ok(Self::ActuatorNoise { std: ACTUATOR_NOISE_STD }),
            "occlusion" => Ok(Self::Occlusion {
                fraction: OCCLUSION_FRACTION,
            }),
            other => Err(Error::Config {
                key: "perturb".into(),
                msg: format!("unknown mode `{other}` (expected one of {})", Self::MODES.join(", ")),
            }),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::None => "none",
            Self::SensorNoise { .. } => "sensor_noise",
            Self::ActuatorNoise { .. } => "actuator_noise",
            Self::Occlusion { .. } => "occlusion",
        }
    }

    /// Number of beams the occlusion mode masks per scan.
    pub fn masked_beams(fraction: f64) -> usize {
        (fraction * NUM_BEAMS as f64).round() as usize
    }
}

/// Applies the sensor-side part of `mode` to a scan. Actuator noise leaves scans alone.
pub fn apply_perturbation<R: Rng + ?Sized>(scan: &LidarScan, mode: Perturbation, rng: &mut R) -> LidarScan {
    let mut out = scan.clone();
    match mode {
        Perturbation::None | Perturbation::ActuatorNoise { .. } => {}
        Perturbation::SensorNoise { std } => {
            if std > 0.0 {
                let n = Normal::new(0.0, std).expect("finite std");
                for r in &mut out.ranges {
                    *r = (*r + n.sample(rng)).clamp(0.0, MAX_RANGE);
                }
            }
        }
        Perturbation::Occlusion { fraction } => {
            let k = Perturbation::masked_beams(fraction).min(out.ranges.len());
            for i in sample(rng, out.ranges.len(), k) {
                out.ranges[i] = MAX_RANGE;
            }
        }
    }
    out
}

/// Adds actuator noise (if that is the mode) and clamps to the action bounds.
pub fn perturb_action<R: Rng + ?Sized>(action: Action, mode: Perturbation, rng: &mut R) -> Action {
    match mode {
        Perturbation::ActuatorNoise { std } if std > 0.0 => {
            let n = Normal::new(0.0, std).expect("finite std");
            Action::new(action.v + n.sample(rng), action.omega + n.sample(rng)).clamped()
        }
        _ => action.clamped(),
    }
}
