use serde::{Deserialize, Serialize};

use super::geometry::{ray_circle, ray_segment, Point, Segment};
use super::world::Obstacle;
use super::{MAX_RANGE, NUM_BEAMS};

/// One sweep of range readings in meters; beam `i` points at `heading + i°`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LidarScan {
    pub ranges: Vec<f64>,
}

impl LidarScan {
    pub fn full_range() -> Self {
        Self {
            ranges: vec![MAX_RANGE; NUM_BEAMS],
        }
    }

    pub fn min_range(&self) -> f64 {
        self.ranges.iter().copied().fold(MAX_RANGE, f64::min)
    }

    /// Ranges divided by the maximum range, as network input.
    pub fn normalized(&self) -> Vec<f32> {
        self.ranges.iter().map(|&r| (r / MAX_RANGE) as f32).collect()
    }
}

pub fn beam_angle(heading: f64, i: usize) -> f64 {
    heading + (i as f64).to_radians()
}

/// Casts all beams from `origin` against the walls and obstacle discs.
pub fn cast_rays(origin: Point, heading: f64, walls: &[Segment], obstacles: &[Obstacle]) -> LidarScan {
    // Only geometry within reach can shorten a beam.
    let near: Vec<&Segment> = walls
        .iter()
        .filter(|w| w.distance_to(origin) <= MAX_RANGE)
        .collect();
    let near_obs: Vec<&Obstacle> = obstacles
        .iter()
        .filter(|o| o.position.dist(origin) - o.radius <= MAX_RANGE)
        .collect();
    let ranges = (0..NUM_BEAMS)
        .map(|i| {
            let (dy, dx) = beam_angle(heading, i).sin_cos();
            let mut best = MAX_RANGE;
            for w in &near {
                if let Some(t) = ray_segment(origin, dx, dy, w) {
                    best = best.min(t);
                }
            }
            for o in &near_obs {
                if let Some(t) = ray_circle(origin, dx, dy, o.position, o.radius) {
                    best = best.min(t);
                }
            }
            best
        })
        .collect();
    LidarScan { ranges }
}
