//! Randomized invariant audit of a map, used by `dvxs env-check`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Action, EnvironmentSpec, Simulator, MAX_ANGULAR, MAX_LINEAR, MAX_RANGE};
use crate::error::Result;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub episodes: usize,
    pub steps: usize,
    pub collisions: usize,
    pub max_explored_m2: f64,
    pub violations: Vec<String>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Drives random actions for `episodes` episodes and checks that the robot
/// never overlaps geometry, ranges stay in `[0, MAX_RANGE]`, coverage and
/// path length never decrease, and coverage stays within the grid.
pub fn audit(spec: &EnvironmentSpec, episodes: usize, seed: u64) -> Result<AuditReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sim = Simulator::new(spec.clone(), seed);
    let mut rep = AuditReport::default();
    const TOL: f64 = 1e-9;
    for ep in 0..episodes {
        sim.reset();
        let (mut area, mut path) = (sim.explored_area(), 0.0);
        loop {
            let a = Action::new(
                rng.random_range(-MAX_LINEAR..=MAX_LINEAR),
                rng.random_range(-MAX_ANGULAR..=MAX_ANGULAR),
            );
            let r = sim.step(a)?;
            rep.steps += 1;
            let mut fail = |m: String| rep.violations.push(format!("episode {ep} step {}: {m}", sim.steps()));
            if sim.robot_clearance() < -TOL {
                fail(format!("robot overlaps geometry by {}", -sim.robot_clearance()));
            }
            if let Some(x) = sim.true_scan().ranges.iter().find(|x| !(0.0..=MAX_RANGE).contains(*x)) {
                fail(format!("range {x} out of bounds"));
            }
            if sim.explored_area() + TOL < area || sim.explored_area() > sim.free_area() + TOL {
                fail(format!("coverage {} inconsistent", sim.explored_area()));
            }
            if sim.robot.path_length + TOL < path {
                fail("path length decreased".into());
            }
            area = sim.explored_area();
            path = sim.robot.path_length;
            if r.done {
                rep.collisions += r.collided as usize;
                break;
            }
        }
        rep.max_explored_m2 = rep.max_explored_m2.max(area);
        rep.episodes += 1;
    }
    Ok(rep)
}
