use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::env_spec::EnvironmentSpec;
use super::geometry::{segment_distance, wrap_angle, Point, Segment};
use super::lidar::{cast_rays, LidarScan};
use super::occupancy::OccupancyTracker;
use super::perturb::{apply_perturbation, perturb_action, Perturbation};
use super::reward::RewardTerms;
use super::{DT, MAX_ANGULAR, MAX_LINEAR, ROBOT_RADIUS};
use crate::error::{Error, Result};

/// Probability per step that an obstacle picks a new heading.
pub const OBSTACLE_TURN_PROB: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub v: f64,
    pub omega: f64,
}

impl Action {
    pub fn new(v: f64, omega: f64) -> Self {
        Self { v, omega }
    }

    pub fn clamped(self) -> Self {
        Self {
            v: self.v.clamp(-MAX_LINEAR, MAX_LINEAR),
            omega: self.omega.clamp(-MAX_ANGULAR, MAX_ANGULAR),
        }
    }

    /// Components divided by their bounds, in `[-1, 1]`.
    pub fn normalized(&self) -> [f32; 2] {
        [(self.v / MAX_LINEAR) as f32, (self.omega / MAX_ANGULAR) as f32]
    }

    pub fn from_normalized(u: [f32; 2]) -> Self {
        Self::new(u[0] as f64 * MAX_LINEAR, u[1] as f64 * MAX_ANGULAR).clamped()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobotState {
    pub position: Point,
    pub heading: f64,
    pub path_length: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub radius: f64,
    pub speed: f64,
    pub position: Point,
    pub direction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    /// Observation after any sensor perturbation.
    pub observation: LidarScan,
    pub reward: f64,
    pub terms: RewardTerms,
    pub done: bool,
    pub collided: bool,
    pub explored_delta: f64,
    /// Closest true range reading, before perturbation.
    pub d_min: f64,
    /// Action actually applied after clamping and actuator noise.
    pub applied: Action,
}

/// A live episode in one environment. All randomness (obstacle walks,
/// perturbations) comes from the simulator's own seeded stream.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Simulator {
    spec: EnvironmentSpec,
    /// Walls plus the bounding box; used for collisions only.
    colliders: Vec<Segment>,
    pub robot: RobotState,
    pub obstacles: Vec<Obstacle>,
    pub tracker: OccupancyTracker,
    scan: LidarScan,
    steps: usize,
    done: bool,
    started: bool,
    perturbation: Perturbation,
    rng: ChaCha8Rng,
}

impl Simulator {
    pub fn new(spec: EnvironmentSpec, seed: u64) -> Self {
        let (w, h) = (spec.width, spec.height);
        let mut colliders = spec.walls.clone();
        colliders.extend([
            Segment::new(0.0, 0.0, w, 0.0),
            Segment::new(w, 0.0, w, h),
            Segment::new(w, h, 0.0, h),
            Segment::new(0.0, h, 0.0, 0.0),
        ]);
        let start = spec.start_pose;
        Self {
            tracker: OccupancyTracker::new(w, h),
            colliders,
            robot: RobotState {
                position: Point::new(start.x, start.y),
                heading: wrap_angle(start.heading),
                path_length: 0.0,
            },
            obstacles: Vec::new(),
            scan: LidarScan::full_range(),
            steps: 0,
            done: false,
            started: false,
            perturbation: Perturbation::None,
            rng: ChaCha8Rng::seed_from_u64(seed),
            spec,
        }
    }

    pub fn with_perturbation(mut self, p: Perturbation) -> Self {
        self.perturbation = p;
        self
    }

    pub fn set_perturbation(&mut self, p: Perturbation) {
        self.perturbation = p;
    }

    pub fn spec(&self) -> &EnvironmentSpec {
        &self.spec
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// The unperturbed scan at the current pose.
    pub fn true_scan(&self) -> &LidarScan {
        &self.scan
    }

    /// Starts a new episode and returns the first observation. The initial
    /// scan counts toward coverage but earns no reward.
    pub fn reset(&mut self) -> LidarScan {
        let start = self.spec.start_pose;
        self.robot = RobotState {
            position: Point::new(start.x, start.y),
            heading: wrap_angle(start.heading),
            path_length: 0.0,
        };
        let rng = &mut self.rng;
        self.obstacles = self
            .spec
            .obstacles
            .iter()
            .map(|o| Obstacle {
                radius: o.radius,
                speed: o.speed,
                position: o.position,
                direction: rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
            })
            .collect();
        self.steps = 0;
        self.done = false;
        self.started = true;
        self.tracker.reset();
        self.tracker.record_visit(self.robot.position);
        self.scan = cast_rays(self.robot.position, self.robot.heading, &self.spec.walls, &self.obstacles);
        self.tracker.update(self.robot.position, self.robot.heading, &self.scan);
        apply_perturbation(&self.scan, self.perturbation, &mut self.rng)
    }

    pub fn step(&mut self, action: Action) -> Result<StepResult> {
        if !self.started {
            return Err(Error::Environment("step called before reset".into()));
        }
        if self.done {
            return Err(Error::Environment("step called after episode end; reset first".into()));
        }
        let applied = perturb_action(action, self.perturbation, &mut self.rng);
        self.advance_obstacles();

        let old = self.robot.position;
        let th = self.robot.heading;
        let target = Point::new(
            old.x + applied.v * th.cos() * DT,
            old.y + applied.v * th.sin() * DT,
        );
        let (position, collided) = self.resolve_motion(old, target);
        self.robot.position = position;
        self.robot.heading = wrap_angle(th + applied.omega * DT);
        self.robot.path_length += (position.x - old.x).hypot(position.y - old.y);
        self.tracker.record_visit(position);
        self.steps += 1;

        self.scan = cast_rays(position, self.robot.heading, &self.spec.walls, &self.obstacles);
        let explored_delta = self.tracker.update(position, self.robot.heading, &self.scan);
        let d_min = self.scan.min_range();
        let terms = RewardTerms::new(explored_delta, d_min, collided);
        self.done = collided || self.steps >= self.spec.step_limit;
        Ok(StepResult {
            observation: apply_perturbation(&self.scan, self.perturbation, &mut self.rng),
            reward: terms.total(),
            terms,
            done: self.done,
            collided,
            explored_delta,
            d_min,
            applied,
        })
    }

    /// Smallest clearance between a robot-center path and the environment,
    /// measured against the robot radius (negative means overlap).
    fn clearance(&self, path: &Segment) -> f64 {
        let walls = self
            .colliders
            .iter()
            .map(|w| segment_distance(path, w) - ROBOT_RADIUS);
        let discs = self
            .obstacles
            .iter()
            .map(|o| path.distance_to(o.position) - o.radius - ROBOT_RADIUS);
        walls.chain(discs).fold(f64::INFINITY, f64::min)
    }

    /// Moves from `from` toward `to`, stopping at first contact.
    fn resolve_motion(&self, from: Point, to: Point) -> (Point, bool) {
        let swept = Segment { a: from, b: to };
        if self.clearance(&swept) >= 0.0 {
            return (to, false);
        }
        let lerp = |f: f64| Point::new(from.x + f * (to.x - from.x), from.y + f * (to.y - from.y));
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        for _ in 0..50 {
            let mid = 0.5 * (lo + hi);
            if self.clearance(&Segment { a: from, b: lerp(mid) }) >= 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        (lerp(lo), true)
    }

    /// Random-walk update for every dynamic obstacle.
    pub fn advance_obstacles(&mut self) {
        for i in 0..self.obstacles.len() {
            if self.rng.random::<f64>() < OBSTACLE_TURN_PROB {
                self.obstacles[i].direction = self.rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            }
            let o = self.obstacles[i];
            let propose = |dir: f64| {
                let (s, c) = dir.sin_cos();
                Point::new(o.position.x + o.speed * DT * c, o.position.y + o.speed * DT * s)
            };
            let p = propose(o.direction);
            match self.obstacle_contact(i, p) {
                None => self.obstacles[i].position = p,
                Some((nx, ny)) => {
                    let (s, c) = o.direction.sin_cos();
                    let dot = c * nx + s * ny;
                    let dir = (s - 2.0 * dot * ny).atan2(c - 2.0 * dot * nx);
                    self.obstacles[i].direction = dir;
                    let q = propose(dir);
                    if self.obstacle_contact(i, q).is_none() {
                        self.obstacles[i].position = q;
                    }
                }
            }
        }
    }

    /// Unit normal of the first surface obstacle `i` would touch at `p`.
    /// The robot counts as a surface, so obstacles never drive into it.
    fn obstacle_contact(&self, i: usize, p: Point) -> Option<(f64, f64)> {
        let r = self.obstacles[i].radius;
        let normal = |from: Point| {
            let (dx, dy) = (p.x - from.x, p.y - from.y);
            let n = dx.hypot(dy);
            if n > 0.0 {
                (dx / n, dy / n)
            } else {
                (1.0, 0.0)
            }
        };
        for w in &self.colliders {
            let c = w.closest_point(p);
            if c.dist(p) < r {
                return Some(normal(c));
            }
        }
        if self.robot.position.dist(p) < r + ROBOT_RADIUS {
            return Some(normal(self.robot.position));
        }
        for (j, o) in self.obstacles.iter().enumerate() {
            if j != i && o.position.dist(p) < r + o.radius {
                return Some(normal(o.position));
            }
        }
        None
    }

    /// Gap between the robot disc and the nearest wall or obstacle.
    pub fn robot_clearance(&self) -> f64 {
        let p = self.robot.position;
        self.clearance(&Segment { a: p, b: p })
    }

    /// Explored area so far in the current episode.
    pub fn explored_area(&self) -> f64 {
        self.tracker.explored_area()
    }

    /// Area of the coverage grid, the denominator-free upper bound on coverage.
    pub fn free_area(&self) -> f64 {
        self.tracker.total_area()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn open_room() -> EnvironmentSpec {
        EnvironmentSpec::parse(
            "name = t\nbounds = 20 20\nstart_pose = 10 10 0\nstep_limit = 50\n\
             walls = 0 0 20 0; 20 0 20 20; 20 20 0 20; 0 20 0 0\n",
            "t",
        )
        .unwrap()
    }

    #[test]
    fn forward_step_kinematics() {
        let mut sim = Simulator::new(open_room(), 0);
        sim.reset();
        sim.step(Action::new(0.5, 0.0)).unwrap();
        assert!((sim.robot.position.x - 10.05).abs() < 1e-12);
        assert_eq!(sim.robot.position.y, 10.0);
    }

    #[test]
    fn turn_in_place() {
        let mut sim = Simulator::new(open_room(), 0);
        sim.reset();
        sim.step(Action::new(0.0, 1.0)).unwrap();
        assert!((sim.robot.heading - 0.1).abs() < 1e-12);
        assert_eq!(sim.robot.position, Point::new(10.0, 10.0));
    }

    #[test]
    fn step_before_reset_and_after_done() {
        let mut sim = Simulator::new(open_room(), 0);
        assert!(sim.step(Action::new(0.0, 0.0)).is_err());
        sim.reset();
        for _ in 0..50 {
            sim.step(Action::new(0.0, 0.0)).unwrap();
        }
        assert!(sim.is_done());
        assert!(sim.step(Action::new(0.0, 0.0)).is_err());
    }
}
