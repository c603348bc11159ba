//! 2-D exploration simulator: segment maps, a 360-beam range sensor, unicycle
//! kinematics, random-walk obstacles, coverage bookkeeping and the reward.

pub mod audit;
pub mod env_spec;
pub mod geometry;
pub mod lidar;
pub mod occupancy;
pub mod perturb;
pub mod reward;
pub mod trajectory;
pub mod world;

pub use env_spec::{EnvironmentSpec, ObstacleSpec, Pose};
pub use geometry::{Point, Segment};
pub use lidar::{cast_rays, LidarScan};
pub use occupancy::OccupancyTracker;
pub use perturb::{apply_perturbation, perturb_action, Perturbation};
pub use reward::{compute_reward, RewardTerms};
pub use trajectory::{Trajectory, TrajectoryRow};
pub use world::{Action, Obstacle, RobotState, Simulator, StepResult};

pub const ROBOT_RADIUS: f64 = 0.3;
pub const MAX_RANGE: f64 = 5.0;
pub const NUM_BEAMS: usize = 360;
/// Control period in seconds (10 Hz).
pub const DT: f64 = 0.1;
pub const MAX_LINEAR: f64 = 0.5;
pub const MAX_ANGULAR: f64 = 1.0;
pub const CELL_SIZE: f64 = 0.25;
pub const CELL_AREA: f64 = CELL_SIZE * CELL_SIZE;
