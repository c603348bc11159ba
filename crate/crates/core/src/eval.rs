//! Evaluation episodes, exploration metrics, ablation and robustness suites.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{split_seed, TrainConfig};
use crate::error::{Error, Result};
use crate::sim::{
    Action, EnvironmentSpec, LidarScan, OccupancyTracker, Perturbation, Simulator, Trajectory, TrajectoryRow,
    CELL_AREA, NUM_BEAMS,
};
use crate::trainer::{Agent, Trainer, PATH_FLOOR};
use crate::world_model::LatentState;

/// Explored free space in square meters.
pub fn compute_eqs(tracker: &OccupancyTracker, free_area: f64) -> f64 {
    (tracker.explored_cells() as f64 * CELL_AREA).min(free_area)
}

/// Explored area per meter traveled, with the path floored at 1 cm.
pub fn compute_ees(explored_m2: f64, path_length_m: f64) -> f64 {
    explored_m2 / path_length_m.max(PATH_FLOOR)
}

/// Something that picks actions from observations.
pub trait Controller {
    fn reset(&mut self, first: &LidarScan) -> Result<()>;
    fn act(&mut self) -> Result<Action>;
    /// Called after every step with the action actually applied.
    fn observe(&mut self, applied: Action, obs: &LidarScan) -> Result<()>;
}

/// The trained stack with noise off: posterior mean latents, mean actions.
pub struct AgentController<'a> {
    agent: &'a Agent,
    state: LatentState,
}

impl<'a> AgentController<'a> {
    pub fn new(agent: &'a Agent) -> Self {
        Self {
            agent,
            state: LatentState::zeros(&agent.model.cfg),
        }
    }
}

impl Controller for AgentController<'_> {
    fn reset(&mut self, first: &LidarScan) -> Result<()> {
        let h = vec![0.0; self.agent.model.cfg.d_h];
        let post = self.agent.model.filter(&h, &first.normalized())?;
        self.state = LatentState { h, z: post.mean };
        Ok(())
    }

    fn act(&mut self) -> Result<Action> {
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        let (a, _) = self
            .agent
            .behavior
            .policy
            .act(&self.state.concat(), false, 0.0, &mut unused)?;
        Ok(a)
    }

    fn observe(&mut self, applied: Action, obs: &LidarScan) -> Result<()> {
        let (h, _, post) = self
            .agent
            .model
            .step_filter(&self.state, applied.normalized(), &obs.normalized())?;
        self.state = LatentState { h, z: post.mean };
        Ok(())
    }
}

/// Uniform random actions over the full command range.
pub struct RandomController {
    rng: ChaCha8Rng,
}

impl RandomController {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl Controller for RandomController {
    fn reset(&mut self, _: &LidarScan) -> Result<()> {
        Ok(())
    }

    fn act(&mut self) -> Result<Action> {
        let u = [self.rng.random_range(-1.0f32..=1.0), self.rng.random_range(-1.0f32..=1.0)];
        Ok(Action::from_normalized(u))
    }

    fn observe(&mut self, _: Action, _: &LidarScan) -> Result<()> {
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub ret: f64,
    pub explored_m2: f64,
    pub path_length_m: f64,
    pub collided: bool,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean_return: f64,
    /// Mean explored square meters per episode.
    pub eqs: f64,
    pub ees: f64,
    /// Fraction of episodes ended by a collision.
    pub collision_rate: f64,
    pub episodes: usize,
    pub environment: String,
    pub perturbation: String,
    pub mean_path_length: f64,
    pub mean_steps: f64,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str =
        "environment,perturbation,episodes,mean_return,eqs,ees,collision_rate,mean_path_length,mean_steps";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.environment,
            self.perturbation,
            self.episodes,
            self.mean_return,
            self.eqs,
            self.ees,
            self.collision_rate,
            self.mean_path_length,
            self.mean_steps
        )
    }

    pub fn from_outcomes(outcomes: &[EpisodeOutcome], environment: &str, perturbation: Perturbation) -> Result<Self> {
        if outcomes.is_empty() {
            return Err(Error::InvalidArgument {
                op: "evaluate",
                msg: "at least one episode is required".into(),
            });
        }
        let n = outcomes.len() as f64;
        let mean = |f: &dyn Fn(&EpisodeOutcome) -> f64| outcomes.iter().map(f).sum::<f64>() / n;
        Ok(Self {
            mean_return: mean(&|o| o.ret),
            eqs: mean(&|o| o.explored_m2),
            ees: mean(&|o| compute_ees(o.explored_m2, o.path_length_m)),
            collision_rate: mean(&|o| o.collided as u8 as f64),
            episodes: outcomes.len(),
            environment: environment.to_string(),
            perturbation: perturbation.name().to_string(),
            mean_path_length: mean(&|o| o.path_length_m),
            mean_steps: mean(&|o| o.steps as f64),
        })
    }
}

/// Runs one episode, optionally recording the trajectory.
pub fn run_episode(
    ctrl: &mut dyn Controller,
    spec: &EnvironmentSpec,
    perturbation: Perturbation,
    env_seed: u64,
    record: bool,
) -> Result<(EpisodeOutcome, Option<Trajectory>)> {
    let mut sim = Simulator::new(spec.clone(), env_seed).with_perturbation(perturbation);
    let first = sim.reset();
    ctrl.reset(&first)?;
    let mut traj = record.then(Trajectory::default);
    let row = |sim: &Simulator, step, a: Action, reward, done| TrajectoryRow {
        step,
        x: sim.robot.position.x,
        y: sim.robot.position.y,
        heading: sim.robot.heading,
        v: a.v,
        omega: a.omega,
        reward,
        done,
    };
    if let Some(t) = traj.as_mut() {
        t.push(row(&sim, 0, Action::new(0.0, 0.0), 0.0, false));
    }
    let mut out = EpisodeOutcome {
        ret: 0.0,
        explored_m2: 0.0,
        path_length_m: 0.0,
        collided: false,
        steps: 0,
    };
    loop {
        let a = ctrl.act()?;
        let res = sim.step(a)?;
        out.ret += res.reward;
        out.steps += 1;
        if let Some(t) = traj.as_mut() {
            t.push(row(&sim, out.steps, res.applied, res.reward, res.done));
        }
        if res.done {
            out.collided = res.collided;
            break;
        }
        ctrl.observe(res.applied, &res.observation)?;
    }
    out.explored_m2 = compute_eqs(&sim.tracker, sim.free_area());
    out.path_length_m = sim.robot.path_length;
    Ok((out, traj))
}

/// Simulator seed of evaluation episode `i`.
pub fn episode_seed(seed: u64, i: usize) -> u64 {
    split_seed(seed, 1000 + i as u64)
}

pub fn evaluate_controller(
    ctrl: &mut dyn Controller,
    spec: &EnvironmentSpec,
    episodes: usize,
    perturbation: Perturbation,
    seed: u64,
) -> Result<EvalReport> {
    let outcomes = (0..episodes)
        .map(|i| run_episode(ctrl, spec, perturbation, episode_seed(seed, i), false).map(|(o, _)| o))
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_outcomes(&outcomes, &spec.name, perturbation)
}

/// Deterministic evaluation of a trained agent. No parameters change.
pub fn evaluate(
    agent: &Agent,
    spec: &EnvironmentSpec,
    episodes: usize,
    perturbation: Perturbation,
    seed: u64,
) -> Result<EvalReport> {
    if agent.model.cfg.obs_len != NUM_BEAMS {
        return Err(Error::Environment(format!(
            "model expects {} beams, the simulator produces {NUM_BEAMS}",
            agent.model.cfg.obs_len
        )));
    }
    evaluate_controller(&mut AgentController::new(agent), spec, episodes, perturbation, seed)
}

pub fn evaluate_random(spec: &EnvironmentSpec, episodes: usize, perturbation: Perturbation, seed: u64) -> Result<EvalReport> {
    evaluate_controller(&mut RandomController::new(split_seed(seed, 7)), spec, episodes, perturbation, seed)
}

pub const ABLATIONS: [&str; 6] = [
    "full",
    "no_curiosity",
    "deterministic_model",
    "beta_1",
    "short_horizon",
    "no_recurrent",
];

/// `base` with one ablation applied.
pub fn ablation_config(base: &TrainConfig, variant: &str) -> Result<TrainConfig> {
    let mut c = base.clone();
    match variant {
        "full" => {}
        "no_curiosity" => c.curiosity.alpha = 0.0,
        "deterministic_model" => c.model.deterministic = true,
        "beta_1" => c.model.beta = 1.0,
        "short_horizon" => c.behavior.horizon = 5,
        "no_recurrent" => c.model.no_recurrent = true,
        o => {
            return Err(Error::InvalidArgument {
                op: "ablation_config",
                msg: format!("unknown variant `{o}`"),
            })
        }
    }
    Ok(c)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub report: EvalReport,
}

/// Trains every variant from `base` and evaluates it on the training map.
pub fn ablation_suite(base: &TrainConfig, episodes: usize, seed: u64) -> Result<Vec<AblationRow>> {
    ABLATIONS
        .iter()
        .map(|&v| {
            let cfg = ablation_config(base, v)?;
            let spec = EnvironmentSpec::load(&cfg.env)?;
            let mut t = Trainer::with_spec(cfg, spec.clone())?;
            let total = t.cfg.total_steps;
            t.run_until(total, |_| Ok(()), None)?;
            let report = evaluate(&t.agent, &spec, episodes, Perturbation::None, seed)?;
            Ok(AblationRow {
                variant: v.to_string(),
                report,
            })
        })
        .collect()
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = format!("variant,{}\n", EvalReport::CSV_HEADER);
    for r in rows {
        let _ = writeln!(s, "{},{}", r.variant, r.report.csv_row());
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustRow {
    pub report: EvalReport,
    /// `1 - perturbed_return / clean_return`.
    pub degradation: f64,
}

pub fn robustness_suite(agent: &Agent, spec: &EnvironmentSpec, episodes: usize, seed: u64) -> Result<Vec<RobustRow>> {
    let clean = evaluate(agent, spec, episodes, Perturbation::None, seed)?;
    let mut rows = Vec::new();
    for mode in Perturbation::MODES {
        let p = Perturbation::parse(mode)?;
        let report = if p == Perturbation::None {
            clean.clone()
        } else {
            evaluate(agent, spec, episodes, p, seed)?
        };
        rows.push(RobustRow {
            degradation: 1.0 - report.mean_return / clean.mean_return,
            report,
        });
    }
    Ok(rows)
}

pub fn robustness_table(rows: &[RobustRow]) -> String {
    let mut s = format!("{},degradation\n", EvalReport::CSV_HEADER);
    for r in rows {
        let _ = writeln!(s, "{},{}", r.report.csv_row(), r.degradation);
    }
    s
}
