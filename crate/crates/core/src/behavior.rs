//! Actor-critic learning inside the world model: imagined rollouts,
//! λ-return targets, critic regression and a likelihood-ratio actor update.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::array::Array;
use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::optim::Adam;
use crate::params::ParamSet;
use crate::sim::Action;
use crate::tape::{Tape, Var};
use crate::world_model::{WorldModel, DISCOUNT, STD_FLOOR};

pub const ACTION_DIM: usize = 2;
/// Exploration-noise schedule endpoints.
pub const NOISE_START: f64 = 0.3;
pub const NOISE_END: f64 = 0.05;
/// Imagined intrinsic rewards are kept in the range used at collection time.
pub const INTRINSIC_CLIP: f32 = 10.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BehaviorConfig {
    pub horizon: usize,
    pub lambda: f32,
    pub gamma: f32,
    pub actor_lr: f32,
    pub critic_lr: f32,
    pub entropy: f32,
    pub hidden: usize,
    pub clip_norm: f32,
    /// Actor updates per critic update.
    pub actor_ratio: usize,
    /// Lower bound added to the policy stddev.
    pub min_std: f32,
}

impl Default for BehaviorConfig {
    fn default() -> Self {
        Self {
            horizon: 15,
            lambda: 0.95,
            gamma: 0.99,
            actor_lr: 8e-5,
            critic_lr: 8e-5,
            entropy: 1e-3,
            hidden: 200,
            clip_norm: 100.0,
            actor_ratio: 1,
            min_std: STD_FLOOR,
        }
    }
}

impl BehaviorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| {
            Err(Error::Config {
                key: key.into(),
                msg: msg.into(),
            })
        };
        if self.horizon == 0 {
            return bad("behavior.horizon", "must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad("behavior.lambda", "must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return bad("behavior.gamma", "must lie in [0, 1)");
        }
        if !(self.actor_lr > 0.0) || !(self.critic_lr > 0.0) {
            return bad("behavior.lr", "learning rates must be positive");
        }
        if !(self.entropy >= 0.0) {
            return bad("behavior.entropy", "must be nonnegative");
        }
        if !(self.min_std > 0.0) {
            return bad("behavior.min_std", "must be positive");
        }
        if self.hidden == 0 || self.actor_ratio == 0 {
            return bad("behavior.hidden", "must be positive");
        }
        Ok(())
    }
}

/// Gaussian policy over pre-squash actions.
#[derive(Clone, Debug)]
pub struct PolicyHead {
    pub params: ParamSet,
    mlp: Mlp,
    min_std: f32,
}

impl PolicyHead {
    pub fn new<R: Rng + ?Sized>(state_len: usize, hidden: usize, rng: &mut R) -> Self {
        let mut params = ParamSet::new();
        let mlp = Mlp::new(&mut params, "actor", &[state_len, hidden, hidden, 2 * ACTION_DIM], rng);
        // A small output layer starts the policy near zero mean and unit-scale stddev.
        let w = mlp.layers.last().expect("layers").w;
        params.value_mut(w).data_mut().iter_mut().for_each(|x| *x *= 0.1);
        Self {
            params,
            mlp,
            min_std: STD_FLOOR,
        }
    }

    pub fn with_min_std(mut self, min_std: f32) -> Self {
        self.min_std = min_std;
        self
    }

    /// `(mean in (-1, 1), stddev > 0)`, each `[B, 2]`.
    pub fn dist(&self, tape: &mut Tape, state: Var) -> Result<(Var, Var)> {
        let raw = self.mlp.forward(tape, &self.params, state)?;
        let m = tape.slice_cols(raw, 0, ACTION_DIM)?;
        let mean = tape.tanh(m);
        let s = tape.slice_cols(raw, ACTION_DIM, ACTION_DIM)?;
        let sp = tape.softplus(s);
        let std = tape.add_scalar(sp, self.min_std);
        Ok((mean, std))
    }

    pub fn state_len(&self) -> usize {
        self.mlp.layers[0].input
    }

    /// Chooses an action for one latent state. Without exploration this is
    /// the squashed mean; with it, a policy sample plus Gaussian noise of
    /// `noise_std`. Returns the physical action and its normalized form.
    pub fn act<R: Rng + ?Sized>(
        &self,
        state: &[f32],
        explore: bool,
        noise_std: f64,
        rng: &mut R,
    ) -> Result<(Action, [f32; 2])> {
        let mut tape = Tape::new();
        tape.freeze(&self.params);
        let s = tape.constant(Array::new(&[1, state.len()], state.to_vec())?);
        let (mean, std) = self.dist(&mut tape, s)?;
        let (m, sd) = (tape.value(mean).data(), tape.value(std).data());
        let mut norm = [0.0f32; 2];
        for i in 0..ACTION_DIM {
            let u = if explore {
                let eps: f32 = rng.sample(StandardNormal);
                let noise: f32 = rng.sample(StandardNormal);
                m[i] + sd[i] * eps + noise_std as f32 * noise
            } else {
                m[i]
            };
            norm[i] = u.tanh();
        }
        Ok((Action::from_normalized(norm), norm))
    }
}

#[derive(Clone, Debug)]
pub struct CriticHead {
    pub params: ParamSet,
    mlp: Mlp,
}

impl CriticHead {
    pub fn new<R: Rng + ?Sized>(state_len: usize, hidden: usize, rng: &mut R) -> Self {
        let mut params = ParamSet::new();
        let mlp = Mlp::new(&mut params, "critic", &[state_len, hidden, hidden, 1], rng);
        Self { params, mlp }
    }

    pub fn value(&self, tape: &mut Tape, state: Var) -> Result<Var> {
        self.mlp.forward(tape, &self.params, state)
    }

    /// Values of the rows of `states` without recording gradients.
    pub fn values(&self, states: &Array) -> Result<Vec<f32>> {
        let mut tape = Tape::new();
        tape.freeze(&self.params);
        let s = tape.constant(states.clone());
        let v = self.value(&mut tape, s)?;
        Ok(tape.value(v).data().to_vec())
    }
}

/// `N` imagined rollouts of horizon `H`, stored time-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ImaginedBatch {
    pub horizon: usize,
    pub n: usize,
    pub state_len: usize,
    /// `(H+1) * N * state_len` values.
    pub states: Vec<f32>,
    /// Pre-squash action samples, `H * N * 2`.
    pub raw_actions: Vec<f32>,
    /// Predicted rewards on arrival, `H * N`.
    pub rewards: Vec<f32>,
    /// Continuation weights in `[0, 1]`, `H * N`.
    pub continues: Vec<f32>,
}

impl ImaginedBatch {
    /// States of steps `from .. from + count` as an `[count*N, S]` array.
    pub fn states_array(&self, from: usize, count: usize) -> Array {
        let w = self.n * self.state_len;
        Array::new(
            &[count * self.n, self.state_len],
            self.states[from * w..(from + count) * w].to_vec(),
        )
        .expect("consistent layout")
    }
}

/// Unrolls the policy through the frozen model from `starts` (`[N, d_h + d_z]`).
pub fn imagine<R: Rng + ?Sized>(
    model: &WorldModel,
    policy: &PolicyHead,
    starts: &Array,
    horizon: usize,
    use_intrinsic: bool,
    rng: &mut R,
) -> Result<ImaginedBatch> {
    if horizon == 0 {
        return Err(Error::InvalidArgument {
            op: "imagine",
            msg: "horizon must be at least 1".into(),
        });
    }
    let cfg = &model.cfg;
    let (n, s_len) = (starts.rows(), starts.cols());
    if s_len != cfg.state_len() {
        return Err(Error::ShapeMismatch {
            op: "imagine",
            left: starts.shape().to_vec(),
            right: vec![n, cfg.state_len()],
        });
    }
    let mut tape = model.frozen_tape();
    tape.freeze(&policy.params);
    let mut out = ImaginedBatch {
        horizon,
        n,
        state_len: s_len,
        states: starts.data().to_vec(),
        raw_actions: Vec::with_capacity(horizon * n * 2),
        rewards: Vec::with_capacity(horizon * n),
        continues: Vec::with_capacity(horizon * n),
    };
    let mut state = tape.constant(starts.clone());
    for _ in 0..horizon {
        let h = tape.slice_cols(state, 0, cfg.d_h)?;
        let z = tape.slice_cols(state, cfg.d_h, cfg.d_z)?;
        let (mean, std) = policy.dist(&mut tape, state)?;
        let u = tape.sample_gaussian(mean, std, rng)?;
        out.raw_actions.extend_from_slice(tape.value(u).data());
        let a = tape.tanh(u);
        let h2 = model.deterministic_update(&mut tape, h, z, a)?;
        let p = model.prior(&mut tape, h2)?;
        let z2 = tape.sample_gaussian(p.mean, p.std, rng)?;
        state = tape.concat_cols(&[h2, z2])?;
        out.states.extend_from_slice(tape.value(state).data());
        let r = model.predict_reward(&mut tape, state)?;
        let mut rewards = tape.value(r).data().to_vec();
        if use_intrinsic {
            let ri = model.predict_intrinsic(&mut tape, state)?;
            for (r, &i) in rewards.iter_mut().zip(tape.value(ri).data()) {
                *r += i.clamp(0.0, INTRINSIC_CLIP);
            }
        }
        out.rewards.extend(rewards);
        let c = model.predict_discount(&mut tape, state)?;
        out.continues
            .extend(tape.value(c).data().iter().map(|&d| (d / DISCOUNT).min(1.0)));
    }
    Ok(out)
}

/// `G_t = r_t + γ c_t [(1 − λ) V_{t+1} + λ G_{t+1}]`, seeded with `G_H = V_H`.
pub fn lambda_returns(rewards: &[f64], values: &[f64], continues: &[f64], gamma: f64, lambda: f64) -> Vec<f64> {
    let h = rewards.len();
    assert_eq!(values.len(), h + 1, "values need one more entry than rewards");
    assert_eq!(continues.len(), h, "one continuation per reward");
    let mut out = vec![0.0; h];
    let mut next = values[h];
    for t in (0..h).rev() {
        next = rewards[t] + gamma * continues[t] * ((1.0 - lambda) * values[t + 1] + lambda * next);
        out[t] = next;
    }
    out
}

/// Batched λ-returns over time-major `[H][N]` rewards/continues and `[H+1][N]` values.
pub fn lambda_returns_batch(imagined: &ImaginedBatch, values: &[f32], gamma: f32, lambda: f32) -> Vec<f32> {
    let (h, n) = (imagined.horizon, imagined.n);
    let mut out = vec![0.0f32; h * n];
    for j in 0..n {
        let mut next = values[h * n + j];
        for t in (0..h).rev() {
            let i = t * n + j;
            next = imagined.rewards[i]
                + gamma * imagined.continues[i] * ((1.0 - lambda) * values[(t + 1) * n + j] + lambda * next);
            out[i] = next;
        }
    }
    out
}

/// `½ mean (V − G)²` with `G` a constant.
pub fn critic_loss(tape: &mut Tape, values: Var, targets: &[f32]) -> Result<Var> {
    let shape = tape.shape(values).to_vec();
    let g = tape.constant(Array::new(&shape, targets.to_vec())?);
    let d = tape.sub(values, g)?;
    let sq = tape.square(d);
    let m = tape.mean(sq);
    Ok(tape.scale(m, 0.5))
}

/// Closed-form entropy of a diagonal Gaussian with the given stddevs.
pub fn gaussian_entropy(stddev: &[f64]) -> f64 {
    stddev
        .iter()
        .map(|&s| 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E * s * s).ln())
        .sum()
}

/// `−mean[log π(u|s)·A + η·H(π(·|s))]` over rows, with `A` constant.
pub fn actor_loss(
    tape: &mut Tape,
    policy: &PolicyHead,
    states: &Array,
    raw_actions: &Array,
    advantages: &[f32],
    eta: f32,
) -> Result<(Var, f64)> {
    let s = tape.constant(states.clone());
    let u = tape.constant(raw_actions.clone());
    let (mean, std) = policy.dist(tape, s)?;
    let logp = tape.gaussian_log_prob(u, mean, std)?;
    let adv = tape.constant(Array::new(&[advantages.len(), 1], advantages.to_vec())?);
    let weighted = tape.mul(logp, adv)?;
    let ent = tape.gaussian_entropy(std)?;
    let mean_entropy = tape.value(ent).sum() / advantages.len() as f64;
    let bonus = tape.scale(ent, eta);
    let obj = tape.add(weighted, bonus)?;
    let m = tape.mean(obj);
    Ok((tape.scale(m, -1.0), mean_entropy))
}

/// `max(0.05, 0.3 − 0.25·min(1, 2s/total))`.
pub fn noise_schedule(step: u64, total: u64) -> f64 {
    if total == 0 {
        return NOISE_END;
    }
    let frac = (2.0 * step as f64 / total as f64).min(1.0);
    (NOISE_START - (NOISE_START - NOISE_END) * frac).max(NOISE_END)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BehaviorReport {
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub mean_return: f64,
    pub mean_entropy: f64,
    pub imagined_reward: f64,
}

/// Actor, critic and their optimizers.
#[derive(Clone, Debug)]
pub struct Behavior {
    pub cfg: BehaviorConfig,
    pub policy: PolicyHead,
    pub critic: CriticHead,
    pub actor_opt: Adam,
    pub critic_opt: Adam,
}

impl Behavior {
    pub fn new<R: Rng + ?Sized>(cfg: BehaviorConfig, state_len: usize, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            policy: PolicyHead::new(state_len, cfg.hidden, rng).with_min_std(cfg.min_std),
            critic: CriticHead::new(state_len, cfg.hidden, rng),
            actor_opt: Adam::new(cfg.actor_lr, cfg.clip_norm),
            critic_opt: Adam::new(cfg.critic_lr, cfg.clip_norm),
            cfg,
        })
    }

    /// One imagination pass followed by a critic update and `actor_ratio` actor updates.
    pub fn train_step<R: Rng + ?Sized>(
        &mut self,
        model: &WorldModel,
        starts: &Array,
        use_intrinsic: bool,
        rng: &mut R,
    ) -> Result<BehaviorReport> {
        let h = self.cfg.horizon;
        let imag = imagine(model, &self.policy, starts, h, use_intrinsic, rng)?;
        let all_states = imag.states_array(0, h + 1);
        let values = self.critic.values(&all_states)?;
        let targets = lambda_returns_batch(&imag, &values, self.cfg.gamma, self.cfg.lambda);
        let rows = h * imag.n;
        let head = imag.states_array(0, h);

        let mut tape = Tape::new();
        let s = tape.constant(head.clone());
        let v = self.critic.value(&mut tape, s)?;
        let closs = critic_loss(&mut tape, v, &targets)?;
        let critic_value = tape.value(closs).item() as f64;
        if !critic_value.is_finite() {
            return Err(Error::NonFiniteLoss(format!("critic loss {critic_value}")));
        }
        tape.backward_into(closs, &mut [&mut self.critic.params]);
        self.critic_opt.step(&mut self.critic.params)?;

        let advantages: Vec<f32> = targets.iter().zip(&values[..rows]).map(|(g, v)| g - v).collect();
        let raw = Array::new(&[rows, ACTION_DIM], imag.raw_actions.clone())?;
        let mut actor_value = 0.0;
        let mut entropy = 0.0;
        for _ in 0..self.cfg.actor_ratio {
            let mut tape = Tape::new();
            let (aloss, ent) = actor_loss(&mut tape, &self.policy, &head, &raw, &advantages, self.cfg.entropy)?;
            actor_value = tape.value(aloss).item() as f64;
            entropy = ent;
            if !actor_value.is_finite() {
                return Err(Error::NonFiniteLoss(format!("actor loss {actor_value}")));
            }
            tape.backward_into(aloss, &mut [&mut self.policy.params]);
            self.actor_opt.step(&mut self.policy.params)?;
        }
        let n = imag.n as f64;
        Ok(BehaviorReport {
            actor_loss: actor_value,
            critic_loss: critic_value,
            mean_return: targets[..imag.n].iter().map(|&g| g as f64).sum::<f64>() / n,
            mean_entropy: entropy,
            imagined_reward: imag.rewards.iter().map(|&r| r as f64).sum::<f64>() / rows as f64,
        })
    }
}
