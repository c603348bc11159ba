//! Convolutional VAE perception plus a recurrent state-space model with
//! reward, continuation and intrinsic-reward heads.
//!
//! Batches are row-major `[rows, features]`. Sequences are laid out
//! time-major: rows `t*B .. (t+1)*B` hold step `t` of every sequence.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::array::Array;
use crate::error::{Error, Result};
use crate::kernels::conv_out_len;
use crate::nn::{ConvLayer, ConvTransposeLayer, GruCell, Linear, Mlp};
use crate::params::ParamSet;
use crate::replay::SequenceBatch;
use crate::tape::{Tape, Var};

/// Lower bound added to every softplus stddev.
pub const STD_FLOOR: f32 = 1e-4;
/// Discount-head targets are `DISCOUNT * (1 - done)`.
pub const DISCOUNT: f32 = 0.99;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldModelConfig {
    pub obs_len: usize,
    pub d_z: usize,
    pub d_h: usize,
    /// Width of the single hidden layer in every MLP head.
    pub hidden: usize,
    /// Multiplier on the per-beam reconstruction error in the total loss.
    pub recon_weight: f32,
    pub beta: f32,
    pub lambda_r: f32,
    pub lambda_d: f32,
    pub enc_channels: [usize; 3],
    pub enc_kernels: [usize; 3],
    pub enc_strides: [usize; 3],
    pub decode_uses_h: bool,
    /// Train a head on the stored intrinsic rewards for use in imagination.
    pub intrinsic_head: bool,
    /// Ablation: z is the distribution mean (stddev pinned to the floor).
    pub deterministic: bool,
    /// Ablation: the recurrent state is held at zero.
    pub no_recurrent: bool,
}

impl Default for WorldModelConfig {
    fn default() -> Self {
        Self {
            obs_len: 360,
            d_z: 32,
            d_h: 256,
            hidden: 200,
            recon_weight: 1.0,
            beta: 1.5,
            lambda_r: 1.0,
            lambda_d: 1.0,
            enc_channels: [32, 64, 128],
            enc_kernels: [5, 5, 3],
            enc_strides: [2, 2, 1],
            decode_uses_h: true,
            intrinsic_head: true,
            deterministic: false,
            no_recurrent: false,
        }
    }
}

impl WorldModelConfig {
    /// Sequence lengths through the encoder, input first.
    pub fn encoder_lengths(&self) -> [usize; 4] {
        let mut l = [self.obs_len; 4];
        for i in 0..3 {
            l[i + 1] = conv_out_len(l[i], self.enc_strides[i]);
        }
        l
    }

    pub fn embedding_len(&self) -> usize {
        self.enc_channels[2] * self.encoder_lengths()[3]
    }

    pub fn state_len(&self) -> usize {
        self.d_h + self.d_z
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config {
            key: "model".into(),
            msg,
        });
        if self.obs_len == 0 || self.d_z == 0 || self.d_h == 0 || self.hidden == 0 {
            return bad("widths must be positive".into());
        }
        if self.enc_channels.contains(&0) || self.enc_strides.contains(&0) {
            return bad("encoder channels and strides must be positive".into());
        }
        if self.enc_kernels.iter().any(|k| k % 2 == 0) {
            return bad("encoder kernels must be odd".into());
        }
        if !(self.recon_weight > 0.0) {
            return bad("recon_weight must be positive".into());
        }
        if !(self.beta >= 0.0 && self.lambda_r >= 0.0 && self.lambda_d >= 0.0) {
            return bad("loss weights must be nonnegative".into());
        }
        Ok(())
    }
}

/// Mean and stddev of a diagonal Gaussian as plain values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagonalGaussian {
    pub mean: Vec<f32>,
    pub stddev: Vec<f32>,
}

impl DiagonalGaussian {
    pub fn standard(d: usize) -> Self {
        Self {
            mean: vec![0.0; d],
            stddev: vec![1.0; d],
        }
    }
}

/// `KL(q || p)` for diagonal Gaussians, accumulated in double precision.
pub fn kl_diag_gaussians(q: &DiagonalGaussian, p: &DiagonalGaussian) -> f64 {
    q.mean
        .iter()
        .zip(&q.stddev)
        .zip(p.mean.iter().zip(&p.stddev))
        .map(|((&qm, &qs), (&pm, &ps))| {
            let (qm, qs, pm, ps) = (qm as f64, qs as f64, pm as f64, ps as f64);
            (ps / qs).ln() + (qs * qs + (qm - pm) * (qm - pm)) / (2.0 * ps * ps) - 0.5
        })
        .sum()
}

/// A diagonal Gaussian living on a tape, `[B, d]` each.
#[derive(Clone, Copy, Debug)]
pub struct GaussVars {
    pub mean: Var,
    pub std: Var,
}

impl GaussVars {
    /// Row `r` as plain values.
    pub fn row(&self, tape: &Tape, r: usize) -> DiagonalGaussian {
        DiagonalGaussian {
            mean: tape.value(self.mean).row(r).to_vec(),
            stddev: tape.value(self.std).row(r).to_vec(),
        }
    }
}

/// The recurrent latent state `s = [h; z]` of one trajectory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LatentState {
    pub h: Vec<f32>,
    pub z: Vec<f32>,
}

impl LatentState {
    pub fn zeros(cfg: &WorldModelConfig) -> Self {
        Self {
            h: vec![0.0; cfg.d_h],
            z: vec![0.0; cfg.d_z],
        }
    }

    pub fn concat(&self) -> Vec<f32> {
        let mut s = self.h.clone();
        s.extend_from_slice(&self.z);
        s
    }
}

/// Per-term world-model losses for one update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelLossReport {
    pub reconstruction: f64,
    pub kl_vae: f64,
    pub kl_dynamics: f64,
    pub reward_loss: f64,
    pub discount_loss: f64,
    pub intrinsic_loss: f64,
    pub total: f64,
}

impl ModelLossReport {
    pub fn weighted_total(&self, cfg: &WorldModelConfig) -> f64 {
        cfg.recon_weight as f64 * self.reconstruction
            + cfg.beta as f64 * self.kl_vae
            + self.kl_dynamics
            + cfg.lambda_r as f64 * (self.reward_loss + self.intrinsic_loss)
            + cfg.lambda_d as f64 * self.discount_loss
    }

    fn check_finite(&self) -> Result<()> {
        let terms = [
            self.reconstruction,
            self.kl_vae,
            self.kl_dynamics,
            self.reward_loss,
            self.discount_loss,
            self.intrinsic_loss,
        ];
        if terms.iter().all(|t| t.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFiniteLoss(format!("{self:?}")))
        }
    }
}

/// Output of [`WorldModel::observe_sequence`].
pub struct Observed {
    /// Posterior states `[T*B, d_h + d_z]`, time-major.
    pub states: Var,
    pub posteriors: Vec<GaussVars>,
    pub priors: Vec<GaussVars>,
    pub loss: Var,
    pub report: ModelLossReport,
}

#[derive(Clone, Debug)]
pub struct WorldModel {
    pub cfg: WorldModelConfig,
    pub params: ParamSet,
    encoder: Vec<ConvLayer>,
    posterior: Mlp,
    prior: Mlp,
    gru: GruCell,
    dec_in: Linear,
    decoder: Vec<ConvTransposeLayer>,
    reward: Mlp,
    discount: Mlp,
    intrinsic: Mlp,
}

impl WorldModel {
    pub fn new<R: Rng + ?Sized>(cfg: WorldModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut ps = ParamSet::new();
        let c = cfg.enc_channels;
        let lens = cfg.encoder_lengths();
        let ins = [1, c[0], c[1]];
        let encoder = (0..3)
            .map(|i| {
                ConvLayer::new(
                    &mut ps,
                    &format!("enc.{i}"),
                    ins[i],
                    c[i],
                    cfg.enc_kernels[i],
                    cfg.enc_strides[i],
                    lens[i],
                    rng,
                )
            })
            .collect();
        let emb = cfg.embedding_len();
        let s = cfg.state_len();
        let posterior = Mlp::new(&mut ps, "post", &[cfg.d_h + emb, cfg.hidden, 2 * cfg.d_z], rng);
        let prior = Mlp::new(&mut ps, "prior", &[cfg.d_h, cfg.hidden, 2 * cfg.d_z], rng);
        let gru = GruCell::new(&mut ps, "gru", cfg.d_z + 2, cfg.d_h, rng);
        let dec_width = if cfg.decode_uses_h { s } else { cfg.d_z };
        let dec_in = Linear::new(&mut ps, "dec.in", dec_width, emb, rng);
        let outs = [c[1], c[0], 1];
        let decoder = (0..3)
            .map(|i| {
                let enc = 2 - i;
                ConvTransposeLayer::new(
                    &mut ps,
                    &format!("dec.{i}"),
                    c[enc],
                    outs[i],
                    cfg.enc_kernels[enc],
                    cfg.enc_strides[enc],
                    lens[enc],
                    rng,
                )
            })
            .collect();
        let reward = Mlp::new(&mut ps, "reward", &[s, cfg.hidden, 1], rng);
        let discount = Mlp::new(&mut ps, "discount", &[s, cfg.hidden, 1], rng);
        let intrinsic = Mlp::new(&mut ps, "intrinsic", &[s, cfg.hidden, 1], rng);
        Ok(Self {
            cfg,
            params: ps,
            encoder,
            posterior,
            prior,
            gru,
            dec_in,
            decoder,
            reward,
            discount,
            intrinsic,
        })
    }

    /// Observations `[B, obs_len]` in `[0, 1]` to embeddings `[B, E]`.
    pub fn encode(&self, tape: &mut Tape, obs: Var) -> Result<Var> {
        let shape = tape.shape(obs).to_vec();
        if shape.len() != 2 || shape[1] != self.cfg.obs_len {
            return Err(Error::InvalidArgument {
                op: "encode",
                msg: format!("expected [B, {}] observations, got {shape:?}", self.cfg.obs_len),
            });
        }
        let mut x = tape.reshape(obs, &[shape[0], 1, shape[1]])?;
        for layer in &self.encoder {
            x = layer.forward(tape, &self.params, x)?;
            x = tape.elu(x);
        }
        tape.reshape(x, &[shape[0], self.cfg.embedding_len()])
    }

    fn gaussian_head(&self, tape: &mut Tape, raw: Var) -> Result<GaussVars> {
        let d = self.cfg.d_z;
        let mean = tape.slice_cols(raw, 0, d)?;
        let s = tape.slice_cols(raw, d, d)?;
        let std = if self.cfg.deterministic {
            let rows = tape.shape(raw)[0];
            tape.constant(Array::full(&[rows, d], STD_FLOOR))
        } else {
            let sp = tape.softplus(s);
            tape.add_scalar(sp, STD_FLOOR)
        };
        Ok(GaussVars { mean, std })
    }

    pub fn posterior(&self, tape: &mut Tape, h: Var, e: Var) -> Result<GaussVars> {
        let x = tape.concat_cols(&[h, e])?;
        let raw = self.posterior.forward(tape, &self.params, x)?;
        self.gaussian_head(tape, raw)
    }

    pub fn prior(&self, tape: &mut Tape, h: Var) -> Result<GaussVars> {
        let raw = self.prior.forward(tape, &self.params, h)?;
        self.gaussian_head(tape, raw)
    }

    /// `h' = GRU(h, [z; a])` with `a` normalized to `[-1, 1]`.
    pub fn deterministic_update(&self, tape: &mut Tape, h: Var, z: Var, a: Var) -> Result<Var> {
        if self.cfg.no_recurrent {
            let rows = tape.shape(h)[0];
            return Ok(tape.constant(Array::zeros(&[rows, self.cfg.d_h])));
        }
        let x = tape.concat_cols(&[z, a])?;
        self.gru.forward(tape, &self.params, h, x)
    }

    /// Decoder logits `[B, obs_len]` from a state `[B, d_h + d_z]`.
    pub fn decode_logits(&self, tape: &mut Tape, state: Var) -> Result<Var> {
        let x = if self.cfg.decode_uses_h {
            state
        } else {
            tape.slice_cols(state, self.cfg.d_h, self.cfg.d_z)?
        };
        let rows = tape.shape(x)[0];
        let lens = self.cfg.encoder_lengths();
        let mut y = self.dec_in.forward(tape, &self.params, x)?;
        y = tape.elu(y);
        y = tape.reshape(y, &[rows, self.cfg.enc_channels[2], lens[3]])?;
        for (i, layer) in self.decoder.iter().enumerate() {
            y = layer.forward(tape, &self.params, y)?;
            if i + 1 < self.decoder.len() {
                y = tape.elu(y);
            }
        }
        tape.reshape(y, &[rows, self.cfg.obs_len])
    }

    /// Reconstruction in `(0, 1)`.
    pub fn decode(&self, tape: &mut Tape, state: Var) -> Result<Var> {
        let l = self.decode_logits(tape, state)?;
        Ok(tape.sigmoid(l))
    }

    pub fn predict_reward(&self, tape: &mut Tape, state: Var) -> Result<Var> {
        self.reward.forward(tape, &self.params, state)
    }

    pub fn predict_intrinsic(&self, tape: &mut Tape, state: Var) -> Result<Var> {
        self.intrinsic.forward(tape, &self.params, state)
    }

    pub fn predict_discount_logits(&self, tape: &mut Tape, state: Var) -> Result<Var> {
        self.discount.forward(tape, &self.params, state)
    }

    /// Continuation probability in `(0, 1)`.
    pub fn predict_discount(&self, tape: &mut Tape, state: Var) -> Result<Var> {
        let l = self.predict_discount_logits(tape, state)?;
        Ok(tape.sigmoid(l))
    }

    /// KL between two tape Gaussians, `[B, 1]`. The deterministic ablation
    /// has no usable variances, so both sides are scored with unit stddev.
    pub fn kl(&self, tape: &mut Tape, q: GaussVars, p: GaussVars) -> Result<Var> {
        if self.cfg.deterministic {
            let ones = tape.constant(Array::full(tape.shape(q.mean), 1.0));
            tape.kl_diag(q.mean, ones, p.mean, ones)
        } else {
            tape.kl_diag(q.mean, q.std, p.mean, p.std)
        }
    }

    /// Runs posterior, update and prior along every sequence of the batch,
    /// starting from `h = 0`, and builds the total model loss.
    pub fn observe_sequence<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        batch: &SequenceBatch,
        rng: &mut R,
    ) -> Result<Observed> {
        let (b, t_len, n) = (batch.batch, batch.len, self.cfg.obs_len);
        if batch.obs.len() != b * t_len * n {
            return Err(Error::InvalidArgument {
                op: "observe_sequence",
                msg: format!("batch holds {} observation values, expected {}", batch.obs.len(), b * t_len * n),
            });
        }
        let obs_arr = Array::new(&[t_len * b, n], batch.obs.clone())?;
        let obs = tape.constant(obs_arr.clone());
        let emb = self.encode(tape, obs)?;
        let actions = tape.constant(Array::new(&[t_len * b, 2], batch.actions.clone())?);

        let mut h = tape.constant(Array::zeros(&[b, self.cfg.d_h]));
        let mut z_prev: Option<Var> = None;
        let mut states = Vec::with_capacity(t_len);
        let mut posteriors = Vec::with_capacity(t_len);
        let mut priors = Vec::with_capacity(t_len);
        let mut kl_dyn_parts = Vec::with_capacity(t_len);
        let mut kl_vae_parts = Vec::with_capacity(t_len);
        for t in 0..t_len {
            if let Some(z) = z_prev {
                let a = tape.slice_rows(actions, t * b, b)?;
                h = self.deterministic_update(tape, h, z, a)?;
            }
            let e = tape.slice_rows(emb, t * b, b)?;
            let q = self.posterior(tape, h, e)?;
            let p = self.prior(tape, h)?;
            let z = tape.sample_gaussian(q.mean, q.std, rng)?;
            kl_dyn_parts.push(self.kl(tape, q, p)?);
            let std_normal = GaussVars {
                mean: tape.constant(Array::zeros(&[b, self.cfg.d_z])),
                std: tape.constant(Array::full(&[b, self.cfg.d_z], 1.0)),
            };
            kl_vae_parts.push(self.kl(tape, q, std_normal)?);
            states.push(tape.concat_cols(&[h, z])?);
            posteriors.push(q);
            priors.push(p);
            z_prev = Some(z);
        }
        let states = tape.concat_rows(&states)?;

        let kl_dyn_all = tape.concat_rows(&kl_dyn_parts)?;
        let kl_dynamics = tape.mean(kl_dyn_all);
        let kl_vae_all = tape.concat_rows(&kl_vae_parts)?;
        let kl_vae = tape.mean(kl_vae_all);

        let recon = self.decode(tape, states)?;
        let reconstruction = tape.mse(recon, &obs_arr)?;

        let rows = t_len * b;
        let r_pred = self.predict_reward(tape, states)?;
        let reward_loss = tape.mse(r_pred, &Array::new(&[rows, 1], batch.rewards_ext.clone())?)?;
        let d_logits = self.predict_discount_logits(tape, states)?;
        let targets: Vec<f32> = batch.dones.iter().map(|&d| if d { 0.0 } else { DISCOUNT }).collect();
        let discount_loss = tape.bce_with_logits(d_logits, &targets)?;
        let intrinsic_loss = if self.cfg.intrinsic_head {
            let i_pred = self.predict_intrinsic(tape, states)?;
            Some(tape.mse(i_pred, &Array::new(&[rows, 1], batch.rewards_int.clone())?)?)
        } else {
            None
        };

        let mut loss = tape.scale(kl_vae, self.cfg.beta);
        let rec = tape.scale(reconstruction, self.cfg.recon_weight);
        loss = tape.add(rec, loss)?;
        loss = tape.add(loss, kl_dynamics)?;
        let rew = match intrinsic_loss {
            Some(i) => tape.add(reward_loss, i)?,
            None => reward_loss,
        };
        let rew = tape.scale(rew, self.cfg.lambda_r);
        loss = tape.add(loss, rew)?;
        let disc = tape.scale(discount_loss, self.cfg.lambda_d);
        loss = tape.add(loss, disc)?;

        let v = |tape: &Tape, x: Var| tape.value(x).item() as f64;
        let mut report = ModelLossReport {
            reconstruction: v(tape, reconstruction),
            kl_vae: v(tape, kl_vae),
            kl_dynamics: v(tape, kl_dynamics),
            reward_loss: v(tape, reward_loss),
            discount_loss: v(tape, discount_loss),
            intrinsic_loss: intrinsic_loss.map(|i| v(tape, i)).unwrap_or(0.0),
            total: 0.0,
        };
        report.total = report.weighted_total(&self.cfg);
        report.check_finite()?;
        Ok(Observed {
            states,
            posteriors,
            priors,
            loss,
            report,
        })
    }

    /// Mean over steps of the per-step KL between matched posteriors and priors.
    pub fn rssm_kl_loss(&self, tape: &mut Tape, posteriors: &[GaussVars], priors: &[GaussVars]) -> Result<Var> {
        if posteriors.len() != priors.len() || posteriors.is_empty() {
            return Err(Error::InvalidArgument {
                op: "rssm_kl_loss",
                msg: format!("{} posteriors vs {} priors", posteriors.len(), priors.len()),
            });
        }
        let parts = posteriors
            .iter()
            .zip(priors)
            .map(|(&q, &p)| self.kl(tape, q, p))
            .collect::<Result<Vec<_>>>()?;
        let all = tape.concat_rows(&parts)?;
        Ok(tape.mean(all))
    }

    /// Posterior given memory `h` and a normalized observation, for acting.
    pub fn filter(&self, h: &[f32], obs: &[f32]) -> Result<DiagonalGaussian> {
        let mut tape = self.frozen_tape();
        let hv = tape.constant(Array::new(&[1, self.cfg.d_h], h.to_vec())?);
        let ov = tape.constant(Array::new(&[1, obs.len()], obs.to_vec())?);
        let e = self.encode(&mut tape, ov)?;
        let q = self.posterior(&mut tape, hv, e)?;
        Ok(q.row(&tape, 0))
    }

    pub fn prior_of(&self, h: &[f32]) -> Result<DiagonalGaussian> {
        let mut tape = self.frozen_tape();
        let hv = tape.constant(Array::new(&[1, self.cfg.d_h], h.to_vec())?);
        let p = self.prior(&mut tape, hv)?;
        Ok(p.row(&tape, 0))
    }

    /// Next memory from the current state and a normalized action.
    pub fn advance(&self, state: &LatentState, action: [f32; 2]) -> Result<Vec<f32>> {
        let mut tape = self.frozen_tape();
        let h = tape.constant(Array::new(&[1, self.cfg.d_h], state.h.clone())?);
        let z = tape.constant(Array::new(&[1, self.cfg.d_z], state.z.clone())?);
        let a = tape.constant(Array::new(&[1, 2], action.to_vec())?);
        let h2 = self.deterministic_update(&mut tape, h, z, a)?;
        Ok(tape.value(h2).data().to_vec())
    }

    /// One filtering step for acting: `h' = GRU(h, [z; a])`, then the prior
    /// at `h'` and the posterior given the new observation.
    pub fn step_filter(
        &self,
        state: &LatentState,
        action: [f32; 2],
        obs: &[f32],
    ) -> Result<(Vec<f32>, DiagonalGaussian, DiagonalGaussian)> {
        let mut tape = self.frozen_tape();
        let h = tape.constant(Array::new(&[1, self.cfg.d_h], state.h.clone())?);
        let z = tape.constant(Array::new(&[1, self.cfg.d_z], state.z.clone())?);
        let a = tape.constant(Array::new(&[1, 2], action.to_vec())?);
        let h2 = self.deterministic_update(&mut tape, h, z, a)?;
        let p = self.prior(&mut tape, h2)?;
        let ov = tape.constant(Array::new(&[1, obs.len()], obs.to_vec())?);
        let e = self.encode(&mut tape, ov)?;
        let q = self.posterior(&mut tape, h2, e)?;
        Ok((tape.value(h2).data().to_vec(), p.row(&tape, 0), q.row(&tape, 0)))
    }

    /// Plain-value counterpart of [`WorldModel::kl`].
    pub fn latent_kl(&self, q: &DiagonalGaussian, p: &DiagonalGaussian) -> f64 {
        if self.cfg.deterministic {
            0.5 * q.mean.iter().zip(&p.mean).map(|(&a, &b)| ((a - b) as f64).powi(2)).sum::<f64>()
        } else {
            kl_diag_gaussians(q, p)
        }
    }

    /// A tape on which this model's parameters are constants.
    pub fn frozen_tape(&self) -> Tape {
        let mut t = Tape::new();
        t.freeze(&self.params);
        t
    }
}

/// Draws `mean + eps * stddev` with standard-normal `eps`.
pub fn sample_latent<R: Rng + ?Sized>(g: &DiagonalGaussian, rng: &mut R) -> Vec<f32> {
    use rand_distr::StandardNormal;
    g.mean
        .iter()
        .zip(&g.stddev)
        .map(|(&m, &s)| m + rng.sample::<f32, _>(StandardNormal) * s)
        .collect()
}
