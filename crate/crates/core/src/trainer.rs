//! The collect / learn loop, per-episode metrics and checkpoints.
//!
//! Every `train_interval` environment steps the trainer runs `n_model`
//! world-model updates; after each of them (or after all of them with
//! `flat_loops`) it runs `n_behavior` imagination updates starting from the
//! posterior states of the batch just used. Behavior learning never touches
//! the simulator.

use std::fs::{File, OpenOptions};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::array::Array;
use crate::behavior::{noise_schedule, Behavior, BehaviorReport};
use crate::config::{SeedTriple, TrainConfig};
use crate::curiosity::intrinsic_from_kl;
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::params::{read_container, write_container, ParamSet};
use crate::replay::{ReplayBuffer, Transition};
use crate::sim::{EnvironmentSpec, LidarScan, Simulator};
use crate::tape::Tape;
use crate::world_model::{sample_latent, LatentState, ModelLossReport, WorldModel};

pub const METRICS_HEADER: &str = "global_step,episode,return,explored_m2,path_length_m,collided,eqs,ees,intrinsic_sum,model_recon,model_kl_dyn,actor_loss,critic_loss";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.dvxs";
pub const PARTIAL_CHECKPOINT_FILE: &str = "checkpoint_partial.dvxs";
pub const MANIFEST_FILE: &str = "manifest.json";

const CHECKPOINT_MAGIC: &[u8; 4] = b"DVXC";
const CHECKPOINT_VERSION: u32 = 1;

/// Lower bound on path length when computing exploration efficiency.
pub const PATH_FLOOR: f64 = 0.01;

/// World model plus actor-critic: everything needed to act.
#[derive(Clone, Debug)]
pub struct Agent {
    pub model: WorldModel,
    pub behavior: Behavior,
}

impl Agent {
    pub fn new(cfg: &TrainConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = WorldModel::new(cfg.model.clone(), &mut rng)?;
        let behavior = Behavior::new(cfg.behavior.clone(), cfg.model.state_len(), &mut rng)?;
        Ok(Self { model, behavior })
    }
}

/// One finished episode, as written to the metrics file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub global_step: u64,
    pub episode: u64,
    pub ret: f64,
    pub explored_m2: f64,
    pub path_length_m: f64,
    pub collided: bool,
    pub eqs: f64,
    pub ees: f64,
    pub intrinsic_sum: f64,
    pub model_recon: f64,
    pub model_kl_dyn: f64,
    pub actor_loss: f64,
    pub critic_loss: f64,
}

impl EpisodeMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.global_step,
            self.episode,
            self.ret,
            self.explored_m2,
            self.path_length_m,
            self.collided as u8,
            self.eqs,
            self.ees,
            self.intrinsic_sum,
            self.model_recon,
            self.model_kl_dyn,
            self.actor_loss,
            self.critic_loss
        )
    }
}

/// Mutable loop state besides the networks, buffer and simulator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub global_step: u64,
    pub episode: u64,
    /// Current `[h; z]`; stored in the parameter block of a checkpoint.
    #[serde(skip)]
    pub latent: LatentState,
    pub episode_return: f64,
    pub episode_intrinsic: f64,
    pub model_updates: u64,
    pub behavior_updates: u64,
    pub last_model: ModelLossReport,
    pub last_behavior: BehaviorReport,
}

/// Update counts performed by one [`Trainer::train_tick`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TickCounts {
    pub model: usize,
    pub behavior: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    config: TrainConfig,
    state: TrainState,
    env: Simulator,
    rng: ChaCha8Rng,
    /// Adam step counts of the model, actor and critic parameter sets.
    adam_steps: [u64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: TrainConfig,
    pub seeds: SeedTriple,
    pub build: String,
    pub start_time_unix: u64,
    pub out_dir: String,
}

impl RunManifest {
    pub fn new(config: &TrainConfig, out_dir: &Path) -> Self {
        Self {
            config: config.clone(),
            seeds: config.seeds,
            build: format!(
                "dvxs-core {}{}",
                env!("CARGO_PKG_VERSION"),
                option_env!("DVXS_BUILD_ID").map(|s| format!(" ({s})")).unwrap_or_default()
            ),
            start_time_unix: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            out_dir: out_dir.display().to_string(),
        }
    }
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub agent: Agent,
    pub model_opt: Adam,
    pub buffer: ReplayBuffer,
    pub env: Simulator,
    pub state: TrainState,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let spec = EnvironmentSpec::load(&cfg.env)?;
        Self::with_spec(cfg, spec)
    }

    pub fn with_spec(cfg: TrainConfig, spec: EnvironmentSpec) -> Result<Self> {
        cfg.validate()?;
        let agent = Agent::new(&cfg, cfg.seeds.init)?;
        let mut t = Self {
            model_opt: Adam::new(cfg.model_lr, cfg.grad_clip),
            buffer: ReplayBuffer::new(cfg.buffer_capacity),
            env: Simulator::new(spec, cfg.seeds.env),
            state: TrainState {
                global_step: 0,
                episode: 0,
                latent: LatentState::zeros(&cfg.model),
                episode_return: 0.0,
                episode_intrinsic: 0.0,
                model_updates: 0,
                behavior_updates: 0,
                last_model: ModelLossReport::default(),
                last_behavior: BehaviorReport::default(),
            },
            rng: ChaCha8Rng::seed_from_u64(cfg.seeds.sampling),
            agent,
            cfg,
        };
        t.begin_episode()?;
        Ok(t)
    }

    /// Resets the simulator and memory, stores the first observation.
    fn begin_episode(&mut self) -> Result<()> {
        let scan = self.env.reset();
        let model = &self.agent.model;
        let h = vec![0.0; model.cfg.d_h];
        let post = model.filter(&h, &scan.normalized())?;
        let z = sample_latent(&post, &mut self.rng);
        self.state.latent = LatentState { h, z };
        self.state.episode_return = 0.0;
        self.state.episode_intrinsic = 0.0;
        self.buffer.append(Transition {
            observation: raw_ranges(&scan),
            action: [0.0, 0.0],
            reward_ext: 0.0,
            reward_int: 0.0,
            done: false,
            episode: self.state.episode,
        });
        Ok(())
    }

    pub fn exploration_noise(&self) -> f64 {
        noise_schedule(self.state.global_step, self.cfg.total_steps)
    }

    /// One environment step with the exploring policy. Returns the stored
    /// transition and, when the episode ended, its metrics.
    pub fn collect_step(&mut self) -> Result<(Transition, Option<EpisodeMetrics>)> {
        let noise = self.exploration_noise();
        let s = self.state.latent.concat();
        let (action, _) = self.agent.behavior.policy.act(&s, true, noise, &mut self.rng)?;
        let res = self.env.step(action)?;
        let a_norm = res.applied.normalized();
        let model = &self.agent.model;
        let (h, prior, post) = model.step_filter(&self.state.latent, a_norm, &res.observation.normalized())?;
        let r_int = if self.cfg.curiosity.active() {
            intrinsic_from_kl(model.latent_kl(&post, &prior), self.cfg.curiosity.alpha)
        } else {
            0.0
        };
        let z = sample_latent(&post, &mut self.rng);
        self.state.latent = LatentState { h, z };
        let tr = Transition {
            observation: raw_ranges(&res.observation),
            action: [res.applied.v as f32, res.applied.omega as f32],
            reward_ext: res.reward as f32,
            reward_int: r_int as f32,
            done: res.done,
            episode: self.state.episode,
        };
        self.buffer.append(tr.clone());
        self.state.global_step += 1;
        self.state.episode_return += res.reward;
        self.state.episode_intrinsic += r_int;

        let mut finished = None;
        if res.done {
            let explored = self.env.explored_area();
            let path = self.env.robot.path_length;
            let st = &self.state;
            finished = Some(EpisodeMetrics {
                global_step: st.global_step,
                episode: st.episode,
                ret: st.episode_return,
                explored_m2: explored,
                path_length_m: path,
                collided: res.collided,
                eqs: explored,
                ees: explored / path.max(PATH_FLOOR),
                intrinsic_sum: st.episode_intrinsic,
                model_recon: st.last_model.reconstruction,
                model_kl_dyn: st.last_model.kl_dynamics,
                actor_loss: st.last_behavior.actor_loss,
                critic_loss: st.last_behavior.critic_loss,
            });
            self.state.episode += 1;
            self.begin_episode()?;
        }
        Ok((tr, finished))
    }

    /// Model and behavior updates for one training interval. Does nothing
    /// while no stored episode is long enough to sample from.
    pub fn train_tick(&mut self) -> Result<TickCounts> {
        let mut counts = TickCounts::default();
        if self.buffer.valid_starts(self.cfg.seq_len) == 0 {
            return Ok(counts);
        }
        let use_intrinsic = self.cfg.curiosity.active();
        let mut starts = None;
        for _ in 0..self.cfg.n_model {
            let s = self.model_update()?;
            counts.model += 1;
            if self.cfg.flat_loops {
                starts = Some(s);
            } else {
                for _ in 0..self.cfg.n_behavior {
                    self.behavior_update(&s, use_intrinsic)?;
                    counts.behavior += 1;
                }
            }
        }
        if let Some(s) = starts {
            for _ in 0..self.cfg.n_behavior {
                self.behavior_update(&s, use_intrinsic)?;
                counts.behavior += 1;
            }
        }
        Ok(counts)
    }

    /// One world-model update. Returns the batch's posterior states.
    pub fn model_update(&mut self) -> Result<Array> {
        let batch = self
            .buffer
            .sample_sequences(self.cfg.batch_size, self.cfg.seq_len, &mut self.rng)?;
        let model = &mut self.agent.model;
        let mut tape = Tape::new();
        let obs = model.observe_sequence(&mut tape, &batch, &mut self.rng)?;
        tape.backward_into(obs.loss, &mut [&mut model.params]);
        self.model_opt.step(&mut model.params)?;
        self.state.model_updates += 1;
        self.state.last_model = obs.report;
        Ok(tape.value(obs.states).clone())
    }

    fn behavior_update(&mut self, starts: &Array, use_intrinsic: bool) -> Result<()> {
        let report = self
            .agent
            .behavior
            .train_step(&self.agent.model, starts, use_intrinsic, &mut self.rng)?;
        self.state.behavior_updates += 1;
        self.state.last_behavior = report;
        Ok(())
    }

    /// Collects and trains until `global_step` reaches `until` (capped at
    /// `total_steps`). Finished episodes go to `on_episode`; a checkpoint is
    /// written to `checkpoint` every `checkpoint_every` steps when given.
    pub fn run_until(
        &mut self,
        until: u64,
        mut on_episode: impl FnMut(&EpisodeMetrics) -> Result<()>,
        checkpoint: Option<&Path>,
    ) -> Result<()> {
        let until = until.min(self.cfg.total_steps);
        while self.state.global_step < until {
            let (_, finished) = self.collect_step()?;
            if let Some(m) = finished {
                on_episode(&m)?;
            }
            if self.state.global_step % self.cfg.train_interval == 0 {
                self.train_tick()?;
            }
            if let Some(p) = checkpoint {
                if self.state.global_step % self.cfg.checkpoint_every == 0 {
                    self.save_checkpoint(p)?;
                }
            }
        }
        Ok(())
    }

    /// Full run into `out_dir`: manifest, per-episode metrics, checkpoints.
    /// On failure a partial checkpoint is written before the error returns.
    pub fn run(&mut self, out_dir: &Path) -> Result<Vec<EpisodeMetrics>> {
        std::fs::create_dir_all(out_dir)?;
        let manifest_path = out_dir.join(MANIFEST_FILE);
        if !manifest_path.exists() {
            let m = RunManifest::new(&self.cfg, out_dir);
            std::fs::write(&manifest_path, serde_json::to_string_pretty(&m)?)?;
        }
        let mut metrics = MetricsWriter::open(&out_dir.join(METRICS_FILE))?;
        let mut all = Vec::new();
        let ckpt = out_dir.join(CHECKPOINT_FILE);
        let result = self.run_until(
            self.cfg.total_steps,
            |m| {
                all.push(m.clone());
                metrics.write(m)
            },
            Some(&ckpt),
        );
        metrics.flush()?;
        if let Err(e) = result {
            let _ = self.save_checkpoint(&out_dir.join(PARTIAL_CHECKPOINT_FILE));
            return Err(e);
        }
        if self.cfg.total_steps > 0 {
            self.save_checkpoint(&ckpt)?;
        }
        Ok(all)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            self.write_checkpoint(&mut w)?;
            w.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_checkpoint(&mut r)
    }

    pub fn write_checkpoint<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let header = CheckpointHeader {
            config: self.cfg.clone(),
            state: self.state.clone(),
            env: self.env.clone(),
            rng: self.rng.clone(),
            adam_steps: self.param_sets().map(|(_, ps)| ps.step),
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;

        let mut entries = Vec::new();
        let d = |v: &Vec<f32>| Array::new(&[v.len()], v.clone());
        entries.push(("state/h".to_string(), d(&self.state.latent.h)?));
        entries.push(("state/z".to_string(), d(&self.state.latent.z)?));
        for (prefix, ps) in self.param_sets() {
            for id in ps.ids() {
                let name = ps.name(id);
                let (m, v) = ps.moments(id);
                entries.push((format!("{prefix}/{name}"), ps.value(id).clone()));
                entries.push((format!("{prefix}/{name}#m"), m.clone()));
                entries.push((format!("{prefix}/{name}#v"), v.clone()));
            }
        }
        write_container(w, &entries)?;
        self.buffer.write_snapshot(w)
    }

    pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Format("truncated checkpoint".into()))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format(format!("not a checkpoint (magic {magic:?})")));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)
            .map_err(|_| Error::Format("truncated checkpoint".into()))?;
        let version = u32::from_le_bytes(b4);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)
            .map_err(|_| Error::Format("truncated checkpoint".into()))?;
        let len = u64::from_le_bytes(b8) as usize;
        if len > 1 << 30 {
            return Err(Error::Format(format!("implausible header length {len}")));
        }
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)
            .map_err(|_| Error::Format("truncated checkpoint header".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(&json)?;
        let entries = read_container(r)?;
        let buffer = ReplayBuffer::read_snapshot(r)?;
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }

        let cfg = header.config;
        let mut agent = Agent::new(&cfg, cfg.seeds.init)?;
        let mut map: std::collections::HashMap<String, Array> = entries.into_iter().collect();
        let mut take = |name: &str| {
            map.remove(name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks `{name}`")))
        };
        let h = take("state/h")?.data().to_vec();
        let z = take("state/z")?.data().to_vec();
        {
            let sets: [(&str, &mut ParamSet); 3] = [
                ("model", &mut agent.model.params),
                ("actor", &mut agent.behavior.policy.params),
                ("critic", &mut agent.behavior.critic.params),
            ];
            for ((prefix, ps), step) in sets.into_iter().zip(header.adam_steps) {
                ps.step = step;
                for id in ps.ids() {
                    let name = ps.name(id).to_string();
                    let value = take(&format!("{prefix}/{name}"))?;
                    if value.shape() != ps.value(id).shape() {
                        return Err(Error::Format(format!(
                            "`{prefix}/{name}` has shape {:?}, expected {:?}",
                            value.shape(),
                            ps.value(id).shape()
                        )));
                    }
                    *ps.value_mut(id) = value;
                    let m = take(&format!("{prefix}/{name}#m"))?;
                    let v = take(&format!("{prefix}/{name}#v"))?;
                    ps.set_moments(id, m, v)?;
                }
            }
        }
        if let Some(extra) = map.keys().next() {
            return Err(Error::Format(format!("unexpected checkpoint entry `{extra}`")));
        }
        if h.len() != cfg.model.d_h || z.len() != cfg.model.d_z {
            return Err(Error::Format("latent state does not match the model".into()));
        }
        let mut state = header.state;
        state.latent = LatentState { h, z };
        Ok(Self {
            model_opt: Adam::new(cfg.model_lr, cfg.grad_clip),
            buffer,
            env: header.env,
            state,
            rng: header.rng,
            agent,
            cfg,
        })
    }

    fn param_sets(&self) -> [(&'static str, &ParamSet); 3] {
        [
            ("model", &self.agent.model.params),
            ("actor", &self.agent.behavior.policy.params),
            ("critic", &self.agent.behavior.critic.params),
        ]
    }
}

fn raw_ranges(scan: &LidarScan) -> Vec<f32> {
    scan.ranges.iter().map(|&r| r as f32).collect()
}

/// Appends rows to a metrics file, writing the header when it is new.
pub struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn open(path: &Path) -> Result<Self> {
        let fresh = !path.exists() || std::fs::metadata(path)?.len() == 0;
        let f = OpenOptions::new().create(true).append(true).open(path)?;
        let mut out = BufWriter::new(f);
        if fresh {
            writeln!(out, "{METRICS_HEADER}")?;
        }
        Ok(Self { out })
    }

    pub fn write(&mut self, m: &EpisodeMetrics) -> Result<()> {
        writeln!(self.out, "{}", m.csv_row())?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

/// Resolves a checkpoint argument: a file, or a run directory holding one.
pub fn checkpoint_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(CHECKPOINT_FILE)
    } else {
        p.to_path_buf()
    }
}
