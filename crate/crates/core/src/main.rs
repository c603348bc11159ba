use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dvxs_core::config::{Preset, SeedTriple, TrainConfig};
use dvxs_core::eval::{
    ablation_suite, ablation_table, evaluate, evaluate_random, robustness_suite, robustness_table, run_episode,
    AgentController, EvalReport,
};
use dvxs_core::sim::audit::audit;
use dvxs_core::sim::{EnvironmentSpec, Perturbation};
use dvxs_core::trainer::{checkpoint_path, Trainer, CHECKPOINT_FILE};
use dvxs_core::Error;

#[derive(Parser)]
#[command(name = "dvxs", version, about = "Latent world-model exploration agent")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train an agent; writes manifest, metrics and checkpoint into --out.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        env: Option<String>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "paper")]
        preset: String,
        #[arg(long)]
        out: PathBuf,
        /// Continue from the checkpoint in --out if there is one.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint (or a uniform random policy) with noise off.
    Eval {
        #[arg(long, required_unless_present = "random")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        env: String,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        #[arg(long, default_value = "none")]
        perturb: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        random: bool,
        /// Write the first episode's trajectory as CSV.
        #[arg(long)]
        trajectory: Option<PathBuf>,
    },
    /// Train and evaluate every ablation variant.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "desk")]
        preset: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Evaluate a checkpoint under every perturbation mode.
    Robust {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to the training map of the checkpoint.
        #[arg(long)]
        env: Option<String>,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the configuration and parameter shapes of a checkpoint.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Random-drive invariant audit of a map.
    EnvCheck {
        #[arg(long)]
        env: String,
        #[arg(long, default_value_t = 5)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } | Error::Parse { .. } | Error::Environment(_) => Failure::Config(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
    }
}

fn build_config(
    preset: &str,
    file: Option<&Path>,
    env: Option<String>,
    steps: Option<u64>,
    seed: Option<u64>,
) -> Result<TrainConfig, Failure> {
    let preset = Preset::parse(preset)?;
    let mut cfg = match file {
        Some(p) => TrainConfig::load(p, preset)?,
        None => TrainConfig::preset(preset),
    };
    if let Some(e) = env {
        cfg.env = e;
    }
    if let Some(s) = steps {
        cfg.total_steps = s;
    }
    if let Some(s) = seed {
        cfg.seeds = SeedTriple::from_seed(s);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_trainer(p: &Path) -> Result<Trainer, Failure> {
    Ok(Trainer::load_checkpoint(&checkpoint_path(p))?)
}

fn print_report(label: &str, r: &EvalReport) {
    println!("label,{}", EvalReport::CSV_HEADER);
    println!("{label},{}", r.csv_row());
    println!(
        "{label}: return {:.2}, explored {:.2} m2, efficiency {:.3} m2/m, collisions {:.0}% over {} episodes",
        r.mean_return,
        r.eqs,
        r.ees,
        100.0 * r.collision_rate,
        r.episodes
    );
}

fn dispatch(cmd: Cmd) -> Result<(), Failure> {
    match cmd {
        Cmd::Train {
            config,
            env,
            steps,
            seed,
            preset,
            out,
            resume,
        } => {
            let ckpt = out.join(CHECKPOINT_FILE);
            let mut trainer = if resume && ckpt.exists() {
                let mut t = load_trainer(&ckpt)?;
                if let Some(s) = steps {
                    t.cfg.total_steps = s;
                }
                t
            } else {
                let cfg = build_config(&preset, config.as_deref(), env, steps, seed)?;
                Trainer::new(cfg)?
            };
            let episodes = trainer.run(&out)?;
            println!(
                "trained {} steps, {} episodes, {} model and {} behavior updates; output in {}",
                trainer.state.global_step,
                episodes.len(),
                trainer.state.model_updates,
                trainer.state.behavior_updates,
                out.display()
            );
            if let Some(last) = episodes.last() {
                println!("last episode: return {:.2}, explored {:.2} m2", last.ret, last.explored_m2);
            }
        }
        Cmd::Eval {
            checkpoint,
            env,
            episodes,
            perturb,
            seed,
            random,
            trajectory,
        } => {
            let spec = EnvironmentSpec::load(&env)?;
            let mode = Perturbation::parse(&perturb)?;
            if random {
                print_report("random", &evaluate_random(&spec, episodes, mode, seed)?);
                return Ok(());
            }
            let t = load_trainer(checkpoint.as_deref().expect("required by clap"))?;
            let report = evaluate(&t.agent, &spec, episodes, mode, seed)?;
            print_report("agent", &report);
            if let Some(path) = trajectory {
                let mut ctrl = AgentController::new(&t.agent);
                let (_, traj) = run_episode(&mut ctrl, &spec, mode, dvxs_core::eval::episode_seed(seed, 0), true)?;
                std::fs::write(&path, traj.expect("recorded").to_csv())?;
            }
        }
        Cmd::Ablate {
            config,
            preset,
            out,
            episodes,
            seed,
        } => {
            let cfg = build_config(&preset, config.as_deref(), None, None, None)?;
            std::fs::create_dir_all(&out)?;
            let rows = ablation_suite(&cfg, episodes, seed)?;
            let table = ablation_table(&rows);
            std::fs::write(out.join("ablation.csv"), &table)?;
            print!("{table}");
            let eqs = |v: &str| rows.iter().find(|r| r.variant == v).map(|r| r.report.eqs);
            if let (Some(f), Some(n)) = (eqs("full"), eqs("no_curiosity")) {
                println!("full / no_curiosity EQS ratio: {:.3}", f / n);
            }
        }
        Cmd::Robust {
            checkpoint,
            out,
            env,
            episodes,
            seed,
        } => {
            let t = load_trainer(&checkpoint)?;
            let spec = EnvironmentSpec::load(env.as_deref().unwrap_or(&t.cfg.env))?;
            std::fs::create_dir_all(&out)?;
            let rows = robustness_suite(&t.agent, &spec, episodes, seed)?;
            let table = robustness_table(&rows);
            std::fs::write(out.join("robustness.csv"), &table)?;
            print!("{table}");
        }
        Cmd::Inspect { checkpoint } => {
            let t = load_trainer(&checkpoint)?;
            print!("{}", t.cfg.to_text());
            println!(
                "# global_step {} episode {} model_updates {} behavior_updates {} replay {}",
                t.state.global_step,
                t.state.episode,
                t.state.model_updates,
                t.state.behavior_updates,
                t.buffer.len()
            );
            for (label, ps) in [
                ("model", &t.agent.model.params),
                ("actor", &t.agent.behavior.policy.params),
                ("critic", &t.agent.behavior.critic.params),
            ] {
                println!("# {label}: {} scalars", ps.num_scalars());
                for id in ps.ids() {
                    println!("{label}/{} {:?}", ps.name(id), ps.value(id).shape());
                }
            }
        }
        Cmd::EnvCheck { env, episodes, seed } => {
            let spec = EnvironmentSpec::load(&env)?;
            let rep = audit(&spec, episodes, seed)?;
            println!(
                "{}: {} episodes, {} steps, {} collisions, max explored {:.2} m2 of {:.2} m2",
                spec.name,
                rep.episodes,
                rep.steps,
                rep.collisions,
                rep.max_explored_m2,
                spec.area()
            );
            if !rep.passed() {
                for v in &rep.violations {
                    eprintln!("violation: {v}");
                }
                return Err(Failure::Runtime(format!("{} invariant violations", rep.violations.len())));
            }
            println!("all invariants hold");
        }
    }
    Ok(())
}
