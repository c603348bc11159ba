use std::path::Path;
use std::process::{Command, Output};

use dvxs_core::config::{split_seed, Preset, SeedTriple, TrainConfig};
use dvxs_core::Error;

fn dvxs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dvxs"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

/// A desk run small enough to finish in seconds.
const TINY: &str = "\
# tiny desk run
train.total_steps = 500
train.checkpoint_every = 200
train.batch_size = 2
train.seq_len = 8
model.d_z = 4
model.d_h = 8
model.hidden = 16
model.enc_channels = 2,4,4
behavior.hidden = 16
behavior.horizon = 3
";

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.display().to_string()
}

#[test]
fn full_scale_preset_defaults() {
    let c = TrainConfig::preset(Preset::Paper);
    assert_eq!(c.behavior.horizon, 15);
    assert_eq!(c.behavior.lambda, 0.95);
    assert_eq!(c.behavior.gamma, 0.99);
    assert_eq!(c.behavior.actor_lr, 8e-5);
    assert_eq!(c.behavior.critic_lr, 8e-5);
    assert_eq!(c.behavior.entropy, 1e-3);
    assert_eq!(c.model.beta, 1.5);
    assert_eq!(c.model.d_z, 32);
    assert_eq!(c.model.d_h, 256);
    assert_eq!(c.model_lr, 3e-4);
    assert_eq!(c.batch_size, 50);
    assert_eq!(c.seq_len, 50);
    assert_eq!(c.buffer_capacity, 1_000_000);
    assert_eq!(c.curiosity.alpha, 0.5);
    c.validate().unwrap();

    let dir = tempfile::tempdir().unwrap();
    let empty = write(dir.path(), "empty.cfg", "");
    assert_eq!(TrainConfig::load(Path::new(&empty), Preset::Paper).unwrap(), c);
}

#[test]
fn text_round_trip_and_comments() {
    let mut c = TrainConfig::preset(Preset::Desk);
    c.apply_text("# comment\nmodel.beta = 2.0  # trailing\n\nbehavior.entropy=0.01\n", "inline")
        .unwrap();
    assert_eq!(c.model.beta, 2.0);
    assert_eq!(c.behavior.entropy, 0.01);
    let mut back = TrainConfig::preset(Preset::Paper);
    back.apply_text(&c.to_text(), "dump").unwrap();
    back.preset = c.preset;
    assert_eq!(back, c);
}

#[test]
fn bad_keys_and_values_name_the_key() {
    let mut c = TrainConfig::preset(Preset::Paper);
    let err = c.apply_text("model.bogus = 3\n", "f.cfg").unwrap_err();
    assert!(matches!(err, Error::Parse { line: 1, .. }));
    assert!(err.to_string().contains("model.bogus"), "{err}");

    let mut c = TrainConfig::preset(Preset::Paper);
    let err = c.apply_text("\nbehavior.actor_lr = -1e-4\n", "f.cfg").unwrap_err();
    assert!(err.to_string().contains("lr"), "{err}");

    let mut c = TrainConfig::preset(Preset::Paper);
    let err = c.apply_text("train.model_lr = -3\n", "f.cfg").unwrap_err();
    assert!(err.to_string().contains("train.model_lr"), "{err}");

    let mut c = TrainConfig::preset(Preset::Paper);
    assert!(c.apply_text("train.batch_size = many\n", "f.cfg").is_err());
    assert!(c.apply_text("no equals sign\n", "f.cfg").is_err());
    assert!(Preset::parse("huge").is_err());
}

#[test]
fn seed_streams_are_independent() {
    let s = SeedTriple::from_seed(5);
    assert_ne!(s.env, s.init);
    assert_ne!(s.init, s.sampling);
    assert_eq!(s, SeedTriple::from_seed(5));
    assert_ne!(s, SeedTriple::from_seed(6));
    assert_eq!(s.env, split_seed(5, 1));
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(code(&dvxs(&["frobnicate"])), 1);
    assert_eq!(code(&dvxs(&["train", "--bogus-flag"])), 1);
    assert_eq!(code(&dvxs(&[])), 1);
    let help = dvxs(&["--help"]);
    assert_eq!(code(&help), 0);
    assert!(String::from_utf8_lossy(&help.stdout).contains("env-check"));
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write(dir.path(), "bad.cfg", "model.nonsense = 1\n");
    let out_dir = dir.path().join("run").display().to_string();
    let out = dvxs(&["train", "--config", &bad, "--out", &out_dir]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("model.nonsense"));
    let neg = write(dir.path(), "neg.cfg", "behavior.critic_lr = -1\n");
    assert_eq!(code(&dvxs(&["train", "--config", &neg, "--out", &out_dir])), 2);
    assert_eq!(code(&dvxs(&["env-check", "--env", "no-such-map"])), 2);
    assert_eq!(code(&dvxs(&["eval", "--random", "--env", "simple", "--perturb", "fog"])), 2);
}

#[test]
fn runtime_errors_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nothing.dvxs").display().to_string();
    assert_eq!(code(&dvxs(&["inspect", "--checkpoint", &missing])), 3);
    let junk = write(dir.path(), "junk.dvxs", "definitely not a checkpoint");
    let out = dvxs(&["eval", "--checkpoint", &junk, "--env", "simple"]);
    assert_eq!(code(&out), 3);
    assert!(!out.stderr.is_empty());
}

#[test]
fn env_check_and_random_eval_succeed() {
    let out = dvxs(&["env-check", "--env", "simple", "--episodes", "1"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("all invariants hold"));
    let out = dvxs(&["eval", "--random", "--env", "complex", "--episodes", "2"]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("random,complex,none,2,"));
}

#[test]
fn train_inspect_eval_robust_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "tiny.cfg", TINY);
    let run = dir.path().join("run");
    let run_s = run.display().to_string();
    // The flag wins over the file's 500 steps.
    let out = dvxs(&[
        "train", "--preset", "desk", "--config", &cfg, "--env", "simple", "--seed", "1", "--steps", "300", "--out",
        &run_s,
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["manifest.json", "metrics.csv", "checkpoint.dvxs"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["total_steps"], 300);
    assert_eq!(manifest["config"]["model"]["d_h"], 8);
    assert_eq!(manifest["seeds"]["env"], split_seed(1, 1));
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with(
        "global_step,episode,return,explored_m2,path_length_m,collided,eqs,ees,intrinsic_sum,model_recon,model_kl_dyn,actor_loss,critic_loss"
    ));

    let out = dvxs(&["inspect", "--checkpoint", &run_s]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("model.d_h = 8"));
    assert!(text.contains("global_step 300"));
    assert!(text.contains("actor/"));

    let ckpt = run.join("checkpoint.dvxs").display().to_string();
    let traj = dir.path().join("traj.csv");
    let out = dvxs(&[
        "eval", "--checkpoint", &ckpt, "--env", "simple", "--episodes", "1", "--trajectory",
        &traj.display().to_string(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(std::fs::read_to_string(&traj).unwrap().starts_with("step,x,y,heading,v,omega,reward,done"));

    let robust = dir.path().join("robust").display().to_string();
    let out = dvxs(&["robust", "--checkpoint", &ckpt, "--out", &robust, "--episodes", "1"]);
    assert_eq!(code(&out), 0);
    let table = std::fs::read_to_string(Path::new(&robust).join("robustness.csv")).unwrap();
    assert_eq!(table.lines().count(), 5);

    // Resuming with a larger budget continues the same run.
    let out = dvxs(&["train", "--resume", "--steps", "400", "--out", &run_s]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let out = dvxs(&["inspect", "--checkpoint", &ckpt]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("global_step 400"));
}

#[test]
fn data_dir_variable_redirects_map_names() {
    let dir = tempfile::tempdir().unwrap();
    let src = include_str!("../data/envs/simple.env");
    std::fs::write(dir.path().join("mine.env"), src).unwrap();
    let run = |with_var: bool| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_dvxs"));
        cmd.args(["env-check", "--env", "mine", "--episodes", "1"]);
        if with_var {
            cmd.env("DVXS_DATA_DIR", dir.path());
        } else {
            cmd.env_remove("DVXS_DATA_DIR");
        }
        code(&cmd.output().unwrap())
    };
    assert_eq!(run(true), 0);
    assert_eq!(run(false), 2);
}
