use dvxs_core::config::{Preset, TrainConfig};
use dvxs_core::replay::Transition;
use dvxs_core::sim::EnvironmentSpec;
use dvxs_core::trainer::Trainer;
use dvxs_core::{Adam, Error, Tape};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny(seed: u64) -> TrainConfig {
    let mut c = TrainConfig::preset(Preset::Desk);
    c.apply_text(
        "train.total_steps = 400
train.train_interval = 10
train.checkpoint_every = 100
train.batch_size = 2
train.seq_len = 8
model.d_z = 4
model.d_h = 8
model.hidden = 16
model.enc_channels = 2,4,4
behavior.hidden = 16
behavior.horizon = 3
",
        "tiny",
    )
    .unwrap();
    c.set("seed", &seed.to_string()).unwrap();
    c
}

fn trainer(cfg: TrainConfig) -> Trainer {
    Trainer::with_spec(cfg, EnvironmentSpec::builtin("simple").unwrap()).unwrap()
}

fn collect(t: &mut Trainer, n: usize) -> Vec<Transition> {
    (0..n).map(|_| t.collect_step().unwrap().0).collect()
}

#[test]
fn first_step_starts_from_zero_memory() {
    let mut t = trainer(tiny(1));
    assert!(t.state.latent.h.iter().all(|&h| h == 0.0));
    assert_eq!(t.state.global_step, 0);
    assert_eq!(t.buffer.len(), 1);
    assert_eq!(t.buffer.get(0).unwrap().action, [0.0, 0.0]);
    let (tr, done) = t.collect_step().unwrap();
    assert!(done.is_none());
    assert_eq!(t.state.global_step, 1);
    assert_eq!(t.buffer.len(), 2);
    assert_eq!(tr.observation.len(), 360);
    assert!(tr.reward_int >= 0.0);
    assert!(t.state.latent.h.iter().any(|&h| h != 0.0));
}

#[test]
fn same_seeds_give_identical_transitions() {
    let a = collect(&mut trainer(tiny(4)), 100);
    let b = collect(&mut trainer(tiny(4)), 100);
    assert_eq!(a, b);
    let c = collect(&mut trainer(tiny(5)), 100);
    assert_ne!(a, c);
}

#[test]
fn tick_runs_nested_update_counts() {
    let mut cfg = tiny(2);
    cfg.n_model = 3;
    cfg.n_behavior = 2;
    let mut t = trainer(cfg.clone());
    // Nothing to sample yet.
    let c = t.train_tick().unwrap();
    assert_eq!((c.model, c.behavior), (0, 0));
    collect(&mut t, 20);
    let c = t.train_tick().unwrap();
    assert_eq!((c.model, c.behavior), (3, 6));
    assert_eq!((t.state.model_updates, t.state.behavior_updates), (3, 6));

    cfg.flat_loops = true;
    let mut t = trainer(cfg);
    collect(&mut t, 20);
    let c = t.train_tick().unwrap();
    assert_eq!((c.model, c.behavior), (3, 2));
}

#[test]
fn model_loss_falls_on_a_fixed_batch() {
    let mut falling = 0;
    for seed in 0..10 {
        let mut t = trainer(tiny(seed));
        collect(&mut t, 60);
        let batch = t
            .buffer
            .sample_sequences(4, 8, &mut ChaCha8Rng::seed_from_u64(seed))
            .unwrap();
        let opt = Adam::new(t.cfg.model_lr, t.cfg.grad_clip);
        let model = &mut t.agent.model;
        let loss = |m: &dvxs_core::world_model::WorldModel| {
            let mut tape = Tape::new();
            let o = m.observe_sequence(&mut tape, &batch, &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
            o.report.total
        };
        let before = loss(model);
        for _ in 0..50 {
            let mut tape = Tape::new();
            let o = model
                .observe_sequence(&mut tape, &batch, &mut ChaCha8Rng::seed_from_u64(99))
                .unwrap();
            tape.backward_into(o.loss, &mut [&mut model.params]);
            opt.step(&mut model.params).unwrap();
        }
        if loss(model) < before {
            falling += 1;
        }
    }
    assert!(falling >= 8, "loss fell in {falling}/10 seeds");
}

#[test]
fn zero_step_budget_exits_cleanly() {
    let mut cfg = tiny(0);
    cfg.total_steps = 0;
    let dir = tempfile::tempdir().unwrap();
    let mut t = trainer(cfg);
    assert!(t.run(dir.path()).unwrap().is_empty());
    let metrics = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1);
    assert!(!dir.path().join("checkpoint.dvxs").exists());
}

#[test]
fn resume_continues_bit_for_bit() {
    let mut t = trainer(tiny(3));
    t.run_until(150, |_| Ok(()), None).unwrap();
    let mut bytes = Vec::new();
    t.write_checkpoint(&mut bytes).unwrap();
    let mut back = Trainer::read_checkpoint(&mut bytes.as_slice()).unwrap();
    assert_eq!(back.state, t.state);

    let run = |t: &mut Trainer| {
        let mut out = Vec::new();
        for _ in 0..100 {
            out.push(t.collect_step().unwrap().0);
            if t.state.global_step % t.cfg.train_interval == 0 {
                t.train_tick().unwrap();
            }
        }
        out
    };
    assert_eq!(run(&mut t), run(&mut back));
    assert_eq!(back.state, t.state);
}

#[test]
fn checkpoint_bytes_are_stable() {
    let mut t = trainer(tiny(6));
    t.run_until(120, |_| Ok(()), None).unwrap();
    let mut first = Vec::new();
    t.write_checkpoint(&mut first).unwrap();
    let back = Trainer::read_checkpoint(&mut first.as_slice()).unwrap();
    let mut second = Vec::new();
    back.write_checkpoint(&mut second).unwrap();
    assert_eq!(first, second);

    for cut in [3, 20, first.len() / 2, first.len() - 1] {
        let err = Trainer::read_checkpoint(&mut &first[..cut]).err().expect("truncated file must fail");
        assert!(matches!(err, Error::Format(_) | Error::Io(_)), "{err}");
    }
    let mut padded = first.clone();
    padded.push(0);
    assert!(Trainer::read_checkpoint(&mut padded.as_slice()).is_err());
}

#[test]
fn run_writes_metrics_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(8);
    cfg.total_steps = 1000;
    let mut t = trainer(cfg);
    let eps = t.run(dir.path()).unwrap();
    // Episodes last at most 500 steps.
    assert!(eps.len() >= 2);
    let metrics = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), eps.len() + 1);
    for m in &eps {
        assert!(m.explored_m2 > 0.0);
        assert_eq!(m.eqs, m.explored_m2);
        assert!(m.intrinsic_sum >= 0.0);
    }
    let back = Trainer::load_checkpoint(&dir.path().join("checkpoint.dvxs")).unwrap();
    assert_eq!(back.state.global_step, 1000);
}
