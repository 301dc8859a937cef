//! Training loop contracts on small synthetic sequences.

use bevloop::config::Config;
use bevloop::dataset::{synth_world, SynthConfig, SynthWorld};
use bevloop::descriptor::{AttentionKind, DescriptorConfig, DescriptorParams};
use bevloop::pipeline::Model;
use bevloop::tensor::{read_checkpoint, ParamStore, Tape, Tensor};
use bevloop::trainer::{lazy_triplet_loss_var, train, EpochLog, TrainConfig, TrainMode};
use bevloop::Error;

/// 40 scans; a 6 m step makes the loop wide enough for negatives.
fn smoke_world() -> SynthWorld {
    synth_world(&SynthConfig {
        trajectory_length: 40,
        revisit_count: 6,
        step_m: 6.0,
        obstacle_density: 25.0,
        seed: 5,
        ..Default::default()
    })
}

fn smoke_config(epochs: usize, overlap_epochs: usize, lr: f64) -> TrainConfig {
    let mut cfg = Config::desk();
    cfg.epochs = epochs;
    cfg.overlap_epochs = overlap_epochs;
    cfg.learning_rate = lr;
    cfg.overlap_learning_rate = lr;
    cfg.seed = 3;
    TrainConfig::from_config(&cfg, TrainMode::B)
}

fn run(
    world: &SynthWorld,
    cfg: &TrainConfig,
    out: Option<&std::path::Path>,
) -> (Model, Vec<EpochLog>) {
    let mut model = Model::new(&Config::desk(), 11).unwrap();
    let log = train(&mut model, &world.clouds, &world.poses, cfg, out, |_| {}).unwrap();
    (model, log)
}

#[test]
fn smoke_training_lowers_the_loss() {
    let world = smoke_world();
    let (_, log) = run(&world, &smoke_config(8, 0, 0.01), None);
    assert_eq!(log.len(), 8);
    assert!(log.iter().all(|e| e.batches > 0 && e.loss >= 0.0));
    let (first, last) = (log[0].loss, log[log.len() - 1].loss);
    assert!(last < first, "loss went from {first} to {last}");
    let tail: Vec<f64> = log[log.len() - 5..].iter().map(|e| e.loss).collect();
    assert!(tail.windows(2).all(|w| w[1] <= w[0]), "{tail:?}");
}

#[test]
fn zero_learning_rate_leaves_parameters_untouched() {
    let world = smoke_world();
    let before = Model::new(&Config::desk(), 11).unwrap();
    let (after, _) = run(&world, &smoke_config(2, 2, 0.0), None);
    for ((n1, a), (n2, b)) in before
        .store
        .named_values()
        .iter()
        .zip(after.store.named_values().iter())
    {
        assert_eq!(n1, n2);
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b), "{n1} moved");
    }
}

#[test]
fn fixed_seed_gives_identical_checkpoints() {
    let world = smoke_world();
    let cfg = smoke_config(2, 1, 0.01);
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (_, l1) = run(&world, &cfg, Some(d1.path()));
    let (_, l2) = run(&world, &cfg, Some(d2.path()));
    assert_eq!(l1, l2);
    for name in [
        "epoch_000.bin",
        "epoch_001.bin",
        "epoch_002.bin",
        "model.bin",
    ] {
        let a = std::fs::read(d1.path().join(name)).unwrap();
        let b = std::fs::read(d2.path().join(name)).unwrap();
        assert_eq!(a, b, "{name} differs");
    }
    assert!(read_checkpoint(d1.path().join("model.bin")).is_ok());
}

#[test]
fn epoch_log_lines_carry_seed_and_rate() {
    let world = smoke_world();
    let (_, log) = run(&world, &smoke_config(1, 1, 0.01), None);
    let line = log[0].line();
    let fields: Vec<&str> = line.split(' ').collect();
    assert_eq!(fields.len(), 4);
    assert_eq!(fields[0], "0");
    assert_eq!(fields[2], "0.01");
    assert_eq!(fields[3], "3");
    assert_eq!(log[1].phase, "overlap");
    assert_eq!(log[1].epoch, 1);
}

#[test]
fn divergence_is_reported() {
    let world = smoke_world();
    let cfg = smoke_config(3, 0, 1e200);
    let mut model = Model::new(&Config::desk(), 11).unwrap();
    let r = train(&mut model, &world.clouds, &world.poses, &cfg, None, |_| {});
    assert!(matches!(r, Err(Error::Divergence { .. })), "{r:?}");
}

#[test]
fn non_attaining_negative_does_not_touch_gradients() {
    let mut store = ParamStore::new(7);
    let head = DescriptorParams::new(
        &mut store,
        DescriptorConfig {
            channels: 8,
            clusters: 4,
            dim: 16,
            attention: AttentionKind::SelfAttention,
        },
    );
    let feat = |salt: f64| Tensor::from_fn([8, 4, 4], |i| ((i as f64 * 0.37 + salt) * 1.3).sin());
    let grads = |store: &mut ParamStore, negatives: &[Tensor]| -> (Vec<Vec<f64>>, Vec<f64>) {
        store.zero_grad();
        let mut tape = Tape::new();
        let mut describe = |t: &Tensor| {
            let x = tape.constant(t.clone());
            head.forward(&mut tape, store, x).unwrap()
        };
        let q = describe(&feat(0.0));
        let p = describe(&feat(0.05));
        let n: Vec<_> = negatives.iter().map(&mut describe).collect();
        let hinges: Vec<f64> = n
            .iter()
            .map(|&v| {
                let d = |a, b| {
                    let (x, y): (&Tensor, &Tensor) = (tape.value(a), tape.value(b));
                    x.data()
                        .iter()
                        .zip(y.data())
                        .map(|(u, w)| (u - w).powi(2))
                        .sum::<f64>()
                        .sqrt()
                };
                2.0 + d(q, p) - d(q, v)
            })
            .collect();
        let loss = lazy_triplet_loss_var(&mut tape, q, &[p], &n, 2.0).unwrap();
        tape.backward(loss, store).unwrap();
        (
            store
                .ids()
                .map(|id| store.get(id).gradient.to_vec())
                .collect(),
            hinges,
        )
    };
    let base = vec![feat(3.0), feat(9.0)];
    let (g0, h0) = grads(&mut store, &base);
    let attaining = if h0[0] >= h0[1] { 0 } else { 1 };
    let other = 1 - attaining;
    let mut moved = base.clone();
    moved[other] = base[other].map(|v| v * 1.01 + 0.001);
    let (g1, h1) = grads(&mut store, &moved);
    assert!(
        h1[other] < h1[attaining],
        "perturbation changed the attaining pair"
    );
    assert!(h0[attaining] > 0.0);
    for (a, b) in g0.iter().zip(&g1) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= 1e-12);
        }
    }
}
