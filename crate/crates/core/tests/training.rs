mod common;

use alora::bench::{gen_teacher_task, TeacherSpec};
use alora::checkpoint;
use alora::rng::SeedTree;
use alora::trainer::{split_dataset, DataSplits, TrainConfig, Trainer};
use alora::{Example, ModuleKind, SuperNetwork};
use common::tiny_model;

/// Every token of class `c` is drawn from its own vocabulary band, so pooled features separate.
fn banded_task(n: usize) -> Vec<Example> {
    let cfg = tiny_model();
    let band = cfg.vocab_size / cfg.n_classes;
    let mut ex = common::random_examples(&cfg, n, 21);
    for e in &mut ex {
        for t in &mut e.tokens {
            *t = e.label * band + *t % band;
        }
    }
    ex
}

fn tiny_trainer(splits: DataSplits, cfg: TrainConfig) -> (SuperNetwork, Trainer) {
    let model = tiny_model();
    let seeds = SeedTree::new(5);
    let mut net = SuperNetwork::random(model, seeds);
    net.attach_uniform(2, &mut seeds.rng("init"));
    (net, Trainer::new(cfg, splits).unwrap())
}

fn fast_cfg() -> TrainConfig {
    TrainConfig {
        lr_peak: 2e-2,
        batch_size: 16,
        max_epochs: 2.0,
        eval_every_steps: 10,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_epochs_changes_nothing() {
    let splits = split_dataset(&banded_task(200), 0).unwrap();
    let (mut net, mut trainer) = tiny_trainer(splits, fast_cfg());
    let before = net.clone();
    let out = trainer.train_for(&mut net, 0.0).unwrap();
    assert_eq!(out.steps, 0);
    assert_eq!(net, before);
    assert!(trainer.log().is_empty());
}

#[test]
fn learnable_task_halves_training_loss_in_two_epochs() {
    let splits = split_dataset(&banded_task(600), 0).unwrap();
    let train = splits.train.clone();
    let (mut net, mut trainer) = tiny_trainer(splits, fast_cfg());
    let initial = net.dataset_loss(&train, None).unwrap();
    trainer.train_for(&mut net, 2.0).unwrap();
    let fin = net.dataset_loss(&train, None).unwrap();
    assert!(fin < 0.5 * initial, "{initial} -> {fin}");
}

#[test]
fn identical_seeds_give_identical_logs() {
    let run = || {
        let splits = split_dataset(&banded_task(300), 1).unwrap();
        let (mut net, mut trainer) = tiny_trainer(splits, fast_cfg());
        trainer.train_for(&mut net, 1.5).unwrap();
        (trainer.metrics_jsonl().unwrap(), net)
    };
    let (a, na) = run();
    let (b, nb) = run();
    assert!(!a.is_empty());
    assert_eq!(a, b);
    assert_eq!(na, nb);
}

#[test]
fn frozen_weights_survive_a_hundred_steps() {
    let splits = split_dataset(&banded_task(300), 2).unwrap();
    let (mut net, mut trainer) = tiny_trainer(splits, TrainConfig { max_epochs: 10.0, ..fast_cfg() });
    let sum = net.frozen_checksum();
    let head = net.head.clone();
    let done = trainer.train_steps(&mut net, 100).unwrap();
    assert_eq!(done.steps, 100);
    assert_eq!(net.frozen_checksum(), sum);
    assert_ne!(net.head, head, "head is trainable");
}

#[test]
fn early_stop_respects_patience_window() {
    // pure-noise labels: dev loss stops improving quickly
    let mut ex = banded_task(400);
    for (i, e) in ex.iter_mut().enumerate() {
        e.label = (i * 7 + i / 3) % 3;
    }
    let splits = split_dataset(&ex, 3).unwrap();
    let cfg = TrainConfig {
        lr_peak: 5e-2,
        max_epochs: 30.0,
        eval_every_steps: 2,
        patience: 3,
        ..fast_cfg()
    };
    let (mut net, mut trainer) = tiny_trainer(splits, cfg);
    let out = trainer.train_for(&mut net, 30.0).unwrap();
    assert!(out.early_stopped, "expected early stop");
    assert!(trainer.steps_done() >= cfg.patience * cfg.eval_every_steps);
    let best = trainer.log().iter().map(|m| m.dev_loss).fold(f64::INFINITY, f64::min);
    let restored = trainer.finish(&mut net).unwrap();
    assert_eq!(restored, best);
    assert_eq!(net.dataset_loss(&trainer.splits().dev, None).unwrap(), best);
}

#[test]
fn checkpoint_round_trip_keeps_dev_loss_bits() {
    let model = tiny_model();
    let spec = TeacherSpec {
        n_examples: 200,
        ..TeacherSpec::heterogeneous(&model, ModuleKind::Query, 2, 1, 4)
    };
    let task = gen_teacher_task(&model, &spec).unwrap();
    let splits = split_dataset(&task.examples, 4).unwrap();
    let dev = splits.dev.clone();
    let mut net = task.student();
    net.attach_uniform(2, &mut SeedTree::new(4).rng("init"));
    let mut trainer = Trainer::new(fast_cfg(), splits).unwrap();
    trainer.train_for(&mut net, 1.0).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.alora");
    checkpoint::save(&net, &path).unwrap();
    let back = checkpoint::load(&path).unwrap();
    assert_eq!(
        back.dataset_loss(&dev, None).unwrap().to_bits(),
        net.dataset_loss(&dev, None).unwrap().to_bits()
    );
}
