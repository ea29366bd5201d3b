#![allow(dead_code)]

use alora::allocator::AllocationConfig;
use alora::bench::TeacherSpec;
use alora::experiment::{RunConfig, TaskSource};
use alora::rng::{gaussian, SeedTree};
use alora::trainer::TrainConfig;
use alora::{AloraAdapter, Example, ModelConfig, ModuleId, ModuleKind, SuperNetwork};

pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        n_layers: 1,
        d_model: 8,
        d_ff: 12,
        n_heads: 2,
        vocab_size: 16,
        max_seq_len: 6,
        n_classes: 3,
    }
}

/// Network with rank-`rank` adapters on `kinds` of layer 0, B non-zero.
pub fn toy_net(kinds: &[ModuleKind], rank: usize, seed: u64) -> SuperNetwork {
    let cfg = tiny_model();
    let seeds = SeedTree::new(seed);
    let mut net = SuperNetwork::random(cfg, seeds);
    let mut rng = seeds.rng("adapters");
    for &kind in kinds {
        let (i, o) = cfg.projection_shape(kind);
        let mut a = AloraAdapter::new(ModuleId::new(0, kind), i, o, rank, &mut rng);
        *a.a_mut() = gaussian(&mut rng, i, rank, 0.6);
        *a.b_mut() = gaussian(&mut rng, rank, o, 0.6);
        net.insert_adapter(a).unwrap();
    }
    net
}

pub fn random_examples(cfg: &ModelConfig, n: usize, seed: u64) -> Vec<Example> {
    use rand::Rng;
    let mut rng = SeedTree::new(seed).rng("examples");
    (0..n)
        .map(|_| {
            let len = rng.random_range(1..=cfg.max_seq_len);
            Example {
                tokens: (0..len).map(|_| rng.random_range(0..cfg.vocab_size)).collect(),
                label: rng.random_range(0..cfg.n_classes),
            }
        })
        .collect()
}

/// Small end-to-end run config: one layer, width 8, 300 teacher examples.
pub fn tiny_run(out_dir: &std::path::Path) -> RunConfig {
    let model = tiny_model();
    let mut task = TeacherSpec::heterogeneous(&model, ModuleKind::Value, 4, 1, 0);
    task.n_examples = 300;
    task.seq_len = 5;
    task.delta_scale = 3.0;
    RunConfig {
        model,
        train: TrainConfig {
            lr_peak: 5e-3,
            batch_size: 16,
            max_epochs: 3.0,
            eval_every_steps: 5,
            patience: 10,
            ..TrainConfig::default()
        },
        alloc: AllocationConfig {
            r_target: 14,
            r_init: 2,
            n_per_round: 7,
            n_rounds: 3,
            b_val: 16,
            ..AllocationConfig::default()
        },
        task: TaskSource::Teacher(task),
        out_dir: out_dir.to_path_buf(),
        ..RunConfig::default()
    }
}
