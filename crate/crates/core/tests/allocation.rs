mod common;

use std::collections::BTreeSet;

use alora::allocator::{budget_check, replay_plans, run_allocation, AllocationConfig};
use alora::bench::{gen_teacher_task, TeacherSpec};
use alora::experiment::{execute, prepare_task};
use alora::rng::SeedTree;
use alora::scoring::{ablora_table, Scorer, ValBatch};
use alora::trainer::{gradient_step, split_dataset, AdamW, TrainConfig, Trainer};
use alora::{AloraAdapter, ForwardOptions, ModuleId, ModuleKind, ParamId, SuperNetwork};
use common::{tiny_model, tiny_run};

fn outdir() -> tempfile::TempDir {
    tempfile::tempdir().unwrap()
}

#[test]
fn zero_rounds_is_plain_lora() {
    let dir = outdir();
    let mut cfg = tiny_run(dir.path());
    cfg.alloc.n_rounds = 0;
    let out = execute(&cfg).unwrap();
    assert!(out.outcome.plans.is_empty());
    assert!(out.allocation.values().all(|&r| r == cfg.alloc.r_init));

    // the same pipeline without the allocator
    let task = prepare_task(&cfg).unwrap();
    let seeds = SeedTree::new(cfg.seed());
    let splits = split_dataset(&task.examples, seeds.seed("data")).unwrap();
    let mut net = SuperNetwork::new(cfg.model, task.backbone, task.head);
    net.attach_uniform(cfg.alloc.r_init, &mut seeds.rng("init"));
    let mut trainer = Trainer::new(TrainConfig { seed: seeds.seed("batches"), ..cfg.train }, splits).unwrap();
    trainer.train_for(&mut net, cfg.train.max_epochs).unwrap();
    let dev = trainer.finish(&mut net).unwrap();
    assert_eq!(dev.to_bits(), out.dev_loss.to_bits());
    assert_eq!(net, out.net);
}

#[test]
fn rounds_that_prune_every_module_shrink_the_budget() {
    let dir = outdir();
    let mut cfg = tiny_run(dir.path());
    // one rank per module and seven pruned per round: every module loses its rank
    cfg.alloc.r_init = 1;
    cfg.alloc.r_target = 7;
    cfg.alloc.n_per_round = 7;
    cfg.alloc.n_rounds = 3;
    let out = execute(&cfg).unwrap();
    assert_eq!(out.outcome.plans.len(), 1);
    assert!(out.outcome.plans[0].grow_map.is_empty());
    assert_eq!(out.outcome.budgets[0].total, 0);
    assert!(out.outcome.exhausted);
    assert!(out.net.active_ranks().is_empty());
}

#[test]
fn budget_bound_and_mutual_exclusion_hold_every_round() {
    let dir = outdir();
    let cfg = tiny_run(dir.path());
    let out = execute(&cfg).unwrap();
    assert_eq!(out.outcome.plans.len(), cfg.alloc.n_rounds);
    let mut prev = cfg.alloc.r_target;
    for (plan, budget) in out.outcome.plans.iter().zip(&out.outcome.budgets) {
        assert!(budget.total <= cfg.alloc.r_target);
        let pruned: BTreeSet<ModuleId> = plan.prune_set.iter().map(|(m, _)| *m).collect();
        for m in plan.grow_map.keys() {
            assert!(!pruned.contains(m), "round {}: {m} pruned and grown", plan.round);
        }
        let expected = if plan.grow_map.is_empty() { prev - cfg.alloc.n_per_round } else { prev };
        assert_eq!(budget.total, expected);
        prev = budget.total;
    }
    assert!(out.net.active_rank_count().total <= cfg.alloc.r_target);
}

#[test]
fn plan_history_replays_to_the_same_gates() {
    let dir = outdir();
    let cfg = tiny_run(dir.path());
    let out = execute(&cfg).unwrap();
    assert!(out.outcome.plans.iter().any(|p| !p.grow_map.is_empty()), "want at least one growth round");
    let records: Vec<_> = out.outcome.plans.iter().map(|p| p.record("")).collect();
    let mut replayed = out.initial.clone();
    replay_plans(&mut replayed, &records, SeedTree::new(cfg.seed()).child("alloc")).unwrap();
    for (id, a) in out.net.adapters() {
        let b = replayed.adapter(*id).unwrap();
        assert_eq!(a.gates(), b.gates(), "{id}");
        assert_eq!(a.rank(), b.rank(), "{id}");
    }
}

#[test]
fn allocation_rejects_a_non_uniform_start() {
    let dir = outdir();
    let cfg = tiny_run(dir.path());
    let task = prepare_task(&cfg).unwrap();
    let splits = split_dataset(&task.examples, 0).unwrap();
    let mut net = SuperNetwork::new(cfg.model, task.backbone, task.head);
    net.attach_uniform(cfg.alloc.r_init + 1, &mut SeedTree::new(0).rng("init"));
    let mut trainer = Trainer::new(cfg.train, splits).unwrap();
    let err = run_allocation(&mut net, &cfg.alloc, &mut trainer, Scorer::Ablora, SeedTree::new(0));
    assert!(matches!(err, Err(alora::Error::State(_))));
}

#[test]
fn budget_report_after_init_is_exact() {
    let model = tiny_model();
    let alloc = AllocationConfig::for_budget(&model, 21);
    let mut net = SuperNetwork::random(model, SeedTree::new(1));
    net.attach_uniform(alloc.r_init, &mut SeedTree::new(1).rng("init"));
    assert_eq!(budget_check(&net, alloc.r_target).unwrap().total, 21);
}

/// Importance of a rank-1 adapter trained to raise the loss, minus the lowest other score.
fn poison_margin(seed: u64) -> f64 {
    let model = tiny_model();
    let spec = TeacherSpec {
        n_examples: 300,
        seq_len: 5,
        delta_scale: 3.0,
        ..TeacherSpec::heterogeneous(&model, ModuleKind::Value, 3, 1, seed)
    };
    let task = gen_teacher_task(&model, &spec).unwrap();
    let splits = split_dataset(&task.examples, seed).unwrap();
    let seeds = SeedTree::new(seed);
    let mut net = task.student();
    let healthy = [ModuleKind::Query, ModuleKind::Key, ModuleKind::Value, ModuleKind::Up];
    let mut rng = seeds.rng("init");
    for kind in healthy {
        let (i, o) = model.projection_shape(kind);
        net.insert_adapter(AloraAdapter::new(ModuleId::new(0, kind), i, o, 2, &mut rng)).unwrap();
    }
    let train = TrainConfig { lr_peak: 5e-3, batch_size: 16, max_epochs: 4.0, eval_every_steps: 20, seed, ..TrainConfig::default() };
    let mut trainer = Trainer::new(train, splits.clone()).unwrap();
    trainer.train_for(&mut net, 4.0).unwrap();

    let poison = ModuleId::new(0, ModuleKind::Down);
    let (i, o) = model.projection_shape(ModuleKind::Down);
    let mut adapter = AloraAdapter::new(poison, i, o, 1, &mut rng);
    *adapter.b_mut() = alora::rng::gaussian(&mut rng, 1, o, 0.02);
    net.insert_adapter(adapter).unwrap();
    let ids = [ParamId::AdapterA(poison), ParamId::AdapterB(poison)];
    let mut optim = AdamW::new(0.9, 0.999, 1e-8, 0.0);
    let refs: Vec<_> = splits.train.iter().collect();
    for chunk in refs.chunks(16).cycle().take(60) {
        // negative step size: ascend the loss
        gradient_step(&mut net, chunk, ForwardOptions::train(), &ids, &mut optim, -1e-2).unwrap();
    }

    let batch = ValBatch::sample(&splits.dev, 24, seed).unwrap();
    let table = ablora_table(&net, &batch, true).unwrap();
    let poison_score = table.score(poison, 0).unwrap();
    let lowest_other = table
        .entries
        .iter()
        .filter(|((m, _), _)| *m != poison)
        .map(|(_, &s)| s)
        .fold(f64::INFINITY, f64::min);
    poison_score - lowest_other
}

#[test]
fn poisoned_rank_scores_lowest() {
    let margins: Vec<f64> = (0..5).map(poison_margin).collect();
    let m = alora::commands::median(&margins);
    assert!(m < 0.0, "median margin {m}, per seed {margins:?}");
}
