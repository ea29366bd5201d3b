//! Iterative rank allocation: score, prune the lowest ranks, grow the modules
//! that lost nothing this round, then recover-train.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::backbone::{ModelConfig, ModuleId, ModuleKind, N_MOD};
use crate::network::SuperNetwork;
use crate::rng::SeedTree;
use crate::scoring::{score_all, DnasConfig, ImportanceTable, Scorer, ValBatch};
use crate::trainer::Trainer;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AllocationConfig {
    pub r_target: usize,
    pub r_init: usize,
    pub n_per_round: usize,
    pub n_rounds: usize,
    pub k1_epochs: f64,
    pub k2_epochs: f64,
    pub b_val: usize,
    /// Logit learning rate of the relaxed-gate scorer.
    pub dnas_arch_lr: f64,
}

impl Default for AllocationConfig {
    fn default() -> Self {
        Self {
            r_target: 112,
            r_init: 8,
            n_per_round: 14,
            n_rounds: 8,
            k1_epochs: 1.0,
            k2_epochs: 0.25,
            b_val: 32,
            dnas_arch_lr: 5e-2,
        }
    }
}

impl AllocationConfig {
    /// Uniform initial rank for a budget of `r_target` over `model`.
    pub fn for_budget(model: &ModelConfig, r_target: usize) -> Self {
        let modules = model.n_layers * N_MOD;
        Self {
            r_target,
            r_init: r_target / modules.max(1),
            n_per_round: modules,
            ..Self::default()
        }
    }

    pub fn validate(&self, model: &ModelConfig, prefix: &str) -> Result<()> {
        let field = |n: &str| format!("{prefix}{n}");
        let modules = model.n_layers * N_MOD;
        if self.r_target == 0 {
            return Err(Error::config(field("r_target"), "must be positive"));
        }
        if self.r_init == 0 || self.r_init * modules != self.r_target {
            return Err(Error::config(
                field("r_init"),
                format!(
                    "must equal r_target / (n_layers * {N_MOD}) = {} / {modules} exactly, got {}",
                    self.r_target, self.r_init
                ),
            ));
        }
        if self.n_per_round == 0 {
            return Err(Error::config(field("n_per_round"), "must be positive"));
        }
        if !(self.k1_epochs >= 0.0 && self.k1_epochs.is_finite()) {
            return Err(Error::config(field("k1_epochs"), "must be non-negative"));
        }
        if !(self.k2_epochs >= 0.0 && self.k2_epochs.is_finite()) {
            return Err(Error::config(field("k2_epochs"), "must be non-negative"));
        }
        if self.b_val == 0 {
            return Err(Error::config(field("b_val"), "must be positive"));
        }
        if !(self.dnas_arch_lr > 0.0 && self.dnas_arch_lr.is_finite()) {
            return Err(Error::config(field("dnas_arch_lr"), "must be positive"));
        }
        Ok(())
    }
}

/// One allocation round.
#[derive(Debug, Clone, PartialEq)]
pub struct AllocationPlan {
    pub round: usize,
    pub prune_set: Vec<(ModuleId, usize)>,
    pub grow_map: BTreeMap<ModuleId, usize>,
    pub table: ImportanceTable,
}

impl AllocationPlan {
    pub fn record(&self, scores_csv: impl Into<String>) -> PlanRecord {
        PlanRecord {
            round: self.round,
            prune_set: self
                .prune_set
                .iter()
                .map(|&(m, rank)| RankRef {
                    layer: m.layer,
                    module: m.kind,
                    rank,
                })
                .collect(),
            grow_map: self
                .grow_map
                .iter()
                .map(|(&m, &count)| GrowRef {
                    layer: m.layer,
                    module: m.kind,
                    count,
                })
                .collect(),
            scores_csv: scores_csv.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankRef {
    pub layer: usize,
    pub module: ModuleKind,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GrowRef {
    pub layer: usize,
    pub module: ModuleKind,
    pub count: usize,
}

/// Serialised form of one round in the plan history.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanRecord {
    pub round: usize,
    pub prune_set: Vec<RankRef>,
    pub grow_map: Vec<GrowRef>,
    pub scores_csv: String,
}

impl PlanRecord {
    pub fn prune_ids(&self) -> Vec<(ModuleId, usize)> {
        self.prune_set
            .iter()
            .map(|r| (ModuleId::new(r.layer, r.module), r.rank))
            .collect()
    }

    pub fn grow_ids(&self) -> BTreeMap<ModuleId, usize> {
        self.grow_map
            .iter()
            .map(|g| (ModuleId::new(g.layer, g.module), g.count))
            .collect()
    }
}

/// The `n` lowest-scoring ranks. Ties go to the lower module average, then
/// the lower layer, module kind, and rank index.
pub fn select_prune_set(table: &ImportanceTable, n: usize) -> Result<Vec<(ModuleId, usize)>> {
    if n > table.len() {
        return Err(Error::Argument(format!(
            "cannot prune {n} ranks from a table of {}",
            table.len()
        )));
    }
    let mut ranked: Vec<(&(ModuleId, usize), &f64)> = table.entries.iter().collect();
    ranked.sort_by(|(ka, sa), (kb, sb)| {
        sa.total_cmp(sb)
            .then_with(|| table.module_avg[&ka.0].total_cmp(&table.module_avg[&kb.0]))
            .then_with(|| ka.cmp(kb))
    });
    let mut out: Vec<_> = ranked.into_iter().take(n).map(|(k, _)| *k).collect();
    out.sort_unstable();
    Ok(out)
}

/// Spreads `n` new ranks over `unpruned` (ordered by descending module
/// average): `n / k` each, with the remainder going to the first modules.
pub fn distribute_growth(unpruned: &[ModuleId], n: usize) -> BTreeMap<ModuleId, usize> {
    let k = unpruned.len();
    if k == 0 {
        return BTreeMap::new();
    }
    unpruned
        .iter()
        .enumerate()
        .map(|(i, &m)| (m, n / k + usize::from(i < n % k)))
        .filter(|&(_, c)| c > 0)
        .collect()
}

/// Modules with active ranks and nothing pruned, by descending module average.
pub fn growth_candidates(table: &ImportanceTable, prune_set: &[(ModuleId, usize)]) -> Vec<ModuleId> {
    let pruned: BTreeSet<ModuleId> = prune_set.iter().map(|&(m, _)| m).collect();
    let mut out: Vec<(ModuleId, f64)> = table
        .module_avg
        .iter()
        .filter(|(m, _)| !pruned.contains(m))
        .map(|(&m, &a)| (m, a))
        .collect();
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    out.into_iter().map(|(m, _)| m).collect()
}

/// Per-module active ranks after a budget check.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetReport {
    pub per_module: BTreeMap<ModuleId, usize>,
    pub total: usize,
    pub r_target: usize,
}

/// Fails with an invariant error if the network holds more than `r_target` active ranks.
pub fn budget_check(net: &SuperNetwork, r_target: usize) -> Result<BudgetReport> {
    let counts = net.active_rank_count();
    let mut per_module: BTreeMap<ModuleId, usize> =
        net.config.module_ids().into_iter().map(|m| (m, 0)).collect();
    per_module.extend(counts.per_module);
    if counts.total > r_target {
        return Err(Error::Invariant(format!(
            "{} active ranks exceed the budget of {r_target}",
            counts.total
        )));
    }
    Ok(BudgetReport {
        per_module,
        total: counts.total,
        r_target,
    })
}

fn growth_seeds(seeds: SeedTree, round: usize) -> crate::rng::Rng {
    seeds.child("growth").rng(&format!("round{round}"))
}

/// Applies one round's pruning and growth.
pub fn apply_plan(
    net: &mut SuperNetwork,
    round: usize,
    prune_set: &[(ModuleId, usize)],
    grow_map: &BTreeMap<ModuleId, usize>,
    seeds: SeedTree,
) -> Result<()> {
    if let Some(m) = grow_map.keys().find(|m| prune_set.iter().any(|(p, _)| p == *m)) {
        return Err(Error::Invariant(format!("{m} is both pruned and grown in round {round}")));
    }
    let mut by_module: BTreeMap<ModuleId, BTreeSet<usize>> = BTreeMap::new();
    for &(m, r) in prune_set {
        by_module.entry(m).or_default().insert(r);
    }
    for (m, ranks) in &by_module {
        net.adapter_mut(*m)
            .ok_or_else(|| Error::Index(format!("no adapter on {m}")))?
            .prune(ranks)?;
    }
    let mut rng = growth_seeds(seeds, round);
    for (&m, &n) in grow_map {
        net.adapter_mut(m)
            .ok_or_else(|| Error::Index(format!("no adapter on {m}")))?
            .grow(n, &mut rng)?;
    }
    Ok(())
}

/// Re-applies a recorded plan history to a network in its initial state.
pub fn replay_plans(net: &mut SuperNetwork, plans: &[PlanRecord], seeds: SeedTree) -> Result<()> {
    for p in plans {
        apply_plan(net, p.round, &p.prune_ids(), &p.grow_ids(), seeds)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AllocationOutcome {
    pub plans: Vec<AllocationPlan>,
    /// Budget report after each round.
    pub budgets: Vec<BudgetReport>,
    /// Set when allocation ended because too few ranks were left to prune.
    pub exhausted: bool,
    pub final_dev_loss: f64,
}

/// Full workflow on `net`: warm-up training, up to `n_rounds` allocation
/// rounds, then training for the rest of the schedule. `seeds` drives the
/// validation batches, the relaxed scorer and rank growth.
pub fn run_allocation(
    net: &mut SuperNetwork,
    cfg: &AllocationConfig,
    trainer: &mut Trainer,
    scorer: Scorer,
    seeds: SeedTree,
) -> Result<AllocationOutcome> {
    cfg.validate(&net.config, "alloc.")?;
    for m in net.config.module_ids() {
        let ok = net
            .adapter(m)
            .is_some_and(|a| a.rank() == cfg.r_init && a.active_rank_count() == cfg.r_init);
        if !ok {
            return Err(Error::State(format!(
                "{m} must start with {} open ranks",
                cfg.r_init
            )));
        }
    }
    budget_check(net, cfg.r_target)?;

    trainer.train_for(net, cfg.k1_epochs)?;
    let mut plans = Vec::new();
    let mut budgets = Vec::new();
    let mut exhausted = false;
    for round in 0..cfg.n_rounds {
        if trainer.early_stopped() {
            break;
        }
        let before = net.active_rank_count().total;
        if cfg.n_per_round > before {
            exhausted = true;
            break;
        }
        let batch = ValBatch::sample(
            &trainer.splits().dev,
            cfg.b_val,
            seeds.child("b_val").seed(&format!("round{round}")),
        )?;
        let dnas = DnasConfig {
            steps: trainer.steps_for(cfg.k2_epochs),
            batch_size: trainer.config().batch_size,
            weight_lr: trainer.config().lr_peak,
            arch_lr: cfg.dnas_arch_lr,
            seed: seeds.child("dnas").seed(&format!("round{round}")),
        };
        let table = score_all(net, &batch, scorer, &trainer.splits().train, &dnas)?;
        let prune_set = select_prune_set(&table, cfg.n_per_round)?;
        let grow_map = distribute_growth(&growth_candidates(&table, &prune_set), cfg.n_per_round);
        apply_plan(net, round, &prune_set, &grow_map, seeds)?;

        let report = budget_check(net, cfg.r_target)?;
        let expected = if grow_map.is_empty() {
            before - cfg.n_per_round
        } else {
            before
        };
        if report.total != expected {
            return Err(Error::Invariant(format!(
                "round {round}: {} active ranks, expected {expected}",
                report.total
            )));
        }
        budgets.push(report);
        plans.push(AllocationPlan {
            round,
            prune_set,
            grow_map,
            table,
        });
        trainer.structure_changed();
        trainer.train_for(net, cfg.k2_epochs)?;
    }
    let rest = trainer.steps_remaining();
    trainer.train_steps(net, rest)?;
    let final_dev_loss = trainer.finish(net)?;
    budget_check(net, cfg.r_target)?;
    Ok(AllocationOutcome {
        plans,
        budgets,
        exhausted,
        final_dev_loss,
    })
}

/// `layer,module,final_rank` rows for every attachment point.
pub fn heatmap_csv(net: &SuperNetwork) -> Result<String> {
    let report = budget_check(net, usize::MAX)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["layer", "module", "final_rank"])?;
    for (m, r) in &report.per_module {
        w.write_record([m.layer.to_string(), m.kind.to_string(), r.to_string()])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}
