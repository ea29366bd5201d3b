//! Per-rank importance scores.
//!
//! The ablation score of rank `r` is `S(M) - S(M without r) + S(M with only r)`,
//! where `S` is the negative mean cross-entropy on a validation batch and the
//! ablations are gate masks over the currently active ranks.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use alora_tensor::{sigmoid, Tape, Tensor};
use rand::seq::index::sample;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapter::GateMask;
use crate::backbone::{Example, ModuleId};
use crate::network::{ForwardOptions, GateMode, ParamId, SuperNetwork};
use crate::rng::SeedTree;
use crate::trainer::{gradient_step, AdamW};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scorer {
    Ablora,
    Dnas,
    Sensitivity,
}

impl Scorer {
    pub const ALL: [Scorer; 3] = [Scorer::Ablora, Scorer::Dnas, Scorer::Sensitivity];

    pub fn name(self) -> &'static str {
        match self {
            Scorer::Ablora => "ablora",
            Scorer::Dnas => "dnas",
            Scorer::Sensitivity => "sensitivity",
        }
    }
}

impl fmt::Display for Scorer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scorer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scorer::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown scorer {s:?}")))
    }
}

/// Validation examples used for one scoring pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ValBatch {
    pub examples: Vec<Example>,
    pub id: String,
}

impl ValBatch {
    /// Draws `b_val` dev examples without replacement (all of them if the split is smaller).
    pub fn sample(dev: &[Example], b_val: usize, seed: u64) -> Result<Self> {
        if dev.is_empty() || b_val == 0 {
            return Err(Error::Argument("validation batch needs a non-empty dev split and b_val > 0".into()));
        }
        let mut rng = SeedTree::new(seed).rng("b_val");
        let k = b_val.min(dev.len());
        let mut idx = sample(&mut rng, dev.len(), k).into_vec();
        idx.sort_unstable();
        Ok(Self {
            examples: idx.iter().map(|&i| dev[i].clone()).collect(),
            id: format!("dev:{seed:016x}:{k}"),
        })
    }

    pub fn from_examples(examples: Vec<Example>, id: impl Into<String>) -> Self {
        Self {
            examples,
            id: id.into(),
        }
    }

    fn refs(&self) -> Vec<&Example> {
        self.examples.iter().collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceTable {
    pub entries: BTreeMap<(ModuleId, usize), f64>,
    pub module_avg: BTreeMap<ModuleId, f64>,
    pub batch_id: String,
}

impl ImportanceTable {
    pub fn from_entries(entries: BTreeMap<(ModuleId, usize), f64>, batch_id: impl Into<String>) -> Self {
        let mut sums: BTreeMap<ModuleId, (f64, usize)> = BTreeMap::new();
        for (&(m, _), &s) in &entries {
            let e = sums.entry(m).or_default();
            e.0 += s;
            e.1 += 1;
        }
        let module_avg = sums.into_iter().map(|(m, (s, n))| (m, s / n as f64)).collect();
        Self {
            entries,
            module_avg,
            batch_id: batch_id.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn score(&self, module: ModuleId, rank: usize) -> Option<f64> {
        self.entries.get(&(module, rank)).copied()
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["layer", "module", "rank_index", "score", "module_avg"])?;
        for (&(m, r), &s) in &self.entries {
            w.write_record([
                m.layer.to_string(),
                m.kind.to_string(),
                r.to_string(),
                format!("{s:e}"),
                format!("{:e}", self.module_avg[&m]),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
    }
}

/// `S(mask)`: negative mean cross-entropy on the batch.
pub fn metric(net: &SuperNetwork, mask: &GateMask, batch: &ValBatch) -> Result<f64> {
    Ok(-net.loss(&batch.refs(), Some(mask))?)
}

fn only_mask(active: &[(ModuleId, usize)], keep: (ModuleId, usize)) -> GateMask {
    GateMask::zeroing(active.iter().copied().filter(|&x| x != keep))
}

fn require_active(active: &[(ModuleId, usize)], r: (ModuleId, usize)) -> Result<()> {
    if active.contains(&r) {
        Ok(())
    } else {
        Err(Error::State(format!("rank {} of {} is not active", r.1, r.0)))
    }
}

/// Ablation score of a single active rank.
pub fn ab_lora_score(net: &SuperNetwork, r: (ModuleId, usize), batch: &ValBatch) -> Result<f64> {
    let active = net.active_ranks();
    require_active(&active, r)?;
    let full = metric(net, &GateMask::new(), batch)?;
    let without = metric(net, &GateMask::zeroing([r]), batch)?;
    let only = metric(net, &only_mask(&active, r), batch)?;
    Ok(full - without + only)
}

/// Worker count for scoring: `ALORA_THREADS` if set, otherwise rayon's default.
pub fn scoring_threads() -> usize {
    std::env::var("ALORA_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(rayon::current_num_threads)
}

fn run_parallel<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    let threads = scoring_threads();
    if threads <= 1 {
        return f();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}

/// Ablation scores for every active rank, `1 + 2n` metric evaluations.
/// With `include_full = false` the shared `S(M)` term is dropped; rankings
/// are unchanged because it is the same constant for every rank.
pub fn ablora_table(net: &SuperNetwork, batch: &ValBatch, include_full: bool) -> Result<ImportanceTable> {
    let active = net.active_ranks();
    let full = if include_full {
        metric(net, &GateMask::new(), batch)?
    } else {
        0.0
    };
    let terms: Vec<Result<(f64, f64)>> = run_parallel(|| {
        active
            .par_iter()
            .map(|&r| {
                let without = metric(net, &GateMask::zeroing([r]), batch)?;
                let only = metric(net, &only_mask(&active, r), batch)?;
                Ok((without, only))
            })
            .collect()
    });
    let mut entries = BTreeMap::new();
    for (&r, t) in active.iter().zip(terms) {
        let (without, only) = t?;
        entries.insert(r, full - without + only);
    }
    Ok(ImportanceTable::from_entries(entries, batch.id.clone()))
}

/// Settings for the relaxed-gate scorer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DnasConfig {
    /// Alternating weight/logit step pairs.
    pub steps: usize,
    pub batch_size: usize,
    pub weight_lr: f64,
    pub arch_lr: f64,
    pub seed: u64,
}

impl Default for DnasConfig {
    fn default() -> Self {
        Self {
            steps: 25,
            batch_size: 16,
            weight_lr: 1e-3,
            arch_lr: 5e-2,
            seed: 0,
        }
    }
}

/// `2 · sigmoid(a')` for one rank.
pub fn arch_weight(net: &SuperNetwork, r: (ModuleId, usize)) -> Result<f64> {
    let adapter = net
        .adapter(r.0)
        .ok_or_else(|| Error::Index(format!("no adapter on {}", r.0)))?;
    if r.1 >= adapter.rank() {
        return Err(Error::Index(format!("rank {} out of range for {}", r.1, r.0)));
    }
    Ok(2.0 * sigmoid(adapter.arch_logits().get(0, r.1)))
}

/// Relaxation phase on a private copy of `net`: gates become `2·sigmoid(a')`,
/// then weight steps on one half of `train` alternate with logit steps on the
/// other half. Scores are the resulting relaxed gate values.
pub fn dnas_table(net: &SuperNetwork, train: &[Example], cfg: &DnasConfig, batch_id: &str) -> Result<ImportanceTable> {
    if train.len() < 2 {
        return Err(Error::Argument("relaxation phase needs at least two training examples".into()));
    }
    let mut relaxed = net.clone();
    for id in relaxed.adapters().keys().copied().collect::<Vec<_>>() {
        let a = relaxed.adapter_mut(id).expect("listed adapter");
        *a.arch_logits_mut() = Tensor::zeros(1, a.rank());
    }
    let d1: Vec<&Example> = train.iter().step_by(2).collect();
    let d2: Vec<&Example> = train.iter().skip(1).step_by(2).collect();
    let mut rng = SeedTree::new(cfg.seed).rng("dnas");
    let mut w_opt = AdamW::new(0.9, 0.999, 1e-8, 0.0);
    let mut a_opt = AdamW::new(0.9, 0.999, 1e-8, 0.0);
    let opts = ForwardOptions {
        gates: GateMode::Relaxed,
        ..ForwardOptions::train()
    };
    let w_ids = relaxed.trainable_ids();
    let a_ids = relaxed.arch_ids();
    for _ in 0..cfg.steps {
        let b1 = draw(&mut rng, &d1, cfg.batch_size);
        gradient_step(&mut relaxed, &b1, opts, &w_ids, &mut w_opt, cfg.weight_lr)?;
        let b2 = draw(&mut rng, &d2, cfg.batch_size);
        gradient_step(&mut relaxed, &b2, opts, &a_ids, &mut a_opt, cfg.arch_lr)?;
    }
    let mut entries = BTreeMap::new();
    for r in relaxed.active_ranks() {
        entries.insert(r, arch_weight(&relaxed, r)?);
    }
    Ok(ImportanceTable::from_entries(entries, batch_id))
}

fn draw<'a>(rng: &mut crate::rng::Rng, pool: &[&'a Example], n: usize) -> Vec<&'a Example> {
    (0..n.min(pool.len()))
        .map(|_| pool[rng.random_range(0..pool.len())])
        .collect()
}

/// First-order saliency: sum of `|θ · ∂L/∂θ|` over the rank's column of A and row of B.
pub fn sensitivity_table(net: &SuperNetwork, batch: &ValBatch) -> Result<ImportanceTable> {
    let mut tape = Tape::new();
    let (loss, pass) = net.forward_loss(&mut tape, &batch.refs(), ForwardOptions::train())?;
    tape.backward(loss)?;
    let grads: BTreeMap<ParamId, Tensor> = pass
        .params
        .iter()
        .map(|(id, v)| (*id, tape.grad_tensor(*v)))
        .collect();
    let mut entries = BTreeMap::new();
    for (m, r) in net.active_ranks() {
        let adapter = net.adapter(m).expect("active rank has an adapter");
        let ga = &grads[&ParamId::AdapterA(m)];
        let gb = &grads[&ParamId::AdapterB(m)];
        let a = adapter.a();
        let b = adapter.b();
        let mut s = 0.0;
        for i in 0..a.rows() {
            s += (a.get(i, r) * ga.get(i, r)).abs();
        }
        for j in 0..b.cols() {
            s += (b.get(r, j) * gb.get(r, j)).abs();
        }
        entries.insert((m, r), s);
    }
    Ok(ImportanceTable::from_entries(entries, batch.id.clone()))
}

/// Scores every active rank with the chosen scorer. `train` and `dnas` are
/// only consulted by the relaxed-gate scorer.
pub fn score_all(
    net: &SuperNetwork,
    batch: &ValBatch,
    scorer: Scorer,
    train: &[Example],
    dnas: &DnasConfig,
) -> Result<ImportanceTable> {
    match scorer {
        Scorer::Ablora => ablora_table(net, batch, true),
        Scorer::Dnas => dnas_table(net, train, dnas, &batch.id),
        Scorer::Sensitivity => sensitivity_table(net, batch),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{ModelConfig, ModuleKind};
    use crate::rng::gaussian;

    fn toy() -> (SuperNetwork, ValBatch) {
        let cfg = ModelConfig {
            n_layers: 1,
            d_model: 4,
            d_ff: 6,
            n_heads: 2,
            vocab_size: 10,
            max_seq_len: 4,
            n_classes: 3,
        };
        let seeds = SeedTree::new(3);
        let mut net = SuperNetwork::random(cfg, seeds);
        let mut rng = seeds.rng("adapters");
        for kind in [ModuleKind::Query, ModuleKind::Up] {
            let id = ModuleId::new(0, kind);
            let (i, o) = cfg.projection_shape(kind);
            let mut a = crate::AloraAdapter::new(id, i, o, 2, &mut rng);
            *a.a_mut() = gaussian(&mut rng, i, 2, 0.7);
            *a.b_mut() = gaussian(&mut rng, 2, o, 0.7);
            net.insert_adapter(a).unwrap();
        }
        let examples = (0..12)
            .map(|i| Example {
                tokens: vec![i % 10, (3 * i + 1) % 10, (i * i) % 10],
                label: i % 3,
            })
            .collect();
        (net, ValBatch::from_examples(examples, "toy"))
    }

    #[test]
    fn metric_is_pure_and_repeatable() {
        let (net, batch) = toy();
        let before = net.clone();
        let a = metric(&net, &GateMask::new(), &batch).unwrap();
        let b = metric(&net, &GateMask::new(), &batch).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        assert_eq!(net, before);
    }

    #[test]
    fn zero_b_row_rank() {
        let (mut net, batch) = toy();
        let id = ModuleId::new(0, ModuleKind::Up);
        let b = net.adapter_mut(id).unwrap().b_mut();
        for j in 0..b.cols() {
            b.set(1, j, 0.0);
        }
        let full = metric(&net, &GateMask::new(), &batch).unwrap();
        let without = metric(&net, &GateMask::zeroing([(id, 1)]), &batch).unwrap();
        assert!((full - without).abs() < 1e-12);
        let active = net.active_ranks();
        let only = metric(&net, &only_mask(&active, (id, 1)), &batch).unwrap();
        assert!((ab_lora_score(&net, (id, 1), &batch).unwrap() - only).abs() < 1e-12);
    }

    #[test]
    fn single_active_rank() {
        let (mut net, batch) = toy();
        let q = ModuleId::new(0, ModuleKind::Query);
        let up = ModuleId::new(0, ModuleKind::Up);
        net.adapter_mut(q).unwrap().prune(&[0, 1].into()).unwrap();
        net.adapter_mut(up).unwrap().prune(&[0].into()).unwrap();
        let full = metric(&net, &GateMask::new(), &batch).unwrap();
        let none = metric(&net, &GateMask::zeroing([(up, 1)]), &batch).unwrap();
        let is = ab_lora_score(&net, (up, 1), &batch).unwrap();
        assert!((is - (2.0 * full - none)).abs() < 1e-12);
        assert!(matches!(ab_lora_score(&net, (q, 0), &batch), Err(Error::State(_))));
    }

    #[test]
    fn table_matches_single_scores_in_any_order() {
        let (net, batch) = toy();
        let table = ablora_table(&net, &batch, true).unwrap();
        assert_eq!(table.len(), 4);
        let mut ranks = net.active_ranks();
        ranks.reverse();
        for r in ranks {
            let s = ab_lora_score(&net, r, &batch).unwrap();
            assert_eq!(s.to_bits(), table.entries[&r].to_bits());
        }
        for (m, avg) in &table.module_avg {
            let v: Vec<f64> = table.entries.iter().filter(|(k, _)| k.0 == *m).map(|(_, s)| *s).collect();
            assert!((avg - v.iter().sum::<f64>() / v.len() as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn dropping_shared_term_keeps_order() {
        let (net, batch) = toy();
        let with = ablora_table(&net, &batch, true).unwrap();
        let without = ablora_table(&net, &batch, false).unwrap();
        let order = |t: &ImportanceTable| {
            let mut v: Vec<_> = t.entries.iter().collect();
            v.sort_by(|a, b| a.1.total_cmp(b.1));
            v.into_iter().map(|(k, _)| *k).collect::<Vec<_>>()
        };
        assert_eq!(order(&with), order(&without));
    }

    #[test]
    fn scorers_are_pure() {
        let (net, batch) = toy();
        let sum = net.frozen_checksum();
        let before = net.clone();
        for scorer in Scorer::ALL {
            let t = score_all(&net, &batch, scorer, &batch.examples, &DnasConfig::default()).unwrap();
            assert_eq!(t.len(), 4);
        }
        assert_eq!(net, before);
        assert_eq!(net.frozen_checksum(), sum);
    }

    #[test]
    fn untrained_arch_weights_are_one() {
        let (net, _) = toy();
        for r in net.active_ranks() {
            assert_eq!(arch_weight(&net, r).unwrap(), 1.0);
        }
        let cfg = DnasConfig {
            steps: 0,
            ..DnasConfig::default()
        };
        let (_, batch) = toy();
        let t = dnas_table(&net, &batch.examples, &cfg, "x").unwrap();
        assert!(t.entries.values().all(|&s| s == 1.0));
    }

    #[test]
    fn dnas_scores_in_open_interval() {
        let (net, batch) = toy();
        let t = dnas_table(&net, &batch.examples, &DnasConfig::default(), "x").unwrap();
        assert!(t.entries.values().all(|&s| s > 0.0 && s < 2.0));
    }

    #[test]
    fn sensitivity_hand_computed_rank_one() {
        let cfg = ModelConfig {
            n_layers: 1,
            d_model: 4,
            d_ff: 6,
            n_heads: 2,
            vocab_size: 10,
            max_seq_len: 4,
            n_classes: 3,
        };
        let seeds = SeedTree::new(9);
        let mut net = SuperNetwork::random(cfg, seeds);
        let mut rng = seeds.rng("a");
        let id = ModuleId::new(0, ModuleKind::Value);
        let mut a = crate::AloraAdapter::new(id, 4, 4, 1, &mut rng);
        *a.b_mut() = gaussian(&mut rng, 1, 4, 0.5);
        net.insert_adapter(a).unwrap();
        let (_, batch) = toy();

        // reference: Richardson-extrapolated central differences per entry
        let loss_at = |is_a: bool, i: usize, j: usize, theta: f64| {
            let mut n = net.clone();
            let ad = n.adapter_mut(id).unwrap();
            let t = if is_a { ad.a_mut() } else { ad.b_mut() };
            t.set(i, j, theta);
            n.loss(&batch.refs(), None).unwrap()
        };
        let diff = |is_a: bool, i: usize, j: usize, theta: f64, h: f64| {
            (loss_at(is_a, i, j, theta + h) - loss_at(is_a, i, j, theta - h)) / (2.0 * h)
        };
        let mut expected = 0.0;
        for (is_a, rows, cols) in [(true, 4, 1), (false, 1, 4)] {
            for i in 0..rows {
                for j in 0..cols {
                    let ad = net.adapter(id).unwrap();
                    let theta = if is_a { ad.a().get(i, j) } else { ad.b().get(i, j) };
                    let h = 1e-3;
                    let g = (4.0 * diff(is_a, i, j, theta, h / 2.0) - diff(is_a, i, j, theta, h)) / 3.0;
                    expected += (theta * g).abs();
                }
            }
        }
        let t = sensitivity_table(&net, &batch).unwrap();
        let got = t.entries[&(id, 0)];
        assert!(got >= 0.0);
        assert!((got - expected).abs() < 1e-10, "{got} vs {expected}");
    }

    #[test]
    fn csv_columns() {
        let (net, batch) = toy();
        let csv = ablora_table(&net, &batch, true).unwrap().to_csv().unwrap();
        assert_eq!(csv.lines().next().unwrap(), "layer,module,rank_index,score,module_avg");
        assert_eq!(csv.lines().count(), 5);
    }

    #[test]
    fn val_batch_sampling() {
        let (_, batch) = toy();
        let a = ValBatch::sample(&batch.examples, 5, 1).unwrap();
        assert_eq!(a, ValBatch::sample(&batch.examples, 5, 1).unwrap());
        assert_eq!(a.examples.len(), 5);
        assert_eq!(ValBatch::sample(&batch.examples, 50, 1).unwrap().examples.len(), 12);
        assert!(a.examples.iter().all(|e| batch.examples.contains(e)));
    }
}
