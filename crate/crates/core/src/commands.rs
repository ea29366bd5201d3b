//! The four top-level commands and their exit-code contract:
//! 0 success, 2 configuration or argument error, 3 invariant or verification failure.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use alora_tensor::Tensor;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::allocator::{budget_check, heatmap_csv, PlanRecord};
use crate::backbone::{Example, ModuleId, ModuleKind};
use crate::checkpoint;
use crate::experiment::{execute, RunConfig, RunOutput, TaskSource};
use crate::network::SuperNetwork;
use crate::rng::SeedTree;
use crate::scoring::Scorer;
use crate::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_INVARIANT: i32 = 3;

pub const CHECKPOINT_FILE: &str = "checkpoint.alora";
pub const PLANS_FILE: &str = "plans.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const HEATMAP_FILE: &str = "heatmap.csv";
pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const REPORT_HEATMAP_FILE: &str = "report_heatmap.csv";
pub const COMPARE_FILE: &str = "compare.csv";

/// Largest logit difference tolerated between adapter and merged forms.
pub const MERGE_PROBE_TOL: f64 = 1e-6;

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Invariant(_) | Error::State(_) | Error::Tensor(_) => EXIT_INVARIANT,
        _ => EXIT_CONFIG,
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn scores_file(round: usize) -> String {
    format!("importance_round_{round}.csv")
}

/// Headline numbers of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub final_dev_loss: f64,
    pub test_loss: f64,
    pub active_ranks_total: usize,
    pub rounds: usize,
    pub rank_recovery: Option<f64>,
}

impl RunSummary {
    fn from_output(out: &RunOutput) -> Self {
        Self {
            final_dev_loss: out.dev_loss,
            test_loss: out.test_loss,
            active_ranks_total: out.allocation.values().sum(),
            rounds: out.outcome.plans.len(),
            rank_recovery: out.recovery.map(|r| r.value),
        }
    }
}

/// Applies command-line overrides to a loaded config.
pub fn apply_overrides(mut cfg: RunConfig, seed: Option<u64>, out: Option<&Path>, scorer: Option<Scorer>) -> RunConfig {
    if let Some(s) = seed {
        cfg = cfg.with_seed(s);
    }
    if let Some(o) = out {
        cfg.out_dir = o.to_path_buf();
    }
    if let Some(s) = scorer {
        cfg.scorer = s;
    }
    cfg
}

/// Runs the allocation workflow and writes every artifact into `cfg.out_dir`.
pub fn cmd_run(cfg: &RunConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let dir = &cfg.out_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write(&dir.join(RESOLVED_CONFIG_FILE), cfg.to_json()?)?;

    let out = execute(cfg)?;
    checkpoint::save(&out.net, &dir.join(CHECKPOINT_FILE))?;
    let mut records = Vec::new();
    for plan in &out.outcome.plans {
        let name = scores_file(plan.round);
        write(&dir.join(&name), plan.table.to_csv()?)?;
        records.push(plan.record(name));
    }
    write(&dir.join(PLANS_FILE), serde_json::to_string_pretty(&records)?)?;
    let mut metrics = String::new();
    for m in &out.metrics {
        metrics.push_str(&serde_json::to_string(m)?);
        metrics.push('\n');
    }
    write(&dir.join(METRICS_FILE), metrics)?;
    write(&dir.join(HEATMAP_FILE), heatmap_csv(&out.net)?)?;
    let summary = RunSummary::from_output(&out);
    write(&dir.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

/// Deterministic random token sequences for the merge check.
pub fn probe_batch(net: &SuperNetwork, n: usize, seed: u64) -> Vec<Example> {
    let cfg = net.config;
    let mut rng = SeedTree::new(seed).rng("probe");
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

/// Largest absolute logit difference between two networks on `batch`.
pub fn forward_gap(a: &SuperNetwork, b: &SuperNetwork, batch: &[Example]) -> Result<f64> {
    let refs: Vec<&Example> = batch.iter().collect();
    let la: Tensor = a.logits(&refs, None)?;
    let lb: Tensor = b.logits(&refs, None)?;
    Ok(la.max_abs_diff(&lb)?)
}

/// Folds every adapter into its base weight and writes the dense network.
/// The adapter and merged forms must agree on a probe batch first.
pub fn cmd_merge(checkpoint_path: &Path, out_path: &Path) -> Result<f64> {
    if checkpoint_path == out_path {
        return Err(Error::Argument("refusing to overwrite the input checkpoint".into()));
    }
    let net = checkpoint::load(checkpoint_path)?;
    let merged = net.merged()?;
    let probe = probe_batch(&net, 16, 0);
    let gap = forward_gap(&net, &merged, &probe)?;
    if !(gap <= MERGE_PROBE_TOL) {
        return Err(Error::Invariant(format!(
            "merged forward differs by {gap:e} (tolerance {MERGE_PROBE_TOL:e})"
        )));
    }
    checkpoint::save(&merged, out_path)?;
    Ok(gap)
}

/// Rank table, totals, and per-round plan summary for a run directory.
/// Also writes the heatmap CSV to `out` (default `<run_dir>/report_heatmap.csv`).
pub fn cmd_report(run_dir: &Path, out: Option<&Path>) -> Result<String> {
    let ckpt = run_dir.join(CHECKPOINT_FILE);
    let plans_path = run_dir.join(PLANS_FILE);
    for p in [&ckpt, &plans_path] {
        if !p.is_file() {
            return Err(Error::config(p.display().to_string(), "missing run artifact"));
        }
    }
    let net = checkpoint::load(&ckpt)?;
    let text = std::fs::read_to_string(&plans_path).map_err(|e| Error::io(&plans_path, e))?;
    let plans: Vec<PlanRecord> = serde_json::from_str(&text)
        .map_err(|e| Error::config(plans_path.display().to_string(), e.to_string()))?;
    let report = budget_check(&net, usize::MAX)?;

    let mut s = String::new();
    let _ = write!(s, "{:<6}", "layer");
    for k in ModuleKind::ALL {
        let _ = write!(s, "{:>8}", k.name());
    }
    let _ = writeln!(s, "{:>8}", "total");
    let mut col_totals = [0usize; 7];
    for layer in 0..net.config.n_layers {
        let _ = write!(s, "{layer:<6}");
        let mut row = 0;
        for (i, k) in ModuleKind::ALL.into_iter().enumerate() {
            let r = report.per_module[&ModuleId::new(layer, k)];
            row += r;
            col_totals[i] += r;
            let _ = write!(s, "{r:>8}");
        }
        let _ = writeln!(s, "{row:>8}");
    }
    let _ = write!(s, "{:<6}", "total");
    for t in col_totals {
        let _ = write!(s, "{t:>8}");
    }
    let _ = writeln!(s, "{:>8}", report.total);
    for p in &plans {
        let grown: usize = p.grow_map.iter().map(|g| g.count).sum();
        let _ = writeln!(
            s,
            "round {}: pruned {}, grew {} across {} modules",
            p.round,
            p.prune_set.len(),
            grown,
            p.grow_map.len()
        );
    }
    let csv_path: PathBuf = out.map_or_else(|| run_dir.join(REPORT_HEATMAP_FILE), Path::to_path_buf);
    write(&csv_path, heatmap_csv(&net)?)?;
    Ok(s)
}

/// One row of the scorer comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub scorer: Scorer,
    pub seed: u64,
    pub final_dev_loss: f64,
    pub rank_recovery: Option<f64>,
}

/// Config for one cell of the comparison matrix. Teacher tasks are
/// regenerated with the cell's seed so every seed is a fresh task.
pub fn compare_cell(cfg: &RunConfig, scorer: Scorer, seed: u64) -> RunConfig {
    let mut c = cfg.clone().with_seed(seed);
    c.scorer = scorer;
    if let TaskSource::Teacher(spec) = &mut c.task {
        spec.seed = seed;
    }
    c
}

/// Runs every scorer on the same seeds and writes `compare.csv` into `cfg.out_dir`.
pub fn cmd_compare(cfg: &RunConfig, scorers: &[Scorer], seeds: &[u64]) -> Result<Vec<CompareRow>> {
    let distinct: std::collections::BTreeSet<Scorer> = scorers.iter().copied().collect();
    if distinct.len() < 2 || distinct.len() != scorers.len() {
        return Err(Error::Argument("compare needs at least two distinct scorers".into()));
    }
    if seeds.is_empty() {
        return Err(Error::Argument("compare needs at least one seed".into()));
    }
    cfg.validate()?;
    let mut rows = Vec::new();
    for &scorer in scorers {
        for &seed in seeds {
            let out = execute(&compare_cell(cfg, scorer, seed))?;
            rows.push(CompareRow {
                scorer,
                seed,
                final_dev_loss: out.dev_loss,
                rank_recovery: out.recovery.map(|r| r.value),
            });
        }
    }
    let dir = &cfg.out_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["scorer", "seed", "final_dev_loss", "rank_recovery"])?;
    for r in &rows {
        w.write_record([
            r.scorer.to_string(),
            r.seed.to_string(),
            format!("{:e}", r.final_dev_loss),
            r.rank_recovery.map(|v| format!("{v:e}")).unwrap_or_default(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    write(&dir.join(COMPARE_FILE), bytes)?;
    Ok(rows)
}

/// Median of the final dev loss per scorer.
pub fn median_dev_loss(rows: &[CompareRow]) -> BTreeMap<Scorer, f64> {
    let mut by: BTreeMap<Scorer, Vec<f64>> = BTreeMap::new();
    for r in rows {
        by.entry(r.scorer).or_default().push(r.final_dev_loss);
    }
    by.into_iter().map(|(s, v)| (s, median(&v))).collect()
}

pub fn median(v: &[f64]) -> f64 {
    let mut v = v.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}
