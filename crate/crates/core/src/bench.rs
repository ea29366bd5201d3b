//! Synthetic teacher-student tasks with planted low-rank deltas, brute-force
//! oracles, and a tiny bundled text task.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use alora_tensor::Tensor;
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::adapter::GateMask;
use crate::backbone::{Backbone, Example, Head, ModelConfig, ModuleId, ModuleKind};
use crate::network::SuperNetwork;
use crate::rng::{gaussian, SeedTree};
use crate::{Error, Result};

/// Planted delta rank for one attachment point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantedRank {
    pub layer: usize,
    pub module: ModuleKind,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherSpec {
    /// Attachment points not listed get no delta.
    pub ranks: Vec<PlantedRank>,
    /// Probability that a label is replaced by a uniformly random class.
    pub noise: f64,
    pub n_examples: usize,
    pub seq_len: usize,
    /// Spectral norm of every planted delta.
    pub delta_scale: f64,
    /// Standard deviation of the teacher head.
    pub head_std: f64,
    pub seed: u64,
}

impl TeacherSpec {
    /// Same rank for one module kind in every layer, another rank elsewhere.
    pub fn heterogeneous(model: &ModelConfig, wide: ModuleKind, wide_rank: usize, other_rank: usize, seed: u64) -> Self {
        let ranks = model
            .module_ids()
            .into_iter()
            .map(|m| PlantedRank {
                layer: m.layer,
                module: m.kind,
                rank: if m.kind == wide { wide_rank } else { other_rank },
            })
            .collect();
        Self {
            ranks,
            seed,
            ..Self::zero(model, seed)
        }
    }

    /// No planted deltas at all.
    pub fn zero(model: &ModelConfig, seed: u64) -> Self {
        Self {
            ranks: Vec::new(),
            noise: 0.0,
            n_examples: 2000,
            seq_len: 8.min(model.max_seq_len),
            delta_scale: 1.0,
            head_std: 1.0,
            seed,
        }
    }

    /// Query deltas of rank 6, every other module rank 1.
    pub fn default_for(model: &ModelConfig, seed: u64) -> Self {
        Self::heterogeneous(model, ModuleKind::Query, 6, 1, seed)
    }

    pub fn rank_of(&self, id: ModuleId) -> usize {
        self.ranks
            .iter()
            .filter(|p| p.layer == id.layer && p.module == id.kind)
            .map(|p| p.rank)
            .sum()
    }

    pub fn validate(&self, model: &ModelConfig, prefix: &str) -> Result<()> {
        let field = |n: &str| format!("{prefix}{n}");
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::config(field("noise"), "must lie in [0, 1]"));
        }
        if self.n_examples == 0 {
            return Err(Error::config(field("n_examples"), "must be positive"));
        }
        if self.seq_len == 0 || self.seq_len > model.max_seq_len {
            return Err(Error::config(field("seq_len"), format!("must lie in 1..={}", model.max_seq_len)));
        }
        if !(self.delta_scale > 0.0 && self.delta_scale.is_finite()) {
            return Err(Error::config(field("delta_scale"), "must be positive"));
        }
        if !(self.head_std > 0.0 && self.head_std.is_finite()) {
            return Err(Error::config(field("head_std"), "must be positive"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for (i, p) in self.ranks.iter().enumerate() {
            if p.layer >= model.n_layers {
                return Err(Error::config(format!("{prefix}ranks[{i}].layer"), "beyond n_layers"));
            }
            if !seen.insert((p.layer, p.module)) {
                return Err(Error::config(format!("{prefix}ranks[{i}]"), "duplicate attachment point"));
            }
        }
        Ok(())
    }
}

impl Default for TeacherSpec {
    fn default() -> Self {
        Self::default_for(&ModelConfig::default(), 0)
    }
}

/// Teacher-labelled data plus everything the student is allowed to see.
#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub spec: TeacherSpec,
    pub model: ModelConfig,
    /// Frozen base weights shared by teacher and student.
    pub base: Backbone,
    /// Classification head shared by teacher and student at initialisation.
    pub head: Head,
    pub deltas: BTreeMap<ModuleId, Tensor>,
    pub examples: Vec<Example>,
}

impl SyntheticTask {
    pub fn teacher(&self) -> SuperNetwork {
        let mut backbone = self.base.clone();
        for (m, d) in &self.deltas {
            let w = backbone.blocks[m.layer].projection_mut(m.kind);
            *w = w.add(d).expect("delta shaped like its projection");
        }
        SuperNetwork::new(self.model, backbone, self.head.clone())
    }

    /// Student network with the base weights and no adapters.
    pub fn student(&self) -> SuperNetwork {
        SuperNetwork::new(self.model, self.base.clone(), self.head.clone())
    }

    /// Per-module planted ranks for every attachment point.
    pub fn true_ranks(&self) -> BTreeMap<ModuleId, usize> {
        self.model
            .module_ids()
            .into_iter()
            .map(|m| (m, self.spec.rank_of(m)))
            .collect()
    }
}

fn spectral_norm(t: &Tensor) -> f64 {
    let m = DMatrix::from_row_slice(t.rows(), t.cols(), t.data());
    m.singular_values().max()
}

/// Singular values, largest first.
pub fn singular_values(t: &Tensor) -> Vec<f64> {
    let m = DMatrix::from_row_slice(t.rows(), t.cols(), t.data());
    let mut s: Vec<f64> = m.singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// Builds the teacher, then labels random token sequences by its argmax.
pub fn gen_teacher_task(model: &ModelConfig, spec: &TeacherSpec) -> Result<SyntheticTask> {
    model.validate("model.")?;
    spec.validate(model, "task.")?;
    for p in &spec.ranks {
        let (d_in, d_out) = model.projection_shape(p.module);
        if p.rank > d_in.min(d_out) {
            return Err(Error::Argument(format!(
                "planted rank {} on {}.{} exceeds min({d_in}, {d_out})",
                p.rank, p.layer, p.module
            )));
        }
    }
    let seeds = SeedTree::new(spec.seed);
    let base = Backbone::random(model, &mut seeds.rng("base"));
    let mut head = Head::random(model, spec.head_std, &mut seeds.rng("head"));

    let mut delta_rng = seeds.rng("deltas");
    let mut deltas = BTreeMap::new();
    for m in model.module_ids() {
        let k = spec.rank_of(m);
        if k == 0 {
            continue;
        }
        let (d_in, d_out) = model.projection_shape(m.kind);
        let u = gaussian(&mut delta_rng, d_in, k, 1.0);
        let v = gaussian(&mut delta_rng, k, d_out, 1.0);
        let d = u.matmul(&v)?;
        let s = spectral_norm(&d);
        deltas.insert(m, d.scale(spec.delta_scale / s));
    }

    let mut data_rng = seeds.rng("data");
    let inputs: Vec<Vec<usize>> = (0..spec.n_examples)
        .map(|_| (0..spec.seq_len).map(|_| data_rng.random_range(0..model.vocab_size)).collect())
        .collect();

    let mut task = SyntheticTask {
        spec: spec.clone(),
        model: *model,
        base,
        head: head.clone(),
        deltas,
        examples: Vec::new(),
    };
    let teacher = task.teacher();
    let mut logits = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(64) {
        let exs: Vec<Example> = chunk.iter().map(|t| Example { tokens: t.clone(), label: 0 }).collect();
        let refs: Vec<&Example> = exs.iter().collect();
        let z = teacher.logits(&refs, None)?;
        for i in 0..z.rows() {
            logits.push(z.row_slice(i).to_vec());
        }
    }
    // centre each class logit over the inputs so labels are roughly balanced
    for c in 0..model.n_classes {
        let mean = logits.iter().map(|z| z[c]).sum::<f64>() / logits.len() as f64;
        head.bias.set(0, c, head.bias.get(0, c) - mean);
        for z in &mut logits {
            z[c] -= mean;
        }
    }
    task.head = head;
    let mut noise_rng = seeds.rng("noise");
    task.examples = inputs
        .into_iter()
        .zip(&logits)
        .map(|(tokens, z)| {
            let mut label = crate::network::argmax(z);
            if noise_rng.random::<f64>() < spec.noise {
                label = noise_rng.random_range(0..model.n_classes);
            }
            Example { tokens, label }
        })
        .collect();
    Ok(task)
}

pub const ORACLE_MAX_RANKS: usize = 16;

/// A new network whose adapters physically contain only the ranks that are
/// open and not zeroed by `mask`. Adapters left with no ranks are dropped.
pub fn physical_ablation_oracle(net: &SuperNetwork, mask: &GateMask) -> Result<SuperNetwork> {
    let total: usize = net.adapters().values().map(|a| a.rank()).sum();
    if total > ORACLE_MAX_RANKS {
        return Err(Error::Argument(format!(
            "oracle is limited to {ORACLE_MAX_RANKS} ranks, network has {total}"
        )));
    }
    let mut out = SuperNetwork::new(net.config, net.backbone.clone(), net.head.clone());
    for (id, adapter) in net.adapters() {
        let keep: Vec<usize> = adapter
            .active_ranks()
            .into_iter()
            .filter(|&r| !mask.is_zeroed(*id, r))
            .collect();
        if !keep.is_empty() {
            out.insert_adapter(adapter.compacted(&keep)?)?;
        }
    }
    Ok(out)
}

/// Rank correlation mapped to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankRecovery {
    pub value: f64,
    /// True when either vector is constant and the correlation is undefined.
    pub degenerate: bool,
}

fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman correlation with tie-averaged ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    assert_eq!(x.len(), y.len());
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        None
    } else {
        Some(sxy / (sxx * syy).sqrt())
    }
}

/// Agreement between a final per-module allocation and the planted ranks.
pub fn rank_recovery_metric(allocation: &BTreeMap<ModuleId, usize>, truth: &BTreeMap<ModuleId, usize>) -> RankRecovery {
    let keys: Vec<ModuleId> = truth.keys().copied().collect();
    let x: Vec<f64> = keys.iter().map(|k| allocation.get(k).copied().unwrap_or(0) as f64).collect();
    let y: Vec<f64> = keys.iter().map(|k| truth[k] as f64).collect();
    match spearman(&x, &y) {
        Some(rho) => RankRecovery {
            value: (rho + 1.0) / 2.0,
            degenerate: false,
        },
        None => RankRecovery {
            value: 0.5,
            degenerate: true,
        },
    }
}

const POSITIVE: [&str; 16] = [
    "good", "great", "fine", "nice", "superb", "lovely", "brilliant", "fun", "warm", "charming", "clever",
    "moving", "solid", "sweet", "smart", "witty",
];
const NEGATIVE: [&str; 16] = [
    "bad", "awful", "dull", "poor", "boring", "weak", "bland", "messy", "flat", "silly", "stale", "clumsy",
    "tedious", "grim", "lame", "cheap",
];
const NOUNS: [&str; 16] = [
    "film", "movie", "plot", "cast", "script", "story", "ending", "score", "show", "acting", "scenes", "pace",
    "drama", "lead", "music", "jokes",
];
const LEADS: [&str; 4] = ["", "so ", "very ", "not "];

/// Short character-level review snippets labelled 1 (positive) or 0 (negative).
/// A leading "not " flips the label.
pub fn smoke_sentiment_corpus() -> Vec<(String, usize)> {
    let mut out = Vec::new();
    for lead in LEADS {
        for (words, label) in [(&POSITIVE, 1usize), (&NEGATIVE, 0usize)] {
            for adj in words.iter() {
                for noun in NOUNS {
                    let flipped = if lead == "not " { 1 - label } else { label };
                    out.push((format!("{lead}{adj} {noun}"), flipped));
                }
            }
        }
    }
    out
}

/// Byte-level encoding, truncated to `max_len`, every byte folded into `vocab`.
pub fn encode_chars(text: &str, vocab: usize, max_len: usize) -> Vec<usize> {
    text.bytes().take(max_len).map(|b| b as usize % vocab).collect()
}

/// The bundled corpus as examples, shuffled with `seed`.
pub fn smoke_sentiment_task(model: &ModelConfig, seed: u64) -> Vec<Example> {
    let mut out: Vec<Example> = smoke_sentiment_corpus()
        .into_iter()
        .map(|(text, label)| Example {
            tokens: encode_chars(&text, model.vocab_size, model.max_seq_len),
            label,
        })
        .collect();
    out.shuffle(&mut SeedTree::new(seed).rng("smoke"));
    out
}

pub fn write_task_jsonl(path: &Path, examples: &[Example]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for e in examples {
        serde_json::to_writer(&mut f, e)?;
        f.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

pub fn read_task_jsonl(path: &Path) -> Result<Vec<Example>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: Example = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(ex);
    }
    Ok(out)
}

/// Writes `examples` as JSON lines next to a `<stem>.spec.json` sidecar.
pub fn write_task_with_spec(path: &Path, examples: &[Example], spec: &TeacherSpec) -> Result<()> {
    write_task_jsonl(path, examples)?;
    let sidecar = path.with_extension("spec.json");
    std::fs::write(&sidecar, serde_json::to_string_pretty(spec)?).map_err(|e| Error::io(&sidecar, e))
}

/// The sidecar spec written by [`write_task_with_spec`], if present.
pub fn read_task_spec(path: &Path) -> Result<Option<TeacherSpec>> {
    let sidecar = path.with_extension("spec.json");
    if !sidecar.is_file() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
    serde_json::from_str(&text)
        .map(Some)
        .map_err(|e| Error::config(sidecar.display().to_string(), e.to_string()))
}
