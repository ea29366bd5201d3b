//! Frozen LlaMA-style transformer block: multi-head attention followed by a
//! gated feed-forward network, with seven projection matrices per block that
//! can each carry an adapter.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;

use alora_tensor::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::rng::{gaussian, Rng};
use crate::{Error, Result};

/// Number of adapter attachment points per block.
pub const N_MOD: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModuleKind {
    Query,
    Key,
    Value,
    Output,
    Gate,
    Up,
    Down,
}

impl ModuleKind {
    pub const ALL: [ModuleKind; N_MOD] = [
        ModuleKind::Query,
        ModuleKind::Key,
        ModuleKind::Value,
        ModuleKind::Output,
        ModuleKind::Gate,
        ModuleKind::Up,
        ModuleKind::Down,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModuleKind::Query => "query",
            ModuleKind::Key => "key",
            ModuleKind::Value => "value",
            ModuleKind::Output => "output",
            ModuleKind::Gate => "gate",
            ModuleKind::Up => "up",
            ModuleKind::Down => "down",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    pub fn is_attention(self) -> bool {
        matches!(
            self,
            ModuleKind::Query | ModuleKind::Key | ModuleKind::Value | ModuleKind::Output
        )
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for ModuleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One adapter position: `(layer index, module kind)`. Orders by layer first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ModuleId {
    pub layer: usize,
    pub kind: ModuleKind,
}

impl ModuleId {
    pub fn new(layer: usize, kind: ModuleKind) -> Self {
        Self { layer, kind }
    }
}

impl fmt::Display for ModuleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.layer, self.kind)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub n_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            d_model: 32,
            d_ff: 86,
            n_heads: 4,
            vocab_size: 128,
            max_seq_len: 16,
            n_classes: 4,
        }
    }
}

impl ModelConfig {
    /// Checks field constraints; errors carry a path relative to `prefix`.
    pub fn validate(&self, prefix: &str) -> Result<()> {
        let field = |name: &str| format!("{prefix}{name}");
        for (name, v) in [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("n_heads", self.n_heads),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ] {
            if v == 0 {
                return Err(Error::config(field(name), "must be positive"));
            }
        }
        if self.n_classes < 2 {
            return Err(Error::config(field("n_classes"), "need at least 2 classes"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::config(
                field("n_heads"),
                format!("d_model {} not divisible by {}", self.d_model, self.n_heads),
            ));
        }
        Ok(())
    }

    /// `(d_in, d_out)` of the projection matrix for `kind`.
    pub fn projection_shape(&self, kind: ModuleKind) -> (usize, usize) {
        match kind {
            ModuleKind::Gate | ModuleKind::Up => (self.d_model, self.d_ff),
            ModuleKind::Down => (self.d_ff, self.d_model),
            _ => (self.d_model, self.d_model),
        }
    }

    pub fn module_ids(&self) -> Vec<ModuleId> {
        (0..self.n_layers)
            .flat_map(|l| ModuleKind::ALL.map(|k| ModuleId::new(l, k)))
            .collect()
    }
}

/// Frozen weights of one transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    projections: [Tensor; N_MOD],
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
}

impl BlockWeights {
    pub fn random(config: &ModelConfig, rng: &mut Rng) -> Self {
        let projections = ModuleKind::ALL.map(|kind| {
            let (d_in, d_out) = config.projection_shape(kind);
            gaussian(rng, d_in, d_out, 1.0 / (d_in as f64).sqrt())
        });
        let d = config.d_model;
        Self {
            projections,
            ln1_gamma: Tensor::full(1, d, 1.0),
            ln1_beta: Tensor::zeros(1, d),
            ln2_gamma: Tensor::full(1, d, 1.0),
            ln2_beta: Tensor::zeros(1, d),
        }
    }

    pub fn from_parts(
        projections: [Tensor; N_MOD],
        ln1: (Tensor, Tensor),
        ln2: (Tensor, Tensor),
    ) -> Self {
        Self {
            projections,
            ln1_gamma: ln1.0,
            ln1_beta: ln1.1,
            ln2_gamma: ln2.0,
            ln2_beta: ln2.1,
        }
    }

    pub fn projection(&self, kind: ModuleKind) -> &Tensor {
        &self.projections[kind.index()]
    }

    pub fn projection_mut(&mut self, kind: ModuleKind) -> &mut Tensor {
        &mut self.projections[kind.index()]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub token_embedding: Tensor,
    pub position_embedding: Tensor,
    pub blocks: Vec<BlockWeights>,
    pub final_gamma: Tensor,
    pub final_beta: Tensor,
}

impl Backbone {
    pub fn random(config: &ModelConfig, rng: &mut Rng) -> Self {
        let d = config.d_model;
        let token_embedding = gaussian(rng, config.vocab_size, d, 1.0);
        let position_embedding = gaussian(rng, config.max_seq_len, d, 0.5);
        let blocks = (0..config.n_layers)
            .map(|_| BlockWeights::random(config, rng))
            .collect();
        Self {
            token_embedding,
            position_embedding,
            blocks,
            final_gamma: Tensor::full(1, d, 1.0),
            final_beta: Tensor::zeros(1, d),
        }
    }

    /// Every frozen tensor with its checkpoint name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("embed.token".to_string(), &self.token_embedding),
            ("embed.position".to_string(), &self.position_embedding),
        ];
        for (l, block) in self.blocks.iter().enumerate() {
            for kind in ModuleKind::ALL {
                out.push((format!("block.{l}.{kind}"), block.projection(kind)));
            }
            out.push((format!("block.{l}.ln1.gamma"), &block.ln1_gamma));
            out.push((format!("block.{l}.ln1.beta"), &block.ln1_beta));
            out.push((format!("block.{l}.ln2.gamma"), &block.ln2_gamma));
            out.push((format!("block.{l}.ln2.beta"), &block.ln2_beta));
        }
        out.push(("final.gamma".into(), &self.final_gamma));
        out.push(("final.beta".into(), &self.final_beta));
        out
    }
}

/// Trainable classification head over mean-pooled hidden states.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Head {
    pub fn random(config: &ModelConfig, std: f64, rng: &mut Rng) -> Self {
        Self {
            weight: gaussian(rng, config.d_model, config.n_classes, std),
            bias: Tensor::zeros(1, config.n_classes),
        }
    }
}

/// One token sequence with its class label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub label: usize,
}

/// Tape handles for one block's frozen weights.
#[derive(Debug, Clone, Copy)]
pub struct BlockVars {
    projections: [Var; N_MOD],
    ln1: (Var, Var),
    ln2: (Var, Var),
}

impl BlockVars {
    pub fn bind(tape: &mut Tape, w: &BlockWeights) -> Self {
        let projections = ModuleKind::ALL.map(|k| tape.constant(w.projection(k).clone()));
        Self {
            projections,
            ln1: (
                tape.constant(w.ln1_gamma.clone()),
                tape.constant(w.ln1_beta.clone()),
            ),
            ln2: (
                tape.constant(w.ln2_gamma.clone()),
                tape.constant(w.ln2_beta.clone()),
            ),
        }
    }

    pub fn projection(&self, kind: ModuleKind) -> Var {
        self.projections[kind.index()]
    }
}

/// Tape handles for one adapter: `x · A · diag(gates) · B`.
#[derive(Debug, Clone, Copy)]
pub struct AdapterVars {
    pub a: Var,
    pub gates: Var,
    pub b: Var,
}

pub type AdapterSlots = BTreeMap<ModuleKind, AdapterVars>;

/// Adapter contribution, evaluated right to left through the rank dimension.
pub fn adapter_delta_on_tape(tape: &mut Tape, x: Var, adapter: &AdapterVars) -> Result<Var> {
    let xa = tape.matmul(x, adapter.a)?;
    let gated = tape.mul(xa, adapter.gates)?;
    Ok(tape.matmul(gated, adapter.b)?)
}

/// `x · W`, plus the adapter delta when one is attached.
pub fn project(tape: &mut Tape, x: Var, w: Var, adapter: Option<&AdapterVars>) -> Result<Var> {
    let base = tape.matmul(x, w)?;
    match adapter {
        Some(a) => {
            let delta = adapter_delta_on_tape(tape, x, a)?;
            Ok(tape.add(base, delta)?)
        }
        None => Ok(base),
    }
}

fn check_slots(adapters: &AdapterSlots, attention: bool, op: &str) -> Result<()> {
    if let Some(kind) = adapters.keys().find(|k| k.is_attention() != attention) {
        return Err(Error::config(
            format!("adapters.{kind}"),
            format!("{kind} adapter cannot be attached inside {op}"),
        ));
    }
    Ok(())
}

/// Multi-head scaled dot-product attention over each row range in
/// `segments` independently, followed by the output projection.
pub fn mha_forward(
    tape: &mut Tape,
    x: Var,
    segments: &[Range<usize>],
    w: &BlockVars,
    adapters: &AdapterSlots,
    n_heads: usize,
) -> Result<Var> {
    check_slots(adapters, true, "attention")?;
    let d = tape.value(x).cols();
    if d % n_heads != 0 {
        return Err(Error::Argument(format!(
            "width {d} not divisible by {n_heads} heads"
        )));
    }
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = project(tape, x, w.projection(ModuleKind::Query), adapters.get(&ModuleKind::Query))?;
    let k = project(tape, x, w.projection(ModuleKind::Key), adapters.get(&ModuleKind::Key))?;
    let v = project(tape, x, w.projection(ModuleKind::Value), adapters.get(&ModuleKind::Value))?;

    let mut per_segment = Vec::with_capacity(segments.len());
    for seg in segments {
        let qs = tape.slice_rows(q, seg.start, seg.end)?;
        let ks = tape.slice_rows(k, seg.start, seg.end)?;
        let vs = tape.slice_rows(v, seg.start, seg.end)?;
        let kt = tape.transpose(ks);
        let mut heads = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let (qh, kth, vh) = if n_heads == 1 {
                (qs, kt, vs)
            } else {
                (
                    tape.slice_cols(qs, lo, hi)?,
                    tape.slice_rows(kt, lo, hi)?,
                    tape.slice_cols(vs, lo, hi)?,
                )
            };
            let scores = tape.matmul(qh, kth)?;
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax_rows(scores);
            heads.push(tape.matmul(attn, vh)?);
        }
        per_segment.push(if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)?
        });
    }
    let mixed = if per_segment.len() == 1 {
        per_segment[0]
    } else {
        tape.concat_rows(&per_segment)?
    };
    project(
        tape,
        mixed,
        w.projection(ModuleKind::Output),
        adapters.get(&ModuleKind::Output),
    )
}

/// Gated feed-forward: `(gelu(x·W_G) ⊙ x·W_U) · W_D`.
pub fn ffn_forward(tape: &mut Tape, x: Var, w: &BlockVars, adapters: &AdapterSlots) -> Result<Var> {
    check_slots(adapters, false, "feed-forward")?;
    let g = project(tape, x, w.projection(ModuleKind::Gate), adapters.get(&ModuleKind::Gate))?;
    let u = project(tape, x, w.projection(ModuleKind::Up), adapters.get(&ModuleKind::Up))?;
    let act = tape.gelu(g);
    let h = tape.mul(act, u)?;
    project(tape, h, w.projection(ModuleKind::Down), adapters.get(&ModuleKind::Down))
}

fn affine_norm(tape: &mut Tape, x: Var, gamma: Var, beta: Var) -> Result<Var> {
    let n = tape.layernorm(x);
    let scaled = tape.mul(n, gamma)?;
    Ok(tape.add(scaled, beta)?)
}

/// Pre-norm residual block: `h = x + MHA(LN₁(x))`, `out = h + FFN(LN₂(h))`.
pub fn block_forward(
    tape: &mut Tape,
    x: Var,
    segments: &[Range<usize>],
    w: &BlockVars,
    adapters: &AdapterSlots,
    n_heads: usize,
) -> Result<Var> {
    let (attn_slots, ffn_slots): (AdapterSlots, AdapterSlots) =
        adapters.iter().partition(|(k, _)| k.is_attention());
    let n1 = affine_norm(tape, x, w.ln1.0, w.ln1.1)?;
    let a = mha_forward(tape, n1, segments, w, &attn_slots, n_heads)?;
    let h = tape.add(x, a)?;
    let n2 = affine_norm(tape, h, w.ln2.0, w.ln2.1)?;
    let f = ffn_forward(tape, n2, w, &ffn_slots)?;
    Ok(tape.add(h, f)?)
}

pub(crate) fn final_norm(tape: &mut Tape, x: Var, gamma: Var, beta: Var) -> Result<Var> {
    affine_norm(tape, x, gamma, beta)
}
