//! The super-network: frozen backbone, trainable head, and one gated adapter
//! per `(layer, module)` position.

use std::collections::BTreeMap;
use std::ops::Range;

use alora_tensor::{Tape, Tensor, Var};
use sha2::{Digest, Sha256};

use crate::adapter::{AloraAdapter, GateMask};
use crate::backbone::{
    block_forward, final_norm, AdapterSlots, AdapterVars, Backbone, BlockVars, Example, Head,
    ModelConfig, ModuleId,
};
use crate::rng::{Rng, SeedTree};
use crate::{Error, Result};

/// Standard deviation of a freshly initialised classification head.
pub const HEAD_INIT_STD: f64 = 0.02;

/// Identifies one trainable tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamId {
    HeadWeight,
    HeadBias,
    AdapterA(ModuleId),
    AdapterB(ModuleId),
    ArchLogits(ModuleId),
}

/// How adapter gates enter the forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GateMode {
    /// Binary gates times the optional mask; gates are constants.
    #[default]
    Binary,
    /// Binary gates times `2 · sigmoid(a')`, differentiable in the logits `a'`.
    Relaxed,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions<'a> {
    pub mask: Option<&'a GateMask>,
    pub gates: GateMode,
    /// Record trainable parameters as gradient-carrying leaves.
    pub track_grads: bool,
}

impl<'a> ForwardOptions<'a> {
    pub fn eval(mask: Option<&'a GateMask>) -> Self {
        Self {
            mask,
            ..Self::default()
        }
    }

    pub fn train() -> Self {
        Self {
            track_grads: true,
            ..Self::default()
        }
    }
}

pub struct ForwardPass {
    pub logits: Var,
    pub params: Vec<(ParamId, Var)>,
}

/// Active rank counts per module and overall.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankCounts {
    pub per_module: BTreeMap<ModuleId, usize>,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuperNetwork {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub head: Head,
    adapters: BTreeMap<ModuleId, AloraAdapter>,
    merged: bool,
}

impl SuperNetwork {
    pub fn new(config: ModelConfig, backbone: Backbone, head: Head) -> Self {
        Self {
            config,
            backbone,
            head,
            adapters: BTreeMap::new(),
            merged: false,
        }
    }

    /// Randomly initialised backbone and head, no adapters.
    pub fn random(config: ModelConfig, seeds: SeedTree) -> Self {
        let backbone = Backbone::random(&config, &mut seeds.rng("backbone"));
        let head = Head::random(&config, HEAD_INIT_STD, &mut seeds.rng("head"));
        Self::new(config, backbone, head)
    }

    /// Attaches a fresh rank-`rank` adapter to every position.
    pub fn attach_uniform(&mut self, rank: usize, rng: &mut Rng) {
        for id in self.config.module_ids() {
            let (d_in, d_out) = self.config.projection_shape(id.kind);
            self.adapters
                .insert(id, AloraAdapter::new(id, d_in, d_out, rank, rng));
        }
    }

    pub fn insert_adapter(&mut self, adapter: AloraAdapter) -> Result<()> {
        let id = adapter.module();
        if id.layer >= self.config.n_layers {
            return Err(Error::Index(format!("layer {} of {}", id.layer, self.config.n_layers)));
        }
        let (d_in, d_out) = self.config.projection_shape(id.kind);
        if adapter.d_in() != d_in || adapter.d_out() != d_out {
            return Err(Error::Argument(format!(
                "adapter {id} is {}x{}, projection is {d_in}x{d_out}",
                adapter.d_in(),
                adapter.d_out()
            )));
        }
        self.adapters.insert(id, adapter);
        Ok(())
    }

    pub fn adapters(&self) -> &BTreeMap<ModuleId, AloraAdapter> {
        &self.adapters
    }

    pub fn adapter(&self, id: ModuleId) -> Option<&AloraAdapter> {
        self.adapters.get(&id)
    }

    pub fn adapter_mut(&mut self, id: ModuleId) -> Option<&mut AloraAdapter> {
        self.adapters.get_mut(&id)
    }

    pub fn is_merged(&self) -> bool {
        self.merged
    }

    pub fn active_rank_count(&self) -> RankCounts {
        let per_module: BTreeMap<ModuleId, usize> = self
            .adapters
            .iter()
            .map(|(id, a)| (*id, a.active_rank_count()))
            .collect();
        let total = per_module.values().sum();
        RankCounts { per_module, total }
    }

    /// Every rank whose gate is open, in `(layer, module, index)` order.
    pub fn active_ranks(&self) -> Vec<(ModuleId, usize)> {
        self.adapters
            .iter()
            .flat_map(|(id, a)| a.active_ranks().into_iter().map(move |r| (*id, r)))
            .collect()
    }

    /// SHA-256 over all frozen tensors.
    pub fn frozen_checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.backbone.named_tensors() {
            h.update(name.as_bytes());
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        match id {
            ParamId::HeadWeight => Some(&self.head.weight),
            ParamId::HeadBias => Some(&self.head.bias),
            ParamId::AdapterA(m) => self.adapters.get(&m).map(AloraAdapter::a),
            ParamId::AdapterB(m) => self.adapters.get(&m).map(AloraAdapter::b),
            ParamId::ArchLogits(m) => self.adapters.get(&m).map(AloraAdapter::arch_logits),
        }
    }

    pub fn param_mut(&mut self, id: ParamId) -> Option<&mut Tensor> {
        match id {
            ParamId::HeadWeight => Some(&mut self.head.weight),
            ParamId::HeadBias => Some(&mut self.head.bias),
            ParamId::AdapterA(m) => self.adapters.get_mut(&m).map(AloraAdapter::a_mut),
            ParamId::AdapterB(m) => self.adapters.get_mut(&m).map(AloraAdapter::b_mut),
            ParamId::ArchLogits(m) => self.adapters.get_mut(&m).map(AloraAdapter::arch_logits_mut),
        }
    }

    /// Head and adapter factors; these are what the optimiser updates.
    pub fn trainable_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![ParamId::HeadWeight, ParamId::HeadBias];
        for id in self.adapters.keys() {
            ids.push(ParamId::AdapterA(*id));
            ids.push(ParamId::AdapterB(*id));
        }
        ids
    }

    pub fn arch_ids(&self) -> Vec<ParamId> {
        self.adapters.keys().map(|id| ParamId::ArchLogits(*id)).collect()
    }

    /// Dense network with every adapter folded into its projection.
    pub fn merged(&self) -> Result<SuperNetwork> {
        if self.merged {
            return Err(Error::State("network is already merged".into()));
        }
        let mut backbone = self.backbone.clone();
        for (id, adapter) in &self.adapters {
            let mut adapter = adapter.clone();
            let w = backbone.blocks[id.layer].projection_mut(id.kind);
            adapter.merge_into(w)?;
        }
        Ok(SuperNetwork {
            config: self.config,
            backbone,
            head: self.head.clone(),
            adapters: BTreeMap::new(),
            merged: true,
        })
    }

    pub(crate) fn set_merged(&mut self, merged: bool) {
        self.merged = merged;
    }

    fn embed(&self, examples: &[&Example]) -> Result<(Tensor, Vec<Range<usize>>)> {
        let cfg = &self.config;
        let mut rows = Vec::new();
        let mut segments = Vec::with_capacity(examples.len());
        for ex in examples {
            if ex.tokens.is_empty() {
                return Err(Error::Argument("empty token sequence".into()));
            }
            if ex.tokens.len() > cfg.max_seq_len {
                return Err(Error::Argument(format!(
                    "sequence length {} exceeds max_seq_len {}",
                    ex.tokens.len(),
                    cfg.max_seq_len
                )));
            }
            let start = rows.len() / cfg.d_model;
            for (pos, &tok) in ex.tokens.iter().enumerate() {
                if tok >= cfg.vocab_size {
                    return Err(Error::Index(format!(
                        "token id {tok} >= vocab_size {}",
                        cfg.vocab_size
                    )));
                }
                let te = self.backbone.token_embedding.row_slice(tok);
                let pe = self.backbone.position_embedding.row_slice(pos);
                rows.extend(te.iter().zip(pe).map(|(a, b)| a + b));
            }
            segments.push(start..start + ex.tokens.len());
        }
        let n = rows.len() / cfg.d_model;
        Ok((Tensor::new(n, cfg.d_model, rows)?, segments))
    }

    /// Records the forward pass on `tape` and returns the `batch × classes` logits.
    pub fn forward(
        &self,
        tape: &mut Tape,
        examples: &[&Example],
        opts: ForwardOptions<'_>,
    ) -> Result<ForwardPass> {
        if examples.is_empty() {
            return Err(Error::Argument("empty batch".into()));
        }
        let (x0, segments) = self.embed(examples)?;
        let mut params = Vec::new();
        let mut leaf = |tape: &mut Tape, id: ParamId, t: &Tensor, trainable: bool| {
            if opts.track_grads && trainable {
                let v = tape.param(t.clone());
                params.push((id, v));
                v
            } else {
                tape.constant(t.clone())
            }
        };

        let mut x = tape.constant(x0);
        for (layer, block) in self.backbone.blocks.iter().enumerate() {
            let bv = BlockVars::bind(tape, block);
            let mut slots = AdapterSlots::new();
            for (id, adapter) in self.adapters.range(ModuleId::new(layer, crate::ModuleKind::Query)..)
            {
                if id.layer != layer {
                    break;
                }
                let a = leaf(tape, ParamId::AdapterA(*id), adapter.a(), true);
                let b = leaf(tape, ParamId::AdapterB(*id), adapter.b(), true);
                let binary = tape.constant(adapter.effective_gates(opts.mask)?);
                let gates = match opts.gates {
                    GateMode::Binary => binary,
                    GateMode::Relaxed => {
                        let logits =
                            leaf(tape, ParamId::ArchLogits(*id), adapter.arch_logits(), true);
                        let s = tape.sigmoid(logits);
                        let alpha = tape.scale(s, 2.0);
                        tape.mul(binary, alpha)?
                    }
                };
                slots.insert(id.kind, AdapterVars { a, gates, b });
            }
            x = block_forward(tape, x, &segments, &bv, &slots, self.config.n_heads)?;
        }
        let fg = tape.constant(self.backbone.final_gamma.clone());
        let fb = tape.constant(self.backbone.final_beta.clone());
        let normed = final_norm(tape, x, fg, fb)?;

        let total_rows = tape.value(normed).rows();
        let mut pool = Tensor::zeros(examples.len(), total_rows);
        for (i, seg) in segments.iter().enumerate() {
            let w = 1.0 / seg.len() as f64;
            for j in seg.clone() {
                pool.set(i, j, w);
            }
        }
        let pool = tape.constant(pool);
        let pooled = tape.matmul(pool, normed)?;
        let hw = leaf(tape, ParamId::HeadWeight, &self.head.weight, true);
        let hb = leaf(tape, ParamId::HeadBias, &self.head.bias, true);
        let z = tape.matmul(pooled, hw)?;
        let logits = tape.add(z, hb)?;
        Ok(ForwardPass { logits, params })
    }

    /// Mean cross-entropy of the batch, recorded on `tape`.
    pub fn forward_loss(
        &self,
        tape: &mut Tape,
        examples: &[&Example],
        opts: ForwardOptions<'_>,
    ) -> Result<(Var, ForwardPass)> {
        let labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
        let pass = self.forward(tape, examples, opts)?;
        if let Some(&bad) = labels.iter().find(|&&l| l >= self.config.n_classes) {
            return Err(Error::Index(format!(
                "label {bad} >= n_classes {}",
                self.config.n_classes
            )));
        }
        let loss = tape.softmax_cross_entropy(pass.logits, &labels)?;
        Ok((loss, pass))
    }

    pub fn logits(&self, examples: &[&Example], mask: Option<&GateMask>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let pass = self.forward(&mut tape, examples, ForwardOptions::eval(mask))?;
        Ok(tape.value(pass.logits).clone())
    }

    /// Mean cross-entropy without gradients.
    pub fn loss(&self, examples: &[&Example], mask: Option<&GateMask>) -> Result<f64> {
        let mut tape = Tape::new();
        let (loss, _) = self.forward_loss(&mut tape, examples, ForwardOptions::eval(mask))?;
        Ok(tape.value(loss).get(0, 0))
    }

    /// Per-example cross-entropy without gradients.
    pub fn per_example_loss(&self, examples: &[&Example], mask: Option<&GateMask>) -> Result<Vec<f64>> {
        let labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
        Ok(self.logits(examples, mask)?.cross_entropy_rows(&labels)?)
    }

    /// Mean loss over a whole split, evaluated in chunks.
    pub fn dataset_loss(&self, data: &[Example], mask: Option<&GateMask>) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::Argument("empty dataset".into()));
        }
        let mut total = 0.0;
        for chunk in data.chunks(64) {
            let refs: Vec<&Example> = chunk.iter().collect();
            total += self.loss(&refs, mask)? * chunk.len() as f64;
        }
        Ok(total / data.len() as f64)
    }

    /// Fraction of examples whose argmax prediction equals the label.
    pub fn accuracy(&self, data: &[Example]) -> Result<f64> {
        let mut correct = 0usize;
        for chunk in data.chunks(64) {
            let refs: Vec<&Example> = chunk.iter().collect();
            let logits = self.logits(&refs, None)?;
            for (i, ex) in chunk.iter().enumerate() {
                if argmax(logits.row_slice(i)) == ex.label {
                    correct += 1;
                }
            }
        }
        Ok(correct as f64 / data.len().max(1) as f64)
    }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ModuleKind;
    use crate::rng::gaussian;

    fn small_config() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 8,
            d_ff: 12,
            n_heads: 2,
            vocab_size: 16,
            max_seq_len: 6,
            n_classes: 3,
        }
    }

    fn batch(n: usize, seed: u64, cfg: &ModelConfig) -> Vec<Example> {
        use rand::Rng as _;
        let mut rng = SeedTree::new(seed).rng("batch");
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

    fn randomize_b(net: &mut SuperNetwork, seed: u64) {
        let mut rng = SeedTree::new(seed).rng("b");
        let ids: Vec<ModuleId> = net.adapters().keys().copied().collect();
        for id in ids {
            let a = net.adapter_mut(id).unwrap();
            let (r, c) = (a.b().rows(), a.b().cols());
            *a.b_mut() = gaussian(&mut rng, r, c, 0.3);
        }
    }

    #[test]
    fn fresh_net_budget() {
        let mut net = SuperNetwork::random(ModelConfig::default(), SeedTree::new(0));
        net.attach_uniform(8, &mut SeedTree::new(0).rng("init"));
        let counts = net.active_rank_count();
        assert_eq!(counts.total, 112);
        assert_eq!(counts.per_module.len(), 14);
        assert!(counts.per_module.values().all(|&c| c == 8));
    }

    #[test]
    fn zero_b_adapters_match_adapter_free_bitwise() {
        let cfg = small_config();
        let plain = SuperNetwork::random(cfg, SeedTree::new(3));
        let mut net = plain.clone();
        net.attach_uniform(2, &mut SeedTree::new(3).rng("init"));
        let data = batch(5, 1, &cfg);
        let refs: Vec<&Example> = data.iter().collect();
        let a = plain.loss(&refs, None).unwrap();
        let b = net.loss(&refs, None).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        let la = plain.logits(&refs, None).unwrap();
        let lb = net.logits(&refs, None).unwrap();
        assert!(la.max_abs_diff(&lb).unwrap() < 1e-12);
    }

    #[test]
    fn batch_permutation_and_duplication() {
        let cfg = small_config();
        let mut net = SuperNetwork::random(cfg, SeedTree::new(4));
        net.attach_uniform(2, &mut SeedTree::new(4).rng("init"));
        randomize_b(&mut net, 4);
        let data = batch(4, 2, &cfg);
        let refs: Vec<&Example> = data.iter().collect();
        let base = net.per_example_loss(&refs, None).unwrap();
        let perm: Vec<&Example> = [2, 0, 3, 1].iter().map(|&i| &data[i]).collect();
        let permuted = net.per_example_loss(&perm, None).unwrap();
        for (k, &i) in [2, 0, 3, 1].iter().enumerate() {
            assert!((permuted[k] - base[i]).abs() < 1e-12);
        }
        let dup = vec![&data[1], &data[1], &data[1]];
        let l = net.per_example_loss(&dup, None).unwrap();
        assert_eq!(l[0], l[1]);
        assert_eq!(l[1], l[2]);
    }

    #[test]
    fn input_validation() {
        let cfg = small_config();
        let net = SuperNetwork::random(cfg, SeedTree::new(5));
        let bad_tok = Example { tokens: vec![16], label: 0 };
        assert!(matches!(net.loss(&[&bad_tok], None), Err(Error::Index(_))));
        let too_long = Example { tokens: vec![0; 7], label: 0 };
        assert!(matches!(net.loss(&[&too_long], None), Err(Error::Argument(_))));
        let bad_label = Example { tokens: vec![1], label: 3 };
        assert!(matches!(net.loss(&[&bad_label], None), Err(Error::Index(_))));
    }

    #[test]
    fn merged_matches_adapter_form() {
        let cfg = small_config();
        let mut net = SuperNetwork::random(cfg, SeedTree::new(6));
        net.attach_uniform(3, &mut SeedTree::new(6).rng("init"));
        randomize_b(&mut net, 6);
        net.adapter_mut(ModuleId::new(1, ModuleKind::Up))
            .unwrap()
            .prune(&[0].into())
            .unwrap();
        let data = batch(10, 3, &cfg);
        let merged = net.merged().unwrap();
        assert!(merged.adapters().is_empty());
        assert!(merged.merged().is_err());
        let a = net.dataset_loss(&data, None).unwrap();
        let b = merged.dataset_loss(&data, None).unwrap();
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }

    #[test]
    fn checksum_tracks_frozen_weights_only() {
        let cfg = small_config();
        let mut net = SuperNetwork::random(cfg, SeedTree::new(7));
        net.attach_uniform(2, &mut SeedTree::new(7).rng("init"));
        let c0 = net.frozen_checksum();
        randomize_b(&mut net, 1);
        net.head.bias.data_mut()[0] = 3.0;
        assert_eq!(net.frozen_checksum(), c0);
        net.backbone.blocks[0].ln1_beta.data_mut()[0] = 1e-9;
        assert_ne!(net.frozen_checksum(), c0);
    }
}
