//! Gated low-rank adapters in SVD form: `z = x · A · diag(α) · B`.
//!
//! Each rank `i` is the pair (column `i` of `A`, row `i` of `B`) and owns a
//! binary gate `α_i`. Pruning zeroes a gate for good; dead columns stay in
//! memory so rank indices remain stable. Growth appends ranks with Gaussian
//! `A` columns and zero `B` rows, which leaves the forward pass unchanged.

use std::collections::BTreeSet;

use alora_tensor::Tensor;

use crate::backbone::ModuleId;
use crate::rng::{gaussian, Rng};
use crate::{Error, Result};

/// Standard deviation of freshly initialised `A` entries.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct AloraAdapter {
    module: ModuleId,
    a: Tensor,
    b: Tensor,
    gates: Vec<bool>,
    arch_logits: Tensor,
    merged: bool,
}

impl AloraAdapter {
    /// Rank-`rank` adapter with `A ~ N(0, 0.02²)`, `B = 0`, all gates open.
    pub fn new(module: ModuleId, d_in: usize, d_out: usize, rank: usize, rng: &mut Rng) -> Self {
        Self {
            module,
            a: gaussian(rng, d_in, rank, INIT_STD),
            b: Tensor::zeros(rank, d_out),
            gates: vec![true; rank],
            arch_logits: Tensor::zeros(1, rank),
            merged: false,
        }
    }

    pub fn from_parts(module: ModuleId, a: Tensor, b: Tensor, gates: Vec<bool>) -> Result<Self> {
        let r = a.cols();
        if b.rows() != r || gates.len() != r {
            return Err(Error::Tensor(alora_tensor::TensorError::Dimension {
                op: "adapter",
                lhs: a.shape(),
                rhs: b.shape(),
            }));
        }
        Ok(Self {
            module,
            a,
            b,
            gates,
            arch_logits: Tensor::zeros(1, r),
            merged: false,
        })
    }

    pub fn module(&self) -> ModuleId {
        self.module
    }

    /// Physical rank, counting pruned slots.
    pub fn rank(&self) -> usize {
        self.gates.len()
    }

    pub fn d_in(&self) -> usize {
        self.a.rows()
    }

    pub fn d_out(&self) -> usize {
        self.b.cols()
    }

    pub fn a(&self) -> &Tensor {
        &self.a
    }

    pub fn b(&self) -> &Tensor {
        &self.b
    }

    pub fn a_mut(&mut self) -> &mut Tensor {
        &mut self.a
    }

    pub fn b_mut(&mut self) -> &mut Tensor {
        &mut self.b
    }

    pub fn gates(&self) -> &[bool] {
        &self.gates
    }

    pub fn arch_logits(&self) -> &Tensor {
        &self.arch_logits
    }

    pub fn arch_logits_mut(&mut self) -> &mut Tensor {
        &mut self.arch_logits
    }

    pub fn is_merged(&self) -> bool {
        self.merged
    }

    pub fn active_rank_count(&self) -> usize {
        self.gates.iter().filter(|&&g| g).count()
    }

    pub fn active_ranks(&self) -> Vec<usize> {
        (0..self.rank()).filter(|&i| self.gates[i]).collect()
    }

    /// Gates after applying `mask`, as a `1 × r` row of zeros and ones.
    pub fn effective_gates(&self, mask: Option<&GateMask>) -> Result<Tensor> {
        if let Some(mask) = mask {
            mask.check_bounds(self)?;
        }
        Ok(Tensor::row(
            (0..self.rank())
                .map(|i| {
                    let open = self.gates[i] && mask.is_none_or(|m| !m.is_zeroed(self.module, i));
                    if open {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect(),
        ))
    }

    /// `x · A · diag(effective gates) · B`, never forming the `d_in × d_out` product.
    pub fn delta(&self, x: &Tensor, mask: Option<&GateMask>) -> Result<Tensor> {
        let gates = self.effective_gates(mask)?;
        let xa = x.matmul(&self.a)?;
        Ok(xa.mul(&gates)?.matmul(&self.b)?)
    }

    /// Closes the listed gates permanently. Weights are left in place.
    pub fn prune(&mut self, ranks: &BTreeSet<usize>) -> Result<()> {
        for &r in ranks {
            if r >= self.rank() {
                return Err(Error::Index(format!(
                    "rank {r} of {} (physical rank {})",
                    self.module,
                    self.rank()
                )));
            }
            if !self.gates[r] {
                return Err(Error::State(format!(
                    "rank {r} of {} is already pruned",
                    self.module
                )));
            }
        }
        for &r in ranks {
            self.gates[r] = false;
        }
        Ok(())
    }

    /// Appends `n_new` ranks: Gaussian `A` columns, zero `B` rows, open gates,
    /// zero architecture logits. Existing entries are preserved bit for bit.
    pub fn grow(&mut self, n_new: usize, rng: &mut Rng) -> Result<()> {
        if n_new == 0 {
            return Err(Error::Argument("grow needs at least one new rank".into()));
        }
        let fresh = gaussian(rng, self.d_in(), n_new, INIT_STD);
        self.a = Tensor::concat_cols(&[&self.a, &fresh])?;
        self.b = Tensor::concat_rows(&[&self.b, &Tensor::zeros(n_new, self.d_out())])?;
        self.gates.extend(std::iter::repeat_n(true, n_new));
        self.arch_logits = Tensor::concat_cols(&[&self.arch_logits, &Tensor::zeros(1, n_new)])?;
        Ok(())
    }

    /// `W + A · diag(gates) · B`; `w` itself is not modified.
    pub fn merge_into_base(&self, w: &Tensor) -> Result<Tensor> {
        if w.shape() != [self.d_in(), self.d_out()] {
            return Err(Error::Tensor(alora_tensor::TensorError::Dimension {
                op: "merge_into_base",
                lhs: w.shape(),
                rhs: [self.d_in(), self.d_out()],
            }));
        }
        let gates = self.effective_gates(None)?;
        let delta = self.a.mul(&gates)?.matmul(&self.b)?;
        Ok(w.add(&delta)?)
    }

    /// Folds the adapter into `w` in place. A second call is refused.
    pub fn merge_into(&mut self, w: &mut Tensor) -> Result<()> {
        if self.merged {
            return Err(Error::State(format!("adapter {} already merged", self.module)));
        }
        *w = self.merge_into_base(w)?;
        self.merged = true;
        Ok(())
    }

    /// A new adapter holding only the ranks in `keep`, with all gates open.
    pub fn compacted(&self, keep: &[usize]) -> Result<AloraAdapter> {
        let a = self.a.select_cols(keep)?;
        let b = self.b.select_rows(keep)?;
        AloraAdapter::from_parts(self.module, a, b, vec![true; keep.len()])
    }
}

/// Temporary per-rank ablation that leaves adapter state untouched.
/// Ranks not listed are kept.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GateMask {
    zeroed: BTreeSet<(ModuleId, usize)>,
}

impl GateMask {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn zeroing(ranks: impl IntoIterator<Item = (ModuleId, usize)>) -> Self {
        Self {
            zeroed: ranks.into_iter().collect(),
        }
    }

    pub fn zero(&mut self, module: ModuleId, rank: usize) {
        self.zeroed.insert((module, rank));
    }

    pub fn is_zeroed(&self, module: ModuleId, rank: usize) -> bool {
        self.zeroed.contains(&(module, rank))
    }

    pub fn is_empty(&self) -> bool {
        self.zeroed.is_empty()
    }

    pub fn zeroed(&self) -> impl Iterator<Item = &(ModuleId, usize)> {
        self.zeroed.iter()
    }

    /// Zeroes exactly the members of `universe` this mask keeps.
    pub fn complement(&self, universe: impl IntoIterator<Item = (ModuleId, usize)>) -> GateMask {
        GateMask {
            zeroed: universe
                .into_iter()
                .filter(|key| !self.zeroed.contains(key))
                .collect(),
        }
    }

    fn check_bounds(&self, adapter: &AloraAdapter) -> Result<()> {
        let m = adapter.module();
        let lo = (m, 0);
        let hi = (m, usize::MAX);
        if let Some(&(_, r)) = self.zeroed.range(lo..=hi).find(|(_, r)| *r >= adapter.rank()) {
            return Err(Error::Index(format!(
                "mask references rank {r} of {m}, physical rank is {}",
                adapter.rank()
            )));
        }
        Ok(())
    }
}
