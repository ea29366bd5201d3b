//! Dense 2-D `f64` tensors and a tape for reverse-mode automatic differentiation.
//!
//! Every value is a row-major matrix; vectors are stored as `1 × n` rows.
//! Plain arithmetic lives on [`Tensor`]. Differentiable computation is
//! recorded on a [`Tape`]: leaves are pushed with [`Tape::leaf`], each
//! primitive appends one node, and [`Tape::backward`] walks the nodes in
//! reverse insertion order (which is a reverse topological order, since a
//! node can only reference nodes created before it).
//!
//! GELU uses the tanh approximation
//! `gelu(x) = 0.5 · x · (1 + tanh(√(2/π) · (x + 0.044715 · x³)))`.
//! Layer normalisation uses the biased row variance and `ε = 1e-5`.

mod error;
mod tape;
mod tensor;

pub use error::TensorError;
pub use tape::{Tape, Var};
pub use tensor::{gelu, gelu_grad, sigmoid, Tensor, LAYERNORM_EPS};

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
