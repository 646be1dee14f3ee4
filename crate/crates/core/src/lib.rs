//! Monotone operator equilibrium networks.
//!
//! An implicit-depth layer whose hidden state is the fixed point
//! `z = σ(W z + U x + b)`. `W` is parameterized so that `I − W ⪰ m I`,
//! which makes the fixed point unique and turns both its computation and
//! the backward pass into monotone operator splitting problems.
//!
//! The crate is organized by layer:
//!
//! - [`operator`]: the linear-operator abstraction, proximal operators,
//!   power iteration and the dense monotonicity check.
//! - [`dense`], [`conv`], [`multitier`]: the three parameterizations of `W`
//!   and their structured `(I + α(I − W))⁻¹` factorizations.
//! - [`solvers`]: forward-backward and Peaceman-Rachford iterations for the
//!   equilibrium and for the implicit backward pass.
//! - [`model`]: the full network with its injection, head and gradients.
//! - [`checkpoint`]: the binary parameter archive.
//!
//! With the default `parallel` feature, per-example work inside a batch runs
//! on the rayon pool; without it everything runs sequentially.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod checkpoint;
pub mod conv;
pub mod dense;
pub mod error;
pub mod factor;
pub mod model;
pub mod multitier;
pub mod operator;
pub mod par;
pub mod solvers;
pub mod tensor;

pub use error::{MonDeqError, Result};
pub use model::{GradientBundle, MonDEQModel};
pub use operator::{LinearOperator, Prox, ProxKind, StructuredInverse};
pub use solvers::{EquilibriumState, SolveStats, SolverConfig, SplittingMethod};
pub use tensor::Tensor;
