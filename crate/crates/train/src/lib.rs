//! Training and diagnostics for monotone equilibrium networks: MNIST and
//! CIFAR-10 loaders, Adam, the epoch loop with step-size retuning, solver
//! convergence traces and the finite-difference gradient suite.
//!
//! The `mondeq` binary wraps these as subcommands.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adam;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod gradcheck;
pub mod train;

pub use config::{Preset, TrainConfig};
pub use error::{Result, TrainError};
