//! Training small neural networks in an inverse scale space.
//!
//! The central object is a coupled parameter pair `(W, Γ)`: the weights `W`
//! follow (stochastic) gradient descent on the empirical loss augmented with
//! an `ℓ2` coupling `‖W − Γ‖²/(2ν)`, while the companion variable `Γ` evolves
//! by a linearized Bregman iteration and stays sparse under a lasso or
//! group-lasso penalty. Important weights and filters enter the support of
//! `Γ` early along the path, which is what the pruning, winning-ticket, and
//! growing drivers exploit.
//!
//! Module map:
//!
//! - [`tensor`], [`rng`] — dense row-major `f64` tensors and seeded,
//!   platform-stable randomness.
//! - [`network`] — feed-forward nets (dense/conv/pool/residual), forward
//!   evaluation and reverse-mode gradients.
//! - [`penalty`] — the sparsity penalty `Ω`, grouping schemes, proximal map,
//!   subgradient recovery, Bregman divergence.
//! - [`optimizer`] — the DessiLBI update family (naive, momentum, weight
//!   decay, magnitude scaling), the reformulated iteration that maintains the
//!   subgradient explicitly, mirror-descent and SGD baselines, and the
//!   admissible step-size bound.
//! - [`diagnostics`] — Lyapunov descent and relative-error checks over
//!   recorded traces, support entry times.
//! - [`sparsify`] — masks at weight/filter/layer level, pruning, ticket
//!   extraction, masked (re)training.
//! - [`grow`] — ratio-triggered width growth of convolutional layers.
//! - [`data`], [`checkpoint`], [`pathlog`], [`config`], [`train`], [`run`] —
//!   the experiment harness: datasets, IDX ingestion, lossless checkpoints,
//!   JSON-lines path logs, CSV export, and the task drivers behind the CLI.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod grow;
pub mod network;
pub mod optimizer;
pub mod pathlog;
pub mod penalty;
pub mod rng;
pub mod run;
pub mod sparsify;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use network::{LayerSpec, Loss, NetworkSpec, ParamSet};
pub use optimizer::{CoupledState, OptimizerConfig, Variant};
pub use penalty::{Grouping, PenaltyKind, PenaltySpec};
// pub use sparsify::Mask; // restored once sparsify lands
pub use tensor::Tensor;
