//! Square-loss gradient flow for normalized deep ReLU networks.
//!
//! A bias-free ReLU network `g(x) = W_L σ(W_{L-1} ⋯ σ(W_1 x))` is split into a
//! scale `ρ = Π_k ‖W_k‖_F` and unit-norm directions `V_k`, so that
//! `g(x) = ρ f(x)`. The crate provides:
//!
//! * [`net`]: forward passes (recursive and explicit product form), backprop
//!   gradients `∂f/∂V_k`, margins and per-sample constraint residuals;
//! * [`flow`]: the continuous flow on `ρ` and the spheres, with weight decay
//!   `λ`, the Lagrange multiplier `ν`, and equilibrium analysis;
//! * [`sgd`]: a momentum SGD trainer with weight normalization standing in for
//!   batch normalization;
//! * [`diagnostics`]: metric traces, constraint residuals, Neural Collapse
//!   statistics and sweep comparisons;
//! * [`data`] and [`checkpoint`]: datasets and persistence.

pub mod checkpoint;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod flow;
pub mod net;
pub mod numerics;
pub mod sgd;

pub use data::{Dataset, RawData, SyntheticKind, SyntheticSpec};
pub use diagnostics::{MetricTrace, NcReport, SweepReport, TraceRow};
pub use error::{Error, Result};
pub use flow::{FlowConfig, FlowState, Integrator};
pub use net::{ActivationPattern, NetworkParams, NormMode, NormalizedNet};
pub use numerics::{Matrix, Vector};
pub use sgd::{Normalize, TrainConfig, TrainState};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
