//! In-context gradient descent by explicit weight construction.
//!
//! This crate mechanically builds the weights of a ReLU-attention transformer
//! stack whose forward pass performs projected gradient descent on an N-layer
//! feed-forward network, carried entirely inside the prompt encoding. Every
//! constructed quantity (layer outputs, activation derivatives, backpropagated
//! sensitivities, the gradient itself) is checked against exact analytic
//! oracles, and every deviation is compared to its closed-form error bound.
//!
//! Module map:
//! - [`activation`]: the scalar activation (sigmoid) and its derivative.
//! - [`network`]: the target N-layer network, exact/finite-difference
//!   gradients, and the projected-GD reference trajectory.
//! - [`approx`]: (H, C)-sum-of-ReLUs approximators of scalar functions.
//! - [`layout`]: the named-slot token layout and prompt encoding.
//! - [`layers`]: ReLU attention, MLP, and element-wise multiplication layer
//!   primitives with parameter norms.
//! - [`builder`]: emits the (2N+4)-layer block weights and runs the stack.
//! - [`analysis`]: closed-form radii, error coefficients, the epsilon budget,
//!   accumulation envelope, and convergence check.
//! - [`config`]: experiment configuration with defaults and hashing.
//! - [`report`]: CSV/JSON report writers.

pub mod activation;
pub mod analysis;
pub mod approx;
pub mod builder;
pub mod config;
pub mod layers;
pub mod layout;
pub mod network;
pub mod pipeline;
pub mod report;

pub use activation::Activation;
pub use analysis::RadiiReport;
pub use approx::{ApproxReport, SumOfRelus};
pub use builder::{BlockPlan, BuildCaps, EpsilonBudget, RunMode, StackWeights, TraceRecord};
pub use config::ExperimentConfig;
pub use layers::{AttnLayer, EwmlLayer, LayerKind, LayerWeights, MlpLayer, SparseMat};
pub use layout::{PromptMatrix, TokenLayout};
pub use network::{Dataset, DomainBox, NetworkParams, NetworkShape};

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: String,
    },
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("layout overflow: {0}")]
    LayoutOverflow(String),
    #[error("budget infeasible: {quantity} requires {required} {unit}, cap is {cap}")]
    BudgetInfeasible {
        quantity: String,
        required: usize,
        unit: String,
        cap: usize,
    },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
