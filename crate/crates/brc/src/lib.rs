//! Desk-scale multi-task value-based RL laboratory.
//!
//! Implements categorical cross-entropy TD learning with normalized residual
//! critics, per-task return normalization, learnable task embeddings, the
//! associated diagnostics (gradient conflict, cross-task relative variance,
//! exact Shapley attribution, bootstrap CIs), and three transfer protocols,
//! on fully specified toy environments.

pub mod agents;
pub mod diagnostics;
pub mod distributional;
pub mod embeddings;
pub mod experience;
pub mod gradcheck;
pub mod nn;
pub mod optim;
pub mod retnorm;
pub mod tape;
pub mod tensor;

pub use tape::{GradTape, Var};
pub use tensor::{ParameterSet, Tensor};
