//! Offline RL as conservative model-based optimization over learned behavior
//! embeddings: task decomposition, joint embedding/contextual-policy cloning,
//! a conservatively regularized TD score model, and test-time embedding
//! inference with multi-start gradient ascent.

pub mod approximator;
pub mod behavior;
pub mod checkpoint;
pub mod dataset;
pub mod environments;
pub mod error;
pub mod exec;
pub mod inference;
pub mod models;
pub mod score;
mod util;
mod wire;

pub use error::{DropError, Result};
