//! The CLI subcommands: train, eval, finetune-ckpt, finetune-embed, fbc,
//! gen-data.

pub mod eval;
pub mod fbc;
pub mod finetune;
pub mod gen_data;

pub use crate::train::run_training as train;
