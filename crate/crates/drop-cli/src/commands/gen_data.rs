//! Scripted dataset generation to the JSONL dataset format.

use std::path::PathBuf;

use drop_core::dataset::save_dataset;

use crate::config::RunConfig;
use crate::envs::generate_named_dataset;
use crate::error::{CliError, CliResult};

pub struct GenDataOutcome {
    pub path: PathBuf,
    pub trajectories: usize,
}

pub fn run(cfg: &RunConfig) -> CliResult<GenDataOutcome> {
    let name = cfg.dataset_generator.as_ref().ok_or_else(|| {
        CliError::Config("gen-data requires dataset.generator".to_string())
    })?;
    let path = cfg.dataset_path.clone().ok_or_else(|| {
        CliError::Config("gen-data requires dataset.path as the output file".to_string())
    })?;
    let dataset = generate_named_dataset(name, cfg.seed)?;
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    save_dataset(&dataset, &path)?;
    Ok(GenDataOutcome {
        path,
        trajectories: dataset.len(),
    })
}
