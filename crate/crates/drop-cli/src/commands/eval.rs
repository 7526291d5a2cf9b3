//! Evaluation: for each of the last T checkpoints x each selected rule x
//! episodes, one metrics row. Episodes run in parallel over frozen models
//! with per-episode seed streams; rows come back in a fixed order.

use std::path::PathBuf;
use std::time::Instant;

use drop_core::checkpoint::load_checkpoint;
use drop_core::exec::{derive_seed, map_chunks};
use drop_core::inference::{rollout, InferenceConfig, InferenceRule};

use crate::config::RunConfig;
use crate::envs::make_env;
use crate::error::{CliError, CliResult};
use crate::metrics::{write_metrics, write_summary, MetricsRow};
use crate::registry::{ensure_refs, normalized_return};
use crate::train::list_checkpoints;

pub struct EvalOutcome {
    pub metrics_path: PathBuf,
    pub summary_path: PathBuf,
    pub rows: Vec<MetricsRow>,
    /// Checkpoints requested but not present on disk.
    pub missing: usize,
}

fn rule_tag(rule: InferenceRule) -> u64 {
    match rule {
        InferenceRule::Best => 0,
        InferenceRule::Grad => 1,
        InferenceRule::BestAda => 2,
        InferenceRule::GradAda => 3,
    }
}

/// Episode seeds are shared across rules and checkpoints (common random
/// numbers), so rule comparisons are paired.
pub fn episode_seed(base_seed: u64, episode: usize) -> u64 {
    derive_seed(derive_seed(base_seed, 0xe5a1), episode as u64)
}

pub fn run(cfg: &RunConfig) -> CliResult<EvalOutcome> {
    let all = list_checkpoints(&cfg.out_dir)?;
    if all.is_empty() {
        return Err(CliError::Data(format!(
            "no checkpoints under {}; run `drop train` first",
            cfg.out_dir.display()
        )));
    }
    let take = cfg.eval_checkpoints.min(all.len());
    let missing = cfg.eval_checkpoints - take;
    if missing > 0 {
        eprintln!(
            "eval: {} of {} requested checkpoints are missing (found {})",
            missing,
            cfg.eval_checkpoints,
            all.len()
        );
    }
    let selected = &all[all.len() - take..];
    let refs = ensure_refs(&cfg.env_name, &cfg.out_dir)?;

    let mut rows = Vec::new();
    for (offset, (step, path)) in selected.iter().enumerate() {
        let checkpoint_id = all.len() - take + offset;
        let ckpt = load_checkpoint(path)?;
        let candidates = ckpt.models.candidates()?;
        let ms = ckpt.models.model_set();
        for rule in &cfg.eval_rules {
            let icfg = InferenceConfig {
                rule: *rule,
                ..cfg.inference
            };
            let episodes: Vec<usize> = (0..cfg.eval_episodes).collect();
            let per_episode: CliResult<Vec<(f64, usize, f64)>> =
                map_chunks(&episodes, 1, |chunk| -> CliResult<(f64, usize, f64)> {
                    let ep = chunk[0];
                    let mut env = make_env(&cfg.env_name)?;
                    let started = Instant::now();
                    let max_steps = env.max_steps();
                    let rec = rollout(
                        env.as_mut(),
                        &ms,
                        &candidates,
                        &icfg,
                        episode_seed(cfg.seed, ep),
                        max_steps,
                    )?;
                    let wall_ms = started.elapsed().as_secs_f64() * 1e3;
                    Ok((rec.episode_return(), rec.inference_calls, wall_ms))
                })
                .into_iter()
                .collect();
            for (ep, (ret, calls, wall_ms)) in per_episode?.into_iter().enumerate() {
                rows.push(MetricsRow {
                    seed: cfg.seed,
                    training_step: *step,
                    checkpoint_id,
                    rule: rule.as_str().to_string(),
                    episode: ep,
                    ret,
                    normalized_return: normalized_return(refs, ret)?,
                    inference_calls: calls,
                    wall_ms,
                });
            }
        }
    }

    let metrics_path = cfg.out_dir.join("metrics.csv");
    let summary_path = cfg.out_dir.join("metrics_summary.csv");
    write_metrics(&metrics_path, &rows)?;
    write_summary(&summary_path, &rows)?;
    Ok(EvalOutcome {
        metrics_path,
        summary_path,
        rows,
        missing,
    })
}

/// Ensures different (rule, episode) pairs cannot collide in logs keyed by
/// both; used by the finetune commands.
pub fn grid_seed(base_seed: u64, rule: InferenceRule, tag: u64) -> u64 {
    derive_seed(derive_seed(base_seed, 0xf1ed ^ rule_tag(rule)), tag)
}
