//! Online fine-tuning by enumerated trial-and-error: checkpoint-level
//! (pick the checkpoint whose one-episode return under the `best` rule is
//! highest) and embedding-level (grid over checkpoints and ascent steps).
//! The selection rule and the later evaluation rule can differ; both are
//! logged so the discrepancy stays measurable.

use std::fmt::Write as _;
use std::path::PathBuf;

use drop_core::checkpoint::load_checkpoint;
use drop_core::inference::{rollout, InferenceConfig, InferenceRule};

use crate::config::RunConfig;
use crate::envs::make_env;
use crate::error::{CliError, CliResult};
use crate::registry::{ensure_refs, normalized_return};
use crate::train::list_checkpoints;

use super::eval::episode_seed;

pub struct FinetuneCkptOutcome {
    pub selected_step: u64,
    pub selected_path: PathBuf,
    pub best_return: f64,
    pub csv_path: PathBuf,
    pub episodes_used: usize,
}

fn last_checkpoints(cfg: &RunConfig) -> CliResult<Vec<(u64, PathBuf)>> {
    let all = list_checkpoints(&cfg.out_dir)?;
    if all.is_empty() {
        return Err(CliError::Data(format!(
            "no checkpoints under {}; run `drop train` first",
            cfg.out_dir.display()
        )));
    }
    let take = cfg.eval_checkpoints.min(all.len());
    Ok(all[all.len() - take..].to_vec())
}

fn one_episode(cfg: &RunConfig, path: &PathBuf, icfg: &InferenceConfig, seed: u64) -> CliResult<f64> {
    let ckpt = load_checkpoint(path)?;
    let candidates = ckpt.models.candidates()?;
    let ms = ckpt.models.model_set();
    let mut env = make_env(&cfg.env_name)?;
    let max_steps = env.max_steps();
    let rec = rollout(env.as_mut(), &ms, &candidates, icfg, seed, max_steps)?;
    Ok(rec.episode_return())
}

/// Checkpoint-level fine-tuning: each of the last T checkpoints gets one
/// episode under the `best` rule; the argmax-return checkpoint wins, ties
/// to the earlier one.
pub fn run_ckpt(cfg: &RunConfig) -> CliResult<FinetuneCkptOutcome> {
    let selected = last_checkpoints(cfg)?;
    let refs = ensure_refs(&cfg.env_name, &cfg.out_dir)?;
    let selection_cfg = InferenceConfig {
        rule: InferenceRule::Best,
        ..cfg.inference
    };
    let mut csv = String::from(
        "checkpoint_step,selection_rule,evaluation_rule,return,normalized_return\n",
    );
    let mut best: Option<(f64, usize)> = None;
    let mut returns = Vec::new();
    for (i, (step, path)) in selected.iter().enumerate() {
        let ret = one_episode(cfg, path, &selection_cfg, episode_seed(cfg.seed, 0))?;
        returns.push(ret);
        let _ = writeln!(
            csv,
            "{step},best,{},{ret},{}",
            cfg.inference.rule.as_str(),
            normalized_return(refs, ret)?
        );
        let better = match best {
            Some((b, _)) => ret > b,
            None => true,
        };
        if better {
            best = Some((ret, i));
        }
    }
    let (best_return, idx) = best.expect("at least one checkpoint");
    let csv_path = cfg.out_dir.join("finetune_ckpt.csv");
    std::fs::write(&csv_path, csv)?;
    Ok(FinetuneCkptOutcome {
        selected_step: selected[idx].0,
        selected_path: selected[idx].1.clone(),
        best_return,
        csv_path,
        episodes_used: selected.len(),
    })
}

pub struct FinetuneEmbedOutcome {
    pub selected_step: u64,
    pub selected_path: PathBuf,
    pub k_best: usize,
    pub best_return: f64,
    pub csv_path: PathBuf,
    pub episodes_used: usize,
}

/// Embedding-level fine-tuning: grid over the last T checkpoints and ascent
/// steps k in 1..=k_max, one episode each under the configured gradient
/// rule. The budget is exactly T * k_max episodes.
pub fn run_embed(cfg: &RunConfig) -> CliResult<FinetuneEmbedOutcome> {
    if !cfg.inference.rule.uses_ascent() {
        return Err(CliError::Config(format!(
            "finetune-embed needs inference.rule of grad or grad_ada, got {}",
            cfg.inference.rule.as_str()
        )));
    }
    let selected = last_checkpoints(cfg)?;
    let refs = ensure_refs(&cfg.env_name, &cfg.out_dir)?;
    let mut csv = String::from("checkpoint_step,rule,k,return,normalized_return\n");
    let mut best: Option<(f64, usize, usize)> = None;
    let mut episodes_used = 0;
    for (i, (step, path)) in selected.iter().enumerate() {
        for k in 1..=cfg.finetune_k_max {
            let icfg = InferenceConfig {
                k,
                ..cfg.inference
            };
            let ret = one_episode(cfg, path, &icfg, episode_seed(cfg.seed, 0))?;
            episodes_used += 1;
            let _ = writeln!(
                csv,
                "{step},{},{k},{ret},{}",
                cfg.inference.rule.as_str(),
                normalized_return(refs, ret)?
            );
            let better = match best {
                Some((b, _, _)) => ret > b,
                None => true,
            };
            if better {
                best = Some((ret, i, k));
            }
        }
    }
    let (best_return, idx, k_best) = best.expect("grid is nonempty");
    let csv_path = cfg.out_dir.join("finetune_embed.csv");
    std::fs::write(&csv_path, csv)?;
    Ok(FinetuneEmbedOutcome {
        selected_step: selected[idx].0,
        selected_path: selected[idx].1.clone(),
        k_best,
        best_return,
        csv_path,
        episodes_used,
    })
}
