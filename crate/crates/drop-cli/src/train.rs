//! Training orchestration: alternate the cloning update and the score-model
//! step over sampled sub-task batches, writing evenly spaced checkpoints and
//! a windowed loss log.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use drop_core::behavior::{bc_update, cvae_update};
use drop_core::checkpoint::{save_checkpoint, Checkpoint};
use drop_core::dataset::{
    decompose_quantize, decompose_random, decompose_rank, sample_batch, DecompositionRule,
    OfflineDataset, SubTaskPartition,
};
use drop_core::exec::derive_seed;
use drop_core::models::{DropModels, EmbeddingModel, OptStates};
use drop_core::score::{set_conservatism, train_step, train_step_cvae};

use crate::config::RunConfig;
use crate::envs::generate_named_dataset;
use crate::error::{CliError, CliResult};

const ADAM_LR: f64 = 1e-3;

pub struct TrainOutcome {
    pub checkpoint_paths: Vec<PathBuf>,
    pub log_path: PathBuf,
    pub dataset_len: usize,
    pub final_losses: Option<(f64, f64, f64)>,
}

pub fn load_or_generate_dataset(cfg: &RunConfig) -> CliResult<OfflineDataset> {
    if let Some(path) = &cfg.dataset_path {
        if !path.exists() {
            return Err(CliError::Config(format!(
                "dataset file {} does not exist",
                path.display()
            )));
        }
        Ok(drop_core::dataset::load_dataset(path)?)
    } else if let Some(name) = &cfg.dataset_generator {
        generate_named_dataset(name, cfg.seed)
    } else {
        Err(CliError::Config(
            "either dataset.path or dataset.generator is required".to_string(),
        ))
    }
}

pub fn decompose(cfg: &RunConfig, dataset: &OfflineDataset) -> CliResult<SubTaskPartition> {
    let p = match cfg.decomposition_rule {
        DecompositionRule::Rank => {
            decompose_rank(dataset, cfg.decomposition_n, cfg.decomposition_m)?
        }
        DecompositionRule::Quantization => decompose_quantize(
            dataset,
            cfg.decomposition_n,
            cfg.decomposition_m,
            cfg.decomposition_seed,
        )?,
        DecompositionRule::Random => decompose_random(
            dataset,
            cfg.decomposition_n,
            cfg.decomposition_m,
            cfg.decomposition_seed,
        )?,
    };
    Ok(p)
}

/// Steps (1-based) after which a checkpoint is written: `checkpoints` evenly
/// spaced points ending at the final step.
fn checkpoint_steps(steps: usize, checkpoints: usize) -> Vec<usize> {
    if steps == 0 {
        return vec![0];
    }
    let mut out: Vec<usize> = (1..=checkpoints)
        .map(|i| (steps * i).div_ceil(checkpoints))
        .collect();
    out.dedup();
    out
}

pub fn checkpoint_file_name(step: usize) -> String {
    format!("ckpt_{step:08}.ckpt")
}

/// Sorted (step, path) pairs of every checkpoint in the directory.
pub fn list_checkpoints(dir: &Path) -> CliResult<Vec<(u64, PathBuf)>> {
    let mut out = Vec::new();
    if !dir.exists() {
        return Ok(out);
    }
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let name = match path.file_name().and_then(|n| n.to_str()) {
            Some(n) => n,
            None => continue,
        };
        if let Some(step) = name
            .strip_prefix("ckpt_")
            .and_then(|rest| rest.strip_suffix(".ckpt"))
            .and_then(|digits| digits.parse::<u64>().ok())
        {
            out.push((step, path));
        }
    }
    out.sort();
    Ok(out)
}

pub fn run_training(cfg: &RunConfig) -> CliResult<TrainOutcome> {
    let dataset = load_or_generate_dataset(cfg)?;
    if dataset.is_empty() {
        return Err(CliError::Data("dataset has no trajectories".to_string()));
    }
    std::fs::create_dir_all(&cfg.out_dir)?;

    // in CVAE mode batches come from the whole dataset
    let partition = if cfg.cvae {
        decompose_rank(&dataset, 1, dataset.len())?
    } else {
        decompose(cfg, &dataset)?
    };

    let mut models = if cfg.cvae {
        DropModels::new_cvae(
            dataset.state_dim,
            dataset.action_dim,
            cfg.embed_dim,
            cfg.hidden_dim,
            cfg.decomposition_n,
            cfg.score,
            cfg.seed,
        )
    } else {
        DropModels::new_tasks(
            dataset.state_dim,
            dataset.action_dim,
            cfg.decomposition_n,
            cfg.embed_dim,
            cfg.hidden_dim,
            cfg.score,
            cfg.seed,
        )
    };
    set_conservatism(&mut models.score, cfg.conservatism);
    let mut opts = OptStates::new(&models, ADAM_LR);

    let mut sample_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x5a11));
    let mut cvae_noise = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0xce00));
    let ood_base = derive_seed(cfg.seed, 0x00d5);

    let ckpt_at = checkpoint_steps(cfg.train_steps, cfg.checkpoints);
    let mut checkpoint_paths = Vec::new();
    let mut save = |models: &DropModels, opts: &OptStates, step: usize| -> CliResult<PathBuf> {
        let path = cfg.out_dir.join(checkpoint_file_name(step));
        save_checkpoint(
            &Checkpoint {
                models: models.clone(),
                opts: opts.clone(),
                training_step: step as u64,
            },
            &path,
        )?;
        Ok(path)
    };
    if cfg.train_steps == 0 {
        checkpoint_paths.push(save(&models, &opts, 0)?);
    }

    let mut log = String::from("step,bc_loss,recon_loss,kl_loss,td_loss,gap,lambda\n");
    let mut window: Vec<[f64; 6]> = Vec::with_capacity(cfg.log_every);
    let mut final_losses = None;

    for step in 0..cfg.train_steps {
        let (n, batch) = sample_batch(&partition, &dataset, cfg.batch_size, &mut sample_rng)?;
        let ood_seed = derive_seed(ood_base, step as u64);
        let row = match &mut models.embedding {
            EmbeddingModel::Tasks(te) => {
                let bc = bc_update(
                    te,
                    &mut models.policy,
                    &mut opts.embed,
                    &mut opts.enc1,
                    &mut opts.enc2,
                    &batch,
                    n,
                )?;
                let losses = train_step(
                    &mut models.score,
                    te,
                    &models.policy,
                    &mut opts.enc3,
                    &mut opts.enc4,
                    &mut opts.embed,
                    &batch,
                    n,
                    ood_seed,
                )?;
                final_losses = Some((bc, losses.td, losses.gap));
                [bc, f64::NAN, f64::NAN, losses.td, losses.gap, losses.lambda]
            }
            EmbeddingModel::Cvae { encoder, .. } => {
                let (recon, kl) = cvae_update(
                    encoder,
                    &mut models.policy,
                    &mut opts.embed,
                    &mut opts.enc1,
                    &mut opts.enc2,
                    &batch,
                    &mut cvae_noise,
                )?;
                let losses = train_step_cvae(
                    &mut models.score,
                    encoder,
                    &models.policy,
                    &mut opts.enc3,
                    &mut opts.enc4,
                    &mut opts.embed,
                    &batch,
                    ood_seed,
                )?;
                final_losses = Some((recon + kl, losses.td, losses.gap));
                [
                    f64::NAN,
                    recon,
                    kl,
                    losses.td,
                    losses.gap,
                    losses.lambda,
                ]
            }
        };
        window.push(row);
        let done = step + 1;
        if done % cfg.log_every == 0 || done == cfg.train_steps {
            let n_rows = window.len() as f64;
            let mut means = [0.0; 6];
            for r in &window {
                for (m, v) in means.iter_mut().zip(r) {
                    if v.is_finite() {
                        *m += v / n_rows;
                    }
                }
            }
            let cells: Vec<String> = means.iter().map(|v| format!("{v}")).collect();
            let _ = writeln!(log, "{},{}", done, cells.join(","));
            window.clear();
        }
        if ckpt_at.contains(&done) {
            checkpoint_paths.push(save(&models, &opts, done)?);
        }
    }

    let log_path = cfg.out_dir.join("train_log.csv");
    std::fs::write(&log_path, log)?;
    Ok(TrainOutcome {
        checkpoint_paths,
        log_path,
        dataset_len: dataset.len(),
        final_losses,
    })
}
