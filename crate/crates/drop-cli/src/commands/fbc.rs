//! Filtered behavior cloning baseline: keep the top-return fraction of the
//! dataset, clone it with a single (constant-context) policy, and evaluate
//! with plain rollouts — no score model, no embedding inference.

use std::path::PathBuf;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use drop_core::approximator::AdamState;
use drop_core::behavior::{act, bc_update, embed, ActionSelect, ContextualPolicy, TaskEmbedding};
use drop_core::dataset::{decompose_rank, filter_top_fraction, sample_batch};
use drop_core::environments::Env;
use drop_core::exec::{derive_seed, map_chunks};
use drop_core::inference::ActionMode;

use crate::config::RunConfig;
use crate::envs::make_env;
use crate::error::{CliError, CliResult};
use crate::metrics::{write_metrics, write_summary, MetricsRow};
use crate::registry::{ensure_refs, normalized_return};
use crate::train::load_or_generate_dataset;

use super::eval::episode_seed;

pub struct FbcOutcome {
    pub metrics_path: PathBuf,
    pub summary_path: PathBuf,
    pub rows: Vec<MetricsRow>,
    pub final_bc_loss: f64,
}

fn plain_rollout(
    env: &mut dyn Env,
    policy: &ContextualPolicy,
    z: &[f64],
    mode: ActionMode,
    seed: u64,
) -> CliResult<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xfbc1));
    let mut state = env.reset(seed);
    let mut total = 0.0;
    for _ in 0..env.max_steps() {
        let action = match mode {
            ActionMode::Mean => act(policy, &state, z, ActionSelect::Mean)?,
            ActionMode::Sample => act(policy, &state, z, ActionSelect::Sample(&mut rng))?,
        };
        let out = env.step(&action)?;
        total += out.reward;
        if out.terminal {
            break;
        }
        state = out.next_state;
    }
    Ok(total)
}

pub fn run(cfg: &RunConfig) -> CliResult<FbcOutcome> {
    let dataset = load_or_generate_dataset(cfg)?;
    let filtered = filter_top_fraction(&dataset, cfg.fbc_fraction)?;
    std::fs::create_dir_all(&cfg.out_dir)?;

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0xfbc0));
    let mut te = TaskEmbedding::new(1, cfg.embed_dim, cfg.hidden_dim, &mut rng);
    let mut policy = ContextualPolicy::new(
        filtered.state_dim,
        filtered.action_dim,
        cfg.embed_dim,
        cfg.hidden_dim,
        &mut rng,
    );
    let mut embed_opt = AdamState::new(te.net.params.len(), 1e-3);
    let mut enc1_opt = AdamState::new(policy.enc1.params.len(), 1e-3);
    let mut enc2_opt = AdamState::new(policy.enc2.params.len(), 1e-3);
    let partition = decompose_rank(&filtered, 1, filtered.len())?;
    let mut sample_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0xfbc2));
    let mut final_bc_loss = f64::NAN;
    for _ in 0..cfg.fbc_steps {
        let (n, batch) = sample_batch(&partition, &filtered, cfg.batch_size, &mut sample_rng)?;
        final_bc_loss = bc_update(
            &mut te,
            &mut policy,
            &mut embed_opt,
            &mut enc1_opt,
            &mut enc2_opt,
            &batch,
            n,
        )?;
    }
    let z = embed(&te, 0)?;

    let refs = ensure_refs(&cfg.env_name, &cfg.out_dir)?;
    let episodes: Vec<usize> = (0..cfg.eval_episodes).collect();
    let per_episode: CliResult<Vec<(f64, f64)>> =
        map_chunks(&episodes, 1, |chunk| -> CliResult<(f64, f64)> {
            let ep = chunk[0];
            let mut env = make_env(&cfg.env_name)?;
            let started = Instant::now();
            let ret = plain_rollout(
                env.as_mut(),
                &policy,
                &z,
                cfg.inference.action_mode,
                episode_seed(cfg.seed, ep),
            )?;
            Ok((ret, started.elapsed().as_secs_f64() * 1e3))
        })
        .into_iter()
        .collect();
    let mut rows = Vec::new();
    for (ep, (ret, wall_ms)) in per_episode?.into_iter().enumerate() {
        rows.push(MetricsRow {
            seed: cfg.seed,
            training_step: cfg.fbc_steps as u64,
            checkpoint_id: 0,
            rule: "fbc".to_string(),
            episode: ep,
            ret,
            normalized_return: normalized_return(refs, ret)?,
            inference_calls: 0,
            wall_ms,
        });
    }

    let metrics_path = cfg.out_dir.join("metrics_fbc.csv");
    let summary_path = cfg.out_dir.join("metrics_fbc_summary.csv");
    write_metrics(&metrics_path, &rows)?;
    write_summary(&summary_path, &rows)?;
    if !final_bc_loss.is_finite() && cfg.fbc_steps > 0 {
        return Err(CliError::Numerical("F-BC loss went non-finite".to_string()));
    }
    Ok(FbcOutcome {
        metrics_path,
        summary_path,
        rows,
        final_bc_loss,
    })
}
