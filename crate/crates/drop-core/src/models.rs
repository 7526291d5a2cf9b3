//! Bundles the trainable pieces (embedding provider, contextual policy,
//! score model) with their optimizer states.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::approximator::AdamState;
use crate::behavior::{embed, ContextualPolicy, CvaeEncoder, TaskEmbedding};
use crate::error::Result;
use crate::exec::derive_seed;
use crate::inference::ModelSet;
use crate::score::{ConservativeScoreModel, ScoreConfig, CVAE_SUPPORT};
use crate::util::standard_normal;

/// Candidate draws in CVAE mode are prior samples under this fixed seed, so
/// every evaluation of a checkpoint sees the same starting points.
const CVAE_CANDIDATE_SEED: u64 = 0xC4AD_1DA7;

#[derive(Debug, Clone)]
pub enum EmbeddingModel {
    Tasks(TaskEmbedding),
    Cvae {
        encoder: CvaeEncoder,
        n_candidates: usize,
    },
}

#[derive(Debug, Clone)]
pub struct DropModels {
    pub embedding: EmbeddingModel,
    pub policy: ContextualPolicy,
    pub score: ConservativeScoreModel,
}

impl DropModels {
    /// Partition-mode models: a task-embedding table over `n_subtasks`.
    pub fn new_tasks(
        state_dim: usize,
        action_dim: usize,
        n_subtasks: usize,
        dim_z: usize,
        hidden: usize,
        score_cfg: ScoreConfig,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x0de1));
        let te = TaskEmbedding::new(n_subtasks, dim_z, hidden, &mut rng);
        let policy = ContextualPolicy::new(state_dim, action_dim, dim_z, hidden, &mut rng);
        let score = ConservativeScoreModel::new(state_dim, action_dim, dim_z, hidden, score_cfg, &mut rng);
        Self {
            embedding: EmbeddingModel::Tasks(te),
            policy,
            score,
        }
    }

    /// CVAE-mode models: embeddings come from an encoder posterior; the
    /// multi-start candidates are fixed prior draws.
    pub fn new_cvae(
        state_dim: usize,
        action_dim: usize,
        dim_z: usize,
        hidden: usize,
        n_candidates: usize,
        score_cfg: ScoreConfig,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x0de2));
        let encoder = CvaeEncoder::new(state_dim, action_dim, dim_z, hidden, &mut rng);
        let policy = ContextualPolicy::new(state_dim, action_dim, dim_z, hidden, &mut rng);
        let mut score =
            ConservativeScoreModel::new(state_dim, action_dim, dim_z, hidden, score_cfg, &mut rng);
        score.support = CVAE_SUPPORT;
        Self {
            embedding: EmbeddingModel::Cvae {
                encoder,
                n_candidates,
            },
            policy,
            score,
        }
    }

    pub fn dim_z(&self) -> usize {
        self.policy.dim_z
    }

    pub fn is_cvae(&self) -> bool {
        matches!(self.embedding, EmbeddingModel::Cvae { .. })
    }

    pub fn model_set(&self) -> ModelSet<'_> {
        ModelSet {
            policy: &self.policy,
            score: &self.score,
        }
    }

    /// Multi-start candidates: the embeddings of every sub-task, or fixed
    /// prior draws in CVAE mode.
    pub fn candidates(&self) -> Result<Vec<Vec<f64>>> {
        match &self.embedding {
            EmbeddingModel::Tasks(te) => {
                (0..te.n_subtasks).map(|n| embed(te, n)).collect()
            }
            EmbeddingModel::Cvae {
                encoder,
                n_candidates,
            } => {
                let (lo, hi) = self.score.support;
                let mut rng = ChaCha8Rng::seed_from_u64(CVAE_CANDIDATE_SEED);
                Ok((0..*n_candidates)
                    .map(|_| {
                        (0..encoder.dim_z)
                            .map(|_| standard_normal(&mut rng).clamp(lo, hi))
                            .collect()
                    })
                    .collect())
            }
        }
    }
}

/// Adam states for every trainable block. `embed` drives the task-embedding
/// net in partition mode and the CVAE encoder otherwise.
#[derive(Debug, Clone)]
pub struct OptStates {
    pub embed: AdamState,
    pub enc1: AdamState,
    pub enc2: AdamState,
    pub enc3: AdamState,
    pub enc4: AdamState,
}

impl OptStates {
    pub fn new(models: &DropModels, lr: f64) -> Self {
        let embed_len = match &models.embedding {
            EmbeddingModel::Tasks(te) => te.net.params.len(),
            EmbeddingModel::Cvae { encoder, .. } => encoder.net.params.len(),
        };
        Self {
            embed: AdamState::new(embed_len, lr),
            enc1: AdamState::new(models.policy.enc1.params.len(), lr),
            enc2: AdamState::new(models.policy.enc2.params.len(), lr),
            enc3: AdamState::new(models.score.enc3.params.len(), lr),
            enc4: AdamState::new(models.score.enc4.params.len(), lr),
        }
    }
}
