//! Conservative score model f(s, a, z): TD regression to behavior values
//! with a Lagrangian-enforced conservatism gap.
//!
//! The TD target is SARSA-on-data: `r + gamma * (1 - terminal) * f_bar(s',
//! a', z)` with `a'` the action actually taken next in the trajectory, so
//! only behavior-policy values are ever queried. The constraint pushes the
//! expected score of uniform out-of-distribution embeddings below the
//! in-distribution expectation, up to the threshold `eta`; it is enforced by
//! single-timescale primal-dual gradient descent with the multiplier
//! projected to stay nonnegative. Policy parameters receive no gradients
//! here; the embedding net receives both TD and (lambda-weighted) gap
//! gradients. The target copy trails the online nets by soft blending.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::approximator::{
    adam_step, soft_blend, AdamState, MlpRef, MlpSpec, Net, NodeId, ParamVector, Tape,
};
use crate::behavior::{
    cvae_dist_on_tape, embed_on_tape, policy_dist_on_tape, ContextualPolicy, CvaeEncoder,
    TaskEmbedding,
};
use crate::dataset::Transition;
use crate::error::{DropError, Result};
use crate::exec::{map_chunks, LossAccum, DEFAULT_CHUNK};

/// Support box of the OOD embedding distribution when embeddings come from
/// the tanh task-embedding table.
pub const EMBED_SUPPORT: (f64, f64) = (-1.0, 1.0);
/// Support box in CVAE mode (about three sigma of the standard-normal
/// prior).
pub const CVAE_SUPPORT: (f64, f64) = (-3.0, 3.0);

#[derive(Debug, Clone, Copy)]
pub struct ScoreConfig {
    pub gamma: f64,
    pub upsilon: f64,
    pub eta: f64,
    pub lambda_init: f64,
    pub lambda_lr: f64,
    pub n_ood: usize,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            upsilon: 5e-3,
            eta: 2.0,
            lambda_init: 1.0,
            lambda_lr: 1e-3,
            n_ood: 10,
        }
    }
}

/// Score model with its frozen target copy and Lagrange multiplier.
#[derive(Debug, Clone)]
pub struct ConservativeScoreModel {
    pub enc3: Net,
    pub enc4: Net,
    pub target_enc3: ParamVector,
    pub target_enc4: ParamVector,
    pub gamma: f64,
    pub upsilon: f64,
    pub eta: f64,
    pub lambda: f64,
    pub lambda_lr: f64,
    pub n_ood: usize,
    pub conservatism: bool,
    /// OOD sampling box; matches the embedding family in use.
    pub support: (f64, f64),
}

impl ConservativeScoreModel {
    pub fn new(
        state_dim: usize,
        action_dim: usize,
        dim_z: usize,
        hidden: usize,
        cfg: ScoreConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let enc3 = Net::new(
            MlpSpec::new(state_dim + action_dim, vec![hidden, hidden], hidden),
            rng,
        );
        let enc4 = Net::new(
            MlpSpec::new(dim_z + hidden, vec![hidden, hidden, hidden], 1),
            rng,
        );
        Self {
            target_enc3: enc3.params.clone(),
            target_enc4: enc4.params.clone(),
            enc3,
            enc4,
            gamma: cfg.gamma,
            upsilon: cfg.upsilon,
            eta: cfg.eta,
            lambda: cfg.lambda_init,
            lambda_lr: cfg.lambda_lr,
            n_ood: cfg.n_ood,
            conservatism: true,
            support: EMBED_SUPPORT,
        }
    }
}

fn score_with(
    m: &ConservativeScoreModel,
    p3: &ParamVector,
    p4: &ParamVector,
    s: &[f64],
    a: &[f64],
    z: &[f64],
) -> Result<f64> {
    let mut sa = s.to_vec();
    sa.extend_from_slice(a);
    let h = crate::approximator::forward(&m.enc3.spec, p3, &sa)?;
    let mut zh = z.to_vec();
    zh.extend_from_slice(&h);
    let out = crate::approximator::forward(&m.enc4.spec, p4, &zh)?;
    Ok(out[0])
}

/// f(s, a, z) under the online nets. Pure.
pub fn score(m: &ConservativeScoreModel, s: &[f64], a: &[f64], z: &[f64]) -> Result<f64> {
    score_with(m, &m.enc3.params, &m.enc4.params, s, a, z)
}

/// f_bar(s, a, z) under the target copy.
pub fn score_target(m: &ConservativeScoreModel, s: &[f64], a: &[f64], z: &[f64]) -> Result<f64> {
    score_with(m, &m.target_enc3, &m.target_enc4, s, a, z)
}

/// Builds the scalar f(s, a, z) node on a tape.
pub(crate) fn score_on_tape(
    tape: &mut Tape,
    enc3: MlpRef,
    enc4: MlpRef,
    s: NodeId,
    a: NodeId,
    z: NodeId,
) -> Result<NodeId> {
    let sa = tape.concat(s, a);
    let h = tape.mlp(enc3, sa)?;
    let zh = tape.concat(z, h);
    tape.mlp(enc4, zh)
}

/// TD loss and gradients. Gradients cover the online score nets and, when a
/// task embedding is given, the embedding net (the target side is detached).
#[derive(Debug, Clone)]
pub struct LossGrads {
    pub value: f64,
    pub enc3: Vec<f64>,
    pub enc4: Vec<f64>,
    /// Gradient of the embedding provider (task-embedding net or CVAE
    /// encoder).
    pub embed: Vec<f64>,
}

enum ZProvider<'a> {
    Tasks(&'a TaskEmbedding, usize),
    Cvae(&'a CvaeEncoder),
}

impl ZProvider<'_> {
    fn params_len(&self) -> usize {
        match self {
            ZProvider::Tasks(te, _) => te.net.params.len(),
            ZProvider::Cvae(enc) => enc.net.params.len(),
        }
    }

    /// Detached embedding value for the target side.
    fn z_value(&self, tr: &Transition) -> Result<Vec<f64>> {
        match self {
            ZProvider::Tasks(te, n) => crate::behavior::embed(te, *n),
            ZProvider::Cvae(enc) => Ok(enc.mean_and_log_std(&tr.state, &tr.action)?.0),
        }
    }

    fn register(&self, tape: &mut Tape) -> Result<MlpRef> {
        match self {
            ZProvider::Tasks(te, _) => tape.register(&te.net.spec, &te.net.params),
            ZProvider::Cvae(enc) => tape.register(&enc.net.spec, &enc.net.params),
        }
    }

    /// Embedding node with gradients flowing into the provider.
    fn z_node(&self, tape: &mut Tape, net: MlpRef, tr: &Transition) -> Result<NodeId> {
        match self {
            ZProvider::Tasks(te, n) => embed_on_tape(tape, te, net, *n),
            ZProvider::Cvae(enc) => {
                let s = tape.constant(&tr.state);
                let a = tape.constant(&tr.action);
                let (mu, _) = cvae_dist_on_tape(tape, net, s, a, enc.dim_z)?;
                Ok(mu)
            }
        }
    }
}

fn td_loss_impl(
    m: &ConservativeScoreModel,
    provider: &ZProvider,
    batch: &[Transition],
) -> Result<LossGrads> {
    if batch.is_empty() {
        return Err(DropError::EmptyInput("empty batch".to_string()));
    }
    for tr in batch {
        if !tr.terminal && tr.next_action.is_none() {
            return Err(DropError::Data(
                "non-terminal transition without next action".to_string(),
            ));
        }
    }
    let lens = [
        m.enc3.params.len(),
        m.enc4.params.len(),
        provider.params_len(),
    ];
    let chunks: Result<Vec<LossAccum>> = map_chunks(batch, DEFAULT_CHUNK, |chunk| {
        td_chunk(m, provider, chunk)
    })
    .into_iter()
    .collect();
    let accum = chunks?
        .into_iter()
        .fold(LossAccum::zeros(&lens), |a, b| a.merge(&b));
    let (value, mut grads) = accum.into_mean();
    let embed = grads.pop().expect("three grad blocks");
    let enc4 = grads.pop().expect("two grad blocks");
    let enc3 = grads.pop().expect("one grad block");
    Ok(LossGrads {
        value,
        enc3,
        enc4,
        embed,
    })
}

fn td_chunk(
    m: &ConservativeScoreModel,
    provider: &ZProvider,
    chunk: &[Transition],
) -> Result<LossAccum> {
    let mut tape = Tape::new();
    let e3 = tape.register(&m.enc3.spec, &m.enc3.params)?;
    let e4 = tape.register(&m.enc4.spec, &m.enc4.params)?;
    let pnet = provider.register(&mut tape)?;
    // shared z node when the provider is the task-embedding table
    let shared_z = match provider {
        ZProvider::Tasks(..) => Some(provider.z_node(&mut tape, pnet, &chunk[0])?),
        ZProvider::Cvae(_) => None,
    };
    let mut total: Option<NodeId> = None;
    for tr in chunk {
        let z = match shared_z {
            Some(z) => z,
            None => provider.z_node(&mut tape, pnet, tr)?,
        };
        // bootstrap target, detached from all gradients
        let target = if tr.terminal {
            tr.reward
        } else {
            let a_next = tr.next_action.as_ref().expect("checked above");
            let z_val = provider.z_value(tr)?;
            let f_bar = score_with(m, &m.target_enc3, &m.target_enc4, &tr.next_state, a_next, &z_val)?;
            tr.reward + m.gamma * f_bar
        };
        let s = tape.constant(&tr.state);
        let a = tape.constant(&tr.action);
        let f = score_on_tape(&mut tape, e3, e4, s, a, z)?;
        let t = tape.constant(&[target]);
        let err = tape.squared_error(f, t);
        total = Some(match total {
            Some(acc) => tape.add(acc, err),
            None => err,
        });
    }
    let loss = total.expect("chunk is nonempty");
    let grads = tape.backward(loss)?;
    Ok(LossAccum {
        loss_sum: tape.scalar(loss),
        grads: vec![
            grads.net(e3).to_vec(),
            grads.net(e4).to_vec(),
            grads.net(pnet).to_vec(),
        ],
        count: chunk.len(),
    })
}

/// Mean squared TD error of the batch against the target copy, with
/// gradients for the online nets and the embedding net.
pub fn td_loss(
    m: &ConservativeScoreModel,
    te: &TaskEmbedding,
    batch: &[Transition],
    n: usize,
) -> Result<LossGrads> {
    td_loss_impl(m, &ZProvider::Tasks(te, n), batch)
}

/// CVAE-mode TD loss: z comes from the encoder posterior mean at (s, a).
pub fn td_loss_cvae(
    m: &ConservativeScoreModel,
    enc: &CvaeEncoder,
    batch: &[Transition],
) -> Result<LossGrads> {
    td_loss_impl(m, &ZProvider::Cvae(enc), batch)
}

fn gap_impl(
    m: &ConservativeScoreModel,
    provider: &ZProvider,
    policy: &ContextualPolicy,
    batch: &[Transition],
    ood_seed: u64,
) -> Result<LossGrads> {
    if batch.is_empty() {
        return Err(DropError::EmptyInput("empty batch".to_string()));
    }
    // all OOD draws happen up front so the result is chunking-independent
    let mut rng = ChaCha8Rng::seed_from_u64(ood_seed);
    let dim_z = policy.dim_z;
    let (lo, hi) = m.support;
    let ood: Vec<Vec<Vec<f64>>> = batch
        .iter()
        .map(|_| {
            (0..m.n_ood)
                .map(|_| (0..dim_z).map(|_| rng.gen_range(lo..hi)).collect())
                .collect()
        })
        .collect();
    let items: Vec<(&Transition, &Vec<Vec<f64>>)> = batch.iter().zip(ood.iter()).collect();
    let lens = [
        m.enc3.params.len(),
        m.enc4.params.len(),
        provider.params_len(),
    ];
    let chunks: Result<Vec<LossAccum>> = map_chunks(&items, DEFAULT_CHUNK, |chunk| {
        gap_chunk(m, provider, policy, chunk)
    })
    .into_iter()
    .collect();
    let accum = chunks?
        .into_iter()
        .fold(LossAccum::zeros(&lens), |a, b| a.merge(&b));
    let (value, mut grads) = accum.into_mean();
    let embed = grads.pop().expect("three grad blocks");
    let enc4 = grads.pop().expect("two grad blocks");
    let enc3 = grads.pop().expect("one grad block");
    Ok(LossGrads {
        value,
        enc3,
        enc4,
        embed,
    })
}

fn gap_chunk(
    m: &ConservativeScoreModel,
    provider: &ZProvider,
    policy: &ContextualPolicy,
    chunk: &[(&Transition, &Vec<Vec<f64>>)],
) -> Result<LossAccum> {
    let mut tape = Tape::new();
    let e3 = tape.register(&m.enc3.spec, &m.enc3.params)?;
    let e4 = tape.register(&m.enc4.spec, &m.enc4.params)?;
    let pnet = provider.register(&mut tape)?;
    let e1 = tape.register(&policy.enc1.spec, &policy.enc1.params)?;
    let e2 = tape.register(&policy.enc2.spec, &policy.enc2.params)?;
    let shared_z = match provider {
        ZProvider::Tasks(..) => Some(provider.z_node(&mut tape, pnet, chunk[0].0)?),
        ZProvider::Cvae(_) => None,
    };
    let mut total: Option<NodeId> = None;
    for (tr, oods) in chunk {
        let s = tape.constant(&tr.state);
        let z_in = match shared_z {
            Some(z) => z,
            None => provider.z_node(&mut tape, pnet, tr)?,
        };
        // in-distribution side: action is the policy mean at (s, z_n)
        let (a_in, _) = policy_dist_on_tape(&mut tape, e1, e2, s, z_in, policy.action_dim)?;
        let f_in = score_on_tape(&mut tape, e3, e4, s, a_in, z_in)?;
        // OOD side: uniform embeddings are constants
        let mut ood_sum: Option<NodeId> = None;
        for z_ood in oods.iter() {
            let zc = tape.constant(z_ood);
            let (a_ood, _) = policy_dist_on_tape(&mut tape, e1, e2, s, zc, policy.action_dim)?;
            let f_ood = score_on_tape(&mut tape, e3, e4, s, a_ood, zc)?;
            ood_sum = Some(match ood_sum {
                Some(acc) => tape.add(acc, f_ood),
                None => f_ood,
            });
        }
        let ood_mean = tape.scale(ood_sum.expect("n_ood >= 1"), 1.0 / oods.len() as f64);
        let per_state = tape.sub(ood_mean, f_in);
        total = Some(match total {
            Some(acc) => tape.add(acc, per_state),
            None => per_state,
        });
    }
    let gap = total.expect("chunk is nonempty");
    let grads = tape.backward(gap)?;
    Ok(LossAccum {
        loss_sum: tape.scalar(gap),
        grads: vec![
            grads.net(e3).to_vec(),
            grads.net(e4).to_vec(),
            grads.net(pnet).to_vec(),
        ],
        count: chunk.len(),
    })
}

/// Conservatism gap: mean over batch states of (mean OOD score - in
/// distribution score), both sides scored at the policy's mean action.
pub fn conservative_gap(
    m: &ConservativeScoreModel,
    te: &TaskEmbedding,
    policy: &ContextualPolicy,
    batch: &[Transition],
    n: usize,
    ood_seed: u64,
) -> Result<LossGrads> {
    gap_impl(m, &ZProvider::Tasks(te, n), policy, batch, ood_seed)
}

pub fn conservative_gap_cvae(
    m: &ConservativeScoreModel,
    enc: &CvaeEncoder,
    policy: &ContextualPolicy,
    batch: &[Transition],
    ood_seed: u64,
) -> Result<LossGrads> {
    gap_impl(m, &ZProvider::Cvae(enc), policy, batch, ood_seed)
}

#[derive(Debug, Clone, Copy)]
pub struct TrainLosses {
    pub td: f64,
    pub gap: f64,
    pub lambda: f64,
}

#[allow(clippy::too_many_arguments)]
fn train_step_impl(
    m: &mut ConservativeScoreModel,
    provider: &ZProvider,
    provider_params: &ParamVector,
    policy: &ContextualPolicy,
    enc3_opt: &mut AdamState,
    enc4_opt: &mut AdamState,
    embed_opt: &mut AdamState,
    batch: &[Transition],
    ood_seed: u64,
) -> Result<(TrainLosses, ParamVector)> {
    let td = td_loss_impl(m, provider, batch)?;
    let gap = if m.conservatism {
        Some(gap_impl(m, provider, policy, batch, ood_seed)?)
    } else {
        None
    };
    let gap_value = gap.as_ref().map_or(0.0, |g| g.value);
    let primal = td.value + m.lambda * gap_value;
    if !primal.is_finite() {
        return Err(DropError::Numerical(format!(
            "non-finite primal objective {primal}"
        )));
    }

    let combine = |a: &[f64], b: Option<&Vec<f64>>| -> Vec<f64> {
        match b {
            Some(b) => a
                .iter()
                .zip(b)
                .map(|(x, y)| x + m.lambda * y)
                .collect(),
            None => a.to_vec(),
        }
    };
    let g3 = combine(&td.enc3, gap.as_ref().map(|g| &g.enc3));
    let g4 = combine(&td.enc4, gap.as_ref().map(|g| &g.enc4));
    let ge = combine(&td.embed, gap.as_ref().map(|g| &g.embed));

    let (p3, s3) = adam_step(&m.enc3.params, &g3, enc3_opt)?;
    let (p4, s4) = adam_step(&m.enc4.params, &g4, enc4_opt)?;
    let (pe, se) = adam_step(provider_params, &ge, embed_opt)?;
    m.enc3.params = p3;
    *enc3_opt = s3;
    m.enc4.params = p4;
    *enc4_opt = s4;
    *embed_opt = se;

    // dual ascent with projection onto lambda >= 0
    if m.conservatism {
        m.lambda = (m.lambda + m.lambda_lr * (gap_value - m.eta)).max(0.0);
    } else {
        m.lambda = 0.0;
    }

    m.target_enc3 = soft_blend(&m.target_enc3, &m.enc3.params, m.upsilon)?;
    m.target_enc4 = soft_blend(&m.target_enc4, &m.enc4.params, m.upsilon)?;

    Ok((
        TrainLosses {
            td: td.value,
            gap: gap_value,
            lambda: m.lambda,
        },
        pe,
    ))
}

/// One primal step on `td + lambda * gap` followed by one dual ascent step
/// and a target soft-blend. The embedding net trains too; the policy is
/// read-only.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    m: &mut ConservativeScoreModel,
    te: &mut TaskEmbedding,
    policy: &ContextualPolicy,
    enc3_opt: &mut AdamState,
    enc4_opt: &mut AdamState,
    embed_opt: &mut AdamState,
    batch: &[Transition],
    n: usize,
    ood_seed: u64,
) -> Result<TrainLosses> {
    let provider_params = te.net.params.clone();
    let (losses, new_params) = train_step_impl(
        m,
        &ZProvider::Tasks(te, n),
        &provider_params,
        policy,
        enc3_opt,
        enc4_opt,
        embed_opt,
        batch,
        ood_seed,
    )?;
    te.net.params = new_params;
    Ok(losses)
}

#[allow(clippy::too_many_arguments)]
pub fn train_step_cvae(
    m: &mut ConservativeScoreModel,
    enc: &mut CvaeEncoder,
    policy: &ContextualPolicy,
    enc3_opt: &mut AdamState,
    enc4_opt: &mut AdamState,
    encoder_opt: &mut AdamState,
    batch: &[Transition],
    ood_seed: u64,
) -> Result<TrainLosses> {
    let provider_params = enc.net.params.clone();
    let (losses, new_params) = train_step_impl(
        m,
        &ZProvider::Cvae(enc),
        &provider_params,
        policy,
        enc3_opt,
        enc4_opt,
        encoder_opt,
        batch,
        ood_seed,
    )?;
    enc.net.params = new_params;
    Ok(losses)
}

/// w/o-Reg ablation switch: disabled freezes lambda at zero (TD-only
/// training).
pub fn set_conservatism(m: &mut ConservativeScoreModel, enabled: bool) {
    m.conservatism = enabled;
    if !enabled {
        m.lambda = 0.0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::behavior::{embed, zero_params};
    use crate::dataset::{decompose_rank, sample_batch};
    use crate::environments::{chain_env, chain_q_oracle, generate_dataset, Controller, ScriptedPolicy};
    use crate::exec::derive_seed;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn tiny_model(dim_z: usize, hidden: usize, cfg: ScoreConfig, seed: u64) -> ConservativeScoreModel {
        ConservativeScoreModel::new(1, 1, dim_z, hidden, cfg, &mut rng(seed))
    }

    #[test]
    fn zero_weight_score_is_zero_and_pure() {
        let mut m = tiny_model(2, 8, ScoreConfig::default(), 0);
        zero_params(&mut m.enc3);
        zero_params(&mut m.enc4);
        let a = score(&m, &[0.4], &[0.2], &[0.1, -0.1]).unwrap();
        let b = score(&m, &[0.4], &[0.2], &[0.1, -0.1]).unwrap();
        assert_eq!(a, 0.0);
        assert_eq!(a.to_bits(), b.to_bits());
    }

    fn terminal_transition(reward: f64) -> Transition {
        Transition {
            state: vec![0.0],
            action: vec![0.0],
            reward,
            next_state: vec![0.0],
            next_action: None,
            terminal: true,
        }
    }

    fn loop_transition(reward: f64) -> Transition {
        Transition {
            state: vec![0.0],
            action: vec![0.0],
            reward,
            next_state: vec![0.0],
            next_action: Some(vec![0.0]),
            terminal: false,
        }
    }

    #[test]
    fn terminal_bootstrap_is_masked() {
        // f == f_bar == 0 and a terminal reward of 1: the target is exactly
        // 1, so the loss is exactly 1
        let mut m = tiny_model(2, 8, ScoreConfig::default(), 1);
        zero_params(&mut m.enc3);
        zero_params(&mut m.enc4);
        m.target_enc3 = m.enc3.params.clone();
        m.target_enc4 = m.enc4.params.clone();
        let mut te = TaskEmbedding::new(1, 2, 8, &mut rng(2));
        zero_params(&mut te.net);
        let out = td_loss(&m, &te, &[terminal_transition(1.0)], 0).unwrap();
        assert!((out.value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_everything_gives_zero_td_loss() {
        let mut m = tiny_model(2, 8, ScoreConfig::default(), 3);
        zero_params(&mut m.enc3);
        zero_params(&mut m.enc4);
        m.target_enc3 = m.enc3.params.clone();
        m.target_enc4 = m.enc4.params.clone();
        let mut te = TaskEmbedding::new(1, 2, 8, &mut rng(4));
        zero_params(&mut te.net);
        let out = td_loss(&m, &te, &vec![loop_transition(0.0); 4], 0).unwrap();
        assert_eq!(out.value, 0.0);
    }

    #[test]
    fn missing_next_action_is_a_data_error() {
        let m = tiny_model(2, 8, ScoreConfig::default(), 5);
        let te = TaskEmbedding::new(1, 2, 8, &mut rng(6));
        let mut tr = loop_transition(0.0);
        tr.next_action = None;
        assert!(matches!(
            td_loss(&m, &te, &[tr], 0),
            Err(DropError::Data(_))
        ));
    }

    #[test]
    fn constant_score_has_zero_gap() {
        let mut m = tiny_model(2, 8, ScoreConfig::default(), 7);
        zero_params(&mut m.enc3);
        zero_params(&mut m.enc4);
        let mut te = TaskEmbedding::new(1, 2, 8, &mut rng(8));
        zero_params(&mut te.net);
        let policy = ContextualPolicy::new(1, 1, 2, 8, &mut rng(9));
        let out = conservative_gap(&m, &te, &policy, &vec![loop_transition(0.0); 3], 0, 11).unwrap();
        assert_eq!(out.value, 0.0);
    }

    #[test]
    fn linear_score_gap_matches_closed_form() {
        // f(s, a, z) = c * z_1 via a single linear enc4 layer; the task
        // embedding is zero, so the gap equals c times the mean of the
        // drawn OOD first coordinates.
        let c = 3.0;
        let hidden = 4;
        let dim_z = 2;
        let mut m = tiny_model(dim_z, hidden, ScoreConfig::default(), 10);
        zero_params(&mut m.enc3);
        m.enc4 = Net {
            spec: MlpSpec::new(dim_z + hidden, vec![], 1),
            params: ParamVector::zeros((dim_z + hidden) + 1),
        };
        m.enc4.params.as_mut_slice()[0] = c; // weight on z_1
        m.target_enc3 = m.enc3.params.clone();
        m.target_enc4 = m.enc4.params.clone();
        let mut te = TaskEmbedding::new(1, dim_z, 8, &mut rng(11));
        zero_params(&mut te.net);
        let policy = ContextualPolicy::new(1, 1, dim_z, 8, &mut rng(12));
        let batch = vec![loop_transition(0.0); 5];
        let ood_seed = 99;
        let out = conservative_gap(&m, &te, &policy, &batch, 0, ood_seed).unwrap();

        // replicate the documented draw order: per state, then per sample,
        // then per dimension
        let mut r = ChaCha8Rng::seed_from_u64(ood_seed);
        let mut expected = 0.0;
        for _ in 0..batch.len() {
            let mut state_mean = 0.0;
            for _ in 0..m.n_ood {
                let z1: f64 = r.gen_range(EMBED_SUPPORT.0..EMBED_SUPPORT.1);
                let _z2: f64 = r.gen_range(EMBED_SUPPORT.0..EMBED_SUPPORT.1);
                state_mean += c * z1;
            }
            expected += state_mean / m.n_ood as f64;
        }
        expected /= batch.len() as f64;
        assert!(
            (out.value - expected).abs() < 1e-10,
            "gap {} vs expected {expected}",
            out.value
        );

        let again = conservative_gap(&m, &te, &policy, &batch, 0, ood_seed).unwrap();
        assert_eq!(out.value.to_bits(), again.value.to_bits());
    }

    #[test]
    fn small_gap_decays_lambda_to_zero_and_clamps() {
        let cfg = ScoreConfig {
            lambda_lr: 0.2,
            ..ScoreConfig::default()
        };
        let mut m = tiny_model(2, 8, cfg, 13);
        let mut te = TaskEmbedding::new(1, 2, 8, &mut rng(14));
        let policy = ContextualPolicy::new(1, 1, 2, 8, &mut rng(15));
        let mut o3 = AdamState::new(m.enc3.params.len(), 1e-4);
        let mut o4 = AdamState::new(m.enc4.params.len(), 1e-4);
        let mut eopt = AdamState::new(te.net.params.len(), 1e-4);
        let batch = vec![loop_transition(0.1); 8];
        for step in 0..30 {
            let out = train_step(
                &mut m, &mut te, &policy, &mut o3, &mut o4, &mut eopt, &batch, 0,
                derive_seed(1, step),
            )
            .unwrap();
            assert!(out.lambda >= 0.0);
        }
        assert_eq!(m.lambda, 0.0, "lambda must decay to zero and clamp");
    }

    #[test]
    fn large_gap_with_frozen_primal_grows_lambda() {
        // craft f = 3 * z_1 and an in-distribution embedding near (-1, .),
        // so the gap is ~3 > eta = 2; with zero learning rates the primal
    // stays frozen and the dual must increase strictly
        let c = 3.0;
        let hidden = 4;
        let dim_z = 2;
        let mut m = tiny_model(dim_z, hidden, ScoreConfig::default(), 16);
        zero_params(&mut m.enc3);
        m.enc4 = Net {
            spec: MlpSpec::new(dim_z + hidden, vec![], 1),
            params: ParamVector::zeros((dim_z + hidden) + 1),
        };
        m.enc4.params.as_mut_slice()[0] = c;
        m.target_enc3 = m.enc3.params.clone();
        m.target_enc4 = m.enc4.params.clone();
        let mut te = TaskEmbedding::new(1, dim_z, 8, &mut rng(17));
        zero_params(&mut te.net);
        // bias of the embedding net output layer: z_1 = tanh(-5) ~ -0.9999
        let len = te.net.params.len();
        te.net.params.as_mut_slice()[len - 2] = -5.0;
        let policy = ContextualPolicy::new(1, 1, dim_z, 8, &mut rng(18));
        let mut o3 = AdamState::new(m.enc3.params.len(), 0.0);
        let mut o4 = AdamState::new(m.enc4.params.len(), 0.0);
        let mut eopt = AdamState::new(te.net.params.len(), 0.0);
        let batch = vec![loop_transition(0.0); 4];
        let mut last = m.lambda;
        for step in 0..10 {
            let out = train_step(
                &mut m, &mut te, &policy, &mut o3, &mut o4, &mut eopt, &batch, 0,
                derive_seed(2, step),
            )
            .unwrap();
            assert!(out.gap > m.eta, "gap {} must exceed eta", out.gap);
            assert!(out.lambda > last, "lambda must grow strictly");
            last = out.lambda;
        }
    }

    #[test]
    fn disabled_conservatism_keeps_lambda_zero_and_matches_on_step_one() {
        let mk = || {
            let m = tiny_model(2, 8, ScoreConfig::default(), 19);
            let te = TaskEmbedding::new(1, 2, 8, &mut rng(20));
            let policy = ContextualPolicy::new(1, 1, 2, 8, &mut rng(21));
            (m, te, policy)
        };
        let (mut on, mut te_on, policy) = mk();
        let (mut off, mut te_off, _) = mk();
        set_conservatism(&mut off, false);
        let batch = vec![loop_transition(0.5); 8];

        let mut on3 = AdamState::new(on.enc3.params.len(), 1e-3);
        let mut on4 = AdamState::new(on.enc4.params.len(), 1e-3);
        let mut eopt_on = AdamState::new(te_on.net.params.len(), 1e-3);
        let mut off3 = AdamState::new(off.enc3.params.len(), 1e-3);
        let mut off4 = AdamState::new(off.enc4.params.len(), 1e-3);
        let mut eopt_off = AdamState::new(te_off.net.params.len(), 1e-3);

        let a = train_step(&mut on, &mut te_on, &policy, &mut on3, &mut on4, &mut eopt_on, &batch, 0, 5).unwrap();
        let b = train_step(&mut off, &mut te_off, &policy, &mut off3, &mut off4, &mut eopt_off, &batch, 0, 5).unwrap();
        assert_eq!(a.td.to_bits(), b.td.to_bits(), "step-1 TD losses must match");

        for step in 0..200 {
            let out = train_step(
                &mut off, &mut te_off, &policy, &mut off3, &mut off4, &mut eopt_off, &batch, 0,
                derive_seed(3, step),
            )
            .unwrap();
            assert_eq!(out.lambda, 0.0);
        }
    }

    #[test]
    fn target_blend_matches_independent_accumulator() {
        let cfg = ScoreConfig {
            upsilon: 0.1,
            ..ScoreConfig::default()
        };
        let mut m = tiny_model(2, 6, cfg, 22);
        set_conservatism(&mut m, false);
        let mut te = TaskEmbedding::new(1, 2, 6, &mut rng(23));
        let policy = ContextualPolicy::new(1, 1, 2, 6, &mut rng(24));
        let mut o3 = AdamState::new(m.enc3.params.len(), 1e-3);
        let mut o4 = AdamState::new(m.enc4.params.len(), 1e-3);
        let mut eopt = AdamState::new(te.net.params.len(), 1e-3);
        let batch = vec![loop_transition(1.0); 8];

        // independent accumulator: f_bar_k = (1-u)^k f_bar_0 + u sum (1-u)^i f_i
        let u = m.upsilon;
        let mut expected: Vec<f64> = m.target_enc4.as_slice().to_vec();
        for step in 0..25 {
            train_step(&mut m, &mut te, &policy, &mut o3, &mut o4, &mut eopt, &batch, 0, step).unwrap();
            for (e, f) in expected.iter_mut().zip(m.enc4.params.as_slice()) {
                *e = (1.0 - u) * *e + u * f;
            }
        }
        for (e, t) in expected.iter().zip(m.target_enc4.as_slice()) {
            assert!((e - t).abs() < 1e-12);
        }
    }

    #[test]
    fn td_training_on_two_state_loop_converges_to_geometric_sum() {
        // deterministic 2-state loop with reward 1 and gamma 0.5: Q = 2
        let mut env = chain_env(2);
        let noop = ScriptedPolicy::new("noop", Controller::Constant { action: vec![0.0] }, 0.0);
        let d = generate_dataset(&mut env, &[(noop, 4)], 3).unwrap();
        let partition = decompose_rank(&d, 1, 4).unwrap();

        let cfg = ScoreConfig {
            gamma: 0.5,
            upsilon: 0.01,
            ..ScoreConfig::default()
        };
        let mut m = ConservativeScoreModel::new(1, 1, 2, 24, cfg, &mut rng(30));
        set_conservatism(&mut m, false);
        let mut te = TaskEmbedding::new(1, 2, 16, &mut rng(31));
        let policy = ContextualPolicy::new(1, 1, 2, 16, &mut rng(32));
        let mut o3 = AdamState::new(m.enc3.params.len(), 1e-3);
        let mut o4 = AdamState::new(m.enc4.params.len(), 1e-3);
        let mut eopt = AdamState::new(te.net.params.len(), 1e-3);
        let mut sample_rng = rng(33);
        for step in 0..2500 {
            let (n, batch) = sample_batch(&partition, &d, 32, &mut sample_rng).unwrap();
            train_step(&mut m, &mut te, &policy, &mut o3, &mut o4, &mut eopt, &batch, n, derive_seed(4, step)).unwrap();
        }
        let z = embed(&te, 0).unwrap();
        let oracle = chain_q_oracle(2, 0.5);
        for s in 0..2 {
            let f = score(&m, &[s as f64], &[0.0], &z).unwrap();
            assert!(
                (f - oracle[s]).abs() < 0.05,
                "state {s}: f = {f}, oracle = {}",
                oracle[s]
            );
        }
    }
}
