//! Joint learning of the deterministic task embedding and the contextual
//! behavior policy, plus the CVAE variant.
//!
//! The embedding net maps a one-hot sub-task id through an MLP and a tanh,
//! so every embedding lives in the open hypercube (-1, 1)^d — the same box
//! the conservatism term samples its OOD embeddings from. The contextual
//! policy is a diagonal Gaussian whose mean and log-std come from
//! `enc2(z, enc1(s))`, log-std clamped to [-5, 2]. Behavior cloning updates
//! flow gradients into both the policy and the embedding net.

use rand_chacha::ChaCha8Rng;

use crate::approximator::{
    adam_step, AdamState, MlpRef, MlpSpec, Net, NodeId, ParamVector, Tape,
};
use crate::dataset::Transition;
use crate::error::{DropError, Result};
use crate::exec::{map_chunks, LossAccum, DEFAULT_CHUNK};
use crate::util::standard_normal;

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Deterministic task embedding: one-hot sub-task id -> z in (-1,1)^d.
#[derive(Debug, Clone)]
pub struct TaskEmbedding {
    pub n_subtasks: usize,
    pub dim_z: usize,
    pub net: Net,
}

impl TaskEmbedding {
    pub fn new(n_subtasks: usize, dim_z: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let spec = MlpSpec::new(n_subtasks, vec![hidden, hidden], dim_z);
        Self {
            n_subtasks,
            dim_z,
            net: Net::new(spec, rng),
        }
    }

    fn one_hot(&self, n: usize) -> Result<Vec<f64>> {
        if n >= self.n_subtasks {
            return Err(DropError::Index(format!(
                "sub-task {n} out of range ({} sub-tasks)",
                self.n_subtasks
            )));
        }
        let mut x = vec![0.0; self.n_subtasks];
        x[n] = 1.0;
        Ok(x)
    }
}

/// z for sub-task `n`. Deterministic; bounded by the tanh.
pub fn embed(te: &TaskEmbedding, n: usize) -> Result<Vec<f64>> {
    let x = te.one_hot(n)?;
    let y = te.net.forward(&x)?;
    Ok(y.iter().map(|v| v.tanh()).collect())
}

pub(crate) fn embed_on_tape(
    tape: &mut Tape,
    te: &TaskEmbedding,
    net: MlpRef,
    n: usize,
) -> Result<NodeId> {
    let x = te.one_hot(n)?;
    let xn = tape.constant(&x);
    let h = tape.mlp(net, xn)?;
    Ok(tape.tanh(h))
}

/// Contextual behavior policy: diagonal Gaussian over actions from
/// `enc2(z, enc1(s))`.
#[derive(Debug, Clone)]
pub struct ContextualPolicy {
    pub state_dim: usize,
    pub action_dim: usize,
    pub dim_z: usize,
    pub enc1: Net,
    pub enc2: Net,
}

impl ContextualPolicy {
    pub fn new(
        state_dim: usize,
        action_dim: usize,
        dim_z: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let enc1 = Net::new(MlpSpec::new(state_dim, vec![hidden, hidden], hidden), rng);
        let enc2 = Net::new(
            MlpSpec::new(dim_z + hidden, vec![hidden, hidden, hidden], 2 * action_dim),
            rng,
        );
        Self {
            state_dim,
            action_dim,
            dim_z,
            enc1,
            enc2,
        }
    }
}

fn check_policy_inputs(p: &ContextualPolicy, s: &[f64], z: &[f64]) -> Result<()> {
    if s.len() != p.state_dim || z.len() != p.dim_z {
        return Err(DropError::Shape(format!(
            "state/z of lengths {}/{} for policy expecting {}/{}",
            s.len(),
            z.len(),
            p.state_dim,
            p.dim_z
        )));
    }
    if !s.iter().chain(z).all(|v| v.is_finite()) {
        return Err(DropError::Numerical(
            "non-finite policy input".to_string(),
        ));
    }
    Ok(())
}

/// Mean and clamped log-std of the action distribution at (s, z).
pub fn mean_and_log_std(
    p: &ContextualPolicy,
    s: &[f64],
    z: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_policy_inputs(p, s, z)?;
    let h = p.enc1.forward(s)?;
    let mut cat = z.to_vec();
    cat.extend_from_slice(&h);
    let out = p.enc2.forward(&cat)?;
    let mean = out[..p.action_dim].to_vec();
    let log_std = out[p.action_dim..]
        .iter()
        .map(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX))
        .collect();
    Ok((mean, log_std))
}

/// Diagonal-Gaussian log-density of `a` under the policy at (s, z).
pub fn log_prob(p: &ContextualPolicy, s: &[f64], z: &[f64], a: &[f64]) -> Result<f64> {
    if a.len() != p.action_dim {
        return Err(DropError::Shape(format!(
            "action of length {} for policy expecting {}",
            a.len(),
            p.action_dim
        )));
    }
    if !a.iter().all(|v| v.is_finite()) {
        return Err(DropError::Numerical("non-finite action".to_string()));
    }
    let (mean, log_std) = mean_and_log_std(p, s, z)?;
    let mut lp = 0.0;
    for i in 0..p.action_dim {
        let inv_std = (-log_std[i]).exp();
        let zscore = (a[i] - mean[i]) * inv_std;
        lp += -0.5 * LN_2PI - log_std[i] - 0.5 * zscore * zscore;
    }
    Ok(lp)
}

pub enum ActionSelect<'r> {
    Mean,
    Sample(&'r mut ChaCha8Rng),
}

/// Draws an action: the mean, or a reparameterized sample.
pub fn act(p: &ContextualPolicy, s: &[f64], z: &[f64], select: ActionSelect) -> Result<Vec<f64>> {
    let (mean, log_std) = mean_and_log_std(p, s, z)?;
    match select {
        ActionSelect::Mean => Ok(mean),
        ActionSelect::Sample(rng) => Ok(mean
            .iter()
            .zip(&log_std)
            .map(|(m, ls)| m + ls.exp() * standard_normal(rng))
            .collect()),
    }
}

/// Builds the (mean, clamped log-std) nodes for the policy on a tape.
pub(crate) fn policy_dist_on_tape(
    tape: &mut Tape,
    enc1: MlpRef,
    enc2: MlpRef,
    s: NodeId,
    z: NodeId,
    action_dim: usize,
) -> Result<(NodeId, NodeId)> {
    let h = tape.mlp(enc1, s)?;
    let cat = tape.concat(z, h);
    let out = tape.mlp(enc2, cat)?;
    let mean = tape.slice(out, 0, action_dim);
    let raw = tape.slice(out, action_dim, action_dim);
    let log_std = tape.clamp(raw, LOG_STD_MIN, LOG_STD_MAX);
    Ok((mean, log_std))
}

fn check_batch(p: &ContextualPolicy, batch: &[Transition]) -> Result<()> {
    if batch.is_empty() {
        return Err(DropError::EmptyInput("empty batch".to_string()));
    }
    for tr in batch {
        if tr.state.len() != p.state_dim || tr.action.len() != p.action_dim {
            return Err(DropError::Shape(
                "batch transition dims do not match policy".to_string(),
            ));
        }
    }
    Ok(())
}

/// One Adam step on the mean negative log-likelihood of the batch under the
/// sub-task's embedding. Gradients reach both the policy and the embedding
/// net. On a numerical fault nothing is mutated.
pub fn bc_update(
    te: &mut TaskEmbedding,
    policy: &mut ContextualPolicy,
    embed_opt: &mut AdamState,
    enc1_opt: &mut AdamState,
    enc2_opt: &mut AdamState,
    batch: &[Transition],
    n: usize,
) -> Result<f64> {
    check_batch(policy, batch)?;
    let lens = [
        te.net.params.len(),
        policy.enc1.params.len(),
        policy.enc2.params.len(),
    ];
    let chunks: Result<Vec<LossAccum>> = map_chunks(batch, DEFAULT_CHUNK, |chunk| {
        bc_chunk(te, policy, chunk, n)
    })
    .into_iter()
    .collect();
    let accum = chunks?
        .into_iter()
        .fold(LossAccum::zeros(&lens), |a, b| a.merge(&b));
    let (loss, grads) = accum.into_mean();
    if !loss.is_finite() {
        return Err(DropError::Numerical(format!("non-finite BC loss {loss}")));
    }
    let (pe, se) = adam_step(&te.net.params, &grads[0], embed_opt)?;
    let (p1, s1) = adam_step(&policy.enc1.params, &grads[1], enc1_opt)?;
    let (p2, s2) = adam_step(&policy.enc2.params, &grads[2], enc2_opt)?;
    te.net.params = pe;
    *embed_opt = se;
    policy.enc1.params = p1;
    *enc1_opt = s1;
    policy.enc2.params = p2;
    *enc2_opt = s2;
    Ok(loss)
}

fn bc_chunk(
    te: &TaskEmbedding,
    policy: &ContextualPolicy,
    chunk: &[Transition],
    n: usize,
) -> Result<LossAccum> {
    let mut tape = Tape::new();
    let te_net = tape.register(&te.net.spec, &te.net.params)?;
    let e1 = tape.register(&policy.enc1.spec, &policy.enc1.params)?;
    let e2 = tape.register(&policy.enc2.spec, &policy.enc2.params)?;
    let z = embed_on_tape(&mut tape, te, te_net, n)?;
    let mut total: Option<NodeId> = None;
    for tr in chunk {
        let s = tape.constant(&tr.state);
        let (mean, log_std) = policy_dist_on_tape(&mut tape, e1, e2, s, z, policy.action_dim)?;
        let a = tape.constant(&tr.action);
        let lp = tape.gauss_log_prob(mean, log_std, a);
        total = Some(match total {
            Some(t) => tape.add(t, lp),
            None => lp,
        });
    }
    let loss = tape.scale(total.expect("chunk is nonempty"), -1.0);
    let grads = tape.backward(loss)?;
    Ok(LossAccum {
        loss_sum: tape.scalar(loss),
        grads: vec![
            grads.net(te_net).to_vec(),
            grads.net(e1).to_vec(),
            grads.net(e2).to_vec(),
        ],
        count: chunk.len(),
    })
}

/// CVAE posterior over z given (s, a); prior is the standard normal.
#[derive(Debug, Clone)]
pub struct CvaeEncoder {
    pub state_dim: usize,
    pub action_dim: usize,
    pub dim_z: usize,
    pub net: Net,
}

impl CvaeEncoder {
    pub fn new(
        state_dim: usize,
        action_dim: usize,
        dim_z: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let net = Net::new(
            MlpSpec::new(state_dim + action_dim, vec![hidden, hidden], 2 * dim_z),
            rng,
        );
        Self {
            state_dim,
            action_dim,
            dim_z,
            net,
        }
    }

    /// Posterior (mean, clamped log-std) at (s, a).
    pub fn mean_and_log_std(&self, s: &[f64], a: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if s.len() != self.state_dim || a.len() != self.action_dim {
            return Err(DropError::Shape(
                "encoder input dims do not match".to_string(),
            ));
        }
        let mut cat = s.to_vec();
        cat.extend_from_slice(a);
        let out = self.net.forward(&cat)?;
        let mean = out[..self.dim_z].to_vec();
        let log_std = out[self.dim_z..]
            .iter()
            .map(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX))
            .collect();
        Ok((mean, log_std))
    }
}

pub(crate) fn cvae_dist_on_tape(
    tape: &mut Tape,
    enc: MlpRef,
    s: NodeId,
    a: NodeId,
    dim_z: usize,
) -> Result<(NodeId, NodeId)> {
    let cat = tape.concat(s, a);
    let out = tape.mlp(enc, cat)?;
    let mean = tape.slice(out, 0, dim_z);
    let raw = tape.slice(out, dim_z, dim_z);
    let log_std = tape.clamp(raw, LOG_STD_MIN, LOG_STD_MAX);
    Ok((mean, log_std))
}

/// One step maximizing the ELBO `log beta(a|s,z) - KL(phi(z|s,a) || N(0,I))`
/// with a reparameterized z. Returns the mean reconstruction loss (negative
/// log-likelihood) and the mean KL.
pub fn cvae_update(
    enc: &mut CvaeEncoder,
    policy: &mut ContextualPolicy,
    encoder_opt: &mut AdamState,
    enc1_opt: &mut AdamState,
    enc2_opt: &mut AdamState,
    batch: &[Transition],
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64)> {
    check_batch(policy, batch)?;
    // noise drawn up front so results do not depend on chunking
    let eps: Vec<Vec<f64>> = batch
        .iter()
        .map(|_| (0..enc.dim_z).map(|_| standard_normal(rng)).collect())
        .collect();
    let items: Vec<(&Transition, &Vec<f64>)> = batch.iter().zip(eps.iter()).collect();
    let lens = [
        enc.net.params.len(),
        policy.enc1.params.len(),
        policy.enc2.params.len(),
    ];
    let chunks: Result<Vec<(LossAccum, f64, f64)>> =
        map_chunks(&items, DEFAULT_CHUNK, |chunk| cvae_chunk(enc, policy, chunk))
            .into_iter()
            .collect();
    let mut accum = LossAccum::zeros(&lens);
    let mut recon_sum = 0.0;
    let mut kl_sum = 0.0;
    for (a, r, k) in chunks? {
        accum = accum.merge(&a);
        recon_sum += r;
        kl_sum += k;
    }
    let count = accum.count.max(1) as f64;
    let (objective, grads) = accum.into_mean();
    if !objective.is_finite() {
        return Err(DropError::Numerical(format!(
            "non-finite CVAE objective {objective}"
        )));
    }
    let (pe, se) = adam_step(&enc.net.params, &grads[0], encoder_opt)?;
    let (p1, s1) = adam_step(&policy.enc1.params, &grads[1], enc1_opt)?;
    let (p2, s2) = adam_step(&policy.enc2.params, &grads[2], enc2_opt)?;
    enc.net.params = pe;
    *encoder_opt = se;
    policy.enc1.params = p1;
    *enc1_opt = s1;
    policy.enc2.params = p2;
    *enc2_opt = s2;
    Ok((recon_sum / count, kl_sum / count))
}

fn cvae_chunk(
    enc: &CvaeEncoder,
    policy: &ContextualPolicy,
    chunk: &[(&Transition, &Vec<f64>)],
) -> Result<(LossAccum, f64, f64)> {
    let mut tape = Tape::new();
    let en = tape.register(&enc.net.spec, &enc.net.params)?;
    let e1 = tape.register(&policy.enc1.spec, &policy.enc1.params)?;
    let e2 = tape.register(&policy.enc2.spec, &policy.enc2.params)?;
    let mut total: Option<NodeId> = None;
    let mut recon_sum = 0.0;
    let mut kl_sum = 0.0;
    for (tr, eps) in chunk {
        let s = tape.constant(&tr.state);
        let a = tape.constant(&tr.action);
        let (mu, ls) = cvae_dist_on_tape(&mut tape, en, s, a, enc.dim_z)?;
        let sigma = tape.exp(ls);
        let noise = tape.constant(eps);
        let scaled = tape.mul(sigma, noise);
        let z = tape.add(mu, scaled);
        let (mean, pls) = policy_dist_on_tape(&mut tape, e1, e2, s, z, policy.action_dim)?;
        let lp = tape.gauss_log_prob(mean, pls, a);
        let kl = tape.kl_std_normal(mu, ls);
        recon_sum += -tape.scalar(lp);
        kl_sum += tape.scalar(kl);
        let neg_lp = tape.neg(lp);
        let obj = tape.add(neg_lp, kl);
        total = Some(match total {
            Some(t) => tape.add(t, obj),
            None => obj,
        });
    }
    let loss = total.expect("chunk is nonempty");
    let grads = tape.backward(loss)?;
    Ok((
        LossAccum {
            loss_sum: tape.scalar(loss),
            grads: vec![
                grads.net(en).to_vec(),
                grads.net(e1).to_vec(),
                grads.net(e2).to_vec(),
            ],
            count: chunk.len(),
        },
        recon_sum,
        kl_sum,
    ))
}

/// Sets all weights and biases of a net to zero (test scaffolding).
pub fn zero_params(net: &mut Net) {
    net.params = ParamVector::zeros(net.spec.param_count());
}
