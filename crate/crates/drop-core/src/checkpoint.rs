//! Unified checkpoint file: a header with module versions and dims, then the
//! parameter blocks for the embedding provider, policy and score nets (with
//! the target copies), the Lagrange multiplier, and every Adam state.
//! Written to a temp file and renamed, so a crash never leaves a corrupt
//! checkpoint behind.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::approximator::{read_params, write_params, AdamState, Net};
use crate::behavior::{ContextualPolicy, CvaeEncoder, TaskEmbedding};
use crate::error::{DropError, Result};
use crate::models::{DropModels, EmbeddingModel, OptStates};
use crate::wire;

const MAGIC: &[u8; 8] = b"DROPCKPT";
const VERSION: u8 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub models: DropModels,
    pub opts: OptStates,
    pub training_step: u64,
}

fn write_adam<W: Write>(w: &mut W, st: &AdamState) -> Result<()> {
    wire::write_f64(w, st.lr)?;
    wire::write_f64(w, st.beta1)?;
    wire::write_f64(w, st.beta2)?;
    wire::write_f64(w, st.epsilon)?;
    wire::write_u64(w, st.step)?;
    wire::write_f64_slice(w, &st.m)?;
    wire::write_f64_slice(w, &st.v)?;
    Ok(())
}

fn read_adam<R: Read>(r: &mut R) -> Result<AdamState> {
    let lr = wire::read_f64(r)?;
    let beta1 = wire::read_f64(r)?;
    let beta2 = wire::read_f64(r)?;
    let epsilon = wire::read_f64(r)?;
    let step = wire::read_u64(r)?;
    let m = wire::read_f64_vec(r, 1 << 32)?;
    let v = wire::read_f64_vec(r, 1 << 32)?;
    if m.len() != v.len() {
        return Err(DropError::Format(
            "adam moment lengths disagree".to_string(),
        ));
    }
    Ok(AdamState {
        m,
        v,
        step,
        lr,
        beta1,
        beta2,
        epsilon,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        write_checkpoint(ckpt, &mut w)?;
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn write_checkpoint<W: Write>(ckpt: &Checkpoint, w: &mut W) -> Result<()> {
    let models = &ckpt.models;
    w.write_all(MAGIC)?;
    wire::write_u8(w, VERSION)?;
    let (kind, n, embed_net): (u8, usize, &Net) = match &models.embedding {
        EmbeddingModel::Tasks(te) => (0, te.n_subtasks, &te.net),
        EmbeddingModel::Cvae {
            encoder,
            n_candidates,
        } => (1, *n_candidates, &encoder.net),
    };
    wire::write_u8(w, kind)?;
    wire::write_u32(w, models.policy.state_dim as u32)?;
    wire::write_u32(w, models.policy.action_dim as u32)?;
    wire::write_u32(w, models.policy.dim_z as u32)?;
    wire::write_u32(w, n as u32)?;
    let sc = &models.score;
    wire::write_f64(w, sc.gamma)?;
    wire::write_f64(w, sc.upsilon)?;
    wire::write_f64(w, sc.eta)?;
    wire::write_f64(w, sc.lambda)?;
    wire::write_f64(w, sc.lambda_lr)?;
    wire::write_u32(w, sc.n_ood as u32)?;
    wire::write_u8(w, sc.conservatism as u8)?;
    wire::write_f64(w, sc.support.0)?;
    wire::write_f64(w, sc.support.1)?;
    wire::write_u64(w, ckpt.training_step)?;

    write_params(&embed_net.spec, &embed_net.params, w)?;
    write_params(&models.policy.enc1.spec, &models.policy.enc1.params, w)?;
    write_params(&models.policy.enc2.spec, &models.policy.enc2.params, w)?;
    write_params(&sc.enc3.spec, &sc.enc3.params, w)?;
    write_params(&sc.enc4.spec, &sc.enc4.params, w)?;
    write_params(&sc.enc3.spec, &sc.target_enc3, w)?;
    write_params(&sc.enc4.spec, &sc.target_enc4, w)?;

    write_adam(w, &ckpt.opts.embed)?;
    write_adam(w, &ckpt.opts.enc1)?;
    write_adam(w, &ckpt.opts.enc2)?;
    write_adam(w, &ckpt.opts.enc3)?;
    write_adam(w, &ckpt.opts.enc4)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    read_checkpoint(&mut r)
}

fn read_checkpoint<R: Read>(r: &mut R) -> Result<Checkpoint> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(DropError::Format("not a checkpoint file".to_string()));
    }
    let version = wire::read_u8(r)?;
    if version != VERSION {
        return Err(DropError::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let kind = wire::read_u8(r)?;
    let state_dim = wire::read_u32(r)? as usize;
    let action_dim = wire::read_u32(r)? as usize;
    let dim_z = wire::read_u32(r)? as usize;
    let n = wire::read_u32(r)? as usize;
    let gamma = wire::read_f64(r)?;
    let upsilon = wire::read_f64(r)?;
    let eta = wire::read_f64(r)?;
    let lambda = wire::read_f64(r)?;
    let lambda_lr = wire::read_f64(r)?;
    let n_ood = wire::read_u32(r)? as usize;
    let conservatism = wire::read_u8(r)? != 0;
    let support = (wire::read_f64(r)?, wire::read_f64(r)?);
    let training_step = wire::read_u64(r)?;

    let (embed_spec, embed_params) = read_params(r)?;
    let (enc1_spec, enc1_params) = read_params(r)?;
    let (enc2_spec, enc2_params) = read_params(r)?;
    let (enc3_spec, enc3_params) = read_params(r)?;
    let (enc4_spec, enc4_params) = read_params(r)?;
    let (t3_spec, target_enc3) = read_params(r)?;
    let (t4_spec, target_enc4) = read_params(r)?;
    if t3_spec != enc3_spec || t4_spec != enc4_spec {
        return Err(DropError::Format(
            "target specs do not match online specs".to_string(),
        ));
    }

    let embed_net = Net {
        spec: embed_spec,
        params: embed_params,
    };
    let embedding = match kind {
        0 => {
            if embed_net.spec.input_dim != n || embed_net.spec.output_dim != dim_z {
                return Err(DropError::Format(
                    "embedding net dims do not match header".to_string(),
                ));
            }
            EmbeddingModel::Tasks(TaskEmbedding {
                n_subtasks: n,
                dim_z,
                net: embed_net,
            })
        }
        1 => {
            if embed_net.spec.input_dim != state_dim + action_dim
                || embed_net.spec.output_dim != 2 * dim_z
            {
                return Err(DropError::Format(
                    "encoder net dims do not match header".to_string(),
                ));
            }
            EmbeddingModel::Cvae {
                encoder: CvaeEncoder {
                    state_dim,
                    action_dim,
                    dim_z,
                    net: embed_net,
                },
                n_candidates: n,
            }
        }
        other => {
            return Err(DropError::Format(format!(
                "unknown embedding kind {other}"
            )))
        }
    };

    let policy = ContextualPolicy {
        state_dim,
        action_dim,
        dim_z,
        enc1: Net {
            spec: enc1_spec,
            params: enc1_params,
        },
        enc2: Net {
            spec: enc2_spec,
            params: enc2_params,
        },
    };
    let score = crate::score::ConservativeScoreModel {
        enc3: Net {
            spec: enc3_spec,
            params: enc3_params,
        },
        enc4: Net {
            spec: enc4_spec,
            params: enc4_params,
        },
        target_enc3,
        target_enc4,
        gamma,
        upsilon,
        eta,
        lambda,
        lambda_lr,
        n_ood,
        conservatism,
        support,
    };
    let models = DropModels {
        embedding,
        policy,
        score,
    };

    let embed = read_adam(r)?;
    let enc1 = read_adam(r)?;
    let enc2 = read_adam(r)?;
    let enc3 = read_adam(r)?;
    let enc4 = read_adam(r)?;
    let opts = OptStates {
        embed,
        enc1,
        enc2,
        enc3,
        enc4,
    };
    check_opt_lens(&models, &opts)?;
    Ok(Checkpoint {
        models,
        opts,
        training_step,
    })
}

fn check_opt_lens(models: &DropModels, opts: &OptStates) -> Result<()> {
    let embed_len = match &models.embedding {
        EmbeddingModel::Tasks(te) => te.net.params.len(),
        EmbeddingModel::Cvae { encoder, .. } => encoder.net.params.len(),
    };
    let pairs = [
        (opts.embed.m.len(), embed_len),
        (opts.enc1.m.len(), models.policy.enc1.params.len()),
        (opts.enc2.m.len(), models.policy.enc2.params.len()),
        (opts.enc3.m.len(), models.score.enc3.params.len()),
        (opts.enc4.m.len(), models.score.enc4.params.len()),
    ];
    if pairs.iter().any(|(a, b)| a != b) {
        return Err(DropError::Format(
            "optimizer state lengths do not match parameters".to_string(),
        ));
    }
    Ok(())
}

/// Convenience for tests: serialized bytes of a checkpoint.
pub fn checkpoint_bytes(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_checkpoint(ckpt, &mut buf)?;
    Ok(buf)
}
