//! Normalization references: per-env (random, expert) scores from scripted
//! controllers, cached in a versioned registry file in the output directory.

use std::collections::BTreeMap;
use std::path::Path;

use drop_core::environments::{oracle_controller, random_controller, scripted_mean_return};
use drop_core::exec::derive_seed;

use crate::envs::make_env;
use crate::error::{CliError, CliResult};

pub const REGISTRY_FILE: &str = "registry.v1.txt";
const REF_EPISODES: usize = 20;
const REF_SEED: u64 = 0x5ef5;

fn read_registry(path: &Path) -> CliResult<BTreeMap<String, f64>> {
    let mut map = BTreeMap::new();
    if !path.exists() {
        return Ok(map);
    }
    let text = std::fs::read_to_string(path)?;
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line == "version=1" {
            continue;
        }
        if let Some((key, value)) = line.split_once('=') {
            let v: f64 = value
                .trim()
                .parse()
                .map_err(|_| CliError::Data(format!("bad registry value in '{line}'")))?;
            map.insert(key.trim().to_string(), v);
        }
    }
    Ok(map)
}

fn write_registry(path: &Path, map: &BTreeMap<String, f64>) -> CliResult<()> {
    let mut text = String::from("version=1\n");
    for (k, v) in map {
        text.push_str(&format!("{k}={v}\n"));
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Returns `(random_ref, expert_ref)` for the env, computing and caching
/// them on first use. Only envs with registered scripted reference
/// controllers can be normalized.
pub fn ensure_refs(env_name: &str, out_dir: &Path) -> CliResult<(f64, f64)> {
    let path = out_dir.join(REGISTRY_FILE);
    let mut map = read_registry(&path)?;
    let rand_key = format!("{env_name}.random_ref");
    let expert_key = format!("{env_name}.expert_ref");
    if let (Some(&r), Some(&e)) = (map.get(&rand_key), map.get(&expert_key)) {
        return Ok((r, e));
    }
    if env_name != "twin_peaks" {
        return Err(CliError::Config(format!(
            "no normalization references for env '{env_name}'; add \
             {rand_key} and {expert_key} to {REGISTRY_FILE} in the output \
             directory"
        )));
    }
    let mut env = make_env(env_name)?;
    let random = scripted_mean_return(
        env.as_mut(),
        &random_controller(env.action_dim()),
        REF_EPISODES,
        derive_seed(REF_SEED, 0),
    )?;
    let expert = scripted_mean_return(
        env.as_mut(),
        &oracle_controller(),
        REF_EPISODES,
        derive_seed(REF_SEED, 1),
    )?;
    map.insert(rand_key, random);
    map.insert(expert_key, expert);
    std::fs::create_dir_all(out_dir)?;
    write_registry(&path, &map)?;
    Ok((random, expert))
}

/// `100 * (raw - random_ref) / (expert_ref - random_ref)`.
pub fn normalized_return(refs: (f64, f64), raw: f64) -> CliResult<f64> {
    let (random, expert) = refs;
    if expert == random {
        return Err(CliError::Data(
            "degenerate normalization references (expert == random)".to_string(),
        ));
    }
    Ok(100.0 * (raw - random) / (expert - random))
}
