//! Environment construction and the scripted dataset recipes behind
//! `dataset.generator`.

use drop_core::dataset::OfflineDataset;
use drop_core::environments::{
    chain_env, door_seeker, generate_dataset, goal_seeker, twin_peaks_env, Controller, Env,
    ScriptedPolicy, TwinPeaks, DOOR_EXIT_START,
};
use drop_core::exec::derive_seed;

use crate::error::{CliError, CliResult};

pub fn make_env(name: &str) -> CliResult<Box<dyn Env>> {
    match name {
        "twin_peaks" => Ok(Box::new(twin_peaks_env())),
        "chain2" => Ok(Box::new(chain_env(2))),
        "chain3" => Ok(Box::new(chain_env(3))),
        other => Err(CliError::Config(format!(
            "unknown env '{other}' (expected twin_peaks, chain2 or chain3)"
        ))),
    }
}

/// The stock twin-peaks offline set: the door-running skill from the
/// canonical start, and the goal-running skill both from just past the door
/// (where it is good) and from the canonical start (where it jams against
/// the wall).
fn twin_peaks_dataset(seed: u64) -> CliResult<OfflineDataset> {
    let mut canonical = twin_peaks_env();
    let door = generate_dataset(&mut canonical, &[(door_seeker(), 30)], derive_seed(seed, 1))?;
    let mut exit_env = TwinPeaks::with_start_box(DOOR_EXIT_START);
    let descend = generate_dataset(&mut exit_env, &[(goal_seeker(), 30)], derive_seed(seed, 2))?;
    let mut canonical2 = twin_peaks_env();
    let jams = generate_dataset(&mut canonical2, &[(goal_seeker(), 60)], derive_seed(seed, 3))?;
    Ok(door.merge(descend)?.merge(jams)?)
}

fn chain_dataset(n_states: usize, seed: u64) -> CliResult<OfflineDataset> {
    let mut env = chain_env(n_states);
    let noop = ScriptedPolicy::new(
        "noop",
        Controller::Constant {
            action: vec![0.0],
        },
        0.0,
    );
    Ok(generate_dataset(&mut env, &[(noop, 6)], seed)?)
}

pub fn generate_named_dataset(name: &str, seed: u64) -> CliResult<OfflineDataset> {
    match name {
        "twin_peaks" => twin_peaks_dataset(seed),
        "chain2" => chain_dataset(2, seed),
        "chain3" => chain_dataset(3, seed),
        other => Err(CliError::Config(format!(
            "unknown dataset generator '{other}'"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn twin_peaks_recipe_has_three_return_modes() {
        let d = generate_named_dataset("twin_peaks", 0).unwrap();
        assert_eq!(d.len(), 120);
        let returns = d.returns();
        let descend_mean: f64 = returns[30..60].iter().sum::<f64>() / 30.0;
        let door_mean: f64 = returns[..30].iter().sum::<f64>() / 30.0;
        let jam_mean: f64 = returns[60..].iter().sum::<f64>() / 60.0;
        assert!(descend_mean > door_mean + 20.0);
        assert!(door_mean > jam_mean + 15.0);
    }

    #[test]
    fn unknown_generator_is_a_config_error() {
        assert!(matches!(
            generate_named_dataset("nope", 0),
            Err(CliError::Config(_))
        ));
    }
}
