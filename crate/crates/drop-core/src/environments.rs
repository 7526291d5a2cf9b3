//! Desk-scale environments and scripted-dataset generators.
//!
//! Two environments make every training claim testable:
//!
//! - `twin_peaks`: a 2-D point mass behind a wall with a doorway. Reward is
//!   negative distance to the goal. Reaching the goal from the canonical
//!   start requires one skill left of the wall (run to the door) and another
//!   right of it (descend to the goal), so adaptive embedding inference has
//!   a measurable stitching signature.
//! - `chain`: a deterministic n-state chain with reward 1 per step that
//!   self-loops at the end; its Q-function is exactly 1/(1-gamma)
//!   everywhere, with a value-iteration oracle to confirm it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{OfflineDataset, Trajectory};
use crate::error::{DropError, Result};
use crate::exec::derive_seed;
use crate::util::standard_normal;

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub next_state: Vec<f64>,
    pub reward: f64,
    pub terminal: bool,
}

pub trait Env: Send {
    fn name(&self) -> &str;
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn max_steps(&self) -> usize;
    fn reset(&mut self, seed: u64) -> Vec<f64>;
    /// Advances one step. Stepping a finished episode is an error.
    fn step(&mut self, action: &[f64]) -> Result<StepResult>;
}

// -- twin peaks ---------------------------------------------------------

pub const TWIN_PEAKS_NAME: &str = "twin_peaks";
pub const TWIN_PEAKS_GOAL: [f64; 2] = [1.3, -1.0];
pub const TWIN_PEAKS_HORIZON: usize = 60;
/// The wall sits at x = 0 and blocks crossings below this height.
pub const TWIN_PEAKS_DOOR_Y: f64 = 0.4;
const TWIN_PEAKS_DT: f64 = 0.15;
const ARENA: f64 = 2.0;

/// Axis-aligned start region sampled at reset.
#[derive(Debug, Clone, Copy)]
pub struct StartBox {
    pub x: (f64, f64),
    pub y: (f64, f64),
}

/// Canonical start: the lower-left chamber.
pub const CANONICAL_START: StartBox = StartBox {
    x: (-1.5, -1.3),
    y: (-1.1, -0.9),
};

/// Start region just past the doorway, used to give the goal-seeking skill
/// right-region coverage in generated data.
pub const DOOR_EXIT_START: StartBox = StartBox {
    x: (0.1, 0.5),
    y: (0.45, 0.9),
};

pub struct TwinPeaks {
    pos: [f64; 2],
    steps: usize,
    done: bool,
    start: StartBox,
}

impl TwinPeaks {
    pub fn new() -> Self {
        Self::with_start_box(CANONICAL_START)
    }

    pub fn with_start_box(start: StartBox) -> Self {
        Self {
            pos: [start.x.0, start.y.0],
            steps: 0,
            done: true,
            start,
        }
    }

    fn distance_to_goal(p: &[f64; 2]) -> f64 {
        let dx = p[0] - TWIN_PEAKS_GOAL[0];
        let dy = p[1] - TWIN_PEAKS_GOAL[1];
        (dx * dx + dy * dy).sqrt()
    }
}

impl Default for TwinPeaks {
    fn default() -> Self {
        Self::new()
    }
}

impl Env for TwinPeaks {
    fn name(&self) -> &str {
        TWIN_PEAKS_NAME
    }

    fn state_dim(&self) -> usize {
        2
    }

    fn action_dim(&self) -> usize {
        2
    }

    fn max_steps(&self) -> usize {
        TWIN_PEAKS_HORIZON
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.pos = [
            rng.gen_range(self.start.x.0..=self.start.x.1),
            rng.gen_range(self.start.y.0..=self.start.y.1),
        ];
        self.steps = 0;
        self.done = false;
        self.pos.to_vec()
    }

    fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        if self.done {
            return Err(DropError::Data("step after terminal".to_string()));
        }
        if action.len() != 2 {
            return Err(DropError::Shape(format!(
                "action of length {} for 2-d env",
                action.len()
            )));
        }
        let ax = action[0].clamp(-1.0, 1.0);
        let ay = action[1].clamp(-1.0, 1.0);
        let mut nx = (self.pos[0] + TWIN_PEAKS_DT * ax).clamp(-ARENA, ARENA);
        let ny = (self.pos[1] + TWIN_PEAKS_DT * ay).clamp(-ARENA, ARENA);
        let crossing = (self.pos[0] < 0.0) != (nx < 0.0);
        if crossing && ny < TWIN_PEAKS_DOOR_Y {
            // blocked by the wall: x stays, y slides
            nx = self.pos[0];
        }
        self.pos = [nx, ny];
        self.steps += 1;
        self.done = self.steps >= TWIN_PEAKS_HORIZON;
        Ok(StepResult {
            next_state: self.pos.to_vec(),
            reward: -Self::distance_to_goal(&self.pos),
            terminal: self.done,
        })
    }
}

pub fn twin_peaks_env() -> TwinPeaks {
    TwinPeaks::new()
}

// -- chain --------------------------------------------------------------

pub const CHAIN_HORIZON: usize = 30;

/// Deterministic chain: state index advances by one per step and self-loops
/// at the end; reward is 1 per step; actions are ignored by the dynamics.
pub struct ChainEnv {
    n_states: usize,
    idx: usize,
    steps: usize,
    done: bool,
    name: String,
}

impl ChainEnv {
    pub fn new(n_states: usize) -> Self {
        assert!(n_states >= 1);
        Self {
            n_states,
            idx: 0,
            steps: 0,
            done: true,
            name: format!("chain{n_states}"),
        }
    }
}

impl Env for ChainEnv {
    fn name(&self) -> &str {
        &self.name
    }

    fn state_dim(&self) -> usize {
        1
    }

    fn action_dim(&self) -> usize {
        1
    }

    fn max_steps(&self) -> usize {
        CHAIN_HORIZON
    }

    fn reset(&mut self, _seed: u64) -> Vec<f64> {
        self.idx = 0;
        self.steps = 0;
        self.done = false;
        vec![0.0]
    }

    fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        if self.done {
            return Err(DropError::Data("step after terminal".to_string()));
        }
        if action.len() != 1 {
            return Err(DropError::Shape(format!(
                "action of length {} for 1-d env",
                action.len()
            )));
        }
        self.idx = (self.idx + 1).min(self.n_states - 1);
        self.steps += 1;
        self.done = self.steps >= CHAIN_HORIZON;
        Ok(StepResult {
            next_state: vec![self.idx as f64],
            reward: 1.0,
            terminal: self.done,
        })
    }
}

pub fn chain_env(n_states: usize) -> ChainEnv {
    ChainEnv::new(n_states)
}

/// Exact state values of the chain by value iteration.
pub fn chain_value_iteration(n_states: usize, gamma: f64, tol: f64) -> Vec<f64> {
    let mut v = vec![0.0; n_states];
    loop {
        let mut delta: f64 = 0.0;
        for s in 0..n_states {
            let next = (s + 1).min(n_states - 1);
            let nv = 1.0 + gamma * v[next];
            delta = delta.max((nv - v[s]).abs());
            v[s] = nv;
        }
        if delta < tol {
            return v;
        }
    }
}

/// Q(s, a) on the chain; the action is irrelevant to the dynamics.
pub fn chain_q_oracle(n_states: usize, gamma: f64) -> Vec<f64> {
    let v = chain_value_iteration(n_states, gamma, 1e-13);
    (0..n_states)
        .map(|s| {
            let next = (s + 1).min(n_states - 1);
            1.0 + gamma * v[next]
        })
        .collect()
}

/// Largest Bellman residual of a candidate value function; sanity check for
/// the oracle itself.
pub fn chain_bellman_residual(values: &[f64], gamma: f64) -> f64 {
    let n = values.len();
    (0..n)
        .map(|s| {
            let next = (s + 1).min(n - 1);
            (values[s] - (1.0 + gamma * values[next])).abs()
        })
        .fold(0.0, f64::max)
}

// -- scripted policies --------------------------------------------------

#[derive(Debug, Clone)]
pub enum Controller {
    /// Proportional controller toward a fixed target point.
    GoTo { target: [f64; 2], gain: f64 },
    /// Left of the wall, run to `door`; right of it, run to `rest`.
    TwoPhase {
        door: [f64; 2],
        rest: [f64; 2],
        gain: f64,
    },
    /// Uniform random actions in [-1, 1]^dim.
    Random { dim: usize },
    Constant { action: Vec<f64> },
}

/// A named data-generating policy: a deterministic map from state to action
/// plus optional seeded exploration noise.
#[derive(Debug, Clone)]
pub struct ScriptedPolicy {
    pub name: String,
    pub controller: Controller,
    pub noise_std: f64,
}

impl ScriptedPolicy {
    pub fn new(name: &str, controller: Controller, noise_std: f64) -> Self {
        Self {
            name: name.to_string(),
            controller,
            noise_std,
        }
    }

    /// Action at `state`; the rng drives exploration noise (and the Random
    /// controller). Actions are clamped to [-1, 1] per dimension.
    pub fn act(&self, state: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut a = match &self.controller {
            Controller::GoTo { target, gain } => vec![
                gain * (target[0] - state[0]),
                gain * (target[1] - state[1]),
            ],
            Controller::TwoPhase { door, rest, gain } => {
                let target = if state[0] < 0.0 { door } else { rest };
                vec![
                    gain * (target[0] - state[0]),
                    gain * (target[1] - state[1]),
                ]
            }
            Controller::Random { dim } => (0..*dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            Controller::Constant { action } => action.clone(),
        };
        if self.noise_std > 0.0 {
            for v in a.iter_mut() {
                *v += standard_normal(rng) * self.noise_std;
            }
        }
        for v in a.iter_mut() {
            *v = v.clamp(-1.0, 1.0);
        }
        a
    }
}

/// The skill that runs to the doorway and settles just past it.
pub fn door_seeker() -> ScriptedPolicy {
    ScriptedPolicy::new(
        "door_seeker",
        Controller::TwoPhase {
            door: [0.15, 0.6],
            rest: [0.95, -0.55],
            gain: 4.0,
        },
        0.1,
    )
}

/// The skill that heads straight for the goal (and jams against the wall
/// when started left of it).
pub fn goal_seeker() -> ScriptedPolicy {
    ScriptedPolicy::new(
        "goal_seeker",
        Controller::GoTo {
            target: TWIN_PEAKS_GOAL,
            gain: 4.0,
        },
        0.1,
    )
}

/// Noise-free stitched controller: door first, then goal. Reference for the
/// expert normalization score.
pub fn oracle_controller() -> ScriptedPolicy {
    ScriptedPolicy::new(
        "oracle",
        Controller::TwoPhase {
            door: [0.15, 0.55],
            rest: TWIN_PEAKS_GOAL,
            gain: 4.0,
        },
        0.0,
    )
}

/// Uniform random controller; reference for the random normalization score.
pub fn random_controller(action_dim: usize) -> ScriptedPolicy {
    ScriptedPolicy::new("random", Controller::Random { dim: action_dim }, 0.0)
}

/// Rolls one episode and records it. Horizon truncation is recorded as
/// non-terminal (the trailing entry then only supplies the bootstrap);
/// genuine early termination is recorded as terminal.
pub fn rollout_scripted(
    env: &mut dyn Env,
    policy: &ScriptedPolicy,
    episode_seed: u64,
) -> Result<Trajectory> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(episode_seed, 0x6e01_5e));
    let mut state = env.reset(episode_seed);
    let mut observations = Vec::with_capacity(env.max_steps());
    let mut actions = Vec::with_capacity(env.max_steps());
    let mut rewards = Vec::with_capacity(env.max_steps());
    let mut terminals = Vec::with_capacity(env.max_steps());
    loop {
        let action = policy.act(&state, &mut rng);
        let out = env.step(&action)?;
        observations.push(state.clone());
        actions.push(action);
        rewards.push(out.reward);
        let truncated = out.terminal && observations.len() >= env.max_steps();
        terminals.push(out.terminal && !truncated);
        if out.terminal {
            break;
        }
        state = out.next_state;
    }
    Trajectory::new(
        observations,
        actions,
        rewards,
        terminals,
        Some(policy.name.clone()),
    )
}

/// Generates an offline dataset by running the given policies for the given
/// number of episodes each. Per-trajectory metadata records the generating
/// policy's name.
pub fn generate_dataset(
    env: &mut dyn Env,
    policies: &[(ScriptedPolicy, usize)],
    seed: u64,
) -> Result<OfflineDataset> {
    if policies.is_empty() {
        return Err(DropError::EmptyInput("no data-generating policies".to_string()));
    }
    let mut trajectories = Vec::new();
    for (pi, (policy, n_episodes)) in policies.iter().enumerate() {
        for ep in 0..*n_episodes {
            let ep_seed = derive_seed(seed, (pi as u64) << 32 | ep as u64);
            trajectories.push(rollout_scripted(env, policy, ep_seed)?);
        }
    }
    OfflineDataset::new(
        trajectories,
        env.state_dim(),
        env.action_dim(),
        Some(env.name().to_string()),
    )
}

/// Mean return of a scripted policy over `episodes` seeded episodes.
pub fn scripted_mean_return(
    env: &mut dyn Env,
    policy: &ScriptedPolicy,
    episodes: usize,
    seed: u64,
) -> Result<f64> {
    let mut total = 0.0;
    for ep in 0..episodes {
        let traj = rollout_scripted(env, policy, derive_seed(seed, ep as u64))?;
        total += traj.episode_return;
    }
    Ok(total / episodes.max(1) as f64)
}
