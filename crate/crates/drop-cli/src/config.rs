//! Run configuration: flat `key=value` text with dotted sections. Unknown
//! keys are hard errors; numeric ranges are validated at load.

use std::path::{Path, PathBuf};

use drop_core::dataset::DecompositionRule;
use drop_core::inference::{ActionMode, InferenceConfig, InferenceRule};
use drop_core::score::ScoreConfig;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub dataset_path: Option<PathBuf>,
    pub dataset_generator: Option<String>,
    pub decomposition_rule: DecompositionRule,
    pub decomposition_n: usize,
    pub decomposition_m: usize,
    pub decomposition_seed: u64,
    pub cvae: bool,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub train_steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub checkpoints: usize,
    pub log_every: usize,
    pub score: ScoreConfig,
    pub conservatism: bool,
    pub inference: InferenceConfig,
    pub eval_rules: Vec<InferenceRule>,
    pub eval_checkpoints: usize,
    pub eval_episodes: usize,
    pub env_name: String,
    pub fbc_fraction: f64,
    pub fbc_steps: usize,
    pub finetune_k_max: usize,
    pub distill_steps: usize,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset_path: None,
            dataset_generator: None,
            decomposition_rule: DecompositionRule::Rank,
            decomposition_n: 4,
            decomposition_m: 30,
            decomposition_seed: 0,
            cvae: false,
            hidden_dim: 64,
            embed_dim: 5,
            train_steps: 2000,
            batch_size: 1024,
            seed: 0,
            checkpoints: 10,
            log_every: 50,
            score: ScoreConfig::default(),
            conservatism: true,
            inference: InferenceConfig::default(),
            eval_rules: vec![InferenceRule::GradAda],
            eval_checkpoints: 6,
            eval_episodes: 10,
            env_name: "twin_peaks".to_string(),
            fbc_fraction: 0.1,
            fbc_steps: 2000,
            finetune_k_max: 10,
            distill_steps: 1500,
            out_dir: PathBuf::from("out"),
        }
    }
}

fn bad_value(key: &str, value: &str, what: &str) -> CliError {
    CliError::Config(format!("key '{key}': cannot parse '{value}' as {what}"))
}

fn parse_usize(key: &str, v: &str) -> CliResult<usize> {
    v.parse().map_err(|_| bad_value(key, v, "an integer"))
}

fn parse_u64(key: &str, v: &str) -> CliResult<u64> {
    v.parse().map_err(|_| bad_value(key, v, "an integer"))
}

fn parse_f64(key: &str, v: &str) -> CliResult<f64> {
    v.parse().map_err(|_| bad_value(key, v, "a number"))
}

fn parse_bool(key: &str, v: &str) -> CliResult<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad_value(key, v, "true or false")),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        let mut cfg = RunConfig::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::Config(format!("line {}: expected key=value, got '{line}'", idx + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, seed: Option<u64>, out: Option<PathBuf>) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        if let Some(seed) = seed {
            cfg.seed = seed;
        }
        if let Some(out) = out {
            cfg.out_dir = out;
        }
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> CliResult<()> {
        match key {
            "dataset.path" => self.dataset_path = Some(PathBuf::from(value)),
            "dataset.generator" => self.dataset_generator = Some(value.to_string()),
            "decomposition.rule" => {
                self.decomposition_rule = value
                    .parse()
                    .map_err(|_| bad_value(key, value, "rank|quantization|random"))?;
            }
            "decomposition.n" => self.decomposition_n = parse_usize(key, value)?,
            "decomposition.m" => self.decomposition_m = parse_usize(key, value)?,
            "decomposition.seed" => self.decomposition_seed = parse_u64(key, value)?,
            "cvae.enabled" => self.cvae = parse_bool(key, value)?,
            "network.hidden_dim" => self.hidden_dim = parse_usize(key, value)?,
            "network.embed_dim" => self.embed_dim = parse_usize(key, value)?,
            "train.steps" => self.train_steps = parse_usize(key, value)?,
            "train.batch_size" => self.batch_size = parse_usize(key, value)?,
            "train.seed" => self.seed = parse_u64(key, value)?,
            "train.checkpoints" => self.checkpoints = parse_usize(key, value)?,
            "train.log_every" => self.log_every = parse_usize(key, value)?,
            "score.gamma" => self.score.gamma = parse_f64(key, value)?,
            "score.upsilon" => self.score.upsilon = parse_f64(key, value)?,
            "score.eta" => self.score.eta = parse_f64(key, value)?,
            "score.lambda_init" => self.score.lambda_init = parse_f64(key, value)?,
            "score.lambda_lr" => self.score.lambda_lr = parse_f64(key, value)?,
            "score.n_ood" => self.score.n_ood = parse_usize(key, value)?,
            "conservatism.enabled" => self.conservatism = parse_bool(key, value)?,
            "inference.rule" => {
                self.inference.rule = value
                    .parse()
                    .map_err(|_| bad_value(key, value, "best|grad|best_ada|grad_ada"))?;
            }
            "inference.K" => self.inference.k = parse_usize(key, value)?,
            "inference.alpha" => self.inference.alpha = parse_f64(key, value)?,
            "inference.interval" => self.inference.interval = parse_usize(key, value)?,
            "inference.action_mode" => {
                self.inference.action_mode = value
                    .parse()
                    .map_err(|_| bad_value(key, value, "mean|sample"))?;
            }
            "inference.warm_start" => self.inference.warm_start = parse_bool(key, value)?,
            "eval.rules" => {
                let rules: Result<Vec<InferenceRule>, _> =
                    value.split(',').map(|r| r.trim().parse()).collect();
                self.eval_rules =
                    rules.map_err(|_| bad_value(key, value, "a comma list of rules"))?;
                if self.eval_rules.is_empty() {
                    return Err(CliError::Config("eval.rules must not be empty".to_string()));
                }
            }
            "eval.checkpoints" => self.eval_checkpoints = parse_usize(key, value)?,
            "eval.episodes" => self.eval_episodes = parse_usize(key, value)?,
            "env.name" => self.env_name = value.to_string(),
            "fbc.fraction" => self.fbc_fraction = parse_f64(key, value)?,
            "fbc.steps" => self.fbc_steps = parse_usize(key, value)?,
            "finetune.k_max" => self.finetune_k_max = parse_usize(key, value)?,
            "distill.steps" => self.distill_steps = parse_usize(key, value)?,
            "out.dir" => self.out_dir = PathBuf::from(value),
            other => {
                return Err(CliError::Config(format!("unknown key '{other}'")));
            }
        }
        Ok(())
    }

    fn validate(&self) -> CliResult<()> {
        let checks: [(bool, &str); 14] = [
            (self.decomposition_n >= 1, "decomposition.n must be >= 1"),
            (self.decomposition_m >= 1, "decomposition.m must be >= 1"),
            (self.hidden_dim >= 1, "network.hidden_dim must be >= 1"),
            (self.embed_dim >= 1, "network.embed_dim must be >= 1"),
            (self.batch_size >= 1, "train.batch_size must be >= 1"),
            (self.checkpoints >= 1, "train.checkpoints must be >= 1"),
            (self.log_every >= 1, "train.log_every must be >= 1"),
            (
                (0.0..1.0).contains(&self.score.gamma),
                "score.gamma must be in [0, 1)",
            ),
            (
                (0.0..=1.0).contains(&self.score.upsilon),
                "score.upsilon must be in [0, 1]",
            ),
            (self.score.lambda_lr > 0.0, "score.lambda_lr must be > 0"),
            (self.score.lambda_init >= 0.0, "score.lambda_init must be >= 0"),
            (self.score.n_ood >= 1, "score.n_ood must be >= 1"),
            (
                self.fbc_fraction > 0.0 && self.fbc_fraction <= 1.0,
                "fbc.fraction must be in (0, 1]",
            ),
            (self.finetune_k_max >= 1, "finetune.k_max must be >= 1"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(CliError::Config(msg.to_string()));
            }
        }
        if self.inference.alpha <= 0.0 {
            return Err(CliError::Config("inference.alpha must be > 0".to_string()));
        }
        if self.inference.interval == 0 {
            return Err(CliError::Config("inference.interval must be >= 1".to_string()));
        }
        if self.eval_checkpoints == 0 || self.eval_episodes == 0 {
            return Err(CliError::Config(
                "eval.checkpoints and eval.episodes must be >= 1".to_string(),
            ));
        }
        Ok(())
    }
}
