//! Experiment configuration.
//!
//! A TOML file with the sections `[experiment]`, `[model]`, `[train]`, `[rl]`
//! and `[eval]`. Every key is optional; missing keys take the defaults below
//! and unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use dynode_core::autodiff::Activation;
use dynode_core::envs::constants::COLLECTION_EPISODE_LEN;
use dynode_core::envs::EnvKind;
use dynode_core::eval::{EVAL_HORIZON, EVAL_ROLLOUTS};
use dynode_core::models::{ModelKind, NetConfig, TrainConfig};
use dynode_core::rl::{SacConfig, Variant};

use crate::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub model: ModelSection,
    pub train: TrainSection,
    /// Agent settings. `rl.seed` is replaced by each entry of `experiment.seeds`.
    pub rl: SacConfig,
    pub eval: EvalSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    /// `mountaincar`, `cartpole-swingup`, `cartpole-balance` or `pendulum`.
    pub env: EnvKind,
    /// Dynamics models to train and evaluate.
    pub models: Vec<ModelKind>,
    /// Agent variants for `rl`.
    pub variants: Vec<Variant>,
    /// Training-set sizes in transitions.
    pub samples: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Episode length for random data collection.
    pub episode_len: usize,
    /// Environment steps between agent checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub out: PathBuf,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            env: EnvKind::MountainCar,
            models: ModelKind::ALL.to_vec(),
            variants: Variant::ALL.to_vec(),
            samples: vec![200, 500, 1000],
            seeds: (0..5).collect(),
            episode_len: COLLECTION_EPISODE_LEN,
            checkpoint_every: 0,
            out: PathBuf::from("runs"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Solver evaluations per environment step for DyNODE models.
    pub substeps: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for ModelSection {
    fn default() -> Self {
        let net = NetConfig::default();
        Self { substeps: 1, hidden: net.hidden, activation: net.activation }
    }
}

impl ModelSection {
    pub fn net(&self) -> NetConfig {
        NetConfig { hidden: self.hidden.clone(), activation: self.activation }
    }
}

/// Model training. Unset `horizon` and `batch_size` take per-model defaults
/// (20 for DyNODE-Euler, 7 for DyNODE-RK4; 32 rollouts, or 256 pairs for the
/// baseline).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub horizon: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    pub learning_rate: f64,
    pub max_iterations: usize,
    /// Std of the noise added to normalized input states.
    pub noise_std: f64,
    /// Iterations per row of the loss CSV.
    pub eval_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::for_kind(ModelKind::DynodeEuler);
        Self {
            horizon: None,
            batch_size: None,
            learning_rate: d.learning_rate,
            max_iterations: d.max_iterations,
            noise_std: d.noise_std,
            eval_every: d.eval_every,
        }
    }
}

impl TrainSection {
    /// Resolved settings for one model and seed.
    pub fn for_kind(&self, kind: ModelKind, seed: u64) -> TrainConfig {
        let mut cfg = TrainConfig::for_kind(kind);
        if kind != ModelKind::Baseline {
            if let Some(h) = self.horizon {
                cfg.horizon = h;
            }
        }
        if let Some(b) = self.batch_size {
            cfg.batch_size = b;
        }
        cfg.learning_rate = self.learning_rate;
        cfg.max_iterations = self.max_iterations;
        cfg.noise_std = self.noise_std;
        cfg.eval_every = self.eval_every;
        cfg.seed = seed;
        cfg
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub rollouts: usize,
    pub horizon: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { rollouts: EVAL_ROLLOUTS, horizon: EVAL_HORIZON }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Config(format!("cannot serialize config: {e}")))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        let x = &self.experiment;
        if x.samples.is_empty() || x.samples.contains(&0) {
            return bad("experiment.samples must list positive budgets".into());
        }
        if x.seeds.is_empty() {
            return bad("experiment.seeds must not be empty".into());
        }
        if x.seeds.iter().any(|s| *s > i64::MAX as u64) {
            return bad("experiment.seeds must fit in a signed 64-bit integer".into());
        }
        if x.episode_len == 0 {
            return bad("experiment.episode_len must be positive".into());
        }
        if self.model.substeps == 0 || self.model.hidden.contains(&0) {
            return bad("model.substeps and model.hidden widths must be positive".into());
        }
        if self.eval.rollouts == 0 || self.eval.horizon == 0 {
            return bad("eval.rollouts and eval.horizon must be positive".into());
        }
        if self.train.horizon == Some(0) || self.train.batch_size == Some(0) {
            return bad("train.horizon and train.batch_size must be positive".into());
        }
        for kind in &x.models {
            self.train.for_kind(*kind, 0).validate().map_err(|e| CliError::Config(format!("train: {e}")))?;
        }
        self.rl.validate().map_err(|e| CliError::Config(format!("rl: {e}")))?;
        Ok(())
    }

    pub fn sac_for_seed(&self, seed: u64) -> SacConfig {
        SacConfig { seed, ..self.rl.clone() }
    }

    pub fn with_env(&self, env: EnvKind) -> Self {
        let mut c = self.clone();
        c.experiment.env = env;
        c
    }
}
