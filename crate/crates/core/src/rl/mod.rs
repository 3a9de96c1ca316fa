//! Soft actor-critic with optional model-based value expansion.

mod agent;
mod mve;
mod sac;


use serde::{Deserialize, Serialize};

use crate::ode::Method;
use crate::{Error, Result};

pub use agent::{curve_csv, run_agent, Agent, CurveRow, CURVE_HEADER};
pub use mve::{mve_targets, EnvWorld, MveTargets, SoftActor, SoftCritic, World};
pub use sac::{
    actor_loss, critic_loss, gaussian_noise, squashed_log_prob, CriticLoss, Critics, OnlineMin, Policy, QOnTape, LOG_STD_MAX, LOG_STD_MIN,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// No model.
    Sac,
    /// Value expansion through a one-step baseline model.
    MveSac,
    /// Value expansion through a DyNODE model.
    DynodeSac,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Sac, Variant::MveSac, Variant::DynodeSac];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Sac => "sac",
            Variant::MveSac => "mve-sac",
            Variant::DynodeSac => "dynode-sac",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown agent variant `{s}` (expected sac, mve-sac or dynode-sac)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SacConfig {
    pub gamma: f64,
    /// Fixed entropy temperature.
    pub alpha: f64,
    /// Polyak rate for the target critics.
    pub tau: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub hidden: Vec<usize>,
    /// Imagined steps per target; 0 disables expansion.
    pub h_mve: usize,
    /// Environment steps.
    pub budget: usize,
    /// Uniform-random actions before the policy takes over.
    pub start_steps: usize,
    pub updates_per_step: usize,
    pub replay_capacity: usize,
    /// Environment steps between model fits.
    pub model_every: usize,
    /// Adam steps per model fit.
    pub model_iterations: usize,
    /// Path length for DyNODE training inside the agent.
    pub model_horizon: usize,
    pub model_batch: usize,
    pub model_hidden: Vec<usize>,
    pub model_lr: f64,
    pub model_noise: f64,
    pub model_method: Method,
    pub seed: u64,
}

impl Default for SacConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            alpha: 0.2,
            tau: 0.005,
            lr: 3e-4,
            batch_size: 256,
            hidden: vec![256, 256],
            h_mve: 3,
            budget: 15_000,
            start_steps: 1_000,
            updates_per_step: 1,
            replay_capacity: 1_000_000,
            model_every: 250,
            model_iterations: 200,
            model_horizon: 5,
            model_batch: 32,
            model_hidden: vec![256, 256],
            model_lr: 1e-3,
            model_noise: 0.01,
            model_method: Method::Euler,
            seed: 0,
        }
    }
}

impl SacConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma must lie in (0, 1)");
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be a non-negative number");
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad("tau must lie in (0, 1]");
        }
        if !(self.lr > 0.0 && self.model_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.batch_size == 0 || self.model_batch == 0 {
            return bad("batch sizes must be positive");
        }
        if self.hidden.iter().chain(&self.model_hidden).any(|&h| h == 0) {
            return bad("hidden layer widths must be positive");
        }
        if self.model_every == 0 || self.model_horizon == 0 {
            return bad("model_every and model_horizon must be positive");
        }
        if self.replay_capacity == 0 {
            return bad("replay_capacity must be positive");
        }
        if self.model_noise.is_nan() || self.model_noise < 0.0 {
            return bad("model_noise must be non-negative");
        }
        Ok(())
    }
}
