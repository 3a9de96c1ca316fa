use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mve::{mve_targets, EnvWorld, World};
use super::sac::{actor_loss, critic_loss, gaussian_noise, Critics, OnlineMin, Policy};
use super::{SacConfig, Variant};
use crate::autodiff::{adam_step, AdamConfig, AdamState};
use crate::data::{random_action, sample_transitions, Normalizer, ReplayBuffer, Transition};
use crate::envs::Env;
use crate::models::{DynamicsModel, ModelKind, NetConfig, TrainConfig, Trainer};
use crate::{Error, Result};

/// One learning-curve row, logged at the end of each episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub env_step: usize,
    pub episode: usize,
    pub episode_return: f64,
    /// Mean over the episode's updates.
    pub critic_loss: Option<f64>,
    pub actor_loss: Option<f64>,
    /// Mean minibatch loss of the latest model fit.
    pub model_loss: Option<f64>,
    /// Cumulative count of value-expansion fallbacks.
    pub mve_fallback_count: usize,
}

pub const CURVE_HEADER: &str = "env_step,episode,return,critic_loss,actor_loss,model_loss,mve_fallback_count";

pub fn curve_csv(rows: &[CurveRow]) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = format!("{CURVE_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.env_step,
            r.episode,
            r.episode_return,
            opt(r.critic_loss),
            opt(r.actor_loss),
            opt(r.model_loss),
            r.mve_fallback_count
        );
    }
    out
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
struct Running {
    sum: f64,
    n: usize,
}

impl Running {
    fn push(&mut self, v: f64) {
        self.sum += v;
        self.n += 1;
    }

    fn take(&mut self) -> Option<f64> {
        let out = (self.n > 0).then(|| self.sum / self.n as f64);
        *self = Self::default();
        out
    }
}

/// Complete, serializable run state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Agent {
    pub env: Env,
    pub variant: Variant,
    pub cfg: SacConfig,
    pub policy: Policy,
    pub critics: Critics,
    policy_adam: AdamState,
    critic_adam: [AdamState; 2],
    pub buffer: ReplayBuffer,
    pub model: Option<DynamicsModel>,
    model_trainer: Trainer,
    rng: ChaCha8Rng,
    env_rng: ChaCha8Rng,
    model_rng: ChaCha8Rng,
    state: Vec<f64>,
    pub step: usize,
    episode: usize,
    episode_return: f64,
    episode_len: usize,
    critic_running: Running,
    actor_running: Running,
    model_loss: Option<f64>,
    pub fallbacks: usize,
    pub curve: Vec<CurveRow>,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

impl Agent {
    /// Fresh agent; the first curve row is one episode of the untrained policy.
    pub fn new(env: Env, variant: Variant, cfg: SacConfig) -> Result<Self> {
        cfg.validate()?;
        let mut init_rng = stream(cfg.seed, 0);
        let obs_dim = env.observation_dim();
        let policy = Policy::new(obs_dim, env.action_dim(), &cfg.hidden, &mut init_rng)?;
        let critics = Critics::new(obs_dim, env.action_dim(), &cfg.hidden, &mut init_rng)?;
        let mut env_rng = stream(cfg.seed, 2);
        let state = env.reset_with(&mut env_rng);
        let mut agent = Self {
            env,
            variant,
            policy,
            critics,
            policy_adam: AdamState::new(),
            critic_adam: [AdamState::new(), AdamState::new()],
            buffer: ReplayBuffer::new(cfg.replay_capacity),
            model: None,
            model_trainer: Trainer::default(),
            rng: stream(cfg.seed, 1),
            env_rng,
            model_rng: stream(cfg.seed, 3),
            state,
            step: 0,
            episode: 0,
            episode_return: 0.0,
            episode_len: 0,
            critic_running: Running::default(),
            actor_running: Running::default(),
            model_loss: None,
            fallbacks: 0,
            curve: Vec::new(),
            cfg,
        };
        let initial = agent.evaluate_episode(&mut stream(agent.cfg.seed, 4))?;
        agent.curve.push(CurveRow {
            env_step: 0,
            episode: 0,
            episode_return: initial,
            critic_loss: None,
            actor_loss: None,
            model_loss: None,
            mve_fallback_count: 0,
        });
        Ok(agent)
    }

    /// Return of one stochastic-policy episode, without touching the run state.
    pub fn evaluate_episode(&self, rng: &mut ChaCha8Rng) -> Result<f64> {
        let mut s = self.env.reset_with(rng);
        let mut total = 0.0;
        for _ in 0..self.env.spec().max_episode_len {
            let a = self.policy.act(&self.env.observe(&s), rng)?;
            let step = self.env.step(&s, &a)?;
            total += step.reward;
            s = step.state;
            if step.done {
                break;
            }
        }
        Ok(total)
    }

    fn uses_model(&self) -> bool {
        self.variant != Variant::Sac && self.cfg.h_mve > 0
    }

    /// Runs until `cfg.budget` environment steps have been taken.
    pub fn run(&mut self) -> Result<()> {
        self.run_until(self.cfg.budget)
    }

    /// Runs until `step` environment steps (capped by the budget).
    pub fn run_until(&mut self, step: usize) -> Result<()> {
        while self.step < step.min(self.cfg.budget) {
            self.env_step()?;
        }
        Ok(())
    }

    fn env_step(&mut self) -> Result<()> {
        let action = if self.step < self.cfg.start_steps {
            random_action(self.env.action_dim(), &mut self.rng)
        } else {
            self.policy.act(&self.env.observe(&self.state), &mut self.rng)?
        };
        let step = self.env.step(&self.state, &action)?;
        self.buffer.push(Transition {
            state: std::mem::take(&mut self.state),
            action,
            reward: step.reward,
            next_state: step.state.clone(),
            done: step.done,
        });
        self.state = step.state;
        self.step += 1;
        self.episode_return += step.reward;
        self.episode_len += 1;

        if self.uses_model() && self.step.is_multiple_of(self.cfg.model_every) {
            self.fit_model()?;
        }
        if self.step >= self.cfg.start_steps && self.buffer.len() >= self.cfg.batch_size {
            for _ in 0..self.cfg.updates_per_step {
                self.update()?;
            }
        }
        if step.done || self.episode_len >= self.env.spec().max_episode_len {
            self.buffer.end_episode();
            self.episode += 1;
            self.curve.push(CurveRow {
                env_step: self.step,
                episode: self.episode,
                episode_return: self.episode_return,
                critic_loss: self.critic_running.take(),
                actor_loss: self.actor_running.take(),
                model_loss: self.model_loss,
                mve_fallback_count: self.fallbacks,
            });
            self.state = self.env.reset_with(&mut self.env_rng);
            self.episode_return = 0.0;
            self.episode_len = 0;
        }
        Ok(())
    }

    fn fit_model(&mut self) -> Result<()> {
        let kind = match self.variant {
            Variant::DynodeSac => match self.cfg.model_method {
                crate::ode::Method::Euler => ModelKind::DynodeEuler,
                crate::ode::Method::Rk4 => ModelKind::DynodeRk4,
            },
            _ => ModelKind::Baseline,
        };
        if self.model.is_none() {
            let arch = NetConfig { hidden: self.cfg.model_hidden.clone(), ..NetConfig::default() };
            let norm = Normalizer::for_env(&self.env, &self.buffer)?;
            let dt = self.env.spec().dt;
            self.model = Some(DynamicsModel::build(kind, &arch, norm, self.env.action_dim(), dt, &mut self.model_rng)?);
        }
        let model = self.model.as_mut().expect("built above");
        let horizon = if kind == ModelKind::Baseline { 1 } else { self.cfg.model_horizon };
        let cfg = TrainConfig {
            horizon,
            batch_size: if kind == ModelKind::Baseline { self.cfg.model_batch * self.cfg.model_horizon } else { self.cfg.model_batch },
            learning_rate: self.cfg.model_lr,
            max_iterations: self.cfg.model_iterations,
            noise_std: self.cfg.model_noise,
            eval_every: self.cfg.model_iterations.max(1),
            seed: self.cfg.seed,
        };
        let history = self.model_trainer.run(model, &self.buffer, &cfg, &mut self.model_rng)?;
        if !history.losses.is_empty() {
            self.model_loss = Some(history.losses.iter().sum::<f64>() / history.losses.len() as f64);
        }
        Ok(())
    }

    /// One critic, actor and target update from a replay minibatch.
    fn update(&mut self) -> Result<()> {
        let batch = sample_transitions(&self.buffer, self.cfg.batch_size, &mut self.rng)?;
        let world = EnvWorld { env: &self.env, model: self.model.as_ref() };
        let horizon = if self.uses_model() && self.model.is_some() { self.cfg.h_mve } else { 0 };
        let targets = mve_targets(&world, &self.policy, &self.critics, &batch, horizon, self.cfg.gamma, self.cfg.alpha, &mut self.rng)?;
        if targets.fallbacks > 0 {
            log::debug!("step {}: {} imagined rollouts diverged, using one-step targets", self.step, targets.fallbacks);
        }
        self.fallbacks += targets.fallbacks;

        let adam = AdamConfig::with_lr(self.cfg.lr);
        let obs = world.observe_rows(&targets.states)?;
        let closs = critic_loss(&self.critics, &obs, &targets.actions, &targets.targets)?;
        for (i, g) in closs.grads.iter().enumerate() {
            adam_step(&mut self.critics.online[i], g, &mut self.critic_adam[i], &adam)?;
        }
        self.critic_running.push(closs.value);

        let real_obs = world.observe_rows(&batch.states)?;
        let noise = gaussian_noise(real_obs.rows(), self.policy.action_dim(), &mut self.rng);
        let (aloss, grads) = actor_loss(&self.policy, &OnlineMin(&self.critics), &real_obs, self.cfg.alpha, noise)?;
        adam_step(&mut self.policy.net, &grads, &mut self.policy_adam, &adam)?;
        self.actor_running.push(aloss);

        self.critics.polyak(self.cfg.tau);
        Ok(())
    }

    /// Mean return of the last `n` training episodes, or of the initial
    /// evaluation episode if none finished yet.
    pub fn final_return(&self, n: usize) -> f64 {
        let train: Vec<f64> = self.curve.iter().filter(|r| r.episode > 0).map(|r| r.episode_return).collect();
        if train.is_empty() {
            return self.curve[0].episode_return;
        }
        let tail = &train[train.len().saturating_sub(n)..];
        tail.iter().sum::<f64>() / tail.len() as f64
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::format(path, e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}

/// Full run from scratch. On failure the run state is written to `dump`,
/// if given, before the error is returned.
pub fn run_agent(env: Env, variant: Variant, cfg: SacConfig, dump: Option<&Path>) -> Result<Agent> {
    let mut agent = Agent::new(env, variant, cfg)?;
    if let Err(e) = agent.run() {
        if let Some(path) = dump {
            agent.save(path)?;
        }
        return Err(e);
    }
    Ok(agent)
}
