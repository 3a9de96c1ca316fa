//! Value-expansion targets.
//!
//! From a real transition `(s, a, r, s')` the model imagines `x_1 = s'`,
//! `x_{j+1} = f̂(x_j, u_j)` with policy actions `u_j`, for `H` steps. With
//! `y_{H+1} = Q̄(x_{H+1}, u_{H+1})` the targets are
//!
//! ```text
//! y_j = r̂_j + γ (y_{j+1} − α log π(u_{j+1} | x_{j+1}))   for j = H..1
//! y_0 = r   + γ (y_1     − α log π(u_1 | x_1))
//! ```
//!
//! with the continuation dropped after a terminal state. Each `y_k` is a
//! regression target for `Q(x_k, u_k)` (with `x_0, u_0 = s, a`). For `H = 0`
//! this is the ordinary soft Bellman target. Q̄ is the minimum of the twin
//! target critics.

use rand::Rng;

use crate::autodiff::Tensor;
use crate::data::TransitionBatch;
use crate::envs::Env;
use crate::models::DynamicsModel;
use crate::{Error, Result};

/// Observation map, rewards, termination and (optionally) a learned model.
pub trait World {
    fn observe(&self, state: &[f64]) -> Vec<f64>;
    fn reward(&self, state: &[f64], action: &[f64], next: &[f64]) -> f64;
    fn is_terminal(&self, state: &[f64]) -> bool;
    /// Predicted next states; rows that diverged may be non-finite.
    fn predict(&self, states: &Tensor, actions: &Tensor) -> Result<Tensor>;

    fn observe_rows(&self, states: &Tensor) -> Result<Tensor> {
        Tensor::from_rows(&states.rows_iter().map(|r| self.observe(r)).collect::<Vec<_>>())
    }
}

pub trait SoftActor {
    /// Actions and their log-probabilities, row by row.
    fn sample<R: Rng + ?Sized>(&self, obs: &Tensor, rng: &mut R) -> Result<(Tensor, Vec<f64>)>;
}

pub trait SoftCritic {
    /// Delayed estimate used for bootstrapping.
    fn target_q(&self, obs: &Tensor, actions: &Tensor) -> Result<Vec<f64>>;
}

/// An environment's reward and observation functions with an optional model.
pub struct EnvWorld<'a> {
    pub env: &'a Env,
    pub model: Option<&'a DynamicsModel>,
}

impl World for EnvWorld<'_> {
    fn observe(&self, state: &[f64]) -> Vec<f64> {
        self.env.observe(state)
    }

    fn reward(&self, state: &[f64], action: &[f64], next: &[f64]) -> f64 {
        self.env.reward(state, action, next)
    }

    fn is_terminal(&self, state: &[f64]) -> bool {
        self.env.is_terminal(state)
    }

    fn predict(&self, states: &Tensor, actions: &Tensor) -> Result<Tensor> {
        let model = self.model.ok_or_else(|| Error::Unsupported("value expansion needs a dynamics model".into()))?;
        match model.predict_batch(states, actions) {
            Err(e) if e.is_numeric() => {
                // Isolate the failing rows.
                let mut rows = Vec::with_capacity(states.rows());
                for i in 0..states.rows() {
                    rows.push(model.predict_next(states.row(i), actions.row(i)).unwrap_or_else(|_| vec![f64::NAN; states.cols()]));
                }
                Ok(Tensor::from_parts(states.shape().to_vec(), rows.concat()))
            }
            other => other,
        }
    }
}

/// Regression rows for the critics.
#[derive(Clone, Debug, PartialEq)]
pub struct MveTargets {
    /// Raw states `x_k`; the first `batch` rows are the real transitions.
    pub states: Tensor,
    pub actions: Tensor,
    pub targets: Vec<f64>,
    /// Samples whose imagined rollout diverged and used the one-step target.
    pub fallbacks: usize,
}

/// State, action and target of one expanded row.
type TargetRow = (Vec<f64>, Vec<f64>, f64);

/// TD(k) targets for `k = 0..=horizon`; see the module docs.
#[allow(clippy::too_many_arguments)]
pub fn mve_targets<W: World, A: SoftActor, C: SoftCritic, R: Rng + ?Sized>(
    world: &W,
    actor: &A,
    critic: &C,
    batch: &TransitionBatch,
    horizon: usize,
    gamma: f64,
    alpha: f64,
    rng: &mut R,
) -> Result<MveTargets> {
    let b = batch.len();
    let mut xs = vec![batch.next_states.clone()];
    let obs1 = world.observe_rows(&xs[0])?;
    let (u1, lp1) = actor.sample(&obs1, rng)?;
    let q1 = critic.target_q(&obs1, &u1)?;
    let one_step: Vec<f64> = (0..b).map(|i| batch.rewards[i] + if batch.dones[i] { 0.0 } else { gamma * (q1[i] - alpha * lp1[i]) }).collect();
    if horizon == 0 {
        return Ok(MveTargets { states: batch.states.clone(), actions: batch.actions.clone(), targets: one_step, fallbacks: 0 });
    }

    let mut us = vec![u1];
    let mut lps = vec![lp1];
    let mut rewards: Vec<Vec<f64>> = Vec::with_capacity(horizon);
    let mut terminal: Vec<Vec<bool>> = Vec::with_capacity(horizon);
    let mut diverged = vec![false; b];
    for j in 0..horizon {
        let (x, u) = (&xs[j], &us[j]);
        let mut next = world.predict(x, u)?;
        for (i, flag) in diverged.iter_mut().enumerate() {
            if *flag || !next.row(i).iter().all(|v| v.is_finite()) {
                *flag = true;
                next.row_mut(i).copy_from_slice(x.row(i));
            }
        }
        rewards.push((0..b).map(|i| world.reward(x.row(i), u.row(i), next.row(i))).collect());
        terminal.push((0..b).map(|i| world.is_terminal(next.row(i))).collect());
        let obs = world.observe_rows(&next)?;
        let (u_next, lp_next) = actor.sample(&obs, rng)?;
        xs.push(next);
        us.push(u_next);
        lps.push(lp_next);
    }
    let boot_obs = world.observe_rows(&xs[horizon])?;
    let q_boot = critic.target_q(&boot_obs, &us[horizon])?;

    let mut rows: Vec<Vec<TargetRow>> = vec![Vec::new(); horizon + 1];
    let mut fallbacks = 0;
    for i in 0..b {
        if diverged[i] || batch.dones[i] {
            fallbacks += usize::from(diverged[i]);
            rows[0].push((batch.states.row(i).to_vec(), batch.actions.row(i).to_vec(), one_step[i]));
            continue;
        }
        let mut ys = vec![0.0; horizon + 1];
        let mut y = q_boot[i];
        for j in (1..=horizon).rev() {
            // rewards[j-1] is r̂_j; terminal[j-1] says whether x_{j+1} is terminal.
            let cont = if terminal[j - 1][i] { 0.0 } else { gamma * (y - alpha * lps[j][i]) };
            y = rewards[j - 1][i] + cont;
            ys[j] = y;
        }
        ys[0] = batch.rewards[i] + gamma * (ys[1] - alpha * lps[0][i]);
        rows[0].push((batch.states.row(i).to_vec(), batch.actions.row(i).to_vec(), ys[0]));
        for k in 1..=horizon {
            rows[k].push((xs[k - 1].row(i).to_vec(), us[k - 1].row(i).to_vec(), ys[k]));
            if terminal[k - 1][i] {
                break;
            }
        }
    }
    let flat: Vec<(Vec<f64>, Vec<f64>, f64)> = rows.into_iter().flatten().collect();
    Ok(MveTargets {
        states: Tensor::from_rows(&flat.iter().map(|r| r.0.as_slice()).collect::<Vec<_>>())?,
        actions: Tensor::from_rows(&flat.iter().map(|r| r.1.as_slice()).collect::<Vec<_>>())?,
        targets: flat.iter().map(|r| r.2).collect(),
        fallbacks,
    })
}
