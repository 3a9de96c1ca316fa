//! Analytic continuous-control simulators.
//!
//! All actions are given in `[-1, 1]` per dimension and scaled internally
//! (force, torque). States are plain vectors:
//!
//! | env                | state                                   |
//! |--------------------|-----------------------------------------|
//! | `mountaincar`      | position, velocity                      |
//! | `pendulum`         | angle (0 = upright, unwrapped), angular velocity |
//! | `cartpole-*`       | cart x, cart velocity, pole angle (0 = upright, unwrapped), pole angular velocity |
//!
//! Clip ranges: MountainCar position in `[-1.2, 0.6]`, velocity in
//! `[-0.07, 0.07]`; Pendulum angular velocity in `[-8, 8]`; CartPole x in
//! `[-5, 5]` (inelastic stop at the rail ends). Angles are left unwrapped so
//! trajectories stay continuous; rewards wrap them.

pub mod constants;

use std::f64::consts::PI;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::ode::{integrate, DerivativeField, FnField, Method, SolverConfig};
use crate::{Error, Result};

use constants::{cartpole as cp, mountain_car as mc, pendulum as pd};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EnvKind {
    #[serde(rename = "mountaincar")]
    MountainCar,
    #[serde(rename = "cartpole-swingup")]
    CartPoleSwingup,
    #[serde(rename = "cartpole-balance")]
    CartPoleBalance,
    #[serde(rename = "pendulum")]
    Pendulum,
}

impl EnvKind {
    pub const ALL: [EnvKind; 4] = [EnvKind::MountainCar, EnvKind::CartPoleSwingup, EnvKind::CartPoleBalance, EnvKind::Pendulum];

    pub fn name(self) -> &'static str {
        match self {
            EnvKind::MountainCar => "mountaincar",
            EnvKind::CartPoleSwingup => "cartpole-swingup",
            EnvKind::CartPoleBalance => "cartpole-balance",
            EnvKind::Pendulum => "pendulum",
        }
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EnvKind::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            Error::InvalidArgument(format!("unknown environment `{s}` (expected one of mountaincar, cartpole-swingup, cartpole-balance, pendulum)"))
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnvSpec {
    pub name: &'static str,
    pub state_dim: usize,
    pub action_dim: usize,
    /// Seconds per environment step (model time for discrete systems).
    pub dt: f64,
    /// RK4 substeps per environment step; zero for closed-form updates.
    pub substeps: usize,
    pub max_episode_len: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    pub state: Vec<f64>,
    pub reward: f64,
    /// True terminal state (not a time limit).
    pub done: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Env {
    kind: EnvKind,
}

impl Env {
    pub fn new(kind: EnvKind) -> Self {
        Self { kind }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Ok(Self::new(name.parse()?))
    }

    pub fn kind(&self) -> EnvKind {
        self.kind
    }

    pub fn name(&self) -> &'static str {
        self.kind.name()
    }

    pub fn spec(&self) -> EnvSpec {
        match self.kind {
            EnvKind::MountainCar => {
                EnvSpec { name: self.name(), state_dim: 2, action_dim: 1, dt: mc::DT, substeps: 0, max_episode_len: mc::MAX_EPISODE_LEN }
            }
            EnvKind::Pendulum => {
                EnvSpec { name: self.name(), state_dim: 2, action_dim: 1, dt: pd::DT, substeps: pd::SUBSTEPS, max_episode_len: pd::MAX_EPISODE_LEN }
            }
            EnvKind::CartPoleSwingup | EnvKind::CartPoleBalance => {
                EnvSpec { name: self.name(), state_dim: 4, action_dim: 1, dt: cp::DT, substeps: cp::SUBSTEPS, max_episode_len: cp::MAX_EPISODE_LEN }
            }
        }
    }

    pub fn state_dim(&self) -> usize {
        self.spec().state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.spec().action_dim
    }

    /// Initial state drawn from the environment's start distribution.
    pub fn reset(&self, seed: u64) -> Vec<f64> {
        self.reset_with(&mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn reset_with(&self, rng: &mut impl Rng) -> Vec<f64> {
        let noise = |rng: &mut dyn rand::RngCore| rng.random_range(-cp::RESET_NOISE..=cp::RESET_NOISE);
        match self.kind {
            EnvKind::MountainCar => vec![rng.random_range(mc::RESET_LOW..=mc::RESET_HIGH), 0.0],
            EnvKind::Pendulum => vec![rng.random_range(-PI..=PI), rng.random_range(-pd::RESET_MAX_SPEED..=pd::RESET_MAX_SPEED)],
            EnvKind::CartPoleSwingup => vec![noise(rng), noise(rng), PI + noise(rng), noise(rng)],
            EnvKind::CartPoleBalance => vec![noise(rng), noise(rng), noise(rng), noise(rng)],
        }
    }

    /// Advances one environment step. Actions outside `[-1, 1]` are clipped.
    pub fn step(&self, state: &[f64], action: &[f64]) -> Result<Step> {
        self.check_dims(state, action)?;
        let a = clip_action(action);
        let next = match self.kind {
            EnvKind::MountainCar => mountain_car_update(state, a[0]),
            EnvKind::Pendulum => {
                let mut s = integrate(pendulum_derivative, state, &a, &self.internal_solver());
                s[1] = s[1].clamp(-pd::MAX_SPEED, pd::MAX_SPEED);
                s
            }
            EnvKind::CartPoleSwingup | EnvKind::CartPoleBalance => {
                let mut s = integrate(cartpole_derivative, state, &a, &self.internal_solver());
                if s[0].abs() >= cp::X_LIMIT {
                    s[0] = s[0].clamp(-cp::X_LIMIT, cp::X_LIMIT);
                    if s[0] * s[1] > 0.0 {
                        s[1] = 0.0;
                    }
                }
                s
            }
        };
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged { step: 0 });
        }
        let reward = self.reward(state, &a, &next);
        let done = self.is_terminal(&next);
        Ok(Step { state: next, reward, done })
    }

    /// Reward for the transition `state --action--> next`.
    pub fn reward(&self, state: &[f64], action: &[f64], next: &[f64]) -> f64 {
        let a = action[0].clamp(-1.0, 1.0);
        match self.kind {
            EnvKind::MountainCar => {
                let bonus = if self.is_terminal(next) { mc::GOAL_REWARD } else { 0.0 };
                bonus - mc::ACTION_COST * a * a
            }
            EnvKind::Pendulum => {
                let th = wrap_angle(state[0]);
                let torque = a * pd::MAX_TORQUE;
                -(th * th + 0.1 * state[1] * state[1] + 0.001 * torque * torque)
            }
            EnvKind::CartPoleSwingup => 0.5 * (1.0 + next[2].cos()),
            EnvKind::CartPoleBalance => {
                if wrap_angle(next[2]).abs() < cp::BALANCE_ANGLE {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn is_terminal(&self, state: &[f64]) -> bool {
        match self.kind {
            EnvKind::MountainCar => state[0] >= mc::GOAL_POSITION && state[1] >= 0.0,
            _ => false,
        }
    }

    /// Exact `ds/dt` used by [`Env::step`]'s internal integrator.
    pub fn derivative(&self, state: &[f64], action: &[f64]) -> Result<Vec<f64>> {
        self.check_dims(state, action)?;
        let a = clip_action(action);
        match self.kind {
            EnvKind::MountainCar => Err(self.no_field()),
            EnvKind::Pendulum => Ok(pendulum_derivative(state, &a)),
            EnvKind::CartPoleSwingup | EnvKind::CartPoleBalance => Ok(cartpole_derivative(state, &a)),
        }
    }

    /// The ground-truth vector field as a tape-compatible field.
    ///
    /// MountainCar is a discrete-time map and has no field.
    pub fn analytic_field(&self) -> Result<AnalyticField> {
        match self.kind {
            EnvKind::MountainCar => Err(self.no_field()),
            _ => Ok(AnalyticField { env: *self }),
        }
    }

    /// Solver configuration reproducing [`Env::step`] on the analytic field.
    pub fn internal_solver(&self) -> SolverConfig {
        let spec = self.spec();
        SolverConfig { method: Method::Rk4, substeps: spec.substeps.max(1), dt: spec.dt }
    }

    /// State indices holding angles, stored unwrapped.
    pub fn angle_dims(&self) -> &'static [usize] {
        match self.kind {
            EnvKind::MountainCar => &[],
            EnvKind::Pendulum => &[0],
            EnvKind::CartPoleSwingup | EnvKind::CartPoleBalance => &[2],
        }
    }

    /// Features fed to policies and critics: angles become (cos, sin).
    pub fn observe(&self, state: &[f64]) -> Vec<f64> {
        match self.kind {
            EnvKind::MountainCar => state.to_vec(),
            EnvKind::Pendulum => vec![state[0].cos(), state[0].sin(), state[1]],
            EnvKind::CartPoleSwingup | EnvKind::CartPoleBalance => {
                vec![state[0], state[1], state[2].cos(), state[2].sin(), state[3]]
            }
        }
    }

    pub fn observation_dim(&self) -> usize {
        match self.kind {
            EnvKind::MountainCar => 2,
            EnvKind::Pendulum => 3,
            EnvKind::CartPoleSwingup | EnvKind::CartPoleBalance => 5,
        }
    }

    /// Whether `state` lies inside the documented clip ranges.
    pub fn in_bounds(&self, state: &[f64]) -> bool {
        let finite = state.iter().all(|v| v.is_finite());
        finite
            && match self.kind {
                EnvKind::MountainCar => {
                    (mc::MIN_POSITION..=mc::MAX_POSITION).contains(&state[0]) && (-mc::MAX_SPEED..=mc::MAX_SPEED).contains(&state[1])
                }
                EnvKind::Pendulum => state[1].abs() <= pd::MAX_SPEED,
                EnvKind::CartPoleSwingup | EnvKind::CartPoleBalance => state[0].abs() <= cp::X_LIMIT,
            }
    }

    fn check_dims(&self, state: &[f64], action: &[f64]) -> Result<()> {
        let spec = self.spec();
        if state.len() != spec.state_dim {
            return Err(Error::Shape { op: "env state", expected: vec![spec.state_dim], actual: vec![state.len()] });
        }
        if action.len() != spec.action_dim {
            return Err(Error::Shape { op: "env action", expected: vec![spec.action_dim], actual: vec![action.len()] });
        }
        Ok(())
    }

    fn no_field(&self) -> Error {
        Error::Unsupported(format!("{} uses a closed-form discrete update and has no vector field", self.name()))
    }
}

impl fmt::Display for Env {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Ground-truth dynamics of a continuous-time environment.
#[derive(Clone, Copy, Debug)]
pub struct AnalyticField {
    env: Env,
}

impl DerivativeField for AnalyticField {
    fn state_dim(&self) -> usize {
        self.env.state_dim()
    }

    fn derivative(&self, tape: &mut Tape, state: Var, action: Var) -> Result<Var> {
        let env = self.env;
        FnField::new(self.state_dim(), move |s: &[f64], a: &[f64]| env.derivative(s, a).expect("field dimensions checked by the solver"))
            .derivative(tape, state, action)
    }
}

/// Wraps an angle into `[-π, π)`.
pub fn wrap_angle(x: f64) -> f64 {
    (x + PI).rem_euclid(2.0 * PI) - PI
}

fn clip_action(action: &[f64]) -> Vec<f64> {
    action.iter().map(|a| a.clamp(-1.0, 1.0)).collect()
}

fn mountain_car_update(s: &[f64], force: f64) -> Vec<f64> {
    let (mut pos, mut vel) = (s[0], s[1]);
    vel += force * mc::POWER - mc::GRAVITY * (3.0 * pos).cos();
    vel = vel.clamp(-mc::MAX_SPEED, mc::MAX_SPEED);
    pos += vel;
    pos = pos.clamp(mc::MIN_POSITION, mc::MAX_POSITION);
    if pos == mc::MIN_POSITION && vel < 0.0 {
        vel = 0.0;
    }
    vec![pos, vel]
}

/// Rigid rod on a pivot; `a` in `[-1, 1]` scales the maximum torque.
fn pendulum_derivative(s: &[f64], a: &[f64]) -> Vec<f64> {
    let (g, m, l) = (pd::GRAVITY, pd::MASS, pd::LENGTH);
    let torque = a[0] * pd::MAX_TORQUE;
    vec![s[1], -(3.0 * g / (2.0 * l)) * (s[0] + PI).sin() + (3.0 / (m * l * l)) * torque]
}

/// Frictionless-pivot cart-pole with viscous cart damping.
fn cartpole_derivative(s: &[f64], a: &[f64]) -> Vec<f64> {
    let (x_dot, theta, theta_dot) = (s[1], s[2], s[3]);
    let total = cp::CART_MASS + cp::POLE_MASS;
    let force = a[0] * cp::FORCE_MAG - cp::CART_DAMPING * x_dot;
    let (sin, cos) = theta.sin_cos();
    let temp = (force + cp::POLE_MASS * cp::HALF_LENGTH * theta_dot * theta_dot * sin) / total;
    let theta_acc = (cp::GRAVITY * sin - cos * temp) / (cp::HALF_LENGTH * (4.0 / 3.0 - cp::POLE_MASS * cos * cos / total));
    let x_acc = temp - cp::POLE_MASS * cp::HALF_LENGTH * theta_acc * cos / total;
    vec![x_dot, x_acc, theta_dot, theta_acc]
}

/// Bang-bang controller that pushes along the current velocity, pumping
/// energy into MountainCar until the car clears the hill.
pub fn energy_pumping_action(state: &[f64]) -> Vec<f64> {
    vec![if state[1] >= 0.0 { 1.0 } else { -1.0 }]
}

#[cfg(test)]
mod tests;
