use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::mve::{SoftActor, SoftCritic};
use crate::autodiff::{forward_mlp, Activation, BoundMlp, MlpParams, OutputActivation, Tape, Tensor, Var};
use crate::{Error, Result};

pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;

/// Gaussian over pre-squash actions, mapped into `[-1, 1]` by `tanh`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    /// Outputs `[mean | log_std]`, each `action_dim` wide.
    pub net: MlpParams,
}

pub fn gaussian_noise<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::from_parts(vec![rows, cols], data)
}

/// Row-wise `log π(tanh u)` for a diagonal Gaussian over `u`, as `[batch, 1]`.
///
/// `u` may be a reparameterized sample or a constant. The tanh Jacobian uses
/// `ln(1 - tanh²u) = 2 (ln 2 - u - softplus(-2u))`, which is stable for large `|u|`.
pub fn squashed_log_prob(tape: &mut Tape, u: Var, mean: Var, log_std: Var) -> Var {
    let neg = tape.scale(log_std, -1.0);
    let inv_std = tape.exp(neg);
    let diff = tape.sub(u, mean);
    let z = tape.mul(diff, inv_std);
    let z2 = tape.square(z);
    let gauss = tape.scale(z2, -0.5);
    let gauss = tape.sub(gauss, log_std);
    let gauss = tape.offset(gauss, -0.5 * (2.0 * std::f64::consts::PI).ln());
    let m2u = tape.scale(u, -2.0);
    let sp = tape.softplus(m2u);
    let s = tape.add(u, sp);
    let s = tape.scale(s, -2.0);
    let jac = tape.offset(s, 2.0 * std::f64::consts::LN_2);
    let per_dim = tape.sub(gauss, jac);
    tape.row_sum(per_dim)
}

impl Policy {
    pub fn new(obs_dim: usize, action_dim: usize, hidden: &[usize], rng: &mut impl Rng) -> Result<Self> {
        let mut sizes = vec![obs_dim];
        sizes.extend(hidden);
        sizes.push(2 * action_dim);
        Ok(Self { net: MlpParams::init(&sizes, Activation::Relu, OutputActivation::Identity, rng)? })
    }

    pub fn action_dim(&self) -> usize {
        self.net.output_dim() / 2
    }

    pub fn obs_dim(&self) -> usize {
        self.net.input_dim()
    }

    /// Pre-squash mean and clamped log-std.
    pub fn distribution_on_tape(&self, tape: &mut Tape, net: &BoundMlp, obs: Var) -> Result<(Var, Var)> {
        let k = self.action_dim();
        let out = forward_mlp(tape, net, obs)?;
        let mean = tape.slice_cols(out, 0, k);
        let raw = tape.slice_cols(out, k, k);
        let log_std = tape.clamp(raw, LOG_STD_MIN, LOG_STD_MAX);
        Ok((mean, log_std))
    }

    /// Reparameterized actions `tanh(mean + std * noise)` and their log-probs.
    pub fn sample_on_tape(&self, tape: &mut Tape, net: &BoundMlp, obs: Var, noise: Tensor) -> Result<(Var, Var)> {
        let (mean, log_std) = self.distribution_on_tape(tape, net, obs)?;
        let eps = tape.leaf(noise);
        let std = tape.exp(log_std);
        let scaled = tape.mul(std, eps);
        let u = tape.add(mean, scaled);
        let action = tape.tanh(u);
        let log_prob = squashed_log_prob(tape, u, mean, log_std);
        tape.check()?;
        Ok((action, log_prob))
    }

    pub fn sample_batch<R: Rng + ?Sized>(&self, obs: &Tensor, rng: &mut R) -> Result<(Tensor, Vec<f64>)> {
        let mut tape = Tape::new();
        let net = self.net.bind(&mut tape);
        let o = tape.leaf(obs.clone());
        let noise = gaussian_noise(obs.rows(), self.action_dim(), rng);
        let (a, lp) = self.sample_on_tape(&mut tape, &net, o, noise)?;
        Ok((tape.value(a).clone(), tape.value(lp).data().to_vec()))
    }

    /// One stochastic action.
    pub fn act<R: Rng + ?Sized>(&self, obs: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        Ok(self.sample_batch(&Tensor::from_parts(vec![1, obs.len()], obs.to_vec()), rng)?.0.into_data())
    }

    /// `tanh(mean)`.
    pub fn mean_action(&self, obs: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let net = self.net.bind(&mut tape);
        let o = tape.leaf(Tensor::from_parts(vec![1, obs.len()], obs.to_vec()));
        let (mean, _) = self.distribution_on_tape(&mut tape, &net, o)?;
        Ok(tape.value(mean).data().iter().map(|m| m.tanh()).collect())
    }
}

impl SoftActor for Policy {
    fn sample<R: Rng + ?Sized>(&self, obs: &Tensor, rng: &mut R) -> Result<(Tensor, Vec<f64>)> {
        self.sample_batch(obs, rng)
    }
}

/// `Q(s, a)` as `[batch, 1]` recorded on a tape.
pub trait QOnTape {
    fn q_on_tape(&self, tape: &mut Tape, obs: Var, action: Var) -> Result<Var>;
}

impl<F: Fn(&mut Tape, Var, Var) -> Result<Var>> QOnTape for F {
    fn q_on_tape(&self, tape: &mut Tape, obs: Var, action: Var) -> Result<Var> {
        self(tape, obs, action)
    }
}

/// Twin soft Q-functions and their delayed copies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Critics {
    pub online: [MlpParams; 2],
    pub target: [MlpParams; 2],
}

fn q_forward(tape: &mut Tape, net: &BoundMlp, obs: Var, action: Var) -> Result<Var> {
    let x = tape.concat(obs, action);
    forward_mlp(tape, net, x)
}

fn q_values(net: &MlpParams, obs: &Tensor, actions: &Tensor) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape);
    let o = tape.leaf(obs.clone());
    let a = tape.leaf(actions.clone());
    let q = q_forward(&mut tape, &bound, o, a)?;
    Ok(tape.value(q).data().to_vec())
}

impl Critics {
    pub fn new(obs_dim: usize, action_dim: usize, hidden: &[usize], rng: &mut impl Rng) -> Result<Self> {
        let mut sizes = vec![obs_dim + action_dim];
        sizes.extend(hidden);
        sizes.push(1);
        let q1 = MlpParams::init(&sizes, Activation::Relu, OutputActivation::Identity, rng)?;
        let q2 = MlpParams::init(&sizes, Activation::Relu, OutputActivation::Identity, rng)?;
        Ok(Self { target: [q1.clone(), q2.clone()], online: [q1, q2] })
    }

    /// `θ̄ ← τ θ + (1 − τ) θ̄` for both critics.
    pub fn polyak(&mut self, tau: f64) {
        for (t, o) in self.target.iter_mut().zip(&self.online) {
            t.polyak_from(o, tau);
        }
    }

    /// Online estimate `Q_i(s, a)`.
    pub fn q(&self, i: usize, obs: &Tensor, actions: &Tensor) -> Result<Vec<f64>> {
        q_values(&self.online[i], obs, actions)
    }
}

impl SoftCritic for Critics {
    fn target_q(&self, obs: &Tensor, actions: &Tensor) -> Result<Vec<f64>> {
        let a = q_values(&self.target[0], obs, actions)?;
        let b = q_values(&self.target[1], obs, actions)?;
        Ok(a.into_iter().zip(b).map(|(x, y)| x.min(y)).collect())
    }
}

/// Minimum of the two online critics, recorded on the tape.
pub struct OnlineMin<'a>(pub &'a Critics);

impl QOnTape for OnlineMin<'_> {
    fn q_on_tape(&self, tape: &mut Tape, obs: Var, action: Var) -> Result<Var> {
        let n1 = self.0.online[0].bind(tape);
        let n2 = self.0.online[1].bind(tape);
        let q1 = q_forward(tape, &n1, obs, action)?;
        let q2 = q_forward(tape, &n2, obs, action)?;
        Ok(tape.min(q1, q2))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CriticLoss {
    /// Mean of the two critics' losses.
    pub value: f64,
    pub grads: [MlpParams; 2],
}

/// `½ mean (Q_i(s, a) − y)²` per critic. Targets enter as constants.
pub fn critic_loss(critics: &Critics, obs: &Tensor, actions: &Tensor, targets: &[f64]) -> Result<CriticLoss> {
    if targets.len() != obs.rows() || actions.rows() != obs.rows() {
        return Err(Error::Shape { op: "critic_loss", expected: vec![obs.rows()], actual: vec![targets.len(), actions.rows()] });
    }
    let mut tape = Tape::new();
    let nets = [critics.online[0].bind(&mut tape), critics.online[1].bind(&mut tape)];
    let o = tape.leaf(obs.clone());
    let a = tape.leaf(actions.clone());
    let y = tape.leaf(Tensor::from_parts(vec![targets.len(), 1], targets.to_vec()));
    let mut losses = Vec::with_capacity(2);
    for net in &nets {
        let q = q_forward(&mut tape, net, o, a)?;
        let r = tape.sub(q, y);
        let sq = tape.square(r);
        let m = tape.mean(sq);
        losses.push(tape.scale(m, 0.5));
    }
    let total = tape.add(losses[0], losses[1]);
    let value = tape.value(total).item();
    if !value.is_finite() {
        return Err(Error::NonFinite { op: "critic_loss", node: total.index() });
    }
    let g = tape.backward(total)?;
    Ok(CriticLoss { value: value / 2.0, grads: [nets[0].grads(&g), nets[1].grads(&g)] })
}

/// `mean(α log π(a|s) − Q(s, a))` with `a` reparameterized from `noise`.
pub fn actor_loss(policy: &Policy, critic: &impl QOnTape, obs: &Tensor, alpha: f64, noise: Tensor) -> Result<(f64, MlpParams)> {
    let mut tape = Tape::new();
    let net = policy.net.bind(&mut tape);
    let o = tape.leaf(obs.clone());
    let (a, log_prob) = policy.sample_on_tape(&mut tape, &net, o, noise)?;
    let q = critic.q_on_tape(&mut tape, o, a)?;
    let ent = tape.scale(log_prob, alpha);
    let per = tape.sub(ent, q);
    let loss = tape.mean(per);
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFinite { op: "actor_loss", node: loss.index() });
    }
    let g = tape.backward(loss)?;
    Ok((value, net.grads(&g)))
}
