//! Open-loop prediction metrics, the MountainCar phase-space study, and
//! report files.
//!
//! Errors are measured in units of the evaluation set's own per-dimension
//! standard deviation, so numbers are comparable across training budgets and
//! seeds.

mod report;
pub mod svg;

pub use report::{parse_cells_csv, parse_table_csv, Cell, MetricReport, TableRow};

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::data::{random_action, Normalizer, Rollout, RolloutBatch};
use crate::envs::{energy_pumping_action, Env, EnvKind};
use crate::models::DynamicsModel;
use crate::{Error, Result};

/// Number of evaluation sequences per environment.
pub const EVAL_ROLLOUTS: usize = 10;
/// Evaluation horizon in environment steps.
pub const EVAL_HORIZON: usize = 200;
/// Seeds for evaluation episodes start here; training seeds are small.
pub const EVAL_SEED_BASE: u64 = 0x5EED_E7A1_0000;

/// Anything that maps a start state and an action sequence to predictions.
pub trait Predictor {
    /// Open-loop predictions for a `[batch, state_dim]` start, one tensor per action.
    fn predict_rollout(&self, initial: &Tensor, actions: &[Tensor]) -> Result<Vec<Tensor>>;
}

impl Predictor for DynamicsModel {
    fn predict_rollout(&self, initial: &Tensor, actions: &[Tensor]) -> Result<Vec<Tensor>> {
        let norm = self.normalizer();
        let preds = self.unroll_normalized(&norm.normalize_rows(initial), actions)?;
        Ok(preds.iter().map(|p| norm.denormalize_rows(p)).collect())
    }
}

/// The simulator itself.
#[derive(Clone, Copy, Debug)]
pub struct TruePredictor(pub Env);

impl Predictor for TruePredictor {
    fn predict_rollout(&self, initial: &Tensor, actions: &[Tensor]) -> Result<Vec<Tensor>> {
        let mut states: Vec<Vec<f64>> = initial.rows_iter().map(<[f64]>::to_vec).collect();
        let mut out = Vec::with_capacity(actions.len());
        for a in actions {
            for (i, s) in states.iter_mut().enumerate() {
                *s = self.0.step(s, a.row(i))?.state;
            }
            out.push(Tensor::from_rows(&states)?);
        }
        Ok(out)
    }
}

/// Fixed random-policy sequences for scoring models.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSet {
    pub rollouts: Vec<Rollout>,
    pub normalizer: Normalizer,
}

impl EvalSet {
    pub fn new(rollouts: Vec<Rollout>, normalizer: Normalizer) -> Result<Self> {
        let first = rollouts.first().ok_or_else(|| Error::InvalidArgument("evaluation set is empty".into()))?;
        if first.horizon() == 0 || rollouts.iter().any(|r| r.horizon() != first.horizon()) {
            return Err(Error::InvalidArgument("evaluation rollouts must share a positive horizon".into()));
        }
        Ok(Self { rollouts, normalizer })
    }

    /// The standard set: 10 sequences of 200 steps.
    pub fn standard(env: &Env) -> Result<Self> {
        Self::collect(env, EVAL_ROLLOUTS, EVAL_HORIZON, EVAL_SEED_BASE)
    }

    /// `n` full-length random-action episodes, each from its own seed at or
    /// above `seed`. Episodes that terminate early are skipped.
    pub fn collect(env: &Env, n: usize, horizon: usize, seed: u64) -> Result<Self> {
        let mut rollouts = Vec::with_capacity(n);
        let mut k = seed;
        while rollouts.len() < n {
            if k - seed > 100 * n as u64 + 100 {
                return Err(Error::InvalidArgument(format!("could not find {n} episodes lasting {horizon} steps")));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(k);
            k += 1;
            let initial = env.reset_with(&mut rng);
            let mut s = initial.clone();
            let mut actions = Vec::with_capacity(horizon);
            let mut states = Vec::with_capacity(horizon);
            let mut finished = true;
            for _ in 0..horizon {
                let a = random_action(env.action_dim(), &mut rng);
                let step = env.step(&s, &a)?;
                s = step.state;
                actions.push(a);
                states.push(s.clone());
                if step.done {
                    finished = false;
                    break;
                }
            }
            if finished {
                rollouts.push(Rollout { initial, actions, states });
            }
        }
        let normalizer = Normalizer::fit_with_angles(
            rollouts.iter().flat_map(|r| std::iter::once(r.initial.as_slice()).chain(r.states.iter().map(Vec::as_slice))),
            env.angle_dims(),
        )?;
        Self::new(rollouts, normalizer)
    }

    pub fn horizon(&self) -> usize {
        self.rollouts[0].horizon()
    }
}

/// Mean absolute normalized error at each step `1..=H`, averaged over
/// sequences and dimensions.
pub fn horizon_errors(model: &impl Predictor, set: &EvalSet) -> Result<Vec<f64>> {
    let batch = RolloutBatch::from_rollouts(&set.rollouts)?;
    let preds = model.predict_rollout(&batch.initial, &batch.actions)?;
    let norm = &set.normalizer;
    let d = norm.dim();
    let count = (batch.batch_size() * d) as f64;
    preds
        .iter()
        .zip(&batch.targets)
        .enumerate()
        .map(|(h, (p, t))| {
            if p.shape() != t.shape() {
                return Err(Error::Shape { op: "horizon_errors", expected: t.shape().to_vec(), actual: p.shape().to_vec() });
            }
            if !p.is_finite() {
                return Err(Error::Diverged { step: h });
            }
            let total: f64 = p.data().iter().zip(t.data()).enumerate().map(|(j, (a, b))| (a - b).abs() / norm.std[j % d]).sum();
            Ok(total / count)
        })
        .collect()
}

/// Mean prediction error over the whole horizon.
pub fn mpe(model: &impl Predictor, set: &EvalSet) -> Result<f64> {
    let e = horizon_errors(model, set)?;
    Ok(e.iter().sum::<f64>() / e.len() as f64)
}

/// Summed per-step error over the first `h` steps, for each `h`.
pub fn cumulative_error(model: &impl Predictor, set: &EvalSet, horizons: &[usize]) -> Result<Vec<f64>> {
    if let Some(&h) = horizons.iter().find(|&&h| h > set.horizon()) {
        return Err(Error::InvalidArgument(format!("horizon {h} exceeds the evaluation length {}", set.horizon())));
    }
    Ok(cumulative_from(&horizon_errors(model, set)?, horizons))
}

/// Cumulative curve from per-step errors.
pub fn cumulative_from(errors: &[f64], horizons: &[usize]) -> Vec<f64> {
    let mut prefix = Vec::with_capacity(errors.len() + 1);
    prefix.push(0.0);
    for e in errors {
        prefix.push(prefix.last().copied().unwrap_or(0.0) + e);
    }
    horizons.iter().map(|&h| prefix[h]).collect()
}

/// Start state and actions of the scripted energy-pumping controller on
/// MountainCar, run from rest at `x = -0.5` until the goal.
pub fn scripted_mountain_car() -> Result<Rollout> {
    let env = Env::new(EnvKind::MountainCar);
    let initial = vec![-0.5, 0.0];
    let mut s = initial.clone();
    let (mut actions, mut states) = (Vec::new(), Vec::new());
    loop {
        let a = energy_pumping_action(&s);
        let step = env.step(&s, &a)?;
        s = step.state;
        actions.push(a);
        states.push(s.clone());
        if step.done {
            return Ok(Rollout { initial, actions, states });
        }
        if actions.len() >= env.spec().max_episode_len {
            return Err(Error::InvalidArgument("scripted controller did not reach the goal".into()));
        }
    }
}

/// A model's open-loop reconstruction of one trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseSpace {
    pub truth: Vec<Vec<f64>>,
    pub predicted: Vec<Vec<f64>>,
    /// Mean absolute normalized error of the final state.
    pub final_error: f64,
}

/// Open-loop replay of `rollout.actions` through `model`. Both trajectories
/// include the start state.
pub fn phase_space_reconstruction(model: &impl Predictor, rollout: &Rollout, norm: &Normalizer) -> Result<PhaseSpace> {
    let batch = RolloutBatch::from_rollouts(std::slice::from_ref(rollout))?;
    let preds = model.predict_rollout(&batch.initial, &batch.actions)?;
    let mut predicted = vec![rollout.initial.clone()];
    predicted.extend(preds.iter().map(|p| p.data().to_vec()));
    let mut truth = vec![rollout.initial.clone()];
    truth.extend(rollout.states.iter().cloned());
    let last_p = predicted.last().expect("non-empty");
    let last_t = truth.last().expect("non-empty");
    if !last_p.iter().all(|v| v.is_finite()) {
        return Err(Error::Diverged { step: rollout.horizon() - 1 });
    }
    let d = last_t.len() as f64;
    let final_error = last_p.iter().zip(last_t).zip(&norm.std).map(|((p, t), s)| (p - t).abs() / s).sum::<f64>() / d;
    Ok(PhaseSpace { truth, predicted, final_error })
}

/// Peaks of `|velocity|` between sign changes, in time order.
pub fn swing_amplitudes(trajectory: &[Vec<f64>]) -> Vec<f64> {
    let mut peaks = Vec::new();
    let mut current = 0.0f64;
    let mut sign = 0.0f64;
    for s in trajectory {
        let v = s[1];
        if v != 0.0 && sign != 0.0 && v.signum() != sign {
            peaks.push(current);
            current = 0.0;
        }
        if v != 0.0 {
            sign = v.signum();
        }
        current = current.max(v.abs());
    }
    peaks.push(current);
    peaks
}

/// Phase plot of truth and model reconstructions over a density map of
/// training states.
pub fn phase_svg(truth: &[Vec<f64>], predictions: &[(&str, &[Vec<f64>])], training_states: &[Vec<f64>]) -> String {
    let mut plot = svg::Plot::new("MountainCar phase space", "position", "velocity");
    plot.series.push(svg::Series::line("ground truth", truth.iter().map(|s| (s[0], s[1])).collect()));
    for (name, traj) in predictions {
        plot.series.push(svg::Series::line(*name, traj.iter().map(|s| (s[0], s[1])).collect()));
    }
    plot.heatmap = Some(density(training_states, 36, 28));
    plot.render()
}

fn density(states: &[Vec<f64>], nx: usize, ny: usize) -> svg::Heatmap {
    use crate::envs::constants::mountain_car as mc;
    let (x0, x1) = (mc::MIN_POSITION, mc::MAX_POSITION);
    let (y0, y1) = (-mc::MAX_SPEED, mc::MAX_SPEED);
    let mut counts = vec![0usize; nx * ny];
    for s in states {
        let i = (((s[0] - x0) / (x1 - x0) * nx as f64) as usize).min(nx - 1);
        let j = (((s[1] - y0) / (y1 - y0) * ny as f64) as usize).min(ny - 1);
        counts[j * nx + i] += 1;
    }
    let max = counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    let (dx, dy) = ((x1 - x0) / nx as f64, (y1 - y0) / ny as f64);
    let cells = counts
        .iter()
        .enumerate()
        .filter(|(_, &c)| c > 0)
        .map(|(k, &c)| {
            let (i, j) = ((k % nx) as f64, (k / nx) as f64);
            (x0 + i * dx, y0 + j * dy, x0 + (i + 1.0) * dx, y0 + (j + 1.0) * dy, 0.6 * (c as f64 / max).sqrt())
        })
        .collect();
    svg::Heatmap { cells }
}

/// `step,true_pos,true_vel,<name>_pos,<name>_vel,...`
pub fn phase_csv(truth: &[Vec<f64>], predictions: &[(&str, &[Vec<f64>])]) -> String {
    let mut out = String::from("step,true_pos,true_vel");
    for (name, _) in predictions {
        let _ = write!(out, ",{name}_pos,{name}_vel");
    }
    out.push('\n');
    for (t, s) in truth.iter().enumerate() {
        let _ = write!(out, "{t},{},{}", s[0], s[1]);
        for (_, traj) in predictions {
            let _ = write!(out, ",{},{}", traj[t][0], traj[t][1]);
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests;
