//! Transition storage, batch sampling and state normalization.

mod persist;

pub use persist::{read_dataset, write_dataset, Manifest};

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::envs::{wrap_angle, Env};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
}

/// A start state, `H` actions, and the `H` true successor states.
#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub initial: Vec<f64>,
    pub actions: Vec<Vec<f64>>,
    pub states: Vec<Vec<f64>>,
}

impl Rollout {
    pub fn horizon(&self) -> usize {
        self.actions.len()
    }

    /// The first `h` steps of this rollout.
    pub fn truncated(&self, h: usize) -> Rollout {
        Rollout { initial: self.initial.clone(), actions: self.actions[..h].to_vec(), states: self.states[..h].to_vec() }
    }
}

/// Episodes of transitions. Sequence sampling never crosses an episode end.
///
/// Capacity is enforced by dropping whole episodes from the front, so the
/// buffer may briefly hold more than `capacity` transitions while a single
/// long episode is open.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    episodes: VecDeque<Vec<Transition>>,
    open: bool,
    capacity: usize,
    len: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self { episodes: VecDeque::new(), open: false, capacity: capacity.max(1), len: 0 }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn episodes(&self) -> impl Iterator<Item = &[Transition]> {
        self.episodes.iter().map(Vec::as_slice)
    }

    pub fn episode_count(&self) -> usize {
        self.episodes.len()
    }

    /// Appends to the current episode, opening one if needed. A `done`
    /// transition closes the episode.
    pub fn push(&mut self, t: Transition) {
        if !self.open {
            self.episodes.push_back(Vec::new());
            self.open = true;
        }
        let done = t.done;
        self.episodes.back_mut().expect("episode opened above").push(t);
        self.len += 1;
        if done {
            self.end_episode();
        }
        while self.len > self.capacity && self.episodes.len() > 1 {
            let dropped = self.episodes.pop_front().expect("more than one episode");
            self.len -= dropped.len();
        }
    }

    /// Closes the current episode (time limit or explicit reset).
    pub fn end_episode(&mut self) {
        self.open = false;
    }

    /// Transition by flat index in insertion order.
    pub fn get(&self, mut index: usize) -> Option<&Transition> {
        for ep in &self.episodes {
            if index < ep.len() {
                return Some(&ep[index]);
            }
            index -= ep.len();
        }
        None
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.episodes.iter().flatten()
    }

    /// Uniform indices with replacement.
    pub fn sample_indices(&self, batch: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
        if self.is_empty() {
            return Err(Error::EmptyBuffer);
        }
        Ok((0..batch).map(|_| rng.random_range(0..self.len)).collect())
    }
}

/// Transitions stacked row-wise.
#[derive(Clone, Debug, PartialEq)]
pub struct PairBatch {
    pub states: Tensor,
    pub actions: Tensor,
    pub next_states: Tensor,
}

/// Transitions stacked row-wise, with rewards and termination flags.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionBatch {
    pub states: Tensor,
    pub actions: Tensor,
    pub rewards: Vec<f64>,
    pub next_states: Tensor,
    pub dones: Vec<bool>,
}

impl TransitionBatch {
    pub fn from_transitions(items: &[&Transition]) -> Result<Self> {
        let rows = |f: fn(&Transition) -> &Vec<f64>| Tensor::from_rows(&items.iter().map(|t| f(t).as_slice()).collect::<Vec<_>>());
        Ok(Self {
            states: rows(|t| &t.state)?,
            actions: rows(|t| &t.action)?,
            rewards: items.iter().map(|t| t.reward).collect(),
            next_states: rows(|t| &t.next_state)?,
            dones: items.iter().map(|t| t.done).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

/// Uniformly sampled `(s, a, s')` pairs, with replacement.
pub fn sample_pairs(buffer: &ReplayBuffer, batch: usize, rng: &mut impl Rng) -> Result<PairBatch> {
    let b = sample_transitions(buffer, batch, rng)?;
    Ok(PairBatch { states: b.states, actions: b.actions, next_states: b.next_states })
}

/// Like [`sample_pairs`] but keeps rewards and termination flags.
pub fn sample_transitions(buffer: &ReplayBuffer, batch: usize, rng: &mut impl Rng) -> Result<TransitionBatch> {
    let idx = buffer.sample_indices(batch, rng)?;
    let items: Vec<&Transition> = idx.iter().map(|&i| buffer.get(i).expect("index below len")).collect();
    TransitionBatch::from_transitions(&items)
}

/// Contiguous `horizon`-step windows, uniform over all valid start indices.
pub fn sample_sequences(buffer: &ReplayBuffer, batch: usize, horizon: usize, rng: &mut impl Rng) -> Result<Vec<Rollout>> {
    if horizon == 0 {
        return Err(Error::InvalidArgument("sequence horizon must be at least 1".into()));
    }
    let windows: Vec<usize> = buffer.episodes().map(|ep| (ep.len() + 1).saturating_sub(horizon)).collect();
    let total: usize = windows.iter().sum();
    if total == 0 {
        return Err(Error::NoWindow { horizon });
    }
    let episodes: Vec<&[Transition]> = buffer.episodes().collect();
    (0..batch)
        .map(|_| {
            let mut w = rng.random_range(0..total);
            let mut e = 0;
            while w >= windows[e] {
                w -= windows[e];
                e += 1;
            }
            Ok(window(episodes[e], w, horizon))
        })
        .collect()
}

/// The rollout starting at `start` within one episode.
pub fn window(episode: &[Transition], start: usize, horizon: usize) -> Rollout {
    let steps = &episode[start..start + horizon];
    Rollout {
        initial: steps[0].state.clone(),
        actions: steps.iter().map(|t| t.action.clone()).collect(),
        states: steps.iter().map(|t| t.next_state.clone()).collect(),
    }
}

/// Rollouts of a shared horizon, stacked per time step.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutBatch {
    /// `[batch, state_dim]`
    pub initial: Tensor,
    /// `horizon` tensors of `[batch, action_dim]`
    pub actions: Vec<Tensor>,
    /// `horizon` tensors of `[batch, state_dim]`
    pub targets: Vec<Tensor>,
}

impl RolloutBatch {
    pub fn from_rollouts(rollouts: &[Rollout]) -> Result<Self> {
        let h = rollouts.first().map(Rollout::horizon).ok_or_else(|| Error::InvalidArgument("empty rollout batch".into()))?;
        if let Some(r) = rollouts.iter().find(|r| r.horizon() != h || r.states.len() != h) {
            return Err(Error::Shape { op: "rollout batch", expected: vec![h], actual: vec![r.horizon()] });
        }
        let initial = Tensor::from_rows(&rollouts.iter().map(|r| r.initial.as_slice()).collect::<Vec<_>>())?;
        let per_step = |f: &dyn Fn(&Rollout, usize) -> &[f64]| -> Result<Vec<Tensor>> {
            (0..h).map(|k| Tensor::from_rows(&rollouts.iter().map(|r| f(r, k)).collect::<Vec<_>>())).collect()
        };
        Ok(Self { initial, actions: per_step(&|r, k| &r.actions[k])?, targets: per_step(&|r, k| &r.states[k])? })
    }

    pub fn horizon(&self) -> usize {
        self.actions.len()
    }

    pub fn batch_size(&self) -> usize {
        self.initial.rows()
    }

    /// States mapped through `norm`; actions are left as they are.
    pub fn normalized(&self, norm: &Normalizer) -> Self {
        Self {
            initial: norm.normalize_rows(&self.initial),
            actions: self.actions.clone(),
            targets: self.targets.iter().map(|t| norm.normalize_rows(t)).collect(),
        }
    }

    /// Perturbs the model-input states; targets are untouched.
    pub fn with_state_noise(mut self, sigma: f64, rng: &mut impl Rng) -> Result<Self> {
        self.initial = add_state_noise(&self.initial, sigma, rng)?;
        Ok(self)
    }
}

impl PairBatch {
    pub fn normalized(&self, norm: &Normalizer) -> Self {
        Self { states: norm.normalize_rows(&self.states), actions: self.actions.clone(), next_states: norm.normalize_rows(&self.next_states) }
    }

    /// Perturbs the input states; regression targets are untouched.
    pub fn with_state_noise(mut self, sigma: f64, rng: &mut impl Rng) -> Result<Self> {
        self.states = add_state_noise(&self.states, sigma, rng)?;
        Ok(self)
    }
}

/// I.i.d. `N(0, sigma²)` noise added to every entry.
pub fn add_state_noise(states: &Tensor, sigma: f64, rng: &mut impl Rng) -> Result<Tensor> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise sigma must be non-negative, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(states.clone());
    }
    let mut out = states.clone();
    for v in out.data_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *v += sigma * z;
    }
    Ok(out)
}

/// Per-dimension affine whitening.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Angle dimensions: statistics are taken on wrapped values and model
    /// inputs are wrapped into `[-pi, pi)`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub angles: Vec<usize>,
}

impl Normalizer {
    pub const MIN_STD: f64 = 1e-6;

    pub fn identity(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], std: vec![1.0; dim], angles: Vec::new() }
    }

    /// Population statistics of `states`, with std floored at [`Self::MIN_STD`].
    pub fn fit<'a>(states: impl IntoIterator<Item = &'a [f64]>) -> Result<Self> {
        let rows: Vec<&[f64]> = states.into_iter().collect();
        let dim = rows.first().map(|r| r.len()).ok_or_else(|| Error::InvalidArgument("cannot fit a normalizer to no states".into()))?;
        let n = rows.len() as f64;
        let mut mean = vec![0.0; dim];
        for r in &rows {
            for (m, v) in mean.iter_mut().zip(*r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for r in &rows {
            for ((acc, v), m) in var.iter_mut().zip(*r).zip(&mean) {
                *acc += (v - m) * (v - m);
            }
        }
        let std = var.into_iter().map(|v| (v / n).sqrt().max(Self::MIN_STD)).collect();
        Ok(Self { mean, std, angles: Vec::new() })
    }

    /// Like [`Self::fit`] with the `angles` dimensions wrapped first.
    pub fn fit_with_angles<'a>(states: impl IntoIterator<Item = &'a [f64]>, angles: &[usize]) -> Result<Self> {
        let rows: Vec<Vec<f64>> = states
            .into_iter()
            .map(|r| {
                let mut r = r.to_vec();
                for &i in angles {
                    if let Some(v) = r.get_mut(i) {
                        *v = wrap_angle(*v);
                    }
                }
                r
            })
            .collect();
        let mut n = Self::fit(rows.iter().map(Vec::as_slice))?;
        if let Some(&i) = angles.iter().find(|&&i| i >= n.dim()) {
            return Err(Error::InvalidArgument(format!("angle index {i} out of range for {} state dimensions", n.dim())));
        }
        n.angles = angles.to_vec();
        Ok(n)
    }

    /// Fits on every state and successor state in the buffer.
    pub fn from_buffer(buffer: &ReplayBuffer) -> Result<Self> {
        Self::fit(buffer.iter().flat_map(|t| [t.state.as_slice(), t.next_state.as_slice()]))
    }

    /// [`Self::from_buffer`] aware of the environment's angle dimensions.
    pub fn for_env(env: &Env, buffer: &ReplayBuffer) -> Result<Self> {
        Self::fit_with_angles(buffer.iter().flat_map(|t| [t.state.as_slice(), t.next_state.as_slice()]), env.angle_dims())
    }

    /// Offsets that move normalized angle coordinates onto their wrapped
    /// values; `None` without angle dimensions.
    pub fn input_shift(&self, normalized: &Tensor) -> Option<Tensor> {
        if self.angles.is_empty() {
            return None;
        }
        let c = normalized.cols();
        let mut out = Tensor::zeros(normalized.shape());
        for (j, (o, v)) in out.data_mut().iter_mut().zip(normalized.data()).enumerate() {
            let i = j % c;
            if self.angles.contains(&i) {
                let raw = v * self.std[i] + self.mean[i];
                *o = (wrap_angle(raw) - raw) / self.std[i];
            }
        }
        Some(out)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s).collect()
    }

    pub fn denormalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| v * s + m).collect()
    }

    pub fn normalize_rows(&self, t: &Tensor) -> Tensor {
        self.map_rows(t, |i, v| (v - self.mean[i]) / self.std[i])
    }

    pub fn denormalize_rows(&self, t: &Tensor) -> Tensor {
        self.map_rows(t, |i, v| v * self.std[i] + self.mean[i])
    }

    fn map_rows(&self, t: &Tensor, f: impl Fn(usize, f64) -> f64) -> Tensor {
        let c = t.cols();
        let mut out = t.clone();
        for (j, v) in out.data_mut().iter_mut().enumerate() {
            *v = f(j % c, *v);
        }
        out
    }
}

/// Uniform random actions in `[-1, 1]^action_dim`.
pub fn random_action(action_dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..action_dim).map(|_| rng.random_range(-1.0..=1.0)).collect()
}

/// Exactly `n_samples` transitions from a uniform random policy, in episodes
/// of at most `episode_len` steps. Deterministic per seed.
pub fn collect_random(env: &Env, n_samples: usize, episode_len: usize, seed: u64) -> Result<ReplayBuffer> {
    collect_random_with(env, n_samples, episode_len, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn collect_random_with(env: &Env, n_samples: usize, episode_len: usize, rng: &mut impl Rng) -> Result<ReplayBuffer> {
    if n_samples == 0 {
        return Err(Error::InvalidArgument("sample budget must be at least 1".into()));
    }
    if episode_len == 0 {
        return Err(Error::InvalidArgument("episode length must be at least 1".into()));
    }
    let mut buffer = ReplayBuffer::new(n_samples);
    while buffer.len() < n_samples {
        let mut s = env.reset_with(rng);
        for _ in 0..episode_len {
            let a = random_action(env.action_dim(), rng);
            let step = env.step(&s, &a)?;
            buffer.push(Transition { state: s, action: a, reward: step.reward, next_state: step.state.clone(), done: step.done });
            s = step.state;
            if step.done || buffer.len() == n_samples {
                break;
            }
        }
        buffer.end_episode();
    }
    Ok(buffer)
}
