//! Learned dynamics: a neural derivative field integrated by an ODE solver
//! and trained on multi-step open-loop rollouts, and a one-step delta
//! network trained on transition pairs.
//!
//! Both models work in normalized state space. Actions enter unnormalized.
//! Angle dimensions named by the normalizer are wrapped before the network
//! sees them, so the learned map is periodic in those coordinates.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{
    adam_step, checkpoint, forward_mlp, Activation, AdamConfig, AdamState, BoundMlp, MlpParams, OutputActivation, Tape, Tensor, Var,
};
use crate::data::{sample_pairs, sample_sequences, Normalizer, ReplayBuffer, RolloutBatch};
use crate::ode::{ode_step, shifted_input, unroll, Method, NeuralField, SolverConfig};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self { hidden: vec![256, 256], activation: Activation::Tanh }
    }
}

impl NetConfig {
    /// Network over `concat(state, action)` with a zeroed output layer.
    pub fn build(&self, state_dim: usize, action_dim: usize, rng: &mut impl Rng) -> Result<MlpParams> {
        let mut sizes = vec![state_dim + action_dim];
        sizes.extend(&self.hidden);
        sizes.push(state_dim);
        Ok(MlpParams::init(&sizes, self.activation, OutputActivation::Identity, rng)?.zero_output_layer())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    DynodeEuler,
    DynodeRk4,
    Baseline,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::DynodeEuler, ModelKind::DynodeRk4, ModelKind::Baseline];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::DynodeEuler => "dynode-euler",
            ModelKind::DynodeRk4 => "dynode-rk4",
            ModelKind::Baseline => "baseline",
        }
    }

    pub fn method(self) -> Option<Method> {
        match self {
            ModelKind::DynodeEuler => Some(Method::Euler),
            ModelKind::DynodeRk4 => Some(Method::Rk4),
            ModelKind::Baseline => None,
        }
    }

    /// Training horizon: 20 for Euler, 7 for RK4, 1 for the baseline.
    pub fn default_horizon(self) -> usize {
        match self {
            ModelKind::DynodeEuler => 20,
            ModelKind::DynodeRk4 => 7,
            ModelKind::Baseline => 1,
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown model `{s}` (expected dynode-euler, dynode-rk4 or baseline)")))
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// A learned field `ds/dt = f(s, a)` stepped by `solver`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DyNodeModel {
    pub net: MlpParams,
    pub solver: SolverConfig,
    pub normalizer: Normalizer,
}

/// `s' = s + net(s, a)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineModel {
    pub net: MlpParams,
    pub normalizer: Normalizer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum DynamicsModel {
    DyNode(DyNodeModel),
    Baseline(BaselineModel),
}

impl From<DyNodeModel> for DynamicsModel {
    fn from(m: DyNodeModel) -> Self {
        DynamicsModel::DyNode(m)
    }
}

impl From<BaselineModel> for DynamicsModel {
    fn from(m: BaselineModel) -> Self {
        DynamicsModel::Baseline(m)
    }
}

fn check_dims(net: &MlpParams, normalizer: &Normalizer) -> Result<usize> {
    let sd = normalizer.dim();
    if net.output_dim() != sd || net.input_dim() <= sd {
        return Err(Error::Shape { op: "dynamics model", expected: vec![sd], actual: vec![net.input_dim(), net.output_dim()] });
    }
    Ok(net.input_dim() - sd)
}

impl DyNodeModel {
    pub fn new(net: MlpParams, solver: SolverConfig, normalizer: Normalizer) -> Result<Self> {
        check_dims(&net, &normalizer)?;
        solver.validate()?;
        Ok(Self { net, solver, normalizer })
    }
}

impl BaselineModel {
    pub fn new(net: MlpParams, normalizer: Normalizer) -> Result<Self> {
        check_dims(&net, &normalizer)?;
        Ok(Self { net, normalizer })
    }
}

impl DynamicsModel {
    /// Fresh model of `kind` for an environment with step length `dt`.
    pub fn build(kind: ModelKind, arch: &NetConfig, normalizer: Normalizer, action_dim: usize, dt: f64, rng: &mut impl Rng) -> Result<Self> {
        let net = arch.build(normalizer.dim(), action_dim, rng)?;
        Ok(match kind.method() {
            Some(method) => DyNodeModel::new(net, SolverConfig::new(method, 1, dt)?, normalizer)?.into(),
            None => BaselineModel::new(net, normalizer)?.into(),
        })
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            DynamicsModel::DyNode(m) => match m.solver.method {
                Method::Euler => ModelKind::DynodeEuler,
                Method::Rk4 => ModelKind::DynodeRk4,
            },
            DynamicsModel::Baseline(_) => ModelKind::Baseline,
        }
    }

    pub fn net(&self) -> &MlpParams {
        match self {
            DynamicsModel::DyNode(m) => &m.net,
            DynamicsModel::Baseline(m) => &m.net,
        }
    }

    pub fn net_mut(&mut self) -> &mut MlpParams {
        match self {
            DynamicsModel::DyNode(m) => &mut m.net,
            DynamicsModel::Baseline(m) => &mut m.net,
        }
    }

    pub fn normalizer(&self) -> &Normalizer {
        match self {
            DynamicsModel::DyNode(m) => &m.normalizer,
            DynamicsModel::Baseline(m) => &m.normalizer,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.normalizer().dim()
    }

    pub fn action_dim(&self) -> usize {
        self.net().input_dim() - self.state_dim()
    }

    /// One normalized-space step recorded on `tape`.
    fn step_on_tape(&self, tape: &mut Tape, net: &BoundMlp, s: Var, a: Var) -> Result<Var> {
        let shift = |t: &Tensor| self.normalizer().input_shift(t);
        match self {
            DynamicsModel::DyNode(m) => ode_step(&NeuralField::new(net, self.state_dim()).with_input_shift(&shift), tape, s, a, &m.solver),
            DynamicsModel::Baseline(_) => {
                let input = shifted_input(tape, s, Some(&shift));
                let x = tape.concat(input, a);
                let delta = forward_mlp(tape, net, x)?;
                let next = tape.add(s, delta);
                if !tape.value(next).is_finite() {
                    return Err(Error::Diverged { step: 0 });
                }
                Ok(next)
            }
        }
    }

    /// Open-loop predictions on `tape`, one per action.
    fn unroll_on_tape(&self, tape: &mut Tape, net: &BoundMlp, initial: Var, actions: &[Var]) -> Result<Vec<Var>> {
        match self {
            DynamicsModel::DyNode(m) => {
                let shift = |t: &Tensor| m.normalizer.input_shift(t);
                unroll(&NeuralField::new(net, self.state_dim()).with_input_shift(&shift), tape, initial, actions, &m.solver)
            }
            DynamicsModel::Baseline(_) => {
                let mut out = Vec::with_capacity(actions.len());
                let mut s = initial;
                for (h, &a) in actions.iter().enumerate() {
                    s = self.step_on_tape(tape, net, s, a).map_err(|e| match e {
                        Error::Diverged { .. } => Error::Diverged { step: h },
                        other => other,
                    })?;
                    out.push(s);
                }
                Ok(out)
            }
        }
    }

    fn check_inputs(&self, states: &Tensor, actions: &Tensor) -> Result<()> {
        if states.cols() != self.state_dim() || actions.cols() != self.action_dim() || states.rows() != actions.rows() {
            return Err(Error::Shape {
                op: "predict",
                expected: vec![states.rows(), self.state_dim(), self.action_dim()],
                actual: vec![actions.rows(), states.cols(), actions.cols()],
            });
        }
        Ok(())
    }

    /// Next state in environment units.
    pub fn predict_next(&self, state: &[f64], action: &[f64]) -> Result<Vec<f64>> {
        let out = self.predict_batch(&Tensor::vector(state.to_vec()), &Tensor::vector(action.to_vec()))?;
        Ok(out.into_data())
    }

    /// Row-wise next states in environment units.
    pub fn predict_batch(&self, states: &Tensor, actions: &Tensor) -> Result<Tensor> {
        self.check_inputs(states, actions)?;
        let norm = self.normalizer();
        let mut tape = Tape::new();
        let net = self.net().bind(&mut tape);
        let s = tape.leaf(norm.normalize_rows(states));
        let a = tape.leaf(actions.clone());
        let next = self.step_on_tape(&mut tape, &net, s, a)?;
        // Add the denormalized increment so a zero increment returns `states` exactly.
        let (from, to) = (tape.value(s).data(), tape.value(next).data());
        let d = self.state_dim();
        let mut out = states.clone();
        for (j, v) in out.data_mut().iter_mut().enumerate() {
            *v += (to[j] - from[j]) * norm.std[j % d];
        }
        Ok(out)
    }

    /// Open-loop predictions in normalized units from a normalized start.
    pub fn unroll_normalized(&self, initial: &Tensor, actions: &[Tensor]) -> Result<Vec<Tensor>> {
        if let Some(a) = actions.first() {
            self.check_inputs(initial, a)?;
        }
        let mut tape = Tape::new();
        let net = self.net().bind(&mut tape);
        let s = tape.leaf(initial.clone());
        let acts: Vec<Var> = actions.iter().map(|a| tape.leaf(a.clone())).collect();
        let preds = self.unroll_on_tape(&mut tape, &net, s, &acts)?;
        Ok(preds.into_iter().map(|v| tape.value(v).clone()).collect())
    }

    /// Mean absolute open-loop error over batch, state dimensions and
    /// horizon, in normalized units. `batch` holds environment units.
    pub fn path_loss(&self, batch: &RolloutBatch) -> Result<f64> {
        let (loss, _) = self.loss_and_grads(&batch.normalized(self.normalizer()), false)?;
        Ok(loss)
    }

    /// Loss and, when requested, its gradient for an already normalized batch.
    pub fn loss_and_grads(&self, batch: &RolloutBatch, with_grads: bool) -> Result<(f64, Option<MlpParams>)> {
        if batch.horizon() == 0 {
            return Err(Error::InvalidArgument("path loss needs a horizon of at least 1".into()));
        }
        self.check_inputs(&batch.initial, &batch.actions[0])?;
        let mut tape = Tape::new();
        let net = self.net().bind(&mut tape);
        let s = tape.leaf(batch.initial.clone());
        let acts: Vec<Var> = batch.actions.iter().map(|a| tape.leaf(a.clone())).collect();
        let preds = self.unroll_on_tape(&mut tape, &net, s, &acts)?;
        let mut total = None;
        for (p, target) in preds.iter().zip(&batch.targets) {
            let t = tape.leaf(target.clone());
            let diff = tape.sub(*p, t);
            let abs = tape.abs(diff);
            let step = tape.sum(abs);
            total = Some(match total {
                None => step,
                Some(acc) => tape.add(acc, step),
            });
        }
        let count = (batch.batch_size() * self.state_dim() * batch.horizon()) as f64;
        let loss = tape.scale(total.expect("horizon is at least 1"), 1.0 / count);
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "path_loss", node: loss.index() });
        }
        if !with_grads {
            return Ok((value, None));
        }
        let grads = tape.backward(loss)?;
        Ok((value, Some(net.grads(&grads))))
    }

    pub fn save(&self, path: &Path, meta: &ModelMeta) -> Result<()> {
        checkpoint::save(self.net(), path)?;
        let sidecar = Sidecar {
            kind: self.kind(),
            solver: match self {
                DynamicsModel::DyNode(m) => Some(m.solver),
                DynamicsModel::Baseline(_) => None,
            },
            normalizer: self.normalizer().clone(),
            meta: meta.clone(),
        };
        let text = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
        let side = sidecar_path(path);
        std::fs::write(&side, text + "\n").map_err(|e| Error::io(&side, e))
    }

    pub fn load(path: &Path) -> Result<(Self, ModelMeta)> {
        let net = checkpoint::load(path)?;
        let side = sidecar_path(path);
        let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let sidecar: Sidecar = serde_json::from_str(&text).map_err(|e| Error::format(&side, e.to_string()))?;
        let model = match (sidecar.kind, sidecar.solver) {
            (ModelKind::Baseline, _) => BaselineModel::new(net, sidecar.normalizer)?.into(),
            (kind, Some(solver)) if kind.method() == Some(solver.method) => DyNodeModel::new(net, solver, sidecar.normalizer)?.into(),
            _ => return Err(Error::format(&side, "solver does not match model kind")),
        };
        Ok((model, sidecar.meta))
    }
}

/// Training context stored next to a checkpoint.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub env: String,
    pub horizon: usize,
    pub samples: usize,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    kind: ModelKind,
    solver: Option<SolverConfig>,
    normalizer: Normalizer,
    meta: ModelMeta,
}

/// `model.bin` -> `model.bin.json`
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Rollout length; 1 means transition pairs.
    pub horizon: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_iterations: usize,
    /// Std of Gaussian noise on normalized input states.
    pub noise_std: f64,
    /// Iterations per logged loss average.
    pub eval_every: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn for_kind(kind: ModelKind) -> Self {
        Self {
            horizon: kind.default_horizon(),
            batch_size: if kind == ModelKind::Baseline { 256 } else { 32 },
            learning_rate: 1e-3,
            max_iterations: 20_000,
            noise_std: 0.01,
            eval_every: 100,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::InvalidArgument("training horizon must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::InvalidArgument(format!("noise std must be non-negative, got {}", self.noise_std)));
        }
        Ok(())
    }
}

/// Per-iteration minibatch losses.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossHistory {
    pub losses: Vec<f64>,
}

impl LossHistory {
    /// `(last iteration, window mean)` for consecutive windows of `every`.
    pub fn windows(&self, every: usize) -> Vec<(usize, f64)> {
        let every = every.max(1);
        self.losses.chunks(every).enumerate().map(|(i, c)| (i * every + c.len() - 1, c.iter().sum::<f64>() / c.len() as f64)).collect()
    }
}

/// Optimizer state carried across calls, so a model can be fine-tuned.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Trainer {
    pub adam: AdamState,
}

impl Trainer {
    /// `cfg.max_iterations` Adam steps on minibatches drawn with `rng`.
    ///
    /// DyNODE models sample `cfg.horizon`-step sequences; the baseline
    /// samples transition pairs and ignores `cfg.horizon`.
    pub fn run(&mut self, model: &mut DynamicsModel, buffer: &ReplayBuffer, cfg: &TrainConfig, rng: &mut impl Rng) -> Result<LossHistory> {
        cfg.validate()?;
        let adam = AdamConfig::with_lr(cfg.learning_rate);
        let mut history = LossHistory::default();
        for iteration in 0..cfg.max_iterations {
            let wrap = |source: Error| Error::Training { iteration, source: Box::new(source) };
            let batch = match model {
                DynamicsModel::DyNode(_) => RolloutBatch::from_rollouts(&sample_sequences(buffer, cfg.batch_size, cfg.horizon, rng)?)?,
                DynamicsModel::Baseline(_) => {
                    let p = sample_pairs(buffer, cfg.batch_size, rng)?;
                    RolloutBatch { initial: p.states, actions: vec![p.actions], targets: vec![p.next_states] }
                }
            };
            let batch = batch.normalized(model.normalizer()).with_state_noise(cfg.noise_std, rng)?;
            let (loss, grads) = model.loss_and_grads(&batch, true).map_err(wrap)?;
            adam_step(model.net_mut(), &grads.expect("requested"), &mut self.adam, &adam).map_err(wrap)?;
            history.losses.push(loss);
        }
        Ok(history)
    }
}

fn train_fresh(model: &mut DynamicsModel, buffer: &ReplayBuffer, cfg: &TrainConfig) -> Result<LossHistory> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Trainer::default().run(model, buffer, cfg, &mut rng)
}

/// Path-loss training of a DyNODE model from a fresh optimizer.
pub fn train_dynode(model: &mut DyNodeModel, buffer: &ReplayBuffer, cfg: &TrainConfig) -> Result<LossHistory> {
    let mut m = DynamicsModel::DyNode(model.clone());
    let history = train_fresh(&mut m, buffer, cfg)?;
    if let DynamicsModel::DyNode(trained) = m {
        *model = trained;
    }
    Ok(history)
}

/// One-step training of the baseline from a fresh optimizer.
pub fn train_baseline(model: &mut BaselineModel, buffer: &ReplayBuffer, cfg: &TrainConfig) -> Result<LossHistory> {
    let mut m = DynamicsModel::Baseline(model.clone());
    let history = train_fresh(&mut m, buffer, cfg)?;
    if let DynamicsModel::Baseline(trained) = m {
        *model = trained;
    }
    Ok(history)
}

/// Trains whichever model `model` is.
pub fn train(model: &mut DynamicsModel, buffer: &ReplayBuffer, cfg: &TrainConfig) -> Result<LossHistory> {
    train_fresh(model, buffer, cfg)
}

#[cfg(test)]
mod tests;
