//! Fixed-step explicit integrators with the action held constant over each
//! environment step.
//!
//! Two paths share the same update formulas: [`ode_step`]/[`unroll`] record on
//! a [`Tape`] so gradients reach field parameters and initial states, and
//! [`integrate`] works on plain slices for simulators.

use serde::{Deserialize, Serialize};

use crate::autodiff::{forward_mlp, BoundMlp, Tape, Tensor, Var};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Euler,
    Rk4,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "euler" => Ok(Method::Euler),
            "rk4" => Ok(Method::Rk4),
            other => Err(Error::InvalidArgument(format!("unknown solver method `{other}`"))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Euler => "euler",
            Method::Rk4 => "rk4",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub method: Method,
    /// Solver evaluations per environment step.
    pub substeps: usize,
    /// Seconds covered by one environment step.
    pub dt: f64,
}

impl SolverConfig {
    pub fn new(method: Method, substeps: usize, dt: f64) -> Result<Self> {
        let cfg = Self { method, substeps, dt };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.substeps == 0 {
            return Err(Error::InvalidArgument("solver substeps must be at least 1".into()));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidArgument(format!("solver dt must be positive, got {}", self.dt)));
        }
        Ok(())
    }

    fn h(&self) -> f64 {
        self.dt / self.substeps as f64
    }
}

/// Time-autonomous vector field `(state, action) -> d state / dt`.
///
/// Implementations operate on `[batch, dim]` tensors recorded on a tape.
pub trait DerivativeField {
    fn state_dim(&self) -> usize;

    fn derivative(&self, tape: &mut Tape, state: Var, action: Var) -> Result<Var>;
}

/// Maps a normalized state batch to an offset added before the network.
pub type InputShift<'a> = &'a dyn Fn(&Tensor) -> Option<Tensor>;

/// Field given by a network over `concat(state, action)`.
pub struct NeuralField<'a> {
    net: &'a BoundMlp,
    state_dim: usize,
    input_shift: Option<InputShift<'a>>,
}

impl<'a> NeuralField<'a> {
    pub fn new(net: &'a BoundMlp, state_dim: usize) -> Self {
        Self { net, state_dim, input_shift: None }
    }

    /// Adds a constant, value-dependent offset to the state before the net
    /// sees it. The offset carries no gradient.
    pub fn with_input_shift(mut self, shift: InputShift<'a>) -> Self {
        self.input_shift = Some(shift);
        self
    }
}

/// `state + shift(state)` with the shift as a constant leaf.
pub fn shifted_input(tape: &mut Tape, state: Var, shift: Option<InputShift<'_>>) -> Var {
    match shift.and_then(|f| f(tape.value(state))) {
        Some(offset) => {
            let c = tape.leaf(offset);
            tape.add(state, c)
        }
        None => state,
    }
}

impl DerivativeField for NeuralField<'_> {
    fn state_dim(&self) -> usize {
        self.state_dim
    }

    fn derivative(&self, tape: &mut Tape, state: Var, action: Var) -> Result<Var> {
        let state = shifted_input(tape, state, self.input_shift);
        let input = tape.concat(state, action);
        forward_mlp(tape, self.net, input)
    }
}

/// `ds/dt = A s`, ignoring the action.
#[derive(Clone, Debug)]
pub struct LinearField {
    matrix: Tensor,
}

impl LinearField {
    pub fn new(matrix: Tensor) -> Result<Self> {
        if matrix.shape().len() != 2 || matrix.rows() != matrix.cols() {
            return Err(Error::Shape { op: "linear field", expected: vec![matrix.rows(), matrix.rows()], actual: matrix.shape().to_vec() });
        }
        Ok(Self { matrix })
    }

    /// `ds/dt = -rate * s` in one dimension.
    pub fn decay(rate: f64) -> Self {
        Self { matrix: Tensor::from_parts(vec![1, 1], vec![-rate]) }
    }

    /// Undamped oscillator `(x, v)' = (v, -ω² x)`.
    pub fn oscillator(omega: f64) -> Self {
        Self { matrix: Tensor::from_parts(vec![2, 2], vec![0.0, 1.0, -omega * omega, 0.0]) }
    }
}

impl DerivativeField for LinearField {
    fn state_dim(&self) -> usize {
        self.matrix.rows()
    }

    fn derivative(&self, tape: &mut Tape, state: Var, _action: Var) -> Result<Var> {
        let a = tape.leaf(self.matrix.clone());
        Ok(tape.matmul_t(state, a))
    }
}

/// `ds/dt = a`; state and action share a dimension.
#[derive(Clone, Copy, Debug, Default)]
pub struct ActionField {
    pub dim: usize,
}

impl DerivativeField for ActionField {
    fn state_dim(&self) -> usize {
        self.dim
    }

    fn derivative(&self, _tape: &mut Tape, _state: Var, action: Var) -> Result<Var> {
        Ok(action)
    }
}

/// A non-differentiable field evaluated row by row from plain values; used to
/// plug analytic simulator dynamics into the tape-based solver.
pub struct FnField<F> {
    dim: usize,
    f: F,
}

impl<F: Fn(&[f64], &[f64]) -> Vec<f64>> FnField<F> {
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F: Fn(&[f64], &[f64]) -> Vec<f64>> DerivativeField for FnField<F> {
    fn state_dim(&self) -> usize {
        self.dim
    }

    fn derivative(&self, tape: &mut Tape, state: Var, action: Var) -> Result<Var> {
        let s = tape.value(state);
        let a = tape.value(action);
        let mut data = Vec::with_capacity(s.len());
        for (sr, ar) in s.rows_iter().zip(a.rows_iter()) {
            data.extend((self.f)(sr, ar));
        }
        let value = Tensor::from_parts(s.shape().to_vec(), data);
        Ok(tape.leaf(value))
    }
}

fn field_eval(field: &(impl DerivativeField + ?Sized), tape: &mut Tape, s: Var, a: Var) -> Result<Var> {
    let d = field.derivative(tape, s, a)?;
    if tape.value(d).shape() != tape.value(s).shape() {
        return Err(Error::Shape { op: "derivative field", expected: tape.value(s).shape().to_vec(), actual: tape.value(d).shape().to_vec() });
    }
    Ok(d)
}

/// Advances `state` by one environment step of `cfg.dt` seconds using
/// `cfg.substeps` solver steps, holding `action` fixed throughout.
pub fn ode_step(field: &(impl DerivativeField + ?Sized), tape: &mut Tape, state: Var, action: Var, cfg: &SolverConfig) -> Result<Var> {
    cfg.validate()?;
    let h = cfg.h();
    let mut s = state;
    for _ in 0..cfg.substeps {
        s = match cfg.method {
            Method::Euler => {
                let k1 = field_eval(field, tape, s, action)?;
                let step = tape.scale(k1, h);
                tape.add(s, step)
            }
            Method::Rk4 => {
                let k1 = field_eval(field, tape, s, action)?;
                let d = tape.scale(k1, h / 2.0);
                let s2 = tape.add(s, d);
                let k2 = field_eval(field, tape, s2, action)?;
                let d = tape.scale(k2, h / 2.0);
                let s3 = tape.add(s, d);
                let k3 = field_eval(field, tape, s3, action)?;
                let d = tape.scale(k3, h);
                let s4 = tape.add(s, d);
                let k4 = field_eval(field, tape, s4, action)?;
                // s + h (k1 + 2 k2 + 2 k3 + k4) / 6
                let k23 = tape.add(k2, k3);
                let k23 = tape.scale(k23, 2.0);
                let k14 = tape.add(k1, k4);
                let sum = tape.add(k14, k23);
                let sum = tape.scale(sum, h);
                let incr = tape.scale(sum, 1.0 / 6.0);
                tape.add(s, incr)
            }
        };
    }
    if !tape.value(s).is_finite() {
        return Err(Error::Diverged { step: 0 });
    }
    Ok(s)
}

/// Open-loop composition: each step starts from the previous prediction.
pub fn unroll(field: &(impl DerivativeField + ?Sized), tape: &mut Tape, initial: Var, actions: &[Var], cfg: &SolverConfig) -> Result<Vec<Var>> {
    if actions.is_empty() {
        return Err(Error::InvalidArgument("unroll needs at least one action".into()));
    }
    let mut out = Vec::with_capacity(actions.len());
    let mut s = initial;
    for (h, &a) in actions.iter().enumerate() {
        s = ode_step(field, tape, s, a, cfg).map_err(|e| match e {
            Error::Diverged { .. } => Error::Diverged { step: h },
            other => other,
        })?;
        out.push(s);
    }
    Ok(out)
}

/// Plain-slice counterpart of [`ode_step`] for simulators.
pub fn integrate(f: impl Fn(&[f64], &[f64]) -> Vec<f64>, state: &[f64], action: &[f64], cfg: &SolverConfig) -> Vec<f64> {
    let h = cfg.h();
    let axpy = |s: &[f64], k: &[f64], c: f64| -> Vec<f64> { s.iter().zip(k).map(|(x, y)| x + y * c).collect() };
    let mut s = state.to_vec();
    for _ in 0..cfg.substeps {
        s = match cfg.method {
            Method::Euler => {
                let k1 = f(&s, action);
                axpy(&s, &k1, h)
            }
            Method::Rk4 => {
                let k1 = f(&s, action);
                let k2 = f(&axpy(&s, &k1, h / 2.0), action);
                let k3 = f(&axpy(&s, &k2, h / 2.0), action);
                let k4 = f(&axpy(&s, &k3, h), action);
                s.iter()
                    .enumerate()
                    .map(|(i, x)| {
                        let sum = (k1[i] + k4[i]) + (k2[i] + k3[i]) * 2.0;
                        x + sum * h * (1.0 / 6.0)
                    })
                    .collect()
            }
        };
    }
    s
}

/// Empirical global order of accuracy.
///
/// Integrates `field` from `initial` to time `horizon` with each entry of
/// `step_counts` as the number of single-substep steps, measures the max-norm
/// error against `exact(horizon)`, and returns the least-squares slope of
/// `ln(error)` against `ln(dt)`.
pub fn order_of_convergence(
    field: &(impl DerivativeField + ?Sized),
    exact: impl Fn(f64) -> Vec<f64>,
    initial: &[f64],
    horizon: f64,
    method: Method,
    step_counts: &[usize],
) -> Result<f64> {
    if step_counts.len() < 2 {
        return Err(Error::InvalidArgument("need at least two step counts".into()));
    }
    let truth = exact(horizon);
    let mut points = Vec::with_capacity(step_counts.len());
    for &n in step_counts {
        let dt = horizon / n as f64;
        let cfg = SolverConfig::new(method, 1, dt)?;
        let mut tape = Tape::new();
        let mut s = tape.leaf(Tensor::vector(initial.to_vec()));
        let a = tape.leaf(Tensor::vector(vec![0.0]));
        for _ in 0..n {
            s = ode_step(field, &mut tape, s, a, &cfg)?;
        }
        let err = tape.value(s).data().iter().zip(&truth).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        points.push((dt.ln(), err.ln()));
    }
    Ok(slope(&points))
}

fn slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}
