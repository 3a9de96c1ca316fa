//! Learned continuous-control dynamics: a control-augmented neural ODE trained
//! on whole action sequences, a one-step network baseline, the analytic
//! environments they are fit to, and a soft actor-critic agent that expands its
//! critic targets through a learned model.

pub mod autodiff;
pub mod data;
pub mod envs;
pub mod error;
pub mod eval;
pub mod models;
pub mod ode;
pub mod rl;

pub use error::{Error, Result};
