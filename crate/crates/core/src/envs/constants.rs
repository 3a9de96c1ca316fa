//! Physical constants for every simulator, versioned as one table.
//!
//! Bump [`VERSION`] whenever a value changes; datasets record it in their
//! manifest so stale data is detectable.

pub const VERSION: u32 = 1;

/// Episode length used for random data collection and evaluation sequences.
pub const COLLECTION_EPISODE_LEN: usize = 200;

pub mod mountain_car {
    pub const MIN_POSITION: f64 = -1.2;
    pub const MAX_POSITION: f64 = 0.6;
    pub const MAX_SPEED: f64 = 0.07;
    pub const GOAL_POSITION: f64 = 0.45;
    pub const POWER: f64 = 0.0015;
    pub const GRAVITY: f64 = 0.0025;
    pub const GOAL_REWARD: f64 = 100.0;
    pub const ACTION_COST: f64 = 0.1;
    pub const RESET_LOW: f64 = -0.6;
    pub const RESET_HIGH: f64 = -0.4;
    /// Discrete-time system; one step is one unit of model time.
    pub const DT: f64 = 1.0;
    pub const MAX_EPISODE_LEN: usize = 999;
}

pub mod pendulum {
    pub const GRAVITY: f64 = 10.0;
    pub const MASS: f64 = 1.0;
    pub const LENGTH: f64 = 1.0;
    pub const MAX_TORQUE: f64 = 2.0;
    pub const MAX_SPEED: f64 = 8.0;
    pub const DT: f64 = 0.05;
    pub const SUBSTEPS: usize = 2;
    pub const MAX_EPISODE_LEN: usize = 200;
    pub const RESET_MAX_SPEED: f64 = 1.0;
}

pub mod cartpole {
    pub const GRAVITY: f64 = 9.8;
    pub const CART_MASS: f64 = 1.0;
    pub const POLE_MASS: f64 = 0.1;
    /// Distance from pivot to the pole's centre of mass.
    pub const HALF_LENGTH: f64 = 0.5;
    pub const FORCE_MAG: f64 = 10.0;
    /// Viscous friction on the cart, N·s/m.
    pub const CART_DAMPING: f64 = 2.0;
    /// Rail ends; the cart stops inelastically here.
    pub const X_LIMIT: f64 = 5.0;
    pub const DT: f64 = 0.05;
    pub const SUBSTEPS: usize = 5;
    pub const MAX_EPISODE_LEN: usize = 200;
    /// Balance reward is earned while |angle| stays below this (12°).
    pub const BALANCE_ANGLE: f64 = 12.0 * std::f64::consts::PI / 180.0;
    pub const RESET_NOISE: f64 = 0.05;
}
