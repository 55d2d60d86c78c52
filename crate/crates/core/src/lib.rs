//! Flow-GRPO on low-dimensional rectified flows: a conditional velocity
//! network, flow-matching pretraining, an ODE-to-SDE sampler with exact
//! transition log-probabilities, group-relative policy optimization and the
//! supervised, reward-weighted and preference baselines.

pub mod baselines;
pub mod error;
pub mod eval;
pub mod flow;
pub mod grpo;
pub mod model;
pub mod numerics;
pub mod rewards;
pub mod sampler;

pub use error::{Error, Result};
pub use model::{VelocityField, VelocityNet};
pub use numerics::{Rng, Tensor};
