//! Contract design for edge AIGC service markets under prospect theory.
//!
//! The crate is organised bottom-up:
//!
//! - [`market`]: economic primitives and client/ASP utilities.
//! - [`analytics`]: IR/IC feasibility, closed-form optimal rewards, the
//!   complete-information baseline and grid oracles.
//! - [`nn`]: small multi-layer perceptrons with hand-written backprop, Adam,
//!   soft target updates and a flat checkpoint format.
//! - [`diffusion`]: the conditional denoising chain that turns noise into a
//!   contract menu.
//! - [`rl`]: the constraint-gated reward, the diffusion actor-critic trainer
//!   and the SAC / PPO / random baselines.
//! - [`harness`]: environment sampling, configuration, experiment plans and
//!   reporting.

pub mod analytics;
pub mod diffusion;
pub mod error;
pub mod harness;
pub mod market;
pub mod nn;
pub mod rl;

pub use error::{Error, Result};
