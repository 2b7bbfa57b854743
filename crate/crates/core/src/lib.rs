//! Policy-optimization laboratory for group-relative RL fine-tuning.
//!
//! The crate implements PPO-clip, GRPO, Reg-GRPO (regression onto
//! group-normalized advantages) and a set of baselines (REINFORCE, RLOO,
//! REBEL, reward regression, DPO, online DPO) over a small autoregressive
//! categorical policy. Every configuration is small enough to enumerate the
//! full output distribution, which is what the [`oracle`] module uses to
//! check the KL-regularized closed form and the analytic gradients.
//!
//! Module map:
//!
//! - [`policy`]: sequence policy, sampling, log-probabilities, gradients, KL.
//! - [`rewards`]: format/accuracy/IoU rewards and evaluation metrics.
//! - [`advantages`]: group-normalized and predictive advantages.
//! - [`algorithms`]: loss values and gradients for every algorithm.
//! - [`augmentation`]: replay window, difficulty estimate, hint and noise operators.
//! - [`envs`]: synthetic task generators.
//! - [`oracle`]: exact-enumeration identities and finite differences.
//! - [`gradcheck`]: randomized analytic-vs-numeric gradient sweeps.
//! - [`trainer`]: the optimization loop, checkpoints and run directories.
//! - [`par`]: rayon-backed data parallelism with a sequential fallback.

pub mod advantages;
pub mod algorithms;
pub mod augmentation;
pub mod checkpoint;
pub mod envs;
mod error;
pub mod gradcheck;
pub mod oracle;
pub mod par;
pub mod policy;
pub mod rewards;
pub mod seed;
pub mod trainer;

pub use error::{Error, Result};
