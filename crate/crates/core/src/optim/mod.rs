//! Per-layer optimizer steps.
//!
//! Six interchangeable step functions share one gradient interface:
//!
//! | function               | parameters          | momentum storage          |
//! |------------------------|---------------------|---------------------------|
//! | [`hb_full_step`]       | dense `W`           | dense `V`                 |
//! | [`adam_full_step`]     | dense `W`           | dense `V`, `K`            |
//! | [`lr_hb_step`]         | `U S Vᵀ`            | `S_V` in the shared bases |
//! | [`lr_adam_step`]       | `U S Vᵀ`            | `S_V`, `S_K` (shared)     |
//! | [`lr_adam_naive_step`] | `U S Vᵀ`            | `S_V`, `S_K`, unprojected |
//! | [`lora_adam_step`]     | `U`, `S`, `V` freely| one Adam state per factor |
//!
//! Every step is a pure function of its inputs: on error the caller's state is untouched.

mod full;
mod lora;
mod lowrank;
mod oracle;

use serde::{Deserialize, Serialize};

pub use full::{adam_full_step, hb_full_step, FullAdamState, FullHbState};
pub use lora::{lora_adam_step, FactorMoments, LoraAdamState};
pub use lowrank::{
    lr_adam_augment, lr_adam_naive_step, lr_adam_step, lr_hb_augment, lr_hb_step, AdamAugmented,
    AdamState, HbAugmented, HeavyBallState,
};
pub use oracle::{FnOracle, FrozenGradient, GradientOracle, QuadraticOracle};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Adam hyperparameters shared by all Adam variants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lambda: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lambda: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("lambda", "must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return Err(Error::config("beta1", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("beta2", "must lie in [0, 1)"));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::config("eps", "must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight_decay", "must be >= 0"));
        }
        Ok(())
    }

    /// `(1 − β₁ⁿ, 1 − β₂ⁿ)` for the post-increment counter `n`.
    pub(crate) fn bias_corrections(&self, n: u64) -> (f64, f64) {
        let n = n.min(i32::MAX as u64) as i32;
        (1.0 - self.beta1.powi(n), 1.0 - self.beta2.powi(n))
    }
}

pub(crate) fn check_gradient(g: &Matrix, what: &str) -> Result<()> {
    g.ensure_finite(what)
}
