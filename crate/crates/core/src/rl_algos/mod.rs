//! Training procedures: policy iteration on the martingale loss and
//! actor-critic, plus the Monte Carlo policy-improvement check.

mod actor_critic;
mod improvement;
mod policy_iteration;
mod residual;

pub use actor_critic::{actor_critic, ActorCriticConfig, ActorSign, EpisodeRecord};
pub use improvement::{verify_policy_improvement, ImprovementReport};
pub use policy_iteration::{policy_iteration, IterationRecord, PolicyIterConfig};
pub use residual::{
    actor_gradient, critic_loss, martingale_loss, td_residual_ac, td_residual_pi, ActorFn, FillTermMode, LossOptions,
    ResidualMode,
};

use serde::{Deserialize, Serialize};

use crate::approximator::{ApproximatorParams, StateEncoding};
use crate::error::{Error, Result};
use crate::matrix::Inventory;

/// Loss magnitude above which training is declared divergent.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

/// A value network together with its input encoding.
#[derive(Debug, Clone, Copy)]
pub struct ValueFn<'a> {
    pub net: &'a ApproximatorParams,
    pub encoding: &'a StateEncoding,
}

impl ValueFn<'_> {
    pub fn eval(&self, t: f64, q: &Inventory, s: f64) -> Result<f64> {
        let v = self.net.scalar(&self.encoding.encode(t, q, s))?;
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("value network output {v} at t = {t}")));
        }
        Ok(v)
    }

    /// Adds `coef * dV/dtheta` into `grad` and returns V.
    pub(crate) fn eval_accumulate(&self, t: f64, q: &Inventory, s: f64, coef: f64, grad: &mut [f64]) -> Result<f64> {
        let v = self.net.accumulate_scalar_grad(&self.encoding.encode(t, q, s), coef, grad)?;
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("value network output {v} at t = {t}")));
        }
        Ok(v)
    }
}

/// Per-run training summary. Wall-clock time is kept out of the serialized
/// form so reports are reproducible byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub algorithm: String,
    pub seed: u64,
    pub config: serde_json::Value,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub iterations: Vec<IterationRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub episodes: Vec<EpisodeRecord>,
    /// Smallest and largest posted mean spread over the run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_spread_range: Option<(f64, f64)>,
    pub diverged: Option<String>,
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

impl TrainingReport {
    pub fn ensure_converged(&self) -> Result<()> {
        match &self.diverged {
            Some(reason) => Err(Error::Divergence(reason.clone())),
            None => Ok(()),
        }
    }
}

pub(crate) fn check_loss(loss: f64, params: &[f64]) -> std::result::Result<(), String> {
    if !loss.is_finite() || loss.abs() > DIVERGENCE_LIMIT {
        return Err(format!("loss {loss} outside the divergence guard"));
    }
    if let Some(i) = params.iter().position(|p| !p.is_finite()) {
        return Err(format!("parameter {i} became non-finite"));
    }
    Ok(())
}
