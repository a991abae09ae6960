use serde::{Deserialize, Serialize};
use std::time::Instant;

use super::residual::{martingale_loss, LossOptions};
use super::{check_loss, TrainingReport, ValueFn};
use crate::approximator::{ApproximatorParams, NetTopology, Optimizer, OptimizerKind, StateEncoding};
use crate::error::{Error, Result};
use crate::market_sim::{evaluate_policy, generate_paths, Evaluation, ReturnStats, SimConfig};
use crate::policy::ClosedFormPolicy;
use crate::pricing::OptionGrid;
use crate::rng::{stream, Substream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyIterConfig {
    /// Outer iterations.
    pub iterations: usize,
    /// Paths simulated per iteration.
    pub paths_per_iteration: usize,
    /// Value-network step size.
    pub alpha: f64,
    /// Gradient passes over each iteration's paths.
    pub inner_epochs: usize,
    pub loss: LossOptions,
    pub optimizer: OptimizerKind,
    pub grad_clip: Option<f64>,
    /// Evaluation paths after each iteration; 0 disables evaluation.
    pub eval_paths: usize,
}

impl Default for PolicyIterConfig {
    fn default() -> Self {
        Self {
            iterations: 3,
            paths_per_iteration: 32,
            alpha: 1e-3,
            inner_epochs: 50,
            loss: LossOptions::default(),
            optimizer: OptimizerKind::Sgd,
            grad_clip: Some(100.0),
            eval_paths: 100,
        }
    }
}

impl PolicyIterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.paths_per_iteration == 0 || self.inner_epochs == 0 {
            return Err(Error::Validation("policy iteration counts (L, D, inner_epochs) must be at least 1".into()));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Validation(format!("alpha = {} must be non-negative", self.alpha)));
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return Err(Error::Validation("grad_clip must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Loss before each gradient step of this iteration.
    pub losses: Vec<f64>,
    /// Loss after the last step.
    pub final_loss: f64,
    pub eval: Option<ReturnStats>,
    #[serde(skip)]
    pub eval_returns: Option<Evaluation>,
}

/// Policy iteration with the closed-form Gaussian policy.
///
/// Each iteration simulates `D` paths under the policy derived from the
/// current value network, takes `inner_epochs` gradient steps on the
/// martingale loss of those paths, then re-derives the policy. Evaluation
/// after every iteration reuses the same evaluation streams, so iterations
/// are compared on common random numbers.
pub fn policy_iteration(
    grid: &OptionGrid,
    sim: &SimConfig,
    cfg: &PolicyIterConfig,
    topology: &NetTopology,
    encoding: &StateEncoding,
    seed: u64,
) -> Result<(ApproximatorParams, TrainingReport)> {
    grid.validate(sim.horizon)?;
    sim.validate()?;
    cfg.validate()?;
    let started = Instant::now();
    let mut theta =
        ApproximatorParams::init(topology, encoding.len(grid.n_options()), 1, &mut stream(seed, Substream::Init, 0))?;
    let mut optimizer = Optimizer::new(cfg.optimizer, theta.n_params());
    let mut report = TrainingReport {
        algorithm: "policy_iteration".into(),
        seed,
        config: serde_json::json!({ "sim": sim, "policy_iteration": cfg, "net": topology, "encoding": encoding }),
        iterations: Vec::new(),
        episodes: Vec::new(),
        mean_spread_range: None,
        diverged: None,
        wall_clock_secs: 0.0,
    };

    'outer: for l in 0..cfg.iterations {
        let behavior = theta.clone();
        let policy = ClosedFormPolicy {
            value_net: Some(&behavior),
            encoding: *encoding,
            grid,
            gamma: sim.gamma,
            q_max: sim.q_max,
        };
        let offset = (l * cfg.paths_per_iteration) as u64;
        let dataset = generate_paths(&policy, grid, sim, seed, Substream::Paths, offset, cfg.paths_per_iteration)?;

        let mut losses = Vec::with_capacity(cfg.inner_epochs);
        for _ in 0..cfg.inner_epochs {
            let (loss, grad) = martingale_loss(ValueFn { net: &theta, encoding }, &dataset, grid, sim, cfg.loss)?;
            losses.push(loss);
            if let Err(reason) = check_loss(loss, &theta.params) {
                report.diverged = Some(format!("iteration {}: {reason}", l + 1));
                report.iterations.push(IterationRecord {
                    iteration: l + 1,
                    final_loss: loss,
                    losses,
                    eval: None,
                    eval_returns: None,
                });
                break 'outer;
            }
            if grad.iter().any(|g| !g.is_finite()) {
                report.diverged = Some(format!("iteration {}: non-finite gradient", l + 1));
                break 'outer;
            }
            optimizer.step(&mut theta.params, &grad, cfg.alpha, cfg.grad_clip)?;
        }
        let (final_loss, _) = martingale_loss(ValueFn { net: &theta, encoding }, &dataset, grid, sim, cfg.loss)?;
        if let Err(reason) = check_loss(final_loss, &theta.params) {
            report.diverged = Some(format!("iteration {}: {reason}", l + 1));
            report.iterations.push(IterationRecord {
                iteration: l + 1,
                final_loss,
                losses,
                eval: None,
                eval_returns: None,
            });
            break;
        }

        let evaluation = if cfg.eval_paths > 0 {
            let improved = ClosedFormPolicy {
                value_net: Some(&theta),
                encoding: *encoding,
                grid,
                gamma: sim.gamma,
                q_max: sim.q_max,
            };
            Some(evaluate_policy(&improved, grid, sim, cfg.eval_paths, seed, Substream::Eval)?)
        } else {
            None
        };
        log::info!(
            "policy iteration {}: loss {:.6e} -> {:.6e}, eval mean {:?}",
            l + 1,
            losses.first().copied().unwrap_or(f64::NAN),
            final_loss,
            evaluation.as_ref().map(|e| e.stats.raw.mean)
        );
        report.iterations.push(IterationRecord {
            iteration: l + 1,
            losses,
            final_loss,
            eval: evaluation.as_ref().map(|e| e.stats.clone()),
            eval_returns: evaluation,
        });
    }
    report.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok((theta, report))
}
