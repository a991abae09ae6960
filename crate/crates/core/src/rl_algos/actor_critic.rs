use serde::{Deserialize, Serialize};
use std::time::Instant;

use super::residual::{actor_gradient, critic_loss, ActorFn};
use super::{check_loss, TrainingReport, ValueFn};
use crate::approximator::{ApproximatorParams, NetTopology, Optimizer, OptimizerKind, StateEncoding};
use crate::error::{Error, Result};
use crate::market_sim::{evaluate_policy, generate_path, Evaluation, ReturnStats, SimConfig};
use crate::policy::NetworkPolicy;
use crate::pricing::OptionGrid;
use crate::rng::{stream, Substream};

/// Direction of the actor update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ActorSign {
    /// `phi += beta * grad`: climb the policy-gradient objective.
    #[default]
    Ascent,
    /// `phi -= beta * grad`, the update with a minus sign.
    PaperLiteral,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ActorCriticConfig {
    pub episodes: usize,
    /// Critic step size.
    pub alpha: f64,
    /// Actor step size.
    pub beta: f64,
    /// Upper bound of the posted mean spread.
    pub cap: f64,
    pub actor_sign: ActorSign,
    /// Differentiate the residual in the actor gradient as well.
    pub actor_through_delta: bool,
    pub optimizer: OptimizerKind,
    pub grad_clip: Option<f64>,
    /// Evaluate every this many episodes (and after the last); 0 disables.
    pub eval_every: usize,
    pub eval_paths: usize,
}

impl Default for ActorCriticConfig {
    fn default() -> Self {
        Self {
            episodes: 1000,
            alpha: 2e-3,
            beta: 1e-4,
            cap: 0.1,
            actor_sign: ActorSign::Ascent,
            actor_through_delta: false,
            optimizer: OptimizerKind::Sgd,
            grad_clip: Some(100.0),
            eval_every: 250,
            eval_paths: 100,
        }
    }
}

impl ActorCriticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.episodes == 0 {
            return Err(Error::Validation("actor-critic needs at least one episode".into()));
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Validation(format!("{name} = {v} must be non-negative")));
            }
        }
        if !(self.cap > 0.0 && self.cap.is_finite()) {
            return Err(Error::Validation(format!("cap = {} must be positive", self.cap)));
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return Err(Error::Validation("grad_clip must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub critic_loss: f64,
    /// `sum_k delta_k log pi(eps_k)` at the pre-update parameters.
    pub actor_surrogate: f64,
    pub raw_return: f64,
    pub min_mean: f64,
    pub max_mean: f64,
    pub eval: Option<ReturnStats>,
    #[serde(skip)]
    pub eval_returns: Option<Evaluation>,
}

/// Actor-critic with a capped network mean and a value-network critic.
///
/// Per episode: one path under the current actor, critic and actor gradients
/// at the pre-update parameters, then one step on each network.
pub fn actor_critic(
    grid: &OptionGrid,
    sim: &SimConfig,
    cfg: &ActorCriticConfig,
    topology: &NetTopology,
    encoding: &StateEncoding,
    seed: u64,
) -> Result<(ApproximatorParams, ApproximatorParams, TrainingReport)> {
    grid.validate(sim.horizon)?;
    sim.validate()?;
    cfg.validate()?;
    let started = Instant::now();
    let in_dim = encoding.len(grid.n_options());
    let mut theta = ApproximatorParams::init(topology, in_dim, 1, &mut stream(seed, Substream::Init, 0))?;
    let mut phi =
        ApproximatorParams::init(topology, in_dim, grid.n_components(), &mut stream(seed, Substream::Init, 1))?;
    let mut critic_opt = Optimizer::new(cfg.optimizer, theta.n_params());
    let mut actor_opt = Optimizer::new(cfg.optimizer, phi.n_params());
    let mut report = TrainingReport {
        algorithm: "actor_critic".into(),
        seed,
        config: serde_json::json!({ "sim": sim, "actor_critic": cfg, "net": topology, "encoding": encoding }),
        iterations: Vec::new(),
        episodes: Vec::with_capacity(cfg.episodes),
        mean_spread_range: None,
        diverged: None,
        wall_clock_secs: 0.0,
    };
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);

    for l in 0..cfg.episodes {
        let policy = NetworkPolicy { mean_net: &phi, encoding: *encoding, grid, gamma: sim.gamma, cap: cfg.cap };
        let path = generate_path(&policy, grid, sim, &mut stream(seed, Substream::Paths, l as u64))?;
        let (ep_lo, ep_hi) = path
            .steps
            .iter()
            .flat_map(|s| s.mean.iter())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &m| (a.min(m), b.max(m)));
        lo = lo.min(ep_lo);
        hi = hi.max(ep_hi);

        let critic = ValueFn { net: &theta, encoding };
        let actor = ActorFn { net: &phi, encoding, cap: cfg.cap };
        let (loss, critic_grad) = critic_loss(critic, actor, &path, grid, sim)?;
        let (surrogate, mut actor_grad) = actor_gradient(actor, critic, &path, grid, sim, cfg.actor_through_delta)?;
        if let Err(reason) = check_loss(loss, &theta.params).and(check_loss(surrogate, &phi.params)) {
            report.diverged = Some(format!("episode {}: {reason}", l + 1));
            break;
        }
        critic_opt.step(&mut theta.params, &critic_grad, cfg.alpha, cfg.grad_clip)?;
        if cfg.actor_sign == ActorSign::Ascent {
            for g in &mut actor_grad {
                *g = -*g;
            }
        }
        actor_opt.step(&mut phi.params, &actor_grad, cfg.beta, cfg.grad_clip)?;

        let last = l + 1 == cfg.episodes;
        let eval = if cfg.eval_paths > 0 && cfg.eval_every > 0 && ((l + 1) % cfg.eval_every == 0 || last) {
            let policy = NetworkPolicy { mean_net: &phi, encoding: *encoding, grid, gamma: sim.gamma, cap: cfg.cap };
            Some(evaluate_policy(&policy, grid, sim, cfg.eval_paths, seed, Substream::Eval)?)
        } else {
            None
        };
        log::debug!("actor-critic episode {}: critic loss {loss:.6e}", l + 1);
        report.episodes.push(EpisodeRecord {
            episode: l + 1,
            critic_loss: loss,
            actor_surrogate: surrogate,
            raw_return: path.raw_return(),
            min_mean: ep_lo,
            max_mean: ep_hi,
            eval: eval.as_ref().map(|e| e.stats.clone()),
            eval_returns: eval,
        });
    }
    report.mean_spread_range = Some((lo, hi));
    report.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok((theta, phi, report))
}
