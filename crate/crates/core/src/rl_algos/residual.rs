//! Temporal-difference residuals and the losses built from them.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ValueFn;
use crate::approximator::{ApproximatorParams, StateEncoding};
use crate::error::{shape_check, Error, Result};
use crate::market_sim::{dot_fills, SimConfig, Trajectory};
use crate::policy::{accumulate_score, capped_policy, entropy_constant, GaussianQuotePolicy};
use crate::pricing::OptionGrid;

/// Scaling of the fill term against the `dV/dt` rate in the policy-iteration residual.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ResidualMode {
    /// Fill term as a per-step amount next to the rate terms.
    #[default]
    Literal,
    /// Fill term divided by dt so every term is a rate.
    RateNormalized,
}

/// How the expected-spread fill term is formed under the closed-form policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FillTermMode {
    /// `sum mean_c dN_c` with the exact closed-form mean.
    #[default]
    ExactMean,
    /// `sum (A/2B + V(q)/2)(dN+ + dN-) - (V(q+e) dN+ + V(q-e) dN-)`, the fully
    /// expanded form without the factor 1/2 on the bumped values.
    ExpandedLiteral,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossOptions {
    pub residual_mode: ResidualMode,
    pub fill_term: FillTermMode,
    /// Treat the closed-form mean as a constant in the gradient.
    pub stop_gradient: bool,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self { residual_mode: ResidualMode::Literal, fill_term: FillTermMode::ExactMean, stop_gradient: false }
    }
}

fn fill_scale(mode: ResidualMode, dt: f64) -> f64 {
    match mode {
        ResidualMode::Literal => 1.0,
        ResidualMode::RateNormalized => 1.0 / dt,
    }
}

/// Filled components in spread-vector order with their inventory bump.
fn filled_components(path: &Trajectory, k: usize) -> Vec<(usize, usize, i64)> {
    let fills = &path.steps[k].fills;
    let mn = fills.dn_plus.len();
    let mut out = Vec::new();
    for c in 0..mn {
        if fills.dn_plus.as_slice()[c] == 1 {
            out.push((c, c, 1));
        }
    }
    for c in 0..mn {
        if fills.dn_minus.as_slice()[c] == 1 {
            out.push((mn + c, c, -1));
        }
    }
    out
}

fn bumped(path: &Trajectory, k: usize, option: usize, delta: i64, q_max: Option<i64>) -> crate::matrix::Inventory {
    let mut q = path.steps[k].q.bumped(option, delta);
    if let Some(cap) = q_max {
        q = q.map(|v| (*v).clamp(-cap, cap));
    }
    q
}

/// Policy-iteration residual between grid points `k` and `k + 1` of `path`:
/// `(V(t_k+1, q_k+1) - V(t_k, q_k)) / dt + fill term + carry rate - gamma H(policy)`.
///
/// In `ExactMean` mode the fill term is `<policy mean, fills>`; in
/// `ExpandedLiteral` mode it is built from the value network directly and
/// `policy` only supplies the entropy.
#[allow(clippy::too_many_arguments)]
pub fn td_residual_pi(
    value: ValueFn<'_>,
    path: &Trajectory,
    k: usize,
    policy: &GaussianQuotePolicy,
    grid: &OptionGrid,
    sim: &SimConfig,
    opts: LossOptions,
) -> Result<f64> {
    let step = &path.steps[k];
    shape_check("residual policy", grid.n_components(), policy.dim())?;
    let (t1, s1, q1) = path.state(k + 1);
    let dt = sim.dt;
    let v0 = value.eval(step.t, &step.q, step.s)?;
    let v1 = value.eval(t1, q1, s1)?;
    let fill = match opts.fill_term {
        FillTermMode::ExactMean => dot_fills(&policy.mean, &step.fills),
        FillTermMode::ExpandedLiteral => {
            let mut total = 0.0;
            for (_, option, delta) in filled_components(path, k) {
                let base = grid.a.as_slice()[option] / (2.0 * grid.b.as_slice()[option]);
                let vb = value.eval(step.t, &bumped(path, k, option, delta, sim.q_max), step.s)?;
                total += base + 0.5 * v0 - vb;
            }
            total
        }
    };
    Ok((v1 - v0) / dt + fill_scale(opts.residual_mode, dt) * fill + step.carry_rate - sim.gamma * policy.entropy())
}

/// Residuals and `1/2 delta^2 dt` loss of one path, with the parameter gradient.
fn path_martingale(
    value: ValueFn<'_>,
    path: &Trajectory,
    grid: &OptionGrid,
    sim: &SimConfig,
    opts: LossOptions,
    entropy: f64,
) -> Result<(f64, Vec<f64>)> {
    let net = value.net;
    let dt = sim.dt;
    let fs = fill_scale(opts.residual_mode, dt);
    let mut grad = vec![0.0; net.n_params()];
    let mut loss = 0.0;
    for k in 0..path.steps.len() {
        let step = &path.steps[k];
        let (t1, s1, q1) = path.state(k + 1);
        let c0 = net.forward_cached(&value.encoding.encode(step.t, &step.q, step.s))?;
        let c1 = net.forward_cached(&value.encoding.encode(t1, q1, s1))?;
        let (v0, v1) = (c0.output[0], c1.output[0]);

        let filled = filled_components(path, k);
        let mut bumps = Vec::with_capacity(filled.len());
        let mut fill = 0.0;
        for &(_, option, delta) in &filled {
            let cache =
                net.forward_cached(&value.encoding.encode(step.t, &bumped(path, k, option, delta, sim.q_max), step.s))?;
            let vb = cache.output[0];
            let base = grid.a.as_slice()[option] / (2.0 * grid.b.as_slice()[option]);
            fill += match opts.fill_term {
                FillTermMode::ExactMean => base + 0.5 * (v0 - vb),
                FillTermMode::ExpandedLiteral => base + 0.5 * v0 - vb,
            };
            bumps.push(cache);
        }
        let delta = (v1 - v0) / dt + fs * fill + step.carry_rate - sim.gamma * entropy;
        if !delta.is_finite() {
            return Err(Error::NonFinite(format!("residual at step {k} is {delta}")));
        }
        loss += 0.5 * delta * delta * dt;

        let w = delta * dt;
        let nf = filled.len() as f64;
        let bump_coef = match opts.fill_term {
            FillTermMode::ExactMean => -0.5,
            FillTermMode::ExpandedLiteral => -1.0,
        };
        let d_v0 = if opts.stop_gradient { -1.0 / dt } else { -1.0 / dt + fs * 0.5 * nf };
        net.backward(&c1, &[1.0], &mut grad, w / dt)?;
        net.backward(&c0, &[1.0], &mut grad, w * d_v0)?;
        if !opts.stop_gradient {
            for cache in &bumps {
                net.backward(cache, &[1.0], &mut grad, w * fs * bump_coef)?;
            }
        }
    }
    Ok((loss, grad))
}

/// `1/2 sum_paths sum_k delta_k^2 dt` and its exact gradient in the value-network parameters.
///
/// The closed-form mean inside each residual is built from the same network,
/// so the bumped evaluations `V(t_k, q_k +- e_ij)` carry gradient unless
/// `opts.stop_gradient` is set.
pub fn martingale_loss(
    value: ValueFn<'_>,
    dataset: &[Trajectory],
    grid: &OptionGrid,
    sim: &SimConfig,
    opts: LossOptions,
) -> Result<(f64, Vec<f64>)> {
    if dataset.is_empty() {
        return Err(Error::Validation("martingale loss needs at least one path".into()));
    }
    let entropy = entropy_constant(grid, sim.gamma);
    let per_path: Vec<(f64, Vec<f64>)> =
        dataset.par_iter().map(|path| path_martingale(value, path, grid, sim, opts, entropy)).collect::<Result<_>>()?;
    let mut loss = 0.0;
    let mut grad = vec![0.0; value.net.n_params()];
    for (l, g) in per_path {
        loss += l;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    Ok((loss, grad))
}

/// The actor network with everything needed to turn its outputs into a policy.
#[derive(Debug, Clone, Copy)]
pub struct ActorFn<'a> {
    pub net: &'a ApproximatorParams,
    pub encoding: &'a StateEncoding,
    pub cap: f64,
}

impl ActorFn<'_> {
    pub fn policy(
        &self,
        t: f64,
        q: &crate::matrix::Inventory,
        s: f64,
        grid: &OptionGrid,
        gamma: f64,
    ) -> Result<GaussianQuotePolicy> {
        let raw = self.net.forward(&self.encoding.encode(t, q, s))?;
        if let Some(r) = raw.iter().find(|r| !r.is_finite()) {
            return Err(Error::NonFinite(format!("policy network output {r}")));
        }
        capped_policy(&raw, grid, gamma, self.cap)
    }
}

/// Actor-critic residual `r_k + V(t_k+1, q_k+1) - V(t_k, q_k)` with
/// `r_k = <fills, mu_phi> + carry rate dt - gamma H dt`.
pub fn td_residual_ac(
    critic: ValueFn<'_>,
    actor: ActorFn<'_>,
    path: &Trajectory,
    k: usize,
    grid: &OptionGrid,
    sim: &SimConfig,
) -> Result<f64> {
    let step = &path.steps[k];
    let policy = actor.policy(step.t, &step.q, step.s, grid, sim.gamma)?;
    let (t1, s1, q1) = path.state(k + 1);
    let v0 = critic.eval(step.t, &step.q, step.s)?;
    let v1 = critic.eval(t1, q1, s1)?;
    let reward = dot_fills(&policy.mean, &step.fills) + step.carry_rate * sim.dt
        - sim.gamma * entropy_constant(grid, sim.gamma) * sim.dt;
    Ok(reward + v1 - v0)
}

pub(crate) fn ac_residuals(
    critic: ValueFn<'_>,
    actor: ActorFn<'_>,
    path: &Trajectory,
    grid: &OptionGrid,
    sim: &SimConfig,
) -> Result<Vec<f64>> {
    (0..path.steps.len()).map(|k| td_residual_ac(critic, actor, path, k, grid, sim)).collect()
}

/// `1/2 sum_k delta_k^2` over one trajectory and its gradient in the critic parameters.
pub fn critic_loss(
    critic: ValueFn<'_>,
    actor: ActorFn<'_>,
    path: &Trajectory,
    grid: &OptionGrid,
    sim: &SimConfig,
) -> Result<(f64, Vec<f64>)> {
    let deltas = ac_residuals(critic, actor, path, grid, sim)?;
    let mut grad = vec![0.0; critic.net.n_params()];
    let mut loss = 0.0;
    for (k, delta) in deltas.iter().enumerate() {
        let step = &path.steps[k];
        let (t1, s1, q1) = path.state(k + 1);
        loss += 0.5 * delta * delta;
        critic.eval_accumulate(t1, q1, s1, *delta, &mut grad)?;
        critic.eval_accumulate(step.t, &step.q, step.s, -*delta, &mut grad)?;
    }
    Ok((loss, grad))
}

/// `sum_k delta_k grad_phi log pi(eps_k | t_k, q_k)` with the recorded spreads,
/// returned with the surrogate `sum_k delta_k log pi(eps_k)`.
///
/// The residuals are constants unless `through_delta` is set, in which case the
/// product rule adds `log pi(eps_k) grad_phi delta_k`.
pub fn actor_gradient(
    actor: ActorFn<'_>,
    critic: ValueFn<'_>,
    path: &Trajectory,
    grid: &OptionGrid,
    sim: &SimConfig,
    through_delta: bool,
) -> Result<(f64, Vec<f64>)> {
    let deltas = ac_residuals(critic, actor, path, grid, sim)?;
    let mut grad = vec![0.0; actor.net.n_params()];
    let mut surrogate = 0.0;
    for (k, delta) in deltas.iter().enumerate() {
        let step = &path.steps[k];
        accumulate_score(
            actor.net,
            actor.encoding,
            step.t,
            &step.q,
            step.s,
            &step.eps,
            grid,
            sim.gamma,
            actor.cap,
            *delta,
            &mut grad,
        )?;
        let log_pi = actor.policy(step.t, &step.q, step.s, grid, sim.gamma)?.log_prob(&step.eps)?;
        surrogate += delta * log_pi;
        if through_delta {
            accumulate_mean_fill_grad(actor, step, log_pi, &mut grad)?;
        }
    }
    Ok((surrogate, grad))
}

/// Adds `weight * grad_phi <fills, mu_phi>` into `grad`.
fn accumulate_mean_fill_grad(
    actor: ActorFn<'_>,
    step: &crate::market_sim::TrajectoryStep,
    weight: f64,
    grad: &mut [f64],
) -> Result<()> {
    use crate::policy::{sigmoid, RAW_OUTPUT_CLAMP};
    let cache = actor.net.forward_cached(&actor.encoding.encode(step.t, &step.q, step.s))?;
    let fills = step.fills.as_vector();
    let upstream: Vec<f64> = cache
        .output
        .iter()
        .zip(&fills)
        .map(|(r, f)| {
            if r.abs() > RAW_OUTPUT_CLAMP {
                0.0
            } else {
                let s = sigmoid(*r);
                f * actor.cap * s * (1.0 - s)
            }
        })
        .collect();
    actor.net.backward(&cache, &upstream, grad, weight)?;
    Ok(())
}
