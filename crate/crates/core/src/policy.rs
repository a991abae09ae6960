//! Diagonal Gaussian quoting policy over (bid, ask) spreads.
//!
//! Spread vectors have `2 * m * n` components: the bid block first, then the
//! ask block, each ordered row-major over (strike, maturity). The variance of
//! every component is `gamma / (2 B)` and never depends on the state.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::approximator::{ApproximatorParams, StateEncoding};
use crate::error::{shape_check, Error, Result};
use crate::matrix::{Inventory, Matrix};
use crate::pricing::OptionGrid;

/// Raw network outputs are clamped to this magnitude before the sigmoid so
/// capped means stay strictly inside `(0, cap)` in floating point.
pub const RAW_OUTPUT_CLAMP: f64 = 30.0;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianQuotePolicy {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Per-component variance `gamma / (2 B)`, duplicated for the bid and ask blocks.
pub fn policy_variance(grid: &OptionGrid, gamma: f64) -> Vec<f64> {
    let half: Vec<f64> = grid.b.as_slice().iter().map(|b| gamma / (2.0 * b)).collect();
    half.iter().chain(&half).copied().collect()
}

/// Entropy of a diagonal Gaussian whose bid and ask blocks share variances:
/// `mn (1 + log 2 pi) + sum log var_ij`.
pub fn gaussian_entropy(var: &[f64]) -> f64 {
    let mn = var.len() / 2;
    mn as f64 * (1.0 + (2.0 * PI).ln()) + var[..mn].iter().map(|v| v.ln()).sum::<f64>()
}

/// Entropy of the quoting policy for `(grid, gamma)`; identical to `policy.entropy()`.
pub fn entropy_constant(grid: &OptionGrid, gamma: f64) -> f64 {
    gaussian_entropy(&policy_variance(grid, gamma))
}

impl GaussianQuotePolicy {
    pub fn new(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        shape_check("policy variance", mean.len(), var.len())?;
        if !mean.len().is_multiple_of(2) {
            return Err(Error::Shape("policy dimension must be even (bid and ask blocks)".into()));
        }
        if let Some(v) = var.iter().find(|v| !(**v > 0.0)) {
            return Err(Error::Domain(format!("policy variance {v} must be positive")));
        }
        Ok(Self { mean, var })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn n_options(&self) -> usize {
        self.mean.len() / 2
    }

    pub fn bid_mean(&self) -> &[f64] {
        &self.mean[..self.n_options()]
    }

    pub fn ask_mean(&self) -> &[f64] {
        &self.mean[self.n_options()..]
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.var)
            .map(|(m, v)| {
                let z: f64 = rng.sample(StandardNormal);
                m + v.sqrt() * z
            })
            .collect()
    }

    pub fn log_prob(&self, eps: &[f64]) -> Result<f64> {
        shape_check("log_prob spread vector", self.dim(), eps.len())?;
        Ok(eps
            .iter()
            .zip(&self.mean)
            .zip(&self.var)
            .map(|((e, m), v)| -0.5 * (2.0 * PI * v).ln() - (e - m) * (e - m) / (2.0 * v))
            .sum())
    }

    /// d log pi / d mean, componentwise.
    pub fn mean_score(&self, eps: &[f64]) -> Result<Vec<f64>> {
        shape_check("score spread vector", self.dim(), eps.len())?;
        Ok(eps.iter().zip(&self.mean).zip(&self.var).map(|((e, m), v)| (e - m) / v).collect())
    }

    pub fn entropy(&self) -> f64 {
        gaussian_entropy(&self.var)
    }

    pub fn std_matrix(&self, rows: usize, cols: usize) -> Result<Matrix<f64>> {
        Matrix::from_flat(rows, cols, self.var[..self.n_options()].iter().map(|v| v.sqrt()).collect())
    }
}

fn clamp_inventory(q: &Inventory, q_max: Option<i64>) -> Inventory {
    match q_max {
        Some(cap) => q.map(|v| (*v).clamp(-cap, cap)),
        None => q.clone(),
    }
}

/// Optimal Gaussian policy for a value function:
/// bid mean `A/(2B) + (V(q) - V(q + e_ij)) / 2`, ask mean `A/(2B) + (V(q) - V(q - e_ij)) / 2`.
///
/// With `q_max` set, bumped inventories are clamped to the cap before evaluation.
pub fn closed_form_policy<F>(
    value_fn: F,
    t: f64,
    q: &Inventory,
    grid: &OptionGrid,
    gamma: f64,
    q_max: Option<i64>,
) -> Result<GaussianQuotePolicy>
where
    F: Fn(f64, &Inventory) -> Result<f64>,
{
    let mn = grid.n_options();
    shape_check("inventory size", mn, q.len())?;
    let v0 = value_fn(t, q)?;
    let mut mean = vec![0.0; 2 * mn];
    for c in 0..mn {
        let base = grid.a.as_slice()[c] / (2.0 * grid.b.as_slice()[c]);
        let up = value_fn(t, &clamp_inventory(&q.bumped(c, 1), q_max))?;
        let down = value_fn(t, &clamp_inventory(&q.bumped(c, -1), q_max))?;
        mean[c] = base + 0.5 * (v0 - up);
        mean[mn + c] = base + 0.5 * (v0 - down);
    }
    GaussianQuotePolicy::new(mean, policy_variance(grid, gamma))
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Policy whose mean is `cap * sigmoid(raw)` for raw outputs of a policy-mean network.
pub fn network_policy(
    mean_net: &ApproximatorParams,
    encoding: &StateEncoding,
    t: f64,
    q: &Inventory,
    s: f64,
    grid: &OptionGrid,
    gamma: f64,
    cap: f64,
) -> Result<GaussianQuotePolicy> {
    shape_check("policy network output", grid.n_components(), mean_net.out_dim)?;
    let raw = mean_net.forward(&encoding.encode(t, q, s))?;
    capped_policy(&raw, grid, gamma, cap)
}

pub(crate) fn capped_policy(raw: &[f64], grid: &OptionGrid, gamma: f64, cap: f64) -> Result<GaussianQuotePolicy> {
    shape_check("policy network output", grid.n_components(), raw.len())?;
    let mean = raw.iter().map(|r| cap * sigmoid(r.clamp(-RAW_OUTPUT_CLAMP, RAW_OUTPUT_CLAMP))).collect();
    GaussianQuotePolicy::new(mean, policy_variance(grid, gamma))
}

/// `grad_phi log pi(eps | t, q)` for the capped network policy.
pub fn score(
    mean_net: &ApproximatorParams,
    encoding: &StateEncoding,
    t: f64,
    q: &Inventory,
    s: f64,
    eps: &[f64],
    grid: &OptionGrid,
    gamma: f64,
    cap: f64,
) -> Result<Vec<f64>> {
    let mut grad = vec![0.0; mean_net.n_params()];
    accumulate_score(mean_net, encoding, t, q, s, eps, grid, gamma, cap, 1.0, &mut grad)?;
    Ok(grad)
}

/// Adds `weight * grad_phi log pi(eps | t, q)` into `grad`.
pub(crate) fn accumulate_score(
    mean_net: &ApproximatorParams,
    encoding: &StateEncoding,
    t: f64,
    q: &Inventory,
    s: f64,
    eps: &[f64],
    grid: &OptionGrid,
    gamma: f64,
    cap: f64,
    weight: f64,
    grad: &mut [f64],
) -> Result<()> {
    shape_check("score spread vector", grid.n_components(), eps.len())?;
    let cache = mean_net.forward_cached(&encoding.encode(t, q, s))?;
    let policy = capped_policy(&cache.output, grid, gamma, cap)?;
    let dmean = policy.mean_score(eps)?;
    let upstream: Vec<f64> = cache
        .output
        .iter()
        .zip(&dmean)
        .map(|(r, d)| {
            if r.abs() > RAW_OUTPUT_CLAMP {
                0.0
            } else {
                let sg = sigmoid(*r);
                d * cap * sg * (1.0 - sg)
            }
        })
        .collect();
    mean_net.backward(&cache, &upstream, grad, weight)?;
    Ok(())
}

/// Anything that yields a quoting policy for a market state.
pub trait QuotePolicy: Sync {
    fn policy_at(&self, t: f64, q: &Inventory, s: f64) -> Result<GaussianQuotePolicy>;
}

/// Closed-form policy from a value network; `value_net = None` means V = 0,
/// the `A/(2B)` baseline.
#[derive(Debug, Clone)]
pub struct ClosedFormPolicy<'a> {
    pub value_net: Option<&'a ApproximatorParams>,
    pub encoding: StateEncoding,
    pub grid: &'a OptionGrid,
    pub gamma: f64,
    pub q_max: Option<i64>,
}

impl<'a> ClosedFormPolicy<'a> {
    pub fn baseline(grid: &'a OptionGrid, gamma: f64) -> Self {
        Self { value_net: None, encoding: StateEncoding::default(), grid, gamma, q_max: None }
    }
}

impl QuotePolicy for ClosedFormPolicy<'_> {
    fn policy_at(&self, t: f64, q: &Inventory, s: f64) -> Result<GaussianQuotePolicy> {
        match self.value_net {
            None => closed_form_policy(|_, _| Ok(0.0), t, q, self.grid, self.gamma, self.q_max),
            Some(net) => {
                let value = |t: f64, q: &Inventory| -> Result<f64> {
                    let v = net.scalar(&self.encoding.encode(t, q, s))?;
                    if !v.is_finite() {
                        return Err(Error::NonFinite(format!("value network output {v}")));
                    }
                    Ok(v)
                };
                closed_form_policy(value, t, q, self.grid, self.gamma, self.q_max)
            }
        }
    }
}

/// Capped network-mean policy of the actor-critic pathway.
#[derive(Debug, Clone)]
pub struct NetworkPolicy<'a> {
    pub mean_net: &'a ApproximatorParams,
    pub encoding: StateEncoding,
    pub grid: &'a OptionGrid,
    pub gamma: f64,
    pub cap: f64,
}

impl QuotePolicy for NetworkPolicy<'_> {
    fn policy_at(&self, t: f64, q: &Inventory, s: f64) -> Result<GaussianQuotePolicy> {
        network_policy(self.mean_net, &self.encoding, t, q, s, self.grid, self.gamma, self.cap)
    }
}

/// State-independent mean. With `mean = 2A/B` every sampled spread lies far
/// past the intensity root, so nothing ever fills.
#[derive(Debug, Clone)]
pub struct ConstantMeanPolicy {
    pub policy: GaussianQuotePolicy,
}

impl ConstantMeanPolicy {
    pub fn new(mean: Vec<f64>, grid: &OptionGrid, gamma: f64) -> Result<Self> {
        Ok(Self { policy: GaussianQuotePolicy::new(mean, policy_variance(grid, gamma))? })
    }

    /// Means at a multiple of the intensity root `A/B`.
    pub fn scaled_root(grid: &OptionGrid, gamma: f64, multiple: f64) -> Result<Self> {
        let half: Vec<f64> = grid.a.as_slice().iter().zip(grid.b.as_slice()).map(|(a, b)| multiple * a / b).collect();
        Self::new(half.iter().chain(&half).copied().collect(), grid, gamma)
    }

    pub fn zero_intensity(grid: &OptionGrid, gamma: f64) -> Result<Self> {
        Self::scaled_root(grid, gamma, 2.0)
    }
}

impl QuotePolicy for ConstantMeanPolicy {
    fn policy_at(&self, _t: f64, _q: &Inventory, _s: f64) -> Result<GaussianQuotePolicy> {
        Ok(self.policy.clone())
    }
}

/// JSON record of the mean spreads at one state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpreadDump {
    pub t: f64,
    pub q: Vec<Vec<i64>>,
    pub bid_mean: Vec<Vec<f64>>,
    pub ask_mean: Vec<Vec<f64>>,
    pub std: Vec<Vec<f64>>,
}

impl SpreadDump {
    pub fn new(t: f64, q: &Inventory, policy: &GaussianQuotePolicy) -> Result<Self> {
        let (m, n) = q.shape();
        shape_check("spread dump", 2 * m * n, policy.dim())?;
        Ok(Self {
            t,
            q: q.to_rows(),
            bid_mean: Matrix::from_flat(m, n, policy.bid_mean().to_vec())?.to_rows(),
            ask_mean: Matrix::from_flat(m, n, policy.ask_mean().to_vec())?.to_rows(),
            std: policy.std_matrix(m, n)?.to_rows(),
        })
    }
}
