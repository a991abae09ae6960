//! Discrete-time episode simulator.
//!
//! Each step queries the quoting policy, samples spreads, draws at most one
//! market order per option side from the spread-dependent intensities, books
//! the spread and carry P&L, updates inventory and advances the underlying
//! along an exact log-Euler GBM step.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;

use crate::error::{shape_check, Error, Result};
use crate::matrix::{Inventory, Matrix};
use crate::policy::QuotePolicy;
use crate::pricing::{carry_coefficients, grid_greeks, CarrySpec, GreeksGrid, OptionGrid};
use crate::rng::{stream, SimRng, Substream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EntropyMode {
    /// `gamma * H(pi) * dt` with the closed-form Gaussian entropy.
    #[default]
    ClosedForm,
    /// `-gamma * log pi(eps) * dt` at the sampled spreads.
    Sampled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub horizon: f64,
    pub dt: f64,
    pub s0: f64,
    pub mu: f64,
    pub sigma: f64,
    /// Entropy temperature.
    pub gamma: f64,
    pub q_max: Option<i64>,
    /// Multiply the gamma carry term by S^2.
    pub include_s_squared: bool,
    /// Volatility in the gamma carry term; defaults to `sigma`.
    pub carry_sigma: Option<f64>,
    pub entropy_mode: EntropyMode,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            horizon: 1.0,
            dt: 0.01,
            s0: 100.0,
            mu: 0.01,
            sigma: 0.05,
            gamma: 0.01,
            q_max: None,
            include_s_squared: false,
            carry_sigma: None,
            entropy_mode: EntropyMode::ClosedForm,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Validation(format!("sim.{name} = {v} must be positive")))
            }
        };
        positive("horizon", self.horizon)?;
        positive("dt", self.dt)?;
        positive("s0", self.s0)?;
        positive("gamma", self.gamma)?;
        if !(self.sigma >= 0.0 && self.mu.is_finite()) {
            return Err(Error::Validation("sim.sigma must be non-negative and sim.mu finite".into()));
        }
        let ratio = self.horizon / self.dt;
        if (ratio - ratio.round()).abs() > 1e-9 * ratio.max(1.0) {
            return Err(Error::Validation(format!("sim.horizon / sim.dt = {ratio} is not an integer")));
        }
        if let Some(cap) = self.q_max {
            if cap < 1 {
                return Err(Error::Validation("sim.q_max must be at least 1".into()));
            }
        }
        Ok(())
    }

    pub fn n_steps(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }

    /// Time of grid point `k`, computed from the index to avoid accumulation drift.
    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.dt
    }

    pub fn carry(&self) -> CarrySpec {
        CarrySpec { sigma: self.carry_sigma.unwrap_or(self.sigma), include_s_squared: self.include_s_squared }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarketState {
    pub t: f64,
    pub s: f64,
    pub q: Inventory,
}

/// Market orders hitting the bid (`dn_plus`) and lifting the ask (`dn_minus`).
#[derive(Debug, Clone, PartialEq)]
pub struct FillEvent {
    pub dn_plus: Matrix<u8>,
    pub dn_minus: Matrix<u8>,
}

impl FillEvent {
    pub fn none(rows: usize, cols: usize) -> Self {
        Self { dn_plus: Matrix::filled(rows, cols, 0), dn_minus: Matrix::filled(rows, cols, 0) }
    }

    /// Indicators in spread-vector order: bid block then ask block.
    pub fn as_vector(&self) -> Vec<f64> {
        self.dn_plus.as_slice().iter().chain(self.dn_minus.as_slice()).map(|&x| f64::from(x)).collect()
    }

    pub fn count(&self) -> u64 {
        self.dn_plus.as_slice().iter().chain(self.dn_minus.as_slice()).map(|&x| u64::from(x)).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryStep {
    pub t: f64,
    pub s: f64,
    pub q: Inventory,
    /// Sampled spreads, bid block then ask block.
    pub eps: Vec<f64>,
    /// Policy mean at this state.
    pub mean: Vec<f64>,
    /// Fills after the inventory cap.
    pub fills: FillEvent,
    /// Sum of sampled spread times fill.
    pub spread_pnl: f64,
    /// Sum of policy-mean spread times fill.
    pub mean_spread_pnl: f64,
    /// Carry rate `sum (theta + 1/2 sigma^2 gamma) q` at this state.
    pub carry_rate: f64,
    pub theta_gamma_pnl: f64,
    pub entropy_bonus: f64,
    pub hedge_delta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<TrajectoryStep>,
    pub terminal: MarketState,
}

impl Trajectory {
    /// Wealth change over the episode: spread income plus carry.
    pub fn raw_return(&self) -> f64 {
        self.steps.iter().map(|s| s.spread_pnl + s.theta_gamma_pnl).sum()
    }

    /// Raw return plus the entropy bonus.
    pub fn regularized_return(&self) -> f64 {
        self.raw_return() + self.steps.iter().map(|s| s.entropy_bonus).sum::<f64>()
    }

    pub fn total_fills(&self) -> u64 {
        self.steps.iter().map(|s| s.fills.count()).sum()
    }

    /// State at grid point `k`; `k == steps.len()` is the terminal state.
    pub fn state(&self, k: usize) -> (f64, f64, &Inventory) {
        match self.steps.get(k) {
            Some(step) => (step.t, step.s, &step.q),
            None => (self.terminal.t, self.terminal.s, &self.terminal.q),
        }
    }

    /// One CSV row per step.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let (m, n) = self.terminal.q.shape();
        let labels: Vec<String> = (1..=m).flat_map(|i| (1..=n).map(move |j| format!("{i}_{j}"))).collect();
        let mut header = vec!["t".to_string(), "S".to_string()];
        for prefix in ["q", "eps_bid", "eps_ask", "dNp", "dNm"] {
            header.extend(labels.iter().map(|l| format!("{prefix}_{l}")));
        }
        header.extend(["spread_pnl", "theta_gamma_pnl", "entropy_bonus"].map(String::from));
        w.write_record(&header)?;
        let mn = m * n;
        for step in &self.steps {
            let mut row = vec![step.t.to_string(), step.s.to_string()];
            row.extend(step.q.as_slice().iter().map(i64::to_string));
            row.extend(step.eps[..mn].iter().map(f64::to_string));
            row.extend(step.eps[mn..].iter().map(f64::to_string));
            row.extend(step.fills.dn_plus.as_slice().iter().map(u8::to_string));
            row.extend(step.fills.dn_minus.as_slice().iter().map(u8::to_string));
            row.extend([step.spread_pnl, step.theta_gamma_pnl, step.entropy_bonus].map(|v| v.to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `S * exp((mu - sigma^2/2) dt + sigma sqrt(dt) Z)`.
pub fn gbm_step<R: Rng + ?Sized>(s: f64, mu: f64, sigma: f64, dt: f64, rng: &mut R) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    s * ((mu - 0.5 * sigma * sigma) * dt + sigma * dt.sqrt() * z).exp()
}

/// `max(0, A - B eps)` per component; bid block gives buy-order intensities.
pub fn intensities(eps: &[f64], grid: &OptionGrid) -> Result<Vec<f64>> {
    shape_check("intensity spread vector", grid.n_components(), eps.len())?;
    let mn = grid.n_options();
    Ok(eps
        .iter()
        .enumerate()
        .map(|(c, e)| {
            let k = c % mn;
            (grid.a.as_slice()[k] - grid.b.as_slice()[k] * e).max(0.0)
        })
        .collect())
}

/// Independent Bernoulli(min(lambda dt, 1)) per component.
pub fn sample_fills<R: Rng + ?Sized>(
    lambda: &[f64],
    dt: f64,
    rows: usize,
    cols: usize,
    rng: &mut R,
) -> Result<FillEvent> {
    let mn = rows * cols;
    shape_check("fill intensities", 2 * mn, lambda.len())?;
    let draws: Vec<u8> = lambda
        .iter()
        .map(|l| {
            let p = (l * dt).min(1.0);
            let u: f64 = rng.random();
            u8::from(u < p)
        })
        .collect();
    Ok(FillEvent {
        dn_plus: Matrix::from_flat(rows, cols, draws[..mn].to_vec())?,
        dn_minus: Matrix::from_flat(rows, cols, draws[mn..].to_vec())?,
    })
}

/// `q + dN+ - dN-`. With a cap, each side is checked against the current
/// inventory and a fill that would leave `[-q_max, q_max]` is dropped.
/// Returns the new inventory and the fills that were kept.
pub fn apply_fills(q: &Inventory, fills: &FillEvent, q_max: Option<i64>) -> Result<(Inventory, FillEvent)> {
    q.ensure_shape(&fills.dn_plus, "apply_fills bid fills")?;
    q.ensure_shape(&fills.dn_minus, "apply_fills ask fills")?;
    let mut kept = fills.clone();
    if let Some(cap) = q_max {
        for c in 0..q.len() {
            let cur = q.as_slice()[c];
            if cur + 1 > cap {
                kept.dn_plus.as_mut_slice()[c] = 0;
            }
            if cur - 1 < -cap {
                kept.dn_minus.as_mut_slice()[c] = 0;
            }
        }
    }
    let mut next = q.clone();
    for ((v, &p), &m) in next.as_mut_slice().iter_mut().zip(kept.dn_plus.as_slice()).zip(kept.dn_minus.as_slice()) {
        *v += i64::from(p) - i64::from(m);
    }
    Ok((next, kept))
}

/// Shares of underlying that offset the book's delta.
pub fn hedge_delta(greeks: &GreeksGrid, q: &Inventory) -> Result<f64> {
    greeks.delta.ensure_shape(q, "hedge_delta inventory")?;
    Ok(greeks.delta.as_slice().iter().zip(q.as_slice()).map(|(d, &q)| d * q as f64).sum())
}

pub(crate) fn dot_fills(values: &[f64], fills: &FillEvent) -> f64 {
    let mn = fills.dn_plus.len();
    let bid: f64 = values[..mn].iter().zip(fills.dn_plus.as_slice()).map(|(v, &f)| v * f64::from(f)).sum();
    let ask: f64 = values[mn..].iter().zip(fills.dn_minus.as_slice()).map(|(v, &f)| v * f64::from(f)).sum();
    bid + ask
}

/// Simulates one episode from `(0, S0, q = 0)` under `policy`.
pub fn generate_path<P: QuotePolicy + ?Sized>(
    policy: &P,
    grid: &OptionGrid,
    config: &SimConfig,
    rng: &mut SimRng,
) -> Result<Trajectory> {
    let (m, n) = (grid.m(), grid.n());
    let k_steps = config.n_steps();
    let carry = config.carry();
    let mut s = config.s0;
    let mut q = grid.zero_inventory();
    let mut steps = Vec::with_capacity(k_steps);
    for k in 0..k_steps {
        let t = config.time(k);
        let greeks = grid_greeks(t, s, grid)?;
        let pi = policy.policy_at(t, &q, s)?;
        shape_check("policy dimension", grid.n_components(), pi.dim())?;
        let eps = pi.sample(rng);
        let lambda = intensities(&eps, grid)?;
        let raw_fills = sample_fills(&lambda, config.dt, m, n, rng)?;
        let (q_next, fills) = apply_fills(&q, &raw_fills, config.q_max)?;

        let coeffs = carry_coefficients(&greeks, s, carry);
        let rate: f64 = coeffs.iter().zip(q.as_slice()).map(|(c, &v)| c * v as f64).sum();
        let entropy_bonus = match config.entropy_mode {
            EntropyMode::ClosedForm => config.gamma * pi.entropy() * config.dt,
            EntropyMode::Sampled => -config.gamma * pi.log_prob(&eps)? * config.dt,
        };
        let hedge = hedge_delta(&greeks, &q)?;
        steps.push(TrajectoryStep {
            t,
            s,
            spread_pnl: dot_fills(&eps, &fills),
            mean_spread_pnl: dot_fills(&pi.mean, &fills),
            carry_rate: rate,
            theta_gamma_pnl: rate * config.dt,
            entropy_bonus,
            hedge_delta: hedge,
            q: std::mem::replace(&mut q, q_next),
            eps,
            mean: pi.mean,
            fills,
        });
        s = gbm_step(s, config.mu, config.sigma, config.dt, rng);
    }
    Ok(Trajectory { steps, terminal: MarketState { t: config.time(k_steps), s, q } })
}

/// Paths `offset..offset + count` of `(seed, substream)`, generated in parallel.
pub fn generate_paths<P: QuotePolicy + ?Sized>(
    policy: &P,
    grid: &OptionGrid,
    config: &SimConfig,
    seed: u64,
    substream: Substream,
    offset: u64,
    count: usize,
) -> Result<Vec<Trajectory>> {
    (0..count as u64)
        .into_par_iter()
        .map(|d| generate_path(policy, grid, config, &mut stream(seed, substream, offset + d)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub rule: String,
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub std_error: f64,
    pub min: f64,
    pub max: f64,
    /// Quantiles at 5%, 25%, 50%, 75%, 95%.
    pub quantiles: [f64; 5],
    pub histogram: Histogram,
}

pub const QUANTILE_LEVELS: [f64; 5] = [0.05, 0.25, 0.5, 0.75, 0.95];

/// Linear-interpolation quantile of sorted data.
fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

impl Summary {
    pub fn from_values(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Validation("cannot summarize zero returns".into()));
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let var =
            if n > 1 { values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64 } else { 0.0 };
        let std = var.sqrt();
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let quantiles = QUANTILE_LEVELS.map(|p| quantile_sorted(&sorted, p));
        Ok(Self {
            n,
            mean,
            std,
            std_error: std / (n as f64).sqrt(),
            min: sorted[0],
            max: sorted[n - 1],
            quantiles,
            histogram: freedman_diaconis(&sorted, quantiles[3] - quantiles[1]),
        })
    }
}

/// Histogram with bin width `2 IQR / n^(1/3)`; one bin when the spread is degenerate.
fn freedman_diaconis(sorted: &[f64], iqr: f64) -> Histogram {
    let n = sorted.len();
    let (lo, hi) = (sorted[0], sorted[n - 1]);
    let width = 2.0 * iqr / (n as f64).cbrt();
    let bins = if width > 0.0 && hi > lo { (((hi - lo) / width).ceil() as usize).clamp(1, 1000) } else { 1 };
    let step = if hi > lo { (hi - lo) / bins as f64 } else { 0.0 };
    let edges: Vec<f64> = (0..=bins).map(|b| if b == bins { hi } else { lo + b as f64 * step }).collect();
    let mut counts = vec![0u64; bins];
    for &v in sorted {
        let b = if step > 0.0 { (((v - lo) / step) as usize).min(bins - 1) } else { 0 };
        counts[b] += 1;
    }
    Histogram { rule: "freedman-diaconis".into(), edges, counts }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReturnStats {
    pub raw: Summary,
    pub regularized: Summary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub stats: ReturnStats,
    pub raw_returns: Vec<f64>,
    pub regularized_returns: Vec<f64>,
    pub fills: Vec<u64>,
}

impl Evaluation {
    pub fn from_trajectories(paths: &[Trajectory]) -> Result<Self> {
        let raw: Vec<f64> = paths.iter().map(Trajectory::raw_return).collect();
        let reg: Vec<f64> = paths.iter().map(Trajectory::regularized_return).collect();
        Ok(Self {
            stats: ReturnStats { raw: Summary::from_values(&raw)?, regularized: Summary::from_values(&reg)? },
            raw_returns: raw,
            regularized_returns: reg,
            fills: paths.iter().map(Trajectory::total_fills).collect(),
        })
    }

    /// `path,raw_return,regularized_return,fills` rows.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["path", "raw_return", "regularized_return", "fills"])?;
        for (d, ((raw, reg), fills)) in
            self.raw_returns.iter().zip(&self.regularized_returns).zip(&self.fills).enumerate()
        {
            w.write_record([d.to_string(), raw.to_string(), reg.to_string(), fills.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Simulates `n_paths` episodes on the `(seed, substream)` streams and summarizes their returns.
pub fn evaluate_policy<P: QuotePolicy + ?Sized>(
    policy: &P,
    grid: &OptionGrid,
    config: &SimConfig,
    n_paths: usize,
    seed: u64,
    substream: Substream,
) -> Result<Evaluation> {
    if n_paths == 0 {
        return Err(Error::Validation("n_paths must be at least 1".into()));
    }
    let paths = generate_paths(policy, grid, config, seed, substream, 0, n_paths)?;
    Evaluation::from_trajectories(&paths)
}
