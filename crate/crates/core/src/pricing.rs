//! Black-Scholes call prices and Greeks over the strike x maturity grid, and
//! the theta/gamma carry rate of an option inventory.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::function::erf::erfc;
use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::error::{Error, Result};
use crate::matrix::{Inventory, Matrix};

/// Smallest time-to-maturity used inside d1/d2.
pub const MIN_TAU: f64 = 1e-12;

/// The instrument universe: rows index strikes, columns index maturities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptionGrid {
    pub strikes: Vec<f64>,
    pub maturities: Vec<f64>,
    pub vol_surface: Matrix<f64>,
    /// Intensity intercepts, fills per unit time.
    pub a: Matrix<f64>,
    /// Intensity slopes, fills per unit time per unit of spread.
    pub b: Matrix<f64>,
    pub r: f64,
}

impl Default for OptionGrid {
    fn default() -> Self {
        let m = |rows: [[f64; 4]; 5]| Matrix::from_rows(rows.iter().map(|r| r.to_vec()).collect()).expect("static 5x4");
        Self {
            strikes: vec![90.0, 95.0, 100.0, 105.0, 110.0],
            maturities: vec![2.0, 3.0, 4.0, 5.0],
            vol_surface: m([
                [0.2, 0.2, 0.18, 0.18],
                [0.14, 0.14, 0.12, 0.12],
                [0.1, 0.1, 0.08, 0.08],
                [0.14, 0.14, 0.12, 0.12],
                [0.2, 0.2, 0.18, 0.18],
            ]),
            a: m([
                [36.0, 34.0, 32.0, 30.0],
                [46.0, 44.0, 42.0, 40.0],
                [56.0, 54.0, 52.0, 50.0],
                [46.0, 44.0, 42.0, 40.0],
                [36.0, 34.0, 32.0, 30.0],
            ]),
            b: m([
                [3.0, 3.0, 3.0, 3.0],
                [4.0, 4.0, 4.0, 4.0],
                [5.0, 5.0, 5.0, 5.0],
                [4.0, 4.0, 4.0, 4.0],
                [3.0, 3.0, 3.0, 3.0],
            ]),
            r: 0.0,
        }
    }
}

impl OptionGrid {
    /// A single option. Used by the one-option toy experiments.
    pub fn single(strike: f64, maturity: f64, vol: f64, a: f64, b: f64) -> Self {
        Self {
            strikes: vec![strike],
            maturities: vec![maturity],
            vol_surface: Matrix::filled(1, 1, vol),
            a: Matrix::filled(1, 1, a),
            b: Matrix::filled(1, 1, b),
            r: 0.0,
        }
    }

    /// The (K=100, T=2) option of the default grid on its own.
    pub fn default_atm_single() -> Self {
        Self::single(100.0, 2.0, 0.1, 56.0, 5.0)
    }

    pub fn m(&self) -> usize {
        self.strikes.len()
    }

    pub fn n(&self) -> usize {
        self.maturities.len()
    }

    /// Number of options, `m * n`.
    pub fn n_options(&self) -> usize {
        self.m() * self.n()
    }

    /// Length of a spread vector: bid block then ask block.
    pub fn n_components(&self) -> usize {
        2 * self.n_options()
    }

    pub fn zero_inventory(&self) -> Inventory {
        Inventory::zeros(self.m(), self.n())
    }

    pub fn validate(&self, horizon: f64) -> Result<()> {
        let (m, n) = (self.m(), self.n());
        if m == 0 || n == 0 {
            return Err(Error::Validation("grid needs at least one strike and one maturity".into()));
        }
        if !self.strikes.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Validation("strikes must be strictly increasing".into()));
        }
        if !self.maturities.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Validation("maturities must be strictly increasing".into()));
        }
        if let Some(k) = self.strikes.iter().find(|k| !(**k > 0.0 && k.is_finite())) {
            return Err(Error::Validation(format!("strike {k} must be positive")));
        }
        if self.maturities[0] <= horizon {
            return Err(Error::Validation(format!(
                "maturity {} does not exceed the trading horizon {horizon}",
                self.maturities[0]
            )));
        }
        for (name, mat) in [("vol_surface", &self.vol_surface), ("a", &self.a), ("b", &self.b)] {
            if mat.shape() != (m, n) {
                return Err(Error::Validation(format!("{name} is {}x{}, expected {m}x{n}", mat.rows(), mat.cols())));
            }
            for i in 0..m {
                for j in 0..n {
                    let v = mat[(i, j)];
                    if !(v > 0.0 && v.is_finite()) {
                        return Err(Error::Validation(format!("{name}[{i}][{j}] = {v} must be positive")));
                    }
                }
            }
        }
        if !self.r.is_finite() {
            return Err(Error::Validation("r must be finite".into()));
        }
        Ok(())
    }

    /// Stable content hash, used to tie checkpoints to the grid they were trained on.
    pub fn fingerprint(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("grid serializes");
        hex::encode(Sha256::digest(&canonical))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CallGreeks {
    pub price: f64,
    pub delta: f64,
    pub gamma: f64,
    /// Derivative in calendar time t (tau = maturity - t).
    pub theta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GreeksGrid {
    pub price: Matrix<f64>,
    pub delta: Matrix<f64>,
    pub gamma: Matrix<f64>,
    pub theta: Matrix<f64>,
}

pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x * FRAC_1_SQRT_2)
}

pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// European call under Black-Scholes.
pub fn bs_call(s: f64, k: f64, tau: f64, sigma: f64, r: f64) -> Result<CallGreeks> {
    for (name, v) in [("S", s), ("K", k), ("tau", tau), ("sigma", sigma)] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::Domain(format!("{name} = {v} must be positive and finite")));
        }
    }
    let tau = tau.max(MIN_TAU);
    let sqrt_tau = tau.sqrt();
    let vol_sqrt = sigma * sqrt_tau;
    let d1 = ((s / k).ln() + (r + 0.5 * sigma * sigma) * tau) / vol_sqrt;
    let d2 = d1 - vol_sqrt;
    let disc = (-r * tau).exp();
    let (nd1, nd2, pd1) = (norm_cdf(d1), norm_cdf(d2), norm_pdf(d1));
    Ok(CallGreeks {
        price: s * nd1 - k * disc * nd2,
        delta: nd1,
        gamma: pd1 / (s * vol_sqrt),
        theta: -s * pd1 * sigma / (2.0 * sqrt_tau) - r * k * disc * nd2,
    })
}

/// Greeks for every option in the grid at time `t` and underlying `s`.
pub fn grid_greeks(t: f64, s: f64, grid: &OptionGrid) -> Result<GreeksGrid> {
    let (m, n) = (grid.m(), grid.n());
    let mut out = GreeksGrid {
        price: Matrix::filled(m, n, 0.0),
        delta: Matrix::filled(m, n, 0.0),
        gamma: Matrix::filled(m, n, 0.0),
        theta: Matrix::filled(m, n, 0.0),
    };
    for (i, &k) in grid.strikes.iter().enumerate() {
        for (j, &mat) in grid.maturities.iter().enumerate() {
            let g = bs_call(s, k, mat - t, grid.vol_surface[(i, j)], grid.r)?;
            out.price[(i, j)] = g.price;
            out.delta[(i, j)] = g.delta;
            out.gamma[(i, j)] = g.gamma;
            out.theta[(i, j)] = g.theta;
        }
    }
    Ok(out)
}

/// How the second-order term of the carry rate is formed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CarrySpec {
    /// Volatility of the underlying multiplying the gamma term.
    pub sigma: f64,
    /// Multiply the gamma term by S^2 (Ito on geometric dynamics) instead of the literal form.
    pub include_s_squared: bool,
}

/// Sum over options of `(theta + 1/2 sigma^2 [S^2] gamma) * q`.
pub fn theta_gamma_rate(
    greeks: &GreeksGrid,
    q: &Inventory,
    sigma_underlying: f64,
    s: f64,
    include_s_squared: bool,
) -> Result<f64> {
    greeks.theta.ensure_shape(q, "theta_gamma_rate inventory")?;
    greeks.gamma.ensure_shape(q, "theta_gamma_rate gamma")?;
    let scale = 0.5 * sigma_underlying * sigma_underlying * if include_s_squared { s * s } else { 1.0 };
    Ok(greeks
        .theta
        .as_slice()
        .iter()
        .zip(greeks.gamma.as_slice())
        .zip(q.as_slice())
        .map(|((th, ga), &qq)| (th + scale * ga) * qq as f64)
        .sum())
}

/// Per-option carry coefficients `theta + 1/2 sigma^2 [S^2] gamma`; the rate is their dot product with q.
pub fn carry_coefficients(greeks: &GreeksGrid, s: f64, carry: CarrySpec) -> Vec<f64> {
    let scale = 0.5 * carry.sigma * carry.sigma * if carry.include_s_squared { s * s } else { 1.0 };
    greeks.theta.as_slice().iter().zip(greeks.gamma.as_slice()).map(|(th, ga)| th + scale * ga).collect()
}
