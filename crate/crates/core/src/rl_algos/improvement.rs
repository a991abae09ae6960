use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::market_sim::{evaluate_policy, SimConfig};
use crate::policy::QuotePolicy;
use crate::pricing::OptionGrid;
use crate::rng::Substream;

/// Monte Carlo comparison of the entropy-regularized objective from `(0, q = 0)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImprovementReport {
    pub n_paths: usize,
    pub baseline_mean: f64,
    pub baseline_se: f64,
    pub improved_mean: f64,
    pub improved_se: f64,
    /// `improved_mean - baseline_mean`.
    pub difference: f64,
    pub combined_se: f64,
    /// `difference >= -2 combined_se`.
    pub pass: bool,
}

/// Estimates both policies' regularized returns on independent path streams
/// and passes when the improved policy is no worse than the baseline up to two
/// combined standard errors.
pub fn verify_policy_improvement<B, N>(
    baseline: &B,
    improved: &N,
    grid: &OptionGrid,
    sim: &SimConfig,
    n_paths: usize,
    seed: u64,
) -> Result<ImprovementReport>
where
    B: QuotePolicy + ?Sized,
    N: QuotePolicy + ?Sized,
{
    let base = evaluate_policy(baseline, grid, sim, n_paths, seed, Substream::Other(1))?.stats.regularized;
    let new = evaluate_policy(improved, grid, sim, n_paths, seed, Substream::Other(2))?.stats.regularized;
    let combined_se = (base.std_error.powi(2) + new.std_error.powi(2)).sqrt();
    let difference = new.mean - base.mean;
    Ok(ImprovementReport {
        n_paths,
        baseline_mean: base.mean,
        baseline_se: base.std_error,
        improved_mean: new.mean,
        improved_se: new.std_error,
        difference,
        combined_se,
        pass: difference >= -2.0 * combined_se,
    })
}
