//! Invariant suite behind the `check` command.
//!
//! Hard checks are deterministic identities that must hold to numerical
//! precision; statistical checks report a p-value or confidence band and pass
//! at the documented threshold.

use rand::Rng;
use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use std::path::Path;

use super::config::ExperimentConfig;
use crate::approximator::{ApproximatorParams, NetTopology, StateEncoding};
use crate::error::Result;
use crate::market_sim::{generate_paths, sample_fills, SimConfig, Trajectory};
use crate::matrix::Inventory;
use crate::policy::{closed_form_policy, score, ClosedFormPolicy, NetworkPolicy, QuotePolicy};
use crate::pricing::{bs_call, OptionGrid};
use crate::rl_algos::{
    actor_gradient, critic_loss, martingale_loss, policy_iteration, td_residual_pi, verify_policy_improvement, ActorFn,
    ImprovementReport, LossOptions, PolicyIterConfig, ValueFn,
};
use crate::rng::{stream, SimRng, Substream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckKind {
    Hard,
    Statistical,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub kind: CheckKind,
    pub pass: bool,
    /// Error, p-value or statistic, depending on the check.
    pub metric: f64,
    pub threshold: f64,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckReport {
    pub seed: u64,
    pub checks: Vec<CheckResult>,
    pub policy_improvement: ImprovementReport,
    /// Every hard check passed.
    pub hard_pass: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CheckOptions {
    /// Test hook: perturb the analytic gamma by 1e-3 so the Greeks check must fail.
    pub inject_gamma_fault: bool,
    /// Paths per policy in the policy-improvement comparison.
    pub improvement_paths: usize,
}

fn hard(name: &str, metric: f64, threshold: f64, detail: String) -> CheckResult {
    CheckResult { name: name.into(), kind: CheckKind::Hard, pass: metric < threshold, metric, threshold, detail }
}

/// `|a - b| / max(|a|, |b|)` on vectors, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Central-difference gradient of `f` at `x`.
pub fn numeric_gradient<F: FnMut(&[f64]) -> Result<f64>>(x: &[f64], h: f64, mut f: F) -> Result<Vec<f64>> {
    let mut x = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x[i];
        let step = h * orig.abs().max(1.0);
        x[i] = orig + step;
        let up = f(&x)?;
        x[i] = orig - step;
        let down = f(&x)?;
        x[i] = orig;
        out.push((up - down) / (2.0 * step));
    }
    Ok(out)
}

/// Five-point central difference of `f` at `x` with step `h`.
pub fn five_point<F: Fn(f64) -> Result<f64>>(f: F, x: f64, h: f64) -> Result<f64> {
    Ok((f(x - 2.0 * h)? - 8.0 * f(x - h)? + 8.0 * f(x + h)? - f(x + 2.0 * h)?) / (12.0 * h))
}

fn greeks_check(rng: &mut SimRng, n: usize, fault: bool) -> Result<CheckResult> {
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let s = rng.random_range(50.0..150.0);
        let k = rng.random_range(60.0..140.0);
        let tau = rng.random_range(0.1..5.0);
        let sigma = rng.random_range(0.05..0.6);
        let r = rng.random_range(0.0..0.05);
        let g = bs_call(s, k, tau, sigma, r)?;
        let gamma = if fault { g.gamma + 1e-3 } else { g.gamma };
        // steps scale with the lognormal width so short, low-vol contracts stay resolved
        let hs = 3e-3 * s * sigma * tau.sqrt();
        let fd_delta = five_point(|x| Ok(bs_call(x, k, tau, sigma, r)?.price), s, hs)?;
        let fd_gamma = five_point(|x| Ok(bs_call(x, k, tau, sigma, r)?.delta), s, hs)?;
        // theta is d/dt with tau = T - t
        let fd_theta = -five_point(|x| Ok(bs_call(s, k, x, sigma, r)?.price), tau, 3e-3 * tau)?;
        // theta floor follows the rounding of a price difference, eps * price / h
        let theta_floor = 1e-6 * (1.0 + g.price / tau);
        for (a, b, floor) in [(g.delta, fd_delta, 1e-6), (gamma, fd_gamma, 1e-6), (g.theta, fd_theta, theta_floor)] {
            worst = worst.max((a - b).abs() / b.abs().max(floor));
        }
    }
    let detail =
        if fault { format!("{n} random contracts, gamma perturbed by 1e-3") } else { format!("{n} random contracts") };
    Ok(hard("greeks_finite_difference", worst, 1e-6, detail))
}

fn random_grid(rng: &mut SimRng, m: usize, n: usize) -> OptionGrid {
    let mut grid = OptionGrid::single(100.0, 2.0, 0.2, 50.0, 5.0);
    grid.strikes = (0..m).map(|i| 80.0 + 10.0 * i as f64).collect();
    grid.maturities = (0..n).map(|j| 1.5 + j as f64).collect();
    let mut fill = |lo: f64, hi: f64| {
        crate::matrix::Matrix::from_flat(m, n, (0..m * n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
    };
    grid.vol_surface = fill(0.05, 0.4);
    grid.a = fill(10.0, 100.0);
    grid.b = fill(0.5, 10.0);
    grid
}

fn entropy_check(rng: &mut SimRng, gamma: f64) -> Result<CheckResult> {
    let mut grids = vec![OptionGrid::default()];
    for _ in 0..20 {
        let (m, n) = (rng.random_range(1..6), rng.random_range(1..6));
        grids.push(random_grid(rng, m, n));
    }
    let mut worst: f64 = 0.0;
    for grid in &grids {
        let p = ClosedFormPolicy::baseline(grid, gamma).policy_at(0.0, &grid.zero_inventory(), 100.0)?;
        let det: f64 = p.var.iter().map(|v| 2.0 * std::f64::consts::PI * std::f64::consts::E * v).product();
        worst = worst.max((p.entropy() - 0.5 * det.ln()).abs());
    }
    Ok(hard("entropy_identity", worst, 1e-10, format!("{} grids including the default", grids.len())))
}

/// Grid-search maximizer of `(A - B e)(e + dv)` for `|dv| <= 10` on a 1e-4
/// lattice covering `A/(2B) +- 10`.
fn grid_argmax(a: f64, b: f64, dv: f64) -> f64 {
    let (mut best, mut best_e) = (f64::NEG_INFINITY, 0.0);
    let lo = (a / (2.0 * b) * 1e4).round() * 1e-4 - 10.0;
    for i in 0..=200_000 {
        let e = lo + i as f64 * 1e-4;
        let val = (a - b * e) * (e + dv);
        if val > best {
            best = val;
            best_e = e;
        }
    }
    best_e
}

fn argmax_check(rng: &mut SimRng, n: usize, gamma: f64) -> Result<CheckResult> {
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let a = rng.random_range(10.0..100.0);
        let b = rng.random_range(1.0..10.0);
        let table: [f64; 3] = [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)];
        let grid = OptionGrid::single(100.0, 2.0, 0.2, a, b);
        let q = Inventory::zeros(1, 1);
        let v = |_t: f64, q: &Inventory| Ok(table[(q[(0, 0)] + 1) as usize]);
        let p = closed_form_policy(v, 0.0, &q, &grid, gamma, None)?;
        // bid: earn e, inventory up; ask: earn e, inventory down
        let bid = grid_argmax(a, b, table[2] - table[1]);
        let ask = grid_argmax(a, b, table[0] - table[1]);
        worst = worst.max((p.mean[0] - bid).abs()).max((p.mean[1] - ask).abs());
    }
    Ok(CheckResult {
        name: "closed_form_argmax".into(),
        kind: CheckKind::Hard,
        pass: worst <= 1e-4,
        metric: worst,
        threshold: 1e-4,
        detail: format!("{n} random single-option instances, 1e-4 search lattice"),
    })
}

/// Small single-option problem used by the gradient checks.
pub fn toy_problem() -> (OptionGrid, SimConfig, StateEncoding, NetTopology) {
    let grid = OptionGrid::default_atm_single();
    let sim = SimConfig { horizon: 0.1, ..SimConfig::default() };
    let encoding = StateEncoding { horizon: sim.horizon, ..StateEncoding::default() };
    (grid, sim, encoding, NetTopology { hidden: vec![8, 8], residual_blocks: 1 })
}

fn perturbed(net: &ApproximatorParams, rng: &mut SimRng) -> ApproximatorParams {
    let mut net = net.clone();
    for p in &mut net.params {
        *p += rng.random_range(-0.3..0.3);
    }
    net
}

pub fn gradient_checks(seed: u64) -> Result<Vec<CheckResult>> {
    let (grid, sim, enc, topo) = toy_problem();
    let in_dim = enc.len(grid.n_options());
    let mut rng = stream(seed, Substream::Check, 1);
    let theta = perturbed(&ApproximatorParams::init(&topo, in_dim, 1, &mut rng)?, &mut rng);
    let phi = perturbed(&ApproximatorParams::init(&topo, in_dim, grid.n_components(), &mut rng)?, &mut rng);
    let h = 1e-6;
    let mut out = Vec::new();

    let x: Vec<f64> = (0..in_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let analytic = phi.grad_params(&x, &[0.3, -0.7])?;
    let numeric = numeric_gradient(&phi.params, h, |p| {
        let mut net = phi.clone();
        net.params.copy_from_slice(p);
        let y = net.forward(&x)?;
        Ok(0.3 * y[0] - 0.7 * y[1])
    })?;
    out.push(hard("grad_params", relative_error(&analytic, &numeric), 1e-4, format!("{} parameters", phi.n_params())));

    let policy =
        ClosedFormPolicy { value_net: Some(&theta), encoding: enc, grid: &grid, gamma: sim.gamma, q_max: None };
    let paths = generate_paths(&policy, &grid, &sim, seed, Substream::Check, 10, 3)?;
    let opts = LossOptions::default();
    let (_, analytic) = martingale_loss(ValueFn { net: &theta, encoding: &enc }, &paths, &grid, &sim, opts)?;
    let numeric = numeric_gradient(&theta.params, h, |p| {
        let mut net = theta.clone();
        net.params.copy_from_slice(p);
        Ok(martingale_loss(ValueFn { net: &net, encoding: &enc }, &paths, &grid, &sim, opts)?.0)
    })?;
    out.push(hard("martingale_loss_gradient", relative_error(&analytic, &numeric), 1e-4, "3 paths".into()));

    let cap = 0.1;
    let actor_policy = NetworkPolicy { mean_net: &phi, encoding: enc, grid: &grid, gamma: sim.gamma, cap };
    let path: Trajectory = generate_paths(&actor_policy, &grid, &sim, seed, Substream::Check, 20, 1)?.remove(0);
    let actor = ActorFn { net: &phi, encoding: &enc, cap };
    let (_, analytic) = critic_loss(ValueFn { net: &theta, encoding: &enc }, actor, &path, &grid, &sim)?;
    let numeric = numeric_gradient(&theta.params, h, |p| {
        let mut net = theta.clone();
        net.params.copy_from_slice(p);
        Ok(critic_loss(ValueFn { net: &net, encoding: &enc }, actor, &path, &grid, &sim)?.0)
    })?;
    out.push(hard("critic_loss_gradient", relative_error(&analytic, &numeric), 1e-4, "1 path".into()));

    let step = &path.steps[path.steps.len() / 2];
    let analytic = score(&phi, &enc, step.t, &step.q, step.s, &step.eps, &grid, sim.gamma, cap)?;
    let numeric = numeric_gradient(&phi.params, h, |p| {
        let mut net = phi.clone();
        net.params.copy_from_slice(p);
        ActorFn { net: &net, encoding: &enc, cap }
            .policy(step.t, &step.q, step.s, &grid, sim.gamma)?
            .log_prob(&step.eps)
    })?;
    out.push(hard("score_gradient", relative_error(&analytic, &numeric), 1e-4, "one recorded spread vector".into()));

    let critic = ValueFn { net: &theta, encoding: &enc };
    let (_, analytic) = actor_gradient(actor, critic, &path, &grid, &sim, true)?;
    let numeric = numeric_gradient(&phi.params, h, |p| {
        let mut net = phi.clone();
        net.params.copy_from_slice(p);
        Ok(actor_gradient(ActorFn { net: &net, encoding: &enc, cap }, critic, &path, &grid, &sim, true)?.0)
    })?;
    out.push(hard("actor_surrogate_gradient", relative_error(&analytic, &numeric), 1e-4, "product-rule form".into()));

    // Shifting V by a constant leaves every residual unchanged.
    let mut shifted = theta.clone();
    let last = shifted.output_layer_range().end - 1;
    shifted.params[last] += 123.0;
    let mut worst: f64 = 0.0;
    for k in 0..paths[0].steps.len() {
        let step = &paths[0].steps[k];
        let p = policy.policy_at(step.t, &step.q, step.s)?;
        let a = td_residual_pi(ValueFn { net: &theta, encoding: &enc }, &paths[0], k, &p, &grid, &sim, opts)?;
        let b = td_residual_pi(ValueFn { net: &shifted, encoding: &enc }, &paths[0], k, &p, &grid, &sim, opts)?;
        worst = worst.max((a - b).abs() / a.abs().max(1.0));
    }
    out.push(hard("residual_shift_invariance", worst, 1e-8, "V + 123".into()));
    Ok(out)
}

/// Chi-square goodness of fit of Bernoulli fill counts.
fn fill_check(rng: &mut SimRng) -> Result<CheckResult> {
    let lambda = [10.0, 28.0, 50.0, 90.0];
    let dt = 0.01;
    let draws = 20_000u64;
    let mut hits = [0u64; 4];
    for _ in 0..draws {
        let f = sample_fills(&lambda, dt, 1, 2, rng)?;
        let v = f.as_vector();
        for (h, x) in hits.iter_mut().zip(&v) {
            *h += *x as u64;
        }
    }
    let mut chi2 = 0.0;
    for (h, l) in hits.iter().zip(&lambda) {
        let p = l * dt;
        let exp1 = p * draws as f64;
        let exp0 = (1.0 - p) * draws as f64;
        let obs1 = *h as f64;
        chi2 += (obs1 - exp1).powi(2) / exp1 + (obs1 - exp1).powi(2) / exp0;
    }
    let dist = ChiSquared::new(lambda.len() as f64).expect("positive degrees of freedom");
    let p_value = 1.0 - dist.cdf(chi2);
    Ok(CheckResult {
        name: "fill_frequencies".into(),
        kind: CheckKind::Statistical,
        pass: p_value > 1e-3,
        metric: p_value,
        threshold: 1e-3,
        detail: format!("chi-square {chi2:.3} on {} components, {draws} steps", lambda.len()),
    })
}

/// Fits a value network on the single-option problem with one policy-iteration
/// round and compares its closed-form policy with the `A/(2B)` baseline.
pub fn improvement_check(seed: u64, n_paths: usize) -> Result<ImprovementReport> {
    let grid = OptionGrid::default_atm_single();
    let sim = SimConfig::default();
    let enc = StateEncoding::default();
    let topo = NetTopology { hidden: vec![16, 16], residual_blocks: 1 };
    let cfg = PolicyIterConfig { iterations: 1, eval_paths: 0, alpha: 1e-3, ..PolicyIterConfig::default() };
    let (theta, _) = policy_iteration(&grid, &sim, &cfg, &topo, &enc, seed)?;
    let baseline = ClosedFormPolicy::baseline(&grid, sim.gamma);
    let improved =
        ClosedFormPolicy { value_net: Some(&theta), encoding: enc, grid: &grid, gamma: sim.gamma, q_max: None };
    verify_policy_improvement(&baseline, &improved, &grid, &sim, n_paths, seed)
}

pub fn run_checks(cfg: &ExperimentConfig, opts: CheckOptions) -> Result<CheckReport> {
    let seed = cfg.seed;
    let mut rng = stream(seed, Substream::Check, 0);
    let mut checks = vec![
        greeks_check(&mut rng, 200, opts.inject_gamma_fault)?,
        entropy_check(&mut rng, cfg.sim.gamma)?,
        argmax_check(&mut rng, 100, cfg.sim.gamma)?,
    ];
    checks.extend(gradient_checks(seed)?);
    checks.push(fill_check(&mut rng)?);
    let n_paths = if opts.improvement_paths == 0 { 500 } else { opts.improvement_paths };
    let policy_improvement = improvement_check(seed, n_paths)?;
    checks.push(CheckResult {
        name: "policy_improvement".into(),
        kind: CheckKind::Statistical,
        pass: policy_improvement.pass,
        metric: policy_improvement.difference,
        threshold: -2.0 * policy_improvement.combined_se,
        detail: format!(
            "regularized mean {:.4} vs baseline {:.4}, combined s.e. {:.4}",
            policy_improvement.improved_mean, policy_improvement.baseline_mean, policy_improvement.combined_se
        ),
    });
    for c in &checks {
        log::info!(
            "check {}: {} ({:.3e} vs {:.3e})",
            c.name,
            if c.pass { "pass" } else { "FAIL" },
            c.metric,
            c.threshold
        );
    }
    let hard_pass = checks.iter().filter(|c| c.kind == CheckKind::Hard).all(|c| c.pass);
    Ok(CheckReport { seed, checks, policy_improvement, hard_pass })
}

/// Runs the suite and writes `check.json`.
pub fn cmd_check(cfg: &ExperimentConfig, opts: CheckOptions, out: &Path) -> Result<CheckReport> {
    cfg.validate()?;
    let report = run_checks(cfg, opts)?;
    std::fs::create_dir_all(out)?;
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    std::fs::write(out.join("check.json"), text)?;
    Ok(report)
}
