//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Hard criteria (1-4, the cap half of 7, and 9) fail the process; the
//! statistical reproductions (5, 6, the slope half of 7, 8) are reported but
//! do not. `OPTMM_ACCEPTANCE_SEEDS` shrinks the number of training seeds.

mod common;

use std::time::Instant;

use optmm::harness::check::{five_point, gradient_checks, improvement_check};
use optmm::harness::{compare_spreads, ExperimentConfig};
use optmm::policy::{closed_form_policy, entropy_constant, ClosedFormPolicy, QuotePolicy};
use optmm::pricing::{bs_call, OptionGrid};
use optmm::rl_algos::{actor_critic, policy_iteration};
use optmm::rng::{stream, SimRng, Substream};
use optmm::{Inventory, Matrix};
use rand::Rng;

struct Outcome {
    id: u8,
    hard: bool,
    pass: bool,
    detail: String,
}

fn report(id: u8, hard: bool, pass: bool, started: Instant, detail: String) -> Outcome {
    let line = format!("{detail} [{:.1}s]", started.elapsed().as_secs_f64());
    println!("criterion {id}: {} {line}", if pass { "PASS" } else { "FAIL" });
    Outcome { id, hard, pass, detail: line }
}

fn lognormal_price(s: f64, k: f64, tau: f64, sigma: f64) -> f64 {
    let w = sigma * tau.sqrt();
    let z0 = ((k / s).ln() + 0.5 * w * w) / w;
    let (lo, hi) = (z0.max(-12.0), 12.0);
    if lo >= hi {
        return 0.0;
    }
    let n = 8_000;
    let h = (hi - lo) / n as f64;
    let f = |z: f64| (s * (w * z - 0.5 * w * w).exp() - k).max(0.0) * (-0.5 * z * z).exp();
    let mut acc = f(lo) + f(hi);
    for i in 1..n {
        acc += f(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    acc * h / 3.0 / (2.0 * std::f64::consts::PI).sqrt()
}

fn rel(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / b.abs().max(floor)
}

fn greeks(rng: &mut SimRng) -> Outcome {
    let started = Instant::now();
    let (mut worst_fd, mut worst_price): (f64, f64) = (0.0, 0.0);
    for _ in 0..1000 {
        let s = rng.random_range(50.0..150.0);
        let k = rng.random_range(60.0..140.0);
        let tau = rng.random_range(0.1..5.0);
        let sigma = rng.random_range(0.05..0.6);
        let g = bs_call(s, k, tau, sigma, 0.0).unwrap();
        let hs = 3e-3 * s * sigma * tau.sqrt();
        let d = five_point(|x| Ok(bs_call(x, k, tau, sigma, 0.0)?.price), s, hs).unwrap();
        let gm = five_point(|x| Ok(bs_call(x, k, tau, sigma, 0.0)?.delta), s, hs).unwrap();
        let th = -five_point(|x| Ok(bs_call(s, k, x, sigma, 0.0)?.price), tau, 3e-3 * tau).unwrap();
        // deep in the money theta is ~0 while the price FD carries rounding of order eps * price / h
        let theta_floor = 1e-6 * (1.0 + g.price / tau);
        worst_fd = worst_fd.max(rel(g.delta, d, 1e-6)).max(rel(g.gamma, gm, 1e-6)).max(rel(g.theta, th, theta_floor));
        worst_price = worst_price.max(rel(g.price, lognormal_price(s, k, tau, sigma), 1e-6));
    }
    let pass = worst_fd < 1e-6 && worst_price < 1e-6 && started.elapsed().as_secs_f64() < 5.0;
    report(
        1,
        true,
        pass,
        started,
        format!("1000 contracts: greeks rel err {worst_fd:.2e}, price rel err {worst_price:.2e}"),
    )
}

fn lattice_argmax(a: f64, b: f64, dv: f64) -> f64 {
    let centre = (a / (2.0 * b) * 1e4).round() * 1e-4;
    let (mut best, mut arg) = (f64::NEG_INFINITY, 0.0);
    for i in -100_000..=100_000 {
        let e = centre + i as f64 * 1e-4;
        let v = (a - b * e) * (e + dv);
        if v > best {
            best = v;
            arg = e;
        }
    }
    arg
}

fn argmax(rng: &mut SimRng) -> Outcome {
    let started = Instant::now();
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (a, b) = (rng.random_range(10.0..100.0), rng.random_range(1.0..10.0));
        let table: Vec<f64> = (0..3).map(|_| rng.random_range(-5.0..5.0)).collect();
        let grid = OptionGrid::single(100.0, 2.0, 0.2, a, b);
        let v = |_t: f64, q: &Inventory| Ok(table[(q[(0, 0)] + 1) as usize]);
        let p = closed_form_policy(v, 0.0, &Inventory::zeros(1, 1), &grid, 0.01, None).unwrap();
        // a bid fill earns eps and moves q up one; an ask fill moves it down
        let bid = lattice_argmax(a, b, table[2] - table[1]);
        let ask = lattice_argmax(a, b, table[0] - table[1]);
        worst = worst.max((p.mean[0] - bid).abs()).max((p.mean[1] - ask).abs());
    }
    let pass = worst <= 1e-4 && started.elapsed().as_secs_f64() < 10.0;
    report(2, true, pass, started, format!("100 instances: max |closed form - lattice argmax| {worst:.2e}"))
}

fn entropy(rng: &mut SimRng) -> Outcome {
    let started = Instant::now();
    let mut grids = vec![OptionGrid::default()];
    while grids.len() < 100 {
        let (m, n) = (rng.random_range(1..7), rng.random_range(1..7));
        let mut g = OptionGrid::single(100.0, 2.0, 0.2, 50.0, 5.0);
        g.strikes = (0..m).map(|i| 80.0 + 5.0 * i as f64).collect();
        g.maturities = (0..n).map(|j| 1.5 + j as f64).collect();
        g.vol_surface = Matrix::filled(m, n, 0.2);
        g.a = Matrix::from_flat(m, n, (0..m * n).map(|_| rng.random_range(10.0..100.0)).collect()).unwrap();
        g.b = Matrix::from_flat(m, n, (0..m * n).map(|_| rng.random_range(0.5..10.0)).collect()).unwrap();
        grids.push(g);
    }
    let mut worst: f64 = 0.0;
    for (i, g) in grids.iter().enumerate() {
        let gamma = if i == 0 { 0.01 } else { rng.random_range(1e-3..1.0) };
        let mn = g.n_options() as f64;
        let closed = mn * (1.0 + (2.0 * std::f64::consts::PI).ln())
            + g.b.as_slice().iter().map(|b| (gamma / (2.0 * b)).ln()).sum::<f64>();
        let p = ClosedFormPolicy::baseline(g, gamma).policy_at(0.0, &g.zero_inventory(), 100.0).unwrap();
        let log_det: f64 = p.var.iter().map(|v| (2.0 * std::f64::consts::PI * std::f64::consts::E * v).ln()).sum();
        worst = worst.max((closed - 0.5 * log_det).abs()).max((entropy_constant(g, gamma) - closed).abs());
    }
    report(3, true, worst < 1e-10, started, format!("100 grids incl. default: max deviation {worst:.2e}"))
}

fn gradients() -> Outcome {
    let started = Instant::now();
    let mut worst: std::collections::BTreeMap<String, f64> = Default::default();
    let mut pass = true;
    for seed in 0..20 {
        for c in gradient_checks(seed).unwrap() {
            pass &= c.pass;
            let w = worst.entry(c.name).or_default();
            *w = w.max(c.metric);
        }
    }
    pass &= started.elapsed().as_secs_f64() < 60.0;
    let detail: Vec<String> = worst.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect();
    report(4, true, pass, started, format!("20 seeds, worst: {}", detail.join(", ")))
}

fn improvement(seeds: u64) -> Outcome {
    let started = Instant::now();
    let mut passes = 0;
    let mut diffs = Vec::new();
    for seed in 0..seeds {
        let r = improvement_check(seed, 2000).unwrap();
        passes += usize::from(r.pass);
        diffs.push(format!("{:+.1}/{:.1}", r.difference, r.combined_se));
    }
    let need = (9 * seeds as usize).div_ceil(10);
    let pass = passes >= need && started.elapsed().as_secs_f64() < 300.0;
    report(5, false, pass, started, format!("{passes}/{seeds} seeds within -2 s.e. (diff/se: {})", diffs.join(" ")))
}

fn policy_iteration_runs(seeds: u64) -> (Outcome, Outcome) {
    let started = Instant::now();
    let cfg = ExperimentConfig::from_toml_str("").unwrap();
    let q2 = optmm::harness::builtin_inventory("q2").unwrap();
    let q1 = optmm::harness::builtin_inventory("q1").unwrap();
    let (mut trend, mut inventory) = (0, 0);
    let (mut trend_detail, mut inv_detail) = (Vec::new(), Vec::new());
    for seed in 0..seeds {
        let (theta, rep) = policy_iteration(
            &cfg.grid,
            &cfg.sim,
            &cfg.algo.policy_iteration,
            &cfg.net.topology(),
            &cfg.encoding(),
            seed,
        )
        .unwrap();
        let first = rep.iterations.first().and_then(|r| r.eval.as_ref()).map(|e| &e.raw);
        let last = rep.iterations.last().and_then(|r| r.eval.as_ref()).map(|e| &e.raw);
        if let (Some(a), Some(b)) = (first, last) {
            let margin = b.mean - a.mean;
            let se = (a.std_error.powi(2) + b.std_error.powi(2)).sqrt();
            trend += usize::from(margin > se);
            trend_detail.push(format!("{margin:+.1}/{se:.1}"));
        }
        let policy = ClosedFormPolicy {
            value_net: Some(&theta),
            encoding: cfg.encoding(),
            grid: &cfg.grid,
            gamma: cfg.sim.gamma,
            q_max: cfg.sim.q_max,
        };
        let at = policy.policy_at(0.5, &q2, cfg.sim.s0).unwrap();
        let reference = policy.policy_at(0.0, &q1, cfg.sim.s0).unwrap();
        let cmp = compare_spreads(&at, &q2, &reference, 0.0);
        inventory += usize::from(2 * cmp.higher_bid > cmp.n_options && 2 * cmp.lower_ask > cmp.n_options);
        inv_detail.push(format!("{}/{}", cmp.higher_bid, cmp.lower_ask));
    }
    let need = (7 * seeds as usize).div_ceil(10);
    let six = report(
        6,
        false,
        trend >= need && started.elapsed().as_secs_f64() < 1800.0,
        started,
        format!("{trend}/{seeds} seeds with iteration-3 gain above its s.e. (gain/se: {})", trend_detail.join(" ")),
    );
    let eight = report(
        8,
        false,
        inventory >= need,
        started,
        format!(
            "{inventory}/{seeds} seeds with majority higher bids and lower asks (bid/ask counts of 20: {})",
            inv_detail.join(" ")
        ),
    );
    (six, eight)
}

fn actor_critic_runs(seeds: u64) -> Vec<Outcome> {
    let started = Instant::now();
    let cfg = ExperimentConfig::from_toml_str("").unwrap();
    let (mut capped, mut falling) = (true, 0);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let mut slopes = Vec::new();
    for seed in 0..seeds {
        let (_, _, rep) =
            actor_critic(&cfg.grid, &cfg.sim, &cfg.algo.actor_critic, &cfg.net.topology(), &cfg.encoding(), seed)
                .unwrap();
        let (a, b) = rep.mean_spread_range.unwrap();
        lo = lo.min(a);
        hi = hi.max(b);
        capped &= a > 0.0 && b < cfg.algo.actor_critic.cap;
        let n = rep.episodes.len();
        let tail: Vec<(f64, f64)> =
            rep.episodes[n - n / 5..].iter().map(|e| (e.episode as f64, e.critic_loss)).collect();
        let slope = least_squares_slope(&tail);
        falling += usize::from(slope <= 0.0);
        slopes.push(format!("{slope:+.1e}"));
    }
    let need = (7 * seeds as usize).div_ceil(10);
    vec![
        report(7, true, capped, started, format!("cap: posted means in [{lo:.4}, {hi:.4}] over {seeds} runs")),
        report(
            7,
            false,
            falling >= need,
            started,
            format!("critic-loss trend: {falling}/{seeds} non-positive final-20% slopes ({})", slopes.join(" ")),
        ),
    ]
}

fn least_squares_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = points.iter().map(|(x, _)| (x - mx).powi(2)).sum();
    sxy / sxx
}

fn determinism() -> Outcome {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::write_config(dir.path(), "c.toml", common::TINY_CONFIG);
    let mut pass = true;
    let mut files = 0;
    for cmd in ["train-pi", "train-ac"] {
        let outs: Vec<_> = ["a", "b"]
            .iter()
            .map(|run| {
                let out = dir.path().join(format!("{cmd}-{run}"));
                let status = common::optmm(&[cmd, "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
                pass &= status.status.success();
                common::snapshot(&out)
            })
            .collect();
        files += outs[0].len();
        pass &= !outs[0].is_empty() && outs[0] == outs[1];
    }
    report(9, true, pass, started, format!("train-pi and train-ac reruns byte-identical across {files} files"))
}

fn main() {
    let seeds: u64 = std::env::var("OPTMM_ACCEPTANCE_SEEDS").ok().and_then(|s| s.parse().ok()).unwrap_or(10);
    let mut rng = stream(2024, Substream::Check, 99);
    let mut outcomes = vec![greeks(&mut rng), argmax(&mut rng), entropy(&mut rng), gradients(), improvement(seeds)];
    let (six, eight) = policy_iteration_runs(seeds);
    outcomes.push(six);
    outcomes.extend(actor_critic_runs(seeds));
    outcomes.push(eight);
    outcomes.push(determinism());

    let hard_failures: Vec<&Outcome> = outcomes.iter().filter(|o| o.hard && !o.pass).collect();
    let soft_failures = outcomes.iter().filter(|o| !o.hard && !o.pass).count();
    println!(
        "acceptance: {} of {} lines pass; {} hard failure(s), {soft_failures} statistical failure(s)",
        outcomes.iter().filter(|o| o.pass).count(),
        outcomes.len(),
        hard_failures.len()
    );
    if !hard_failures.is_empty() {
        for o in hard_failures {
            eprintln!("hard failure in criterion {}: {}", o.id, o.detail);
        }
        std::process::exit(1);
    }
}
