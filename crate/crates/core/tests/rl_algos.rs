use optmm::approximator::{ApproximatorParams, NetTopology, StateEncoding};
use optmm::market_sim::{FillEvent, MarketState, SimConfig, Trajectory, TrajectoryStep};
use optmm::policy::{ClosedFormPolicy, QuotePolicy};
use optmm::pricing::OptionGrid;
use optmm::rl_algos::{
    actor_critic, actor_gradient, critic_loss, martingale_loss, policy_iteration, td_residual_ac, td_residual_pi,
    verify_policy_improvement, ActorCriticConfig, ActorFn, LossOptions, PolicyIterConfig, ValueFn,
};
use optmm::rng::{stream, Substream};
use optmm::Matrix;

const H_SINGLE: f64 = -4.069878;

fn setup() -> (OptionGrid, SimConfig, StateEncoding, ApproximatorParams) {
    let grid = OptionGrid::default_atm_single();
    let sim = SimConfig::default();
    let enc = StateEncoding::default();
    let zero = ApproximatorParams::zeros(&NetTopology { hidden: vec![4], residual_blocks: 1 }, 2, 1).unwrap();
    (grid, sim, enc, zero)
}

/// One step from `(0, 100, q = 0)` with the given fills and spreads.
fn one_step(bid: u8, ask: u8, eps: Vec<f64>, mean: Vec<f64>) -> Trajectory {
    let q = optmm::Inventory::zeros(1, 1);
    let fills = FillEvent {
        dn_plus: Matrix::from_rows(vec![vec![bid]]).unwrap(),
        dn_minus: Matrix::from_rows(vec![vec![ask]]).unwrap(),
    };
    let q1 = Matrix::from_rows(vec![vec![i64::from(bid) - i64::from(ask)]]).unwrap();
    Trajectory {
        steps: vec![TrajectoryStep {
            t: 0.0,
            s: 100.0,
            q,
            eps,
            mean,
            fills,
            spread_pnl: 0.0,
            mean_spread_pnl: 0.0,
            carry_rate: 0.0,
            theta_gamma_pnl: 0.0,
            entropy_bonus: 0.0,
            hedge_delta: 0.0,
        }],
        terminal: MarketState { t: 0.01, s: 100.0, q: q1 },
    }
}

#[test]
fn policy_iteration_residual_examples() {
    let (grid, sim, enc, zero) = setup();
    let v = ValueFn { net: &zero, encoding: &enc };
    let pol = ClosedFormPolicy::baseline(&grid, sim.gamma).policy_at(0.0, &grid.zero_inventory(), 100.0).unwrap();
    let quiet = one_step(0, 0, vec![5.6, 5.6], vec![5.6, 5.6]);
    let d = td_residual_pi(v, &quiet, 0, &pol, &grid, &sim, LossOptions::default()).unwrap();
    assert!((d - 0.01 * -H_SINGLE).abs() < 1e-8, "{d}");
    assert!((d - 0.0406988).abs() < 1e-6);

    let bid = one_step(1, 0, vec![5.6, 5.6], vec![5.6, 5.6]);
    let d = td_residual_pi(v, &bid, 0, &pol, &grid, &sim, LossOptions::default()).unwrap();
    assert!((d - 5.6406988).abs() < 1e-6, "{d}");

    // constant V: output-layer bias only
    let mut c = zero.clone();
    let last = c.output_layer_range().end - 1;
    c.params[last] = 17.0;
    let dc = td_residual_pi(ValueFn { net: &c, encoding: &enc }, &bid, 0, &pol, &grid, &sim, LossOptions::default())
        .unwrap();
    assert!((dc - d).abs() < 1e-9);
}

#[test]
fn martingale_loss_composition() {
    let (grid, sim, enc, zero) = setup();
    let v = ValueFn { net: &zero, encoding: &enc };
    let pol = ClosedFormPolicy::baseline(&grid, sim.gamma).policy_at(0.0, &grid.zero_inventory(), 100.0).unwrap();
    let path = one_step(1, 0, vec![5.6, 5.6], vec![5.6, 5.6]);
    let d = td_residual_pi(v, &path, 0, &pol, &grid, &sim, LossOptions::default()).unwrap();
    let (loss, _) = martingale_loss(v, std::slice::from_ref(&path), &grid, &sim, LossOptions::default()).unwrap();
    assert!((loss - 0.5 * d * d * sim.dt).abs() < 1e-12);
    let (twice, _) = martingale_loss(v, &[path.clone(), path], &grid, &sim, LossOptions::default()).unwrap();
    assert!((twice - 2.0 * loss).abs() < 1e-12);
    assert!(martingale_loss(v, &[], &grid, &sim, LossOptions::default()).is_err());

    // gamma -> 0, no fills, V = 0: nothing to fit
    let sim0 = SimConfig { gamma: 1e-300, ..sim };
    let quiet = one_step(0, 0, vec![5.6, 5.6], vec![5.6, 5.6]);
    let (l0, g0) = martingale_loss(v, &[quiet], &grid, &sim0, LossOptions::default()).unwrap();
    assert!(l0 < 1e-20);
    assert!(g0.iter().all(|g| g.abs() < 1e-9));
}

#[test]
fn actor_critic_residual_examples() {
    let (grid, sim, enc, zero) = setup();
    let phi = ApproximatorParams::zeros(&NetTopology { hidden: vec![4], residual_blocks: 1 }, 2, 2).unwrap();
    let actor = ActorFn { net: &phi, encoding: &enc, cap: 0.1 };
    let critic = ValueFn { net: &zero, encoding: &enc };
    let quiet = one_step(0, 0, vec![0.05, 0.05], vec![0.05, 0.05]);
    let d = td_residual_ac(critic, actor, &quiet, 0, &grid, &sim).unwrap();
    assert!((d - 4.069878e-4).abs() < 1e-9, "{d}");
    let fill = one_step(0, 1, vec![0.05, 0.05], vec![0.05, 0.05]);
    let d1 = td_residual_ac(critic, actor, &fill, 0, &grid, &sim).unwrap();
    assert!((d1 - (0.05 + 4.069878e-4)).abs() < 1e-9);

    let (loss, _) = critic_loss(critic, actor, &fill, &grid, &sim).unwrap();
    assert!((loss - 0.5 * d1 * d1).abs() < 1e-15);

    let mut c = zero.clone();
    let last = c.output_layer_range().end - 1;
    c.params[last] = -3.0;
    let dc = td_residual_ac(ValueFn { net: &c, encoding: &enc }, actor, &fill, 0, &grid, &sim).unwrap();
    assert!((dc - d1).abs() < 1e-12);
}

#[test]
fn actor_gradient_vanishes_at_the_mean() {
    let (grid, sim, enc, zero) = setup();
    let mut phi = ApproximatorParams::init(
        &NetTopology { hidden: vec![4], residual_blocks: 1 },
        2,
        2,
        &mut stream(0, Substream::Init, 1),
    )
    .unwrap();
    let range = phi.output_layer_range();
    for p in &mut phi.params[range] {
        *p = 0.2;
    }
    let actor = ActorFn { net: &phi, encoding: &enc, cap: 0.1 };
    let mean = actor.policy(0.0, &grid.zero_inventory(), 100.0, &grid, sim.gamma).unwrap().mean;
    let path = one_step(0, 0, mean.clone(), mean);
    let critic = ValueFn { net: &zero, encoding: &enc };
    for through in [false, true] {
        let (_, g) = actor_gradient(actor, critic, &path, &grid, &sim, through).unwrap();
        assert!(g.iter().all(|x| x.abs() < 1e-15));
    }
}

#[test]
fn zero_step_sizes_freeze_the_networks() {
    let grid = OptionGrid::default_atm_single();
    let sim = SimConfig { horizon: 0.1, ..SimConfig::default() };
    let enc = StateEncoding { horizon: 0.1, ..StateEncoding::default() };
    let topo = NetTopology { hidden: vec![6], residual_blocks: 1 };
    let in_dim = enc.len(1);

    let cfg = ActorCriticConfig { episodes: 1, alpha: 0.0, beta: 0.0, eval_every: 0, ..ActorCriticConfig::default() };
    let (theta, phi, report) = actor_critic(&grid, &sim, &cfg, &topo, &enc, 5).unwrap();
    assert_eq!(theta, ApproximatorParams::init(&topo, in_dim, 1, &mut stream(5, Substream::Init, 0)).unwrap());
    assert_eq!(phi, ApproximatorParams::init(&topo, in_dim, 2, &mut stream(5, Substream::Init, 1)).unwrap());
    assert_eq!(report.episodes.len(), 1);

    let cfg = PolicyIterConfig {
        iterations: 1,
        paths_per_iteration: 2,
        inner_epochs: 3,
        alpha: 0.0,
        eval_paths: 0,
        ..PolicyIterConfig::default()
    };
    let (theta, report) = policy_iteration(&grid, &sim, &cfg, &topo, &enc, 5).unwrap();
    assert_eq!(theta, ApproximatorParams::init(&topo, in_dim, 1, &mut stream(5, Substream::Init, 0)).unwrap());
    assert_eq!(report.iterations[0].losses.len(), 3);
    assert!(report.iterations[0].losses.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn training_is_deterministic_and_capped() {
    let grid = OptionGrid::default();
    let sim = SimConfig { horizon: 0.1, ..SimConfig::default() };
    let enc = StateEncoding { horizon: 0.1, ..StateEncoding::default() };
    let topo = NetTopology { hidden: vec![8], residual_blocks: 1 };
    let cfg =
        ActorCriticConfig { episodes: 20, beta: 1e-2, eval_every: 10, eval_paths: 5, ..ActorCriticConfig::default() };
    let a = actor_critic(&grid, &sim, &cfg, &topo, &enc, 3).unwrap();
    let b = actor_critic(&grid, &sim, &cfg, &topo, &enc, 3).unwrap();
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
    assert_eq!(serde_json::to_string(&a.2).unwrap(), serde_json::to_string(&b.2).unwrap());
    let (lo, hi) = a.2.mean_spread_range.unwrap();
    assert!(lo > 0.0 && hi < 0.1);
    assert!(a.2.episodes.iter().all(|e| e.min_mean > 0.0 && e.max_mean < 0.1));

    let pcfg = PolicyIterConfig {
        iterations: 2,
        paths_per_iteration: 3,
        inner_epochs: 4,
        eval_paths: 5,
        ..PolicyIterConfig::default()
    };
    let p = policy_iteration(&grid, &sim, &pcfg, &topo, &enc, 3).unwrap();
    let q = policy_iteration(&grid, &sim, &pcfg, &topo, &enc, 3).unwrap();
    assert_eq!(p.0, q.0);
    assert_eq!(serde_json::to_string(&p.1).unwrap(), serde_json::to_string(&q.1).unwrap());
    assert_eq!(p.1.iterations.len(), 2);
}

#[test]
fn divergence_is_reported() {
    let grid = OptionGrid::default();
    let sim = SimConfig { horizon: 0.1, ..SimConfig::default() };
    let enc = StateEncoding { horizon: 0.1, ..StateEncoding::default() };
    let topo = NetTopology { hidden: vec![8], residual_blocks: 1 };
    let cfg = PolicyIterConfig {
        iterations: 1,
        paths_per_iteration: 2,
        inner_epochs: 30,
        alpha: 1e6,
        grad_clip: None,
        eval_paths: 0,
        ..PolicyIterConfig::default()
    };
    let (_, report) = policy_iteration(&grid, &sim, &cfg, &topo, &enc, 0).unwrap();
    assert!(report.diverged.is_some());
    assert!(matches!(report.ensure_converged(), Err(optmm::Error::Divergence(_))));
}

#[test]
fn identical_policies_show_no_improvement() {
    let grid = OptionGrid::default_atm_single();
    let sim = SimConfig::default();
    let base = ClosedFormPolicy::baseline(&grid, sim.gamma);
    let rep = verify_policy_improvement(&base, &base, &grid, &sim, 400, 1).unwrap();
    assert!(rep.difference.abs() < 4.0 * rep.combined_se, "{rep:?}");
    assert!(rep.pass);
}
