use serde::Serialize;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use super::config::ExperimentConfig;
use crate::approximator::{ApproximatorParams, Checkpoint, NetRole, StateEncoding};
use crate::error::{Error, Result};
use crate::market_sim::{evaluate_policy, Evaluation, ReturnStats};
use crate::matrix::{Inventory, Matrix};
use crate::policy::{
    ClosedFormPolicy, ConstantMeanPolicy, GaussianQuotePolicy, NetworkPolicy, QuotePolicy, SpreadDump,
};
use crate::pricing::OptionGrid;
use crate::rl_algos::{actor_critic, policy_iteration, TrainingReport};
use crate::rng::Substream;

pub const REPORT_FILE: &str = "report.json";
pub const LOSS_FILE: &str = "loss.csv";
pub const ACTOR_LOSS_FILE: &str = "actor_loss.csv";
pub const VALUE_CHECKPOINT: &str = "value.ckpt.json";
pub const POLICY_CHECKPOINT: &str = "policy.ckpt.json";

/// Inventory matrices of the three worked examples: flat, long everywhere, mixed.
pub fn builtin_inventory(name: &str) -> Option<Inventory> {
    let rows: Vec<Vec<i64>> = match name {
        "q1" => vec![vec![0; 4]; 5],
        "q2" => vec![vec![6, 7, 8, 9], vec![3, 4, 5, 6], vec![0, 1, 2, 3], vec![3, 4, 5, 6], vec![6, 7, 8, 9]],
        "q3" => vec![vec![3, 4, -5, -6], vec![1, 2, -3, -4], vec![0, 1, -1, 1], vec![1, -2, 3, 4], vec![2, -3, 4, 5]],
        _ => return None,
    };
    Some(Matrix::from_rows(rows).expect("builtin inventories are rectangular"))
}

/// `q1`, `q2`, `q3`, or a path to a JSON nested array.
pub fn resolve_inventory(source: &str, grid: &OptionGrid) -> Result<Inventory> {
    let q = match builtin_inventory(source) {
        Some(q) => q,
        None if !Path::new(source).is_file() => {
            return Err(Error::Validation(format!("inventory {source:?} is neither q1, q2, q3 nor a readable file")));
        }
        None => {
            let rows: Vec<Vec<i64>> = serde_json::from_str(&fs::read_to_string(source)?)?;
            Matrix::from_rows(rows)?
        }
    };
    if q.shape() != (grid.m(), grid.n()) {
        return Err(Error::Validation(format!(
            "inventory is {}x{} but the grid is {}x{}",
            q.rows(),
            q.cols(),
            grid.m(),
            grid.n()
        )));
    }
    Ok(q)
}

/// Where the quoting policy for `evaluate` and `spreads` comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum PolicySource {
    /// Closed form with V = 0, i.e. `A/(2B)` means.
    Baseline,
    /// Constant means at `2A/B`, where every intensity is zero.
    ZeroIntensity,
    Checkpoint(PathBuf),
}

#[derive(Debug, Clone)]
enum PolicyKind {
    Value(ApproximatorParams, StateEncoding),
    Mean(ApproximatorParams, StateEncoding),
    Constant(ConstantMeanPolicy),
}

/// A quoting policy that owns its network.
#[derive(Debug, Clone)]
pub struct LoadedPolicy {
    pub label: String,
    grid: OptionGrid,
    gamma: f64,
    q_max: Option<i64>,
    cap: f64,
    kind: PolicyKind,
}

impl LoadedPolicy {
    pub fn load(cfg: &ExperimentConfig, source: &PolicySource) -> Result<Self> {
        let (label, kind) = match source {
            PolicySource::Baseline => (
                "baseline".to_string(),
                PolicyKind::Value(
                    ApproximatorParams::zeros(&cfg.net.topology(), cfg.encoding().len(cfg.grid.n_options()), 1)?,
                    cfg.encoding(),
                ),
            ),
            PolicySource::ZeroIntensity => (
                "zero_intensity".to_string(),
                PolicyKind::Constant(ConstantMeanPolicy::zero_intensity(&cfg.grid, cfg.sim.gamma)?),
            ),
            PolicySource::Checkpoint(path) => {
                let ck = Checkpoint::load(path, &cfg.grid)?;
                let kind = match ck.role {
                    NetRole::Value => PolicyKind::Value(ck.net, ck.encoding),
                    NetRole::PolicyMean => PolicyKind::Mean(ck.net, ck.encoding),
                };
                (path.display().to_string(), kind)
            }
        };
        Ok(Self {
            label,
            grid: cfg.grid.clone(),
            gamma: cfg.sim.gamma,
            q_max: cfg.sim.q_max,
            cap: cfg.algo.actor_critic.cap,
            kind,
        })
    }
}

impl QuotePolicy for LoadedPolicy {
    fn policy_at(&self, t: f64, q: &Inventory, s: f64) -> Result<GaussianQuotePolicy> {
        match &self.kind {
            PolicyKind::Value(net, encoding) => ClosedFormPolicy {
                value_net: Some(net),
                encoding: *encoding,
                grid: &self.grid,
                gamma: self.gamma,
                q_max: self.q_max,
            }
            .policy_at(t, q, s),
            PolicyKind::Mean(net, encoding) => {
                NetworkPolicy { mean_net: net, encoding: *encoding, grid: &self.grid, gamma: self.gamma, cap: self.cap }
                    .policy_at(t, q, s)
            }
            PolicyKind::Constant(p) => p.policy_at(t, q, s),
        }
    }
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn write_returns(path: &Path, eval: &Evaluation) -> Result<()> {
    eval.write_csv(BufWriter::new(File::create(path)?))
}

/// One loss-curve row; evaluation columns are empty when no evaluation ran.
fn write_loss_csv<'a, I>(path: &Path, rows: I) -> Result<()>
where
    I: IntoIterator<Item = (usize, f64, Option<&'a ReturnStats>)>,
{
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    w.write_record(["iteration", "loss", "eval_mean", "eval_std"])?;
    for (i, loss, eval) in rows {
        let (mean, std) = match eval {
            Some(e) => (e.raw.mean.to_string(), e.raw.std.to_string()),
            None => (String::new(), String::new()),
        };
        w.write_record([i.to_string(), loss.to_string(), mean, std])?;
    }
    w.flush()?;
    Ok(())
}

/// Trains the value network by policy iteration and writes
/// `value.ckpt.json`, `report.json`, `loss.csv` and one
/// `returns_iter_<l>.csv` per evaluated iteration.
///
/// Returns the report; a divergence abort still writes everything produced so
/// far and then surfaces as [`Error::Divergence`].
pub fn cmd_train_pi(cfg: &ExperimentConfig, out: &Path) -> Result<TrainingReport> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    let encoding = cfg.encoding();
    let (theta, report) =
        policy_iteration(&cfg.grid, &cfg.sim, &cfg.algo.policy_iteration, &cfg.net.topology(), &encoding, cfg.seed)?;
    Checkpoint::new(NetRole::Value, &theta, encoding, &cfg.grid).save(&out.join(VALUE_CHECKPOINT))?;
    write_json(&out.join(REPORT_FILE), &report)?;
    write_loss_csv(
        &out.join(LOSS_FILE),
        report.iterations.iter().map(|it| (it.iteration, it.final_loss, it.eval.as_ref())),
    )?;
    for it in &report.iterations {
        if let Some(eval) = &it.eval_returns {
            write_returns(&out.join(format!("returns_iter_{}.csv", it.iteration)), eval)?;
        }
    }
    log::info!("policy iteration finished in {:.1}s", report.wall_clock_secs);
    report.ensure_converged()?;
    Ok(report)
}

/// Trains actor and critic and writes both checkpoints, `report.json`, the
/// critic curve in `loss.csv`, the actor surrogate in `actor_loss.csv` and
/// `returns_episode_<l>.csv` at each evaluation point.
pub fn cmd_train_ac(cfg: &ExperimentConfig, out: &Path) -> Result<TrainingReport> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    let encoding = cfg.encoding();
    let (theta, phi, report) =
        actor_critic(&cfg.grid, &cfg.sim, &cfg.algo.actor_critic, &cfg.net.topology(), &encoding, cfg.seed)?;
    Checkpoint::new(NetRole::Value, &theta, encoding, &cfg.grid).save(&out.join(VALUE_CHECKPOINT))?;
    Checkpoint::new(NetRole::PolicyMean, &phi, encoding, &cfg.grid).save(&out.join(POLICY_CHECKPOINT))?;
    write_json(&out.join(REPORT_FILE), &report)?;
    write_loss_csv(&out.join(LOSS_FILE), report.episodes.iter().map(|e| (e.episode, e.critic_loss, e.eval.as_ref())))?;
    write_loss_csv(
        &out.join(ACTOR_LOSS_FILE),
        report.episodes.iter().map(|e| (e.episode, e.actor_surrogate, e.eval.as_ref())),
    )?;
    for e in &report.episodes {
        if let Some(eval) = &e.eval_returns {
            write_returns(&out.join(format!("returns_episode_{}.csv", e.episode)), eval)?;
        }
    }
    log::info!("actor-critic finished in {:.1}s", report.wall_clock_secs);
    report.ensure_converged()?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvaluationSummary {
    pub policy: String,
    pub seed: u64,
    pub n_paths: usize,
    pub stats: ReturnStats,
}

/// Simulates `n_paths` episodes and writes `returns.csv` and `summary.json`.
pub fn cmd_evaluate(
    cfg: &ExperimentConfig,
    source: &PolicySource,
    n_paths: usize,
    out: &Path,
) -> Result<EvaluationSummary> {
    cfg.validate()?;
    let policy = LoadedPolicy::load(cfg, source)?;
    let eval = evaluate_policy(&policy, &cfg.grid, &cfg.sim, n_paths, cfg.seed, Substream::Eval)?;
    fs::create_dir_all(out)?;
    write_returns(&out.join("returns.csv"), &eval)?;
    let summary = EvaluationSummary { policy: policy.label, seed: cfg.seed, n_paths, stats: eval.stats };
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Directional comparison of a spread dump against a reference state.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpreadComparison {
    pub reference_t: f64,
    pub n_options: usize,
    /// Options whose bid mean is above the reference.
    pub higher_bid: usize,
    /// Options whose ask mean is below the reference.
    pub lower_ask: usize,
    pub higher_bid_fraction: f64,
    pub lower_ask_fraction: f64,
    /// Mean of `ask - bid` over options with negative inventory, if any.
    pub ask_minus_bid_negative_q: Option<f64>,
    /// Mean of `ask - bid` over the other options, if any.
    pub ask_minus_bid_other: Option<f64>,
}

pub fn compare_spreads(
    dump: &GaussianQuotePolicy,
    q: &Inventory,
    reference: &GaussianQuotePolicy,
    reference_t: f64,
) -> SpreadComparison {
    let n = dump.n_options();
    let higher_bid = (0..n).filter(|&c| dump.bid_mean()[c] > reference.bid_mean()[c]).count();
    let lower_ask = (0..n).filter(|&c| dump.ask_mean()[c] < reference.ask_mean()[c]).count();
    let skew = |neg: bool| {
        let v: Vec<f64> =
            (0..n).filter(|&c| (q.as_slice()[c] < 0) == neg).map(|c| dump.ask_mean()[c] - dump.bid_mean()[c]).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    SpreadComparison {
        reference_t,
        n_options: n,
        higher_bid,
        lower_ask,
        higher_bid_fraction: higher_bid as f64 / n as f64,
        lower_ask_fraction: lower_ask as f64 / n as f64,
        ask_minus_bid_negative_q: skew(true),
        ask_minus_bid_other: skew(false),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpreadReport {
    pub policy: String,
    pub spreads: SpreadDump,
    /// The flat book at t = 0.
    pub reference: SpreadDump,
    pub comparison: SpreadComparison,
}

/// Mean spreads at `(t, q)` plus the comparison against `q = 0, t = 0`;
/// writes `spreads.json`.
pub fn cmd_spreads(
    cfg: &ExperimentConfig,
    source: &PolicySource,
    t: f64,
    q_source: &str,
    out: &Path,
) -> Result<SpreadReport> {
    cfg.validate()?;
    if !(0.0..=cfg.sim.horizon).contains(&t) {
        return Err(Error::Validation(format!("t = {t} outside [0, {}]", cfg.sim.horizon)));
    }
    let q = resolve_inventory(q_source, &cfg.grid)?;
    let policy = LoadedPolicy::load(cfg, source)?;
    let at = policy.policy_at(t, &q, cfg.sim.s0)?;
    let q0 = cfg.grid.zero_inventory();
    let reference = policy.policy_at(0.0, &q0, cfg.sim.s0)?;
    let report = SpreadReport {
        policy: policy.label.clone(),
        spreads: SpreadDump::new(t, &q, &at)?,
        reference: SpreadDump::new(0.0, &q0, &reference)?,
        comparison: compare_spreads(&at, &q, &reference, 0.0),
    };
    fs::create_dir_all(out)?;
    write_json(&out.join("spreads.json"), &report)?;
    Ok(report)
}
