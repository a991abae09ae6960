use clap::{Args, Parser, Subcommand, ValueEnum};
use std::path::PathBuf;
use std::process::ExitCode;

use optmm::harness::{
    cmd_check, cmd_evaluate, cmd_spreads, cmd_train_ac, cmd_train_pi, load_config, CheckOptions, ExperimentConfig,
    PolicySource,
};
use optmm::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_VALIDATION: u8 = 2;
const EXIT_DIVERGENCE: u8 = 3;
const EXIT_CHECK_FAILED: u8 = 4;

#[derive(Parser, Debug)]
#[command(name = "optmm", version, about = "Entropy-regularized option market making: training, evaluation and checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML experiment file; defaults are used for anything it omits.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (0 = all cores); overrides the config.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args, Debug, Clone)]
struct PolicyArgs {
    /// Value or policy-mean checkpoint from a training run.
    #[arg(long, conflicts_with = "zero_intensity")]
    checkpoint: Option<PathBuf>,
    /// Quote at 2A/B everywhere, where no order ever fills.
    #[arg(long)]
    zero_intensity: bool,
}

impl PolicyArgs {
    fn source(&self) -> PolicySource {
        match (&self.checkpoint, self.zero_intensity) {
            (Some(p), _) => PolicySource::Checkpoint(p.clone()),
            (None, true) => PolicySource::ZeroIntensity,
            (None, false) => PolicySource::Baseline,
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq)]
enum Fault {
    Gamma,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Policy iteration on the martingale loss.
    TrainPi(Common),
    /// Actor-critic with a capped policy network.
    TrainAc(Common),
    /// Monte Carlo returns of a policy (the A/(2B) baseline without --checkpoint).
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        policy: PolicyArgs,
        #[arg(long, default_value_t = 100)]
        n_paths: usize,
    },
    /// Mean spread matrices at one state.
    Spreads {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        policy: PolicyArgs,
        #[arg(long, default_value_t = 0.0)]
        t: f64,
        /// q1, q2, q3 or a JSON file holding a nested inventory array.
        #[arg(long, default_value = "q1")]
        q: String,
    },
    /// Invariant suite; exits 4 if a hard check fails.
    Check {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 500)]
        improvement_paths: usize,
        #[arg(long, value_enum, hide = true)]
        inject_fault: Option<Fault>,
    },
}

fn resolve(common: &Common) -> optmm::Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => load_config(path)?,
        None => ExperimentConfig::from_toml_str("")?,
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    if let Some(w) = common.workers {
        cfg.workers = w;
    }
    if cfg.workers > 0 {
        // Only fails if a pool already exists, which cannot happen here.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.workers).build_global();
    }
    Ok(cfg)
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Divergence(_) | Error::NonFinite(_) => EXIT_DIVERGENCE,
        Error::Domain(_) | Error::Shape(_) | Error::Validation(_) | Error::Parse(_) | Error::Fingerprint { .. } => {
            EXIT_VALIDATION
        }
        Error::Io(_) | Error::Json(_) | Error::Csv(_) => EXIT_USAGE,
    }
}

fn run(command: Command) -> optmm::Result<u8> {
    match command {
        Command::TrainPi(common) => {
            let cfg = resolve(&common)?;
            cmd_train_pi(&cfg, &cfg.output_dir)?;
        }
        Command::TrainAc(common) => {
            let cfg = resolve(&common)?;
            cmd_train_ac(&cfg, &cfg.output_dir)?;
        }
        Command::Evaluate { common, policy, n_paths } => {
            let cfg = resolve(&common)?;
            let summary = cmd_evaluate(&cfg, &policy.source(), n_paths, &cfg.output_dir)?;
            println!(
                "{}: raw mean {:.4} (s.e. {:.4}), regularized mean {:.4} over {} paths",
                summary.policy,
                summary.stats.raw.mean,
                summary.stats.raw.std_error,
                summary.stats.regularized.mean,
                summary.n_paths
            );
        }
        Command::Spreads { common, policy, t, q } => {
            let cfg = resolve(&common)?;
            let rep = cmd_spreads(&cfg, &policy.source(), t, &q, &cfg.output_dir)?;
            println!(
                "{q} at t = {t}: {}/{} bids above and {}/{} asks below the flat book at t = 0",
                rep.comparison.higher_bid, rep.comparison.n_options, rep.comparison.lower_ask, rep.comparison.n_options
            );
        }
        Command::Check { common, improvement_paths, inject_fault } => {
            let cfg = resolve(&common)?;
            let opts = CheckOptions { inject_gamma_fault: inject_fault == Some(Fault::Gamma), improvement_paths };
            let report = cmd_check(&cfg, opts, &cfg.output_dir)?;
            for c in &report.checks {
                println!(
                    "{:<28} {:<5} {:>12.4e}  ({})",
                    c.name,
                    if c.pass { "pass" } else { "FAIL" },
                    c.metric,
                    c.detail
                );
            }
            if !report.hard_pass {
                return Ok(EXIT_CHECK_FAILED);
            }
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
