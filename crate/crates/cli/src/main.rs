use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use fedjoint_core::accounting::{
    amplify_poisson, BaseMechanism, MechanismSpec, PrivacyBudget, SubsamplingSpec, DEFAULT_FIXEDPOINT_SCALE,
};
use fedjoint_core::fedsim::{run_experiment, ExperimentConfig};
use fedjoint_core::joint::{calibrate_joint_noise, epochs_to_steps, AccountingPlan, HeterogeneityDescriptor};
use fedjoint_core::oracles::{renyi_gaussian_numeric, renyi_skellam_numeric, renyi_subsampled_gaussian_numeric};
use fedjoint_core::report::{accounting_report, AccountingReport};
use fedjoint_core::repro::{render_table1, reproduce_table1};

#[derive(Parser)]
#[command(name = "fedjoint", version, about = "Joint privacy accounting and simulation for cross-silo federated DP-SGD")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Account a training plan and print (ε, δ).
    Account(AccountArgs),
    /// Find the per-client noise multiplier meeting a target ε.
    Calibrate(CalibrateArgs),
    /// Run a federated training experiment from a TOML config.
    Simulate(SimulateArgs),
    /// Reproduce the averaged-models privacy table.
    Table1(Table1Args),
    /// Compare closed-form RDP against the numeric Rényi oracle.
    Oracle(OracleArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Mech {
    Gaussian,
    Skellam,
}

#[derive(Args)]
struct PlanArgs {
    #[arg(long, value_enum, default_value = "skellam")]
    mech: Mech,
    /// Clipping norm C.
    #[arg(long, default_value_t = 1.0)]
    clip: f64,
    /// Number of clients N.
    #[arg(long, default_value_t = 1)]
    clients: u32,
    /// Local steps per round S.
    #[arg(long, conflicts_with = "epochs")]
    steps: Option<u32>,
    /// Local epochs per round (epochs × round(1/q) steps).
    #[arg(long)]
    epochs: Option<u32>,
    /// Rounds T.
    #[arg(long, default_value_t = 1)]
    rounds: u32,
    /// Poisson sampling rate.
    #[arg(long)]
    q: f64,
    #[arg(long, default_value_t = 1e-5)]
    delta: f64,
    /// JSON or TOML file describing per-client clips, noise, learning rates or fusion.
    #[arg(long)]
    heterogeneity: Option<PathBuf>,
    /// Fixed-point scale s (Skellam).
    #[arg(long, default_value_t = DEFAULT_FIXEDPOINT_SCALE)]
    scale: u64,
    /// Model dimension d (Skellam L1 bound).
    #[arg(long, default_value_t = 1)]
    dim: usize,
    /// Also report the noise needed to tolerate this many colluding clients.
    #[arg(long)]
    colluders: Option<u32>,
    /// Write the JSON report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AccountArgs {
    /// Per-client noise multiplier σ.
    #[arg(long)]
    sigma: f64,
    #[command(flatten)]
    plan: PlanArgs,
}

#[derive(Args)]
struct CalibrateArgs {
    /// Target ε.
    #[arg(long = "target-eps")]
    target_eps: f64,
    #[command(flatten)]
    plan: PlanArgs,
}

#[derive(Args)]
struct SimulateArgs {
    /// Experiment config (TOML).
    config: PathBuf,
    /// Directory for metrics.csv and report.json.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    /// Run seed (overrides the config).
    #[arg(long, env = "FEDJOINT_SEED")]
    seed: Option<u64>,
    #[arg(long)]
    rounds: Option<u32>,
    #[arg(long, conflicts_with = "local_epochs")]
    local_steps: Option<u32>,
    #[arg(long)]
    local_epochs: Option<u32>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    sampling_rate: Option<f64>,
    #[arg(long, conflicts_with = "target_epsilon")]
    noise_multiplier: Option<f64>,
    #[arg(long)]
    target_epsilon: Option<f64>,
}

#[derive(Args)]
struct Table1Args {
    /// Write the rows as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long, value_enum, default_value = "gaussian")]
    mech: Mech,
    /// Gaussian noise std.
    #[arg(long, default_value_t = 1.0)]
    std: f64,
    /// Skellam Poisson parameter μ.
    #[arg(long, default_value_t = 10.0)]
    mu: f64,
    /// Sensitivity (integer for Skellam).
    #[arg(long, default_value_t = 1.0)]
    sensitivity: f64,
    /// Poisson sampling rate (Gaussian only).
    #[arg(long, default_value_t = 1.0)]
    q: f64,
    /// Orders to compare.
    #[arg(long, value_delimiter = ',', default_values_t = vec![2u32, 4, 8, 16, 32])]
    orders: Vec<u32>,
}

fn read_heterogeneity(path: &Path) -> Result<HeterogeneityDescriptor> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let parsed = if path.extension().is_some_and(|e| e == "toml") {
        toml::from_str(&text).map_err(anyhow::Error::from)
    } else {
        serde_json::from_str(&text).map_err(anyhow::Error::from)
    };
    parsed.with_context(|| format!("parsing {}", path.display()))
}

fn build_plan(args: &PlanArgs, sigma: f64) -> Result<AccountingPlan> {
    let steps = match (args.steps, args.epochs) {
        (Some(s), _) => s,
        (None, Some(e)) => epochs_to_steps(e, args.q)?,
        (None, None) => 1,
    };
    let mechanism = match args.mech {
        Mech::Gaussian => MechanismSpec::gaussian(sigma, args.clip),
        Mech::Skellam => MechanismSpec::skellam(sigma, args.clip, args.scale, args.dim),
    };
    let mut plan = AccountingPlan::homogeneous(args.clients, steps, args.rounds, args.q, mechanism);
    if let Some(path) = &args.heterogeneity {
        plan.heterogeneity = Some(read_heterogeneity(path)?);
    }
    plan.validate()?;
    Ok(plan)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(value)?;
    std::fs::write(path, json + "\n").with_context(|| format!("writing {}", path.display()))
}

fn cmd_account(args: &AccountArgs) -> Result<()> {
    let plan = build_plan(&args.plan, args.sigma)?;
    let report = accounting_report(&plan, args.plan.delta, args.plan.colluders)?;
    print!("{}", report.summary());
    if let Some(out) = &args.plan.out {
        write_json(out, &report)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct CalibrationOutput {
    target_epsilon: f64,
    sigma_per_client: f64,
    sigma_total: f64,
    report: AccountingReport,
}

fn cmd_calibrate(args: &CalibrateArgs) -> Result<()> {
    let plan = build_plan(&args.plan, 1.0)?;
    let target = PrivacyBudget::new(args.target_eps, args.plan.delta)?;
    let sigma = calibrate_joint_noise(&plan, target)?;
    let report = accounting_report(&plan.with_noise_multiplier(sigma), args.plan.delta, args.plan.colluders)?;
    println!("sigma per client = {sigma:.6}");
    print!("{}", report.summary());
    if let Some(out) = &args.plan.out {
        write_json(
            out,
            &CalibrationOutput {
                target_epsilon: args.target_eps,
                sigma_per_client: sigma,
                sigma_total: report.sigma_total,
                report,
            },
        )?;
    }
    Ok(())
}

fn cmd_simulate(args: &SimulateArgs) -> Result<()> {
    let mut config = ExperimentConfig::from_file(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(r) = args.rounds {
        config.rounds = r;
    }
    if let Some(s) = args.local_steps {
        config.training.local_steps = Some(s);
        config.training.local_epochs = None;
    }
    if let Some(e) = args.local_epochs {
        config.training.local_epochs = Some(e);
        config.training.local_steps = None;
    }
    if let Some(lr) = args.lr {
        config.training.lr = lr;
    }
    if let Some(q) = args.sampling_rate {
        config.training.sampling_rate = q;
    }
    if let Some(s) = args.noise_multiplier {
        config.privacy.noise_multiplier = Some(s);
        config.privacy.target_epsilon = None;
    }
    if let Some(e) = args.target_epsilon {
        config.privacy.target_epsilon = Some(e);
        config.privacy.noise_multiplier = None;
    }
    let outcome = run_experiment(&config, &args.out_dir)?;
    let r = &outcome.report;
    println!(
        "{} rounds, {} clients, {} local steps, sigma = {:.6}",
        config.rounds,
        r.client_sizes.len(),
        r.local_steps,
        r.noise_multiplier
    );
    match (r.final_accuracy, r.best_accuracy, r.best_round) {
        (Some(fin), Some(best), Some(round)) => println!(
            "final accuracy = {fin:.4}, best = {best:.4} (round {round}), majority baseline = {:.4}",
            r.majority_baseline
        ),
        _ => println!("no rounds run"),
    }
    println!("epsilon spent = {:.6} at delta = {:e}", r.eps_spent, config.privacy.delta);
    println!("wrote {}", args.out_dir.join("metrics.csv").display());
    Ok(())
}

fn cmd_table1(args: &Table1Args) -> Result<()> {
    let rows = reproduce_table1()?;
    print!("{}", render_table1(&rows));
    if let Some(out) = &args.out {
        write_json(out, &rows)?;
    }
    Ok(())
}

fn cmd_oracle(args: &OracleArgs) -> Result<()> {
    if args.orders.iter().any(|&a| a < 2) {
        bail!("orders must be >= 2");
    }
    println!("{:>6} {:>16} {:>16} {:>12}", "order", "closed_form", "numeric", "gap");
    match args.mech {
        Mech::Gaussian => {
            let base = BaseMechanism::Gaussian {
                noise_std: args.std,
                sensitivity: args.sensitivity,
            };
            let closed = amplify_poisson(|a| base.epsilon(a), SubsamplingSpec::new(args.q)?, &args.orders)?;
            for (order, c) in closed.iter() {
                let numeric = if args.q == 1.0 {
                    renyi_gaussian_numeric(args.sensitivity, args.std, f64::from(order))?
                } else {
                    renyi_subsampled_gaussian_numeric(args.sensitivity, args.std, args.q, f64::from(order))?
                };
                println!("{order:>6} {c:>16.10} {numeric:>16.10} {:>12.3e}", c - numeric);
            }
        }
        Mech::Skellam => {
            if args.sensitivity.fract() != 0.0 {
                bail!("Skellam sensitivity must be an integer");
            }
            let shift = args.sensitivity as i64;
            let base = BaseMechanism::Skellam {
                mu: args.mu,
                l2: args.sensitivity.abs(),
                l1: args.sensitivity.abs(),
            };
            for &order in &args.orders {
                let c = base.epsilon(order);
                let numeric = renyi_skellam_numeric(shift, args.mu, order)?;
                println!("{order:>6} {c:>16.10} {numeric:>16.10} {:>12.3e}", c - numeric);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Account(a) => cmd_account(a),
        Command::Calibrate(a) => cmd_calibrate(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Table1(a) => cmd_table1(a),
        Command::Oracle(a) => cmd_oracle(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
