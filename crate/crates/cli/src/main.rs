//! `gfl`: experiment runner for the privatized graph federated learning
//! simulator. Subcommands: `run` (sweep a config file and write metrics
//! CSVs), `validate-graph` (check the combination matrix), `account`
//! (privacy accountant arithmetic), `diagnostics` (measured theory constants
//! and the coupled-run sensitivity check).

mod config;
mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use gfl_core::diagnostics::{
    compute_constants, measure_gradient_bound, per_agent_optima, sensitivity_experiment,
    substitute_first_shard,
};
use gfl_core::engine::AgentSchedule;
use gfl_core::privacy::{epsilon_of, sigma_for_epsilon, PrivacyAccount};
use gfl_core::tasks::{
    closed_form_optimum, generate_classification, generate_regression, load_csv, numeric_optimum,
    TaskKind,
};
use gfl_core::{build_metropolis, run, validate, CombinationMatrix, FederatedDataset, Loss};

use config::{ConfigError, Experiment, ExperimentFile, TaskSpec};

#[derive(Parser)]
#[command(name = "gfl", about = "Privatized graph federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every sweep point and seed in a config file, writing one metrics
    /// CSV per run plus a manifest.tsv.
    Run(ConfigArg),
    /// Build the combination matrix for a config and print the validation
    /// report (symmetry, stochasticity, mixing rate).
    ValidateGraph(ConfigArg),
    /// Privacy accountant: epsilon from a noise level, or the noise level
    /// needed for a target epsilon.
    Account(AccountArgs),
    /// Measure the convergence-analysis constants on a config's dataset, and
    /// optionally the coupled-run sensitivity trace.
    Diagnostics(DiagnosticsArgs),
}

#[derive(Args)]
struct ConfigArg {
    /// Path to a key = value experiment file.
    config: PathBuf,
}

#[derive(Args)]
struct AccountArgs {
    /// Client step size mu.
    #[arg(long)]
    mu: f64,
    /// Gradient-norm bound B.
    #[arg(long = "B", alias = "b")]
    b: f64,
    /// Iteration count i.
    #[arg(long)]
    i: u64,
    /// Noise standard deviation; prints epsilon(i).
    #[arg(long, conflicts_with = "epsilon")]
    sigma_g: Option<f64>,
    /// Target epsilon; prints the sigma_g achieving it at iteration i.
    #[arg(long)]
    epsilon: Option<f64>,
}

#[derive(Args)]
struct DiagnosticsArgs {
    /// Path to a key = value experiment file.
    config: PathBuf,
    /// Also run the coupled-pair sensitivity experiment.
    #[arg(long)]
    sensitivity: bool,
}

enum CliError {
    Config(ConfigError),
    Runtime(String),
    ValidationFailed,
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e)
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => cmd_run(&args.config),
        Command::ValidateGraph(args) => cmd_validate_graph(&args.config),
        Command::Account(args) => cmd_account(&args),
        Command::Diagnostics(args) => cmd_diagnostics(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Config(e)) => {
            eprintln!("{e}");
            ExitCode::from(2)
        }
        Err(CliError::ValidationFailed) => ExitCode::from(3),
    }
}

fn load_file(path: &Path) -> Result<ExperimentFile, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", path.display())))?;
    Ok(ExperimentFile::parse(&text)?)
}

fn build_dataset(exp: &Experiment, run_seed: u64) -> Result<FederatedDataset, CliError> {
    match &exp.task {
        TaskSpec::Regression { units, agents, samples, dim, seed } => {
            generate_regression(*units, *agents, *samples, *dim, seed.unwrap_or(run_seed))
                .map_err(runtime)
        }
        TaskSpec::Classification { units, agents, samples, dim, shift, test_size, seed } => {
            generate_classification(
                *units,
                *agents,
                *samples,
                *dim,
                *shift,
                *test_size,
                seed.unwrap_or(run_seed),
            )
            .map_err(runtime)
        }
        TaskSpec::Csv { path, units, agents, partition, classification } => {
            let kind = if *classification { TaskKind::Classification } else { TaskKind::Regression };
            load_csv(path, kind, *units, *agents, partition).map_err(runtime)
        }
    }
}

fn loss_for(exp: &Experiment, data: &FederatedDataset) -> Loss {
    match data.task_kind {
        TaskKind::Regression => Loss::quadratic(exp.rho),
        TaskKind::Classification => Loss::logistic(exp.rho),
    }
}

/// Reference optimum for the deviation metrics. Synthetic regression data has
/// a closed form; everything else falls back to full-batch gradient descent,
/// which needs rho > 0 to be well posed (otherwise the columns stay empty).
fn optimum_for(
    exp: &Experiment,
    data: &FederatedDataset,
    loss: &Loss,
) -> Result<Option<gfl_core::nalgebra::DVector<f64>>, CliError> {
    if data.task_kind == TaskKind::Regression && data.ground_truth.is_some() {
        return Ok(Some(closed_form_optimum(data, exp.rho).map_err(runtime)?.w_o));
    }
    if exp.rho > 0.0 {
        return Ok(Some(numeric_optimum(data, loss).map_err(runtime)?));
    }
    Ok(None)
}

fn build_matrix(exp: &Experiment) -> Result<CombinationMatrix, CliError> {
    let topo = exp.graph.build(exp.task.units())?;
    build_metropolis(&topo).map_err(runtime)
}

fn init_threads(exp: &Experiment) {
    if let Some(n) = exp.threads {
        // Fails if a pool already exists (e.g. second call); that's fine.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

/// File stem from the sweep point's parameter values: "mu-0.5_scheme-none".
fn point_slug(overrides: &[(String, String)]) -> String {
    if overrides.is_empty() {
        return "run".to_string();
    }
    overrides
        .iter()
        .map(|(path, value)| {
            let key = path.rsplit('.').next().unwrap_or(path);
            let value: String = value
                .chars()
                .map(|c| if c.is_ascii_alphanumeric() || c == '.' { c } else { '-' })
                .collect();
            format!("{key}-{value}")
        })
        .collect::<Vec<_>>()
        .join("_")
}

fn cmd_run(path: &Path) -> Result<(), CliError> {
    let file = load_file(path)?;
    let mut manifest = output::Manifest::new();
    for point_idx in 0..file.point_count() {
        let overrides = file.point(point_idx);
        let exp = file.experiment_at(&overrides)?;
        init_threads(&exp);
        let a = build_matrix(&exp)?;
        for &seed in &file.seeds {
            let data = build_dataset(&exp, seed)?;
            let loss = loss_for(&exp, &data);
            let w_o = optimum_for(&exp, &data, &loss)?;
            let cfg = exp.train_config(seed);
            let out = run(&cfg, &a, &data, &loss, w_o.as_ref()).map_err(runtime)?;
            let name = format!("{}_seed{seed}.csv", point_slug(&overrides));
            let csv_path = file.output_dir.join(&name);
            output::write_atomic(&csv_path, &output::metrics_csv(&out.metrics))
                .map_err(runtime)?;
            manifest.record(&csv_path, &exp.scheme_kind, &overrides, seed);
            println!("wrote {}", csv_path.display());
        }
    }
    let manifest_path = manifest.write(&file.output_dir).map_err(runtime)?;
    println!("wrote {}", manifest_path.display());
    Ok(())
}

fn cmd_validate_graph(path: &Path) -> Result<(), CliError> {
    let file = load_file(path)?;
    let exp = file.experiment_at(&file.point(0))?;
    let a = match build_matrix(&exp) {
        Ok(a) => a,
        // A parseable but disconnected graph is a validation failure, not a
        // config error.
        Err(CliError::Config(e)) if e.message.starts_with("graph is disconnected") => {
            println!("connectivity          FAIL  {}", e.message);
            return Err(CliError::ValidationFailed);
        }
        Err(e) => return Err(e),
    };
    let report = validate(&a);
    for line in report.lines() {
        println!("{line}");
    }
    if report.pass {
        Ok(())
    } else {
        Err(CliError::ValidationFailed)
    }
}

/// Prints the privacy loss schedule for a fixed noise level, or the noise
/// schedule meeting a fixed epsilon target at each iteration count.
fn cmd_account(args: &AccountArgs) -> Result<(), CliError> {
    match (args.sigma_g, args.epsilon) {
        (Some(sigma_g), None) => {
            let account = PrivacyAccount { mu: args.mu, gradient_bound: args.b, sigma_g };
            println!("i\tepsilon");
            for j in 1..=args.i {
                println!("{j}\t{}", epsilon_of(&account, j));
            }
            Ok(())
        }
        (None, Some(target)) => {
            println!("i\tsigma_g");
            for j in 1..=args.i {
                let sigma = sigma_for_epsilon(args.mu, args.b, j, target).map_err(runtime)?;
                println!("{j}\t{sigma}");
            }
            Ok(())
        }
        _ => Err(CliError::Config(ConfigError {
            field: "account".into(),
            message: "provide exactly one of --sigma-g or --epsilon".into(),
        })),
    }
}

fn cmd_diagnostics(args: &DiagnosticsArgs) -> Result<(), CliError> {
    let file = load_file(&args.config)?;
    let exp = file.experiment_at(&file.point(0))?;
    init_threads(&exp);
    let seed = file.seeds[0];
    let data = build_dataset(&exp, seed)?;
    let loss = loss_for(&exp, &data);
    let a = build_matrix(&exp)?;
    let w_o = optimum_for(&exp, &data, &loss)?.ok_or_else(|| {
        CliError::Config(ConfigError {
            field: "loss.rho".into(),
            message: "diagnostics need a reference optimum; set loss.rho > 0 so the \
                      numeric oracle is well posed"
                .into(),
        })
    })?;
    let cfg = exp.train_config(seed);
    let schedule = AgentSchedule::build(&cfg, &data).map_err(runtime)?;
    let optima = per_agent_optima(&data, &loss).map_err(runtime)?;
    let b = measure_gradient_bound(&cfg, &a, &data, &loss).map_err(runtime)?;
    let constants =
        compute_constants(&data, &loss, &w_o, &optima, &schedule, exp.participants, b)
            .map_err(runtime)?;
    for line in constants.report_lines() {
        println!("{line}");
    }
    if args.sensitivity {
        let prime = substitute_first_shard(&data, seed ^ 0xD1FF);
        let trace = sensitivity_experiment(&cfg, &a, &data, &prime, &loss).map_err(runtime)?;
        let max_div = trace.divergence.iter().fold(0.0_f64, |m, &d| m.max(d));
        println!("sensitivity.max_divergence  {max_div:e}");
        println!(
            "sensitivity.final_bound     {:e}",
            trace.bound.last().copied().unwrap_or(0.0)
        );
        println!(
            "sensitivity.within_bound    {}",
            if trace.within_bound() { "pass" } else { "FAIL" }
        );
        if !trace.within_bound() {
            return Err(CliError::Runtime("sensitivity trace exceeded the bound".into()));
        }
    }
    Ok(())
}
