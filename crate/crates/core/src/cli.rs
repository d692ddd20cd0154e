//! Command-line interface: `run`, `compare`, `fit-energy`, `validate`.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 input error.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::energy::{fit_energy_model_with_report, EnergySample, FitReport};
use crate::report::{PolicyRun, RunReport};
use crate::scenario::ScenarioConfig;
use crate::sim::{run_detailed, DriverPolicy, RunOutput, SimOptions, EVENT_HEADER};
use crate::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUN_FAILURE: i32 = 1;
pub const EXIT_INPUT: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "ecolane", version, about = "Energy-aware lane selection for electric vehicles on signalized roads")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate one policy; writes metrics, event log and explain records.
    Run(RunArgs),
    /// Simulate all three policies on the same seed and write a report.
    Compare(CompareArgs),
    /// Fit the quadratic energy model to a `v,a,power` sample table.
    FitEnergy(FitArgs),
    /// Parse and validate a scenario file.
    Validate(ValidateArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PolicyArg {
    EcoLane,
    EcoKeep,
    Human,
}

impl From<PolicyArg> for DriverPolicy {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::EcoLane => DriverPolicy::EcoLane,
            PolicyArg::EcoKeep => DriverPolicy::EcoKeep,
            PolicyArg::Human => DriverPolicy::Human,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct ScenarioArgs {
    /// Scenario file (TOML); the built-in reference scenario if omitted.
    pub scenario: Option<PathBuf>,
    /// Seed for the scenario jitter.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Auxiliary power draw (W).
    #[arg(long)]
    pub aux_power: Option<f64>,
    #[arg(long)]
    pub laps: Option<u32>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    #[arg(long, value_enum, default_value = "eco-lane")]
    pub policy: PolicyArg,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Include graph paths in the explain records.
    #[arg(long)]
    pub explain: bool,
    /// Replace the ego controller by an unsafe one (testing aid).
    #[arg(long, hide = true)]
    pub broken_policy: bool,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long)]
    pub explain: bool,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// CSV with header `v,a,power` (m/s, m/s^2, W).
    pub samples: PathBuf,
    /// Output parameter file (TOML).
    #[arg(long, default_value = "energy_params.toml")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    pub scenario: PathBuf,
}

/// Runs a parsed command line and returns the process exit code.
pub fn execute(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::Run(args) => cmd_run(&args).map(|_| EXIT_OK),
        Command::Compare(args) => cmd_compare(&args).map(|r| if r.incomplete { EXIT_RUN_FAILURE } else { EXIT_OK }),
        Command::FitEnergy(args) => cmd_fit_energy(&args.samples, &args.out).map(|_| EXIT_OK),
        Command::Validate(args) => cmd_validate(&args.scenario).map(|_| EXIT_OK),
    };
    match result {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            exit_code(&err)
        }
    }
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::RunFailure(_) | Error::Io(_) => EXIT_RUN_FAILURE,
        Error::InvalidState(_)
        | Error::Calibration(_)
        | Error::Graph(_)
        | Error::ScenarioParse(_)
        | Error::ScenarioInvalid(_) => EXIT_INPUT,
    }
}

fn read_input(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::ScenarioParse(format!("{}: {e}", path.display())))
}

/// Loads the scenario and applies command-line overrides.
pub fn load_scenario(args: &ScenarioArgs) -> Result<ScenarioConfig> {
    let mut config = match &args.scenario {
        Some(path) => ScenarioConfig::from_toml_str(&read_input(path)?).map_err(|e| match e {
            Error::ScenarioParse(msg) => Error::ScenarioParse(format!("{}: {msg}", path.display())),
            other => other,
        })?,
        None => ScenarioConfig::reference(),
    };
    if let Some(seed) = args.seed {
        config.rng_seed = seed;
    }
    if let Some(aux) = args.aux_power {
        config.aux_power = aux;
    }
    if let Some(laps) = args.laps {
        config.laps = laps;
    }
    config.validate()?;
    Ok(config)
}

fn write_run_files(dir: &Path, out: &RunOutput) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut metrics = serde_json::to_string_pretty(&out.metrics).expect("metrics serialize");
    metrics.push('\n');
    fs::write(dir.join("metrics.json"), metrics)?;

    let mut events = std::io::BufWriter::new(fs::File::create(dir.join("events.csv"))?);
    writeln!(events, "{EVENT_HEADER}")?;
    for e in &out.events {
        writeln!(events, "{}", e.csv_row())?;
    }
    events.flush()?;

    let mut explain = std::io::BufWriter::new(fs::File::create(dir.join("explain.jsonl"))?);
    for rec in &out.explain {
        writeln!(explain, "{}", serde_json::to_string(rec).expect("explain record serializes"))?;
    }
    explain.flush()?;
    Ok(())
}

pub fn cmd_run(args: &RunArgs) -> Result<RunOutput> {
    let config = load_scenario(&args.scenario)?;
    let options = SimOptions { explain: true, explain_graph: args.explain, broken_policy: args.broken_policy };
    let out = run_detailed(&config, args.policy.into(), options)?;
    write_run_files(&args.out, &out)?;
    let m = &out.metrics;
    println!(
        "{}: trip {:.1} s, motion {:.2} Wh, total {:.2} Wh, stops {}, lane changes {}",
        out.policy.label(),
        m.trip_time,
        m.motion_energy,
        m.total_energy,
        m.stops,
        m.lane_changes
    );
    Ok(out)
}

pub fn cmd_compare(args: &CompareArgs) -> Result<RunReport> {
    let config = load_scenario(&args.scenario)?;
    let options = SimOptions { explain: true, explain_graph: args.explain, broken_policy: false };
    fs::create_dir_all(&args.out)?;
    let mut runs = Vec::with_capacity(3);
    for policy in DriverPolicy::ALL {
        let run = match run_detailed(&config, policy, options) {
            Ok(out) => {
                write_run_files(&args.out.join(policy.slug()), &out)?;
                PolicyRun {
                    policy,
                    metrics: Some(out.metrics),
                    error: None,
                    event_log: Some(format!("{}/events.csv", policy.slug())),
                }
            }
            Err(Error::RunFailure(msg)) => {
                eprintln!("{}: run failed: {msg}", policy.label());
                PolicyRun { policy, metrics: None, error: Some(msg), event_log: None }
            }
            Err(other) => return Err(other),
        };
        runs.push(run);
    }
    let report = RunReport::new(config, runs);
    fs::write(args.out.join("report.json"), report.to_json())?;
    fs::write(args.out.join("summary.csv"), report.summary_csv())?;
    print!("{}", report.summary_csv());
    for s in &report.savings {
        println!(
            "ECO_LANE vs {}: motion {:+.1}%, total {:+.1}%",
            s.baseline.label(),
            s.motion_pct,
            s.total_pct
        );
    }
    if report.incomplete {
        eprintln!("report incomplete: at least one policy run failed");
    }
    Ok(report)
}

pub fn read_samples(path: &Path) -> Result<Vec<EnergySample>> {
    let text = read_input(path)?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).comment(Some(b'#')).from_reader(text.as_bytes());
    reader
        .deserialize()
        .enumerate()
        .map(|(i, row)| row.map_err(|e| Error::ScenarioParse(format!("{}: row {}: {e}", path.display(), i + 1))))
        .collect()
}

pub fn cmd_fit_energy(samples: &Path, out: &Path) -> Result<FitReport> {
    let data = read_samples(samples)?;
    let report = fit_energy_model_with_report(&data)?;
    let text = toml::to_string(&report).map_err(|e| Error::Calibration(e.to_string()))?;
    fs::write(out, text)?;
    println!(
        "fitted {} samples: mean abs relative error {:.4}, rms {:.2} W{}",
        data.len(),
        report.residuals.mean_abs_rel_error,
        report.residuals.rms_error,
        if report.projected { " (P projected to positive definite)" } else { "" }
    );
    Ok(report)
}

pub fn cmd_validate(path: &Path) -> Result<ScenarioConfig> {
    let config = load_scenario(&ScenarioArgs { scenario: Some(path.to_path_buf()), seed: None, aux_power: None, laps: None })?;
    println!(
        "{}: ok ({} lights, {} vehicles, {} laps, {:.0} m)",
        path.display(),
        config.lights.len(),
        config.npc_spawn.len(),
        config.laps,
        config.route_total()
    );
    Ok(config)
}
