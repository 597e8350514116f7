//! Command-line front end.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use crate::energymodel::optimum_state;
use crate::persistence::{load_snapshot, process_path, save_snapshot, PersistError, RestartMode, Snapshot};
use crate::report::{self, SweepRow};
use crate::simulator::{first_hit, run_processes, ExperimentResult, ExperimentSpec, ProcessSim, SimError};

#[derive(Debug, Parser)]
#[command(name = "freqtune", version, about = "Simulated online core/uncore frequency self-tuning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one experiment and write trajectory.csv, heatmap.csv and summary.json.
    Run(RunArgs),
    /// Run one experiment per hyperparameter value and write sweep.csv.
    Sweep(SweepArgs),
    /// Print each region's optimum and the savings a perfect tuner would reach.
    Oracle {
        #[arg(long)]
        spec: PathBuf,
    },
}

#[derive(Debug, Args, Clone)]
pub struct Overrides {
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long, env = "FREQTUNE_SEED")]
    pub seed: Option<u64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub processes: Option<usize>,
    #[arg(long)]
    pub iterations: Option<u64>,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub common: Overrides,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_parser = parse_restart)]
    pub restart: Option<RestartMode>,
    /// Base path for per-process snapshot files (`<stem>-p<index>.<ext>`).
    #[arg(long)]
    pub snapshot: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SweepParam {
    Epsilon,
    Alpha,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: Overrides,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "epsilon")]
    pub param: SweepParam,
    /// Comma-separated values.
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    pub values: Vec<f64>,
    /// Seeds per value; savings and steps are medians across seeds.
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
}

fn parse_restart(s: &str) -> Result<RestartMode, String> {
    s.parse()
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Config(_) => ExitCode::from(1),
            CliError::Runtime(_) => ExitCode::from(2),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Invalid(_) | SimError::Grid(_) | SimError::Energy(_) => CliError::Config(e.to_string()),
            SimError::Learner(ref l) if matches!(l, crate::learner::LearnerError::BadHyperparameter { .. }) => {
                CliError::Config(e.to_string())
            }
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<PersistError> for CliError {
    fn from(e: PersistError) -> Self {
        match e {
            PersistError::Sim(s) => s.into(),
            PersistError::Io { .. } => CliError::Runtime(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

fn runtime_io(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Runtime(format!("{}: {e}", path.display()))
}

/// Reads the spec, applies overrides and validates the result.
pub fn load_spec(o: &Overrides) -> Result<ExperimentSpec, CliError> {
    let text = fs::read_to_string(&o.spec).map_err(|e| CliError::Config(format!("{}: {e}", o.spec.display())))?;
    let mut spec: ExperimentSpec =
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", o.spec.display())))?;
    if let Some(v) = o.seed {
        spec.seed = v;
    }
    if let Some(v) = o.alpha {
        spec.learner.alpha = v;
    }
    if let Some(v) = o.gamma {
        spec.learner.gamma = v;
    }
    if let Some(v) = o.epsilon {
        spec.learner.epsilon = v;
    }
    if let Some(v) = o.processes {
        spec.processes = v;
    }
    if let Some(v) = o.iterations {
        spec.iterations = v;
    }
    spec.validate()?;
    Ok(spec)
}

fn note(quiet: bool, msg: impl AsRef<str>) {
    if !quiet {
        eprintln!("{}", msg.as_ref());
    }
}

pub fn cmd_run(args: &RunArgs) -> Result<(), CliError> {
    let mut spec = load_spec(&args.common)?;
    if let Some(mode) = args.restart {
        spec.restart = mode;
    }
    let quiet = args.common.quiet;

    let sims = (0..spec.processes)
        .map(|p| match &args.snapshot {
            Some(base) => Ok(load_snapshot(&process_path(base, p), spec.restart, &spec, p)?),
            None => Ok(ProcessSim::fresh(&spec, p)?),
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    note(
        quiet,
        format!(
            "running {} process(es) x {} iterations from iteration {} (restart: {:?})",
            spec.processes,
            spec.iterations,
            sims[0].iterations_done,
            spec.restart
        ),
    );

    let (result, sims) = run_processes(&spec, sims)?;

    fs::create_dir_all(&args.out).map_err(runtime_io(&args.out))?;
    write_outputs(&args.out, &spec, &result, &sims)?;
    if let Some(base) = &args.snapshot {
        for sim in &sims {
            save_snapshot(&Snapshot::capture(&spec, sim), &process_path(base, sim.index))?;
        }
    }
    note(
        quiet,
        format!(
            "savings {:.2}% (tuned {:.1} J, baseline {:.1} J), runtime overhead {:.2}%",
            100.0 * result.savings_fraction,
            result.tuned_energy_j,
            result.baseline_energy_j,
            100.0 * result.runtime_overhead_fraction
        ),
    );
    Ok(())
}

pub fn write_outputs(
    out: &Path,
    spec: &ExperimentSpec,
    result: &ExperimentResult,
    sims: &[ProcessSim],
) -> Result<(), CliError> {
    let write = |name: &str, body: &[u8]| {
        let path = out.join(name);
        fs::write(&path, body).map_err(runtime_io(&path))
    };
    write("trajectory.csv", report::trajectory_csv(result, &spec.grid).as_bytes())?;
    write("heatmap.csv", report::heatmap_csv(result, sims, &spec.grid).as_bytes())?;
    let summary = report::summarize(spec, result);
    let mut json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    json.push('\n');
    write("summary.json", json.as_bytes())
}

fn median(xs: &mut [f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    Some(if n % 2 == 1 { xs[n / 2] } else { 0.5 * (xs[n / 2 - 1] + xs[n / 2]) })
}

/// Mean step at which tuners first came within one move of their region's
/// optimum; `None` if none did.
pub fn steps_to_convergence(spec: &ExperimentSpec, result: &ExperimentResult) -> Option<f64> {
    let mut hits = Vec::new();
    for (ri, region) in spec.regions.iter().enumerate() {
        let rts = region.rts();
        let (opt, _) = optimum_state(&spec.region_at(ri, 0), &spec.grid, spec.meter.static_offset_w);
        for p in &result.processes {
            if let Some(step) = first_hit(p.records_for(&rts), opt, 1) {
                hits.push(step as f64);
            }
        }
    }
    (!hits.is_empty()).then(|| hits.iter().sum::<f64>() / hits.len() as f64)
}

pub fn sweep(base: &ExperimentSpec, param: SweepParam, values: &[f64], seeds: u64) -> Result<Vec<SweepRow>, CliError> {
    if values.is_empty() {
        return Err(CliError::Config("no sweep values given".into()));
    }
    if seeds == 0 {
        return Err(CliError::Config("--seeds must be at least 1".into()));
    }
    let mut rows = Vec::new();
    for &value in values {
        let mut spec = base.clone();
        match param {
            SweepParam::Epsilon => spec.learner.epsilon = value,
            SweepParam::Alpha => spec.learner.alpha = value,
        }
        spec.validate()?;
        let mut savings = Vec::new();
        let mut steps = Vec::new();
        for k in 0..seeds {
            spec.seed = base.seed.wrapping_add(k);
            let sims = (0..spec.processes)
                .map(|p| ProcessSim::fresh(&spec, p))
                .collect::<Result<Vec<_>, _>>()?;
            let (result, _) = run_processes(&spec, sims)?;
            savings.push(result.savings_fraction);
            if let Some(s) = steps_to_convergence(&spec, &result) {
                steps.push(s);
            }
        }
        rows.push(SweepRow {
            value,
            savings: median(&mut savings).expect("at least one seed"),
            steps_to_convergence: median(&mut steps),
        });
    }
    Ok(rows)
}

pub fn cmd_sweep(args: &SweepArgs) -> Result<(), CliError> {
    let spec = load_spec(&args.common)?;
    let rows = sweep(&spec, args.param, &args.values, args.seeds)?;
    fs::create_dir_all(&args.out).map_err(runtime_io(&args.out))?;
    let path = args.out.join("sweep.csv");
    fs::write(&path, report::sweep_csv(&rows)).map_err(runtime_io(&path))?;
    for r in &rows {
        note(
            args.common.quiet,
            format!("{:?}={}: savings {:.2}%", args.param, r.value, 100.0 * r.savings),
        );
    }
    Ok(())
}

pub fn cmd_oracle(spec_path: &Path) -> Result<(), CliError> {
    let text = fs::read_to_string(spec_path).map_err(|e| CliError::Config(format!("{}: {e}", spec_path.display())))?;
    let spec = ExperimentSpec::from_json(&text)?;
    for row in report::oracle_rows(&spec)? {
        println!(
            "{}\toptimum core {:.3} GHz uncore {:.3} GHz\t{:.3} J (default {:.3} J)\tsavings bound {:.4}",
            row.rts,
            row.optimum.core_ghz,
            row.optimum.uncore_ghz,
            row.optimum_energy_j,
            row.default_energy_j,
            row.savings_bound
        );
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Oracle { spec } => cmd_oracle(spec),
    }
}
