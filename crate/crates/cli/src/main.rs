use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use diazoflow::calibration::{
    self, CalibrationError, Experiment, FitReport, Observable, OptimizerSettings,
};
use diazoflow::dataio::{
    self, bundled, celsius_to_kelvin, ReactorConfig, Setup, SimulationInputs, PA_PER_BAR,
};
use diazoflow::kinetics::{DecompositionMode, KineticParameters};
use diazoflow::pfr;
use diazoflow::validation::{self, CrossValSettings, FoldScheme, ValidationError};

/// Exit status classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Usage = 1,
    Data = 2,
    Numerical = 3,
}

#[derive(Debug)]
struct Failure {
    kind: Kind,
    error: anyhow::Error,
}

type CliResult<T> = Result<T, Failure>;

trait Classify<T> {
    fn kind(self, kind: Kind) -> CliResult<T>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn kind(self, kind: Kind) -> CliResult<T> {
        self.map_err(|e| Failure {
            kind,
            error: e.into(),
        })
    }
}

fn calibration_kind(e: &CalibrationError) -> Kind {
    match e {
        CalibrationError::Solve { .. } | CalibrationError::AllStartsFailed { .. } => {
            Kind::Numerical
        }
        CalibrationError::Data(_) => Kind::Data,
        CalibrationError::InvalidSettings(_) => Kind::Usage,
    }
}

fn validation_kind(e: &ValidationError) -> Kind {
    match e {
        ValidationError::Calibration(c) => calibration_kind(c),
        ValidationError::InvalidFolds { .. } => Kind::Usage,
        ValidationError::Metric(_) => Kind::Numerical,
        ValidationError::TooFewExperiments(_) | ValidationError::Io { .. } => Kind::Data,
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "diazoflow",
    version,
    about = "Grey-box flow reactor model for diazo acetonitrile"
)]
struct Cli {
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Only print warnings and errors to standard error.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Integrate one operating point and write the axial profile.
    Simulate(SimulateArgs),
    /// Calibrate the kinetic parameters.
    Fit(FitArgs),
    /// Leave-one-out (or grouped) cross-validation.
    Crossval(CrossvalArgs),
    /// Write measured and simulated values for every observable.
    Parity(ParityArgs),
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Parameter file (TOML).
    #[arg(long)]
    params: PathBuf,
    /// Reactor file (TOML); the bundled calorimeter when omitted.
    #[arg(long)]
    reactor: Option<PathBuf>,
    /// Temperature [°C].
    #[arg(long, allow_negative_numbers = true)]
    temperature: f64,
    /// Residence time V/Q_in [s].
    #[arg(long)]
    residence_time: f64,
    /// Gauge pressure [bar]; the reactor default when omitted.
    #[arg(long)]
    gauge_pressure: Option<f64>,
    /// Profile CSV.
    #[arg(long, default_value = "profile.csv")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Mixer experiments (CSV). Without --mixer and --calorimeter the
    /// bundled data are used.
    #[arg(long)]
    mixer: Option<PathBuf>,
    /// Calorimeter experiments (CSV).
    #[arg(long)]
    calorimeter: Option<PathBuf>,
    /// Mixer reactor file (TOML); bundled when omitted.
    #[arg(long)]
    mixer_reactor: Option<PathBuf>,
    /// Calorimeter reactor file (TOML); bundled when omitted.
    #[arg(long)]
    calorimeter_reactor: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct OptimizerArgs {
    #[arg(long, default_value = "nn", value_parser = parse_mode)]
    decomposition: DecompositionMode,
    /// λ for band area, heat and gas flow.
    #[arg(long, default_value = "1,1,1", value_parser = parse_weights)]
    weights: [f64; 3],
    /// Random starts.
    #[arg(long, default_value_t = 20, value_parser = clap::value_parser!(u64).range(1..))]
    multistart: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Levenberg–Marquardt iterations per start.
    #[arg(long, default_value_t = 300, value_parser = clap::value_parser!(u64).range(1..))]
    max_iterations: u64,
}

impl OptimizerArgs {
    fn settings(&self) -> OptimizerSettings {
        OptimizerSettings {
            n_starts: self.multistart as usize,
            seed: self.seed,
            max_iterations: self.max_iterations as usize,
            weights: self.weights,
            ..OptimizerSettings::default()
        }
    }
}

#[derive(Args, Debug)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    optimizer: OptimizerArgs,
    /// Fit report (JSON); the fitted parameter file is written next to it
    /// with a `.toml` extension.
    #[arg(long, default_value = "fit_report.json")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct CrossvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    optimizer: OptimizerArgs,
    /// Grouped folds instead of leave-one-out.
    #[arg(long)]
    folds: Option<usize>,
    /// Parameter file used as the first start of every fold.
    #[arg(long)]
    warm_start: Option<PathBuf>,
    /// Fold table (CSV); the full report is written next to it as JSON.
    #[arg(long, default_value = "crossval.csv")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ParityArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Fitted parameter file (TOML).
    #[arg(long)]
    params: PathBuf,
    #[arg(long, default_value = "parity.csv")]
    out: PathBuf,
}

fn parse_mode(s: &str) -> Result<DecompositionMode, String> {
    s.parse()
}

fn parse_weights(s: &str) -> Result<[f64; 3], String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(format!("expected three comma-separated weights, got `{s}`"));
    }
    let mut w = [0.0; 3];
    for (slot, p) in w.iter_mut().zip(parts) {
        let v: f64 = p
            .trim()
            .parse()
            .map_err(|_| format!("invalid weight `{p}`"))?;
        if !(v >= 0.0) || !v.is_finite() {
            return Err(format!(
                "weights must be finite and non-negative, got `{p}`"
            ));
        }
        *slot = v;
    }
    if w.iter().all(|v| *v == 0.0) {
        return Err("at least one weight must be positive".into());
    }
    Ok(w)
}

fn load_reactor(path: Option<&Path>, setup: Setup) -> CliResult<ReactorConfig> {
    let reactor = match path {
        Some(p) => ReactorConfig::load(p).kind(Kind::Data)?,
        None => match setup {
            Setup::Mixer => bundled::mixer_reactor(),
            Setup::Calorimeter => bundled::calorimeter_reactor(),
        },
    };
    if reactor.setup != setup {
        return Err(Failure {
            kind: Kind::Data,
            error: anyhow!(
                "reactor `{}` describes the {} setup, expected {}",
                reactor.name,
                reactor.setup.as_str(),
                setup.as_str()
            ),
        });
    }
    Ok(reactor)
}

fn load_experiments(args: &DataArgs) -> CliResult<Vec<Experiment>> {
    let use_bundled = args.mixer.is_none() && args.calorimeter.is_none();
    let mut out = Vec::new();
    for (setup, path) in [
        (Setup::Mixer, &args.mixer),
        (Setup::Calorimeter, &args.calorimeter),
    ] {
        let records = match (path, use_bundled) {
            (Some(p), _) => dataio::load_experiments(p, setup).kind(Kind::Data)?,
            (None, true) => match setup {
                Setup::Mixer => bundled::mixer_records(),
                Setup::Calorimeter => bundled::calorimeter_records(),
            },
            (None, false) => continue,
        };
        let reactor_path = match setup {
            Setup::Mixer => args.mixer_reactor.as_deref(),
            Setup::Calorimeter => args.calorimeter_reactor.as_deref(),
        };
        let reactor = load_reactor(reactor_path, setup)?;
        out.extend(calibration::experiments_from_records(&records, &reactor).kind(Kind::Data)?);
    }
    if out.is_empty() {
        return Err(Failure {
            kind: Kind::Data,
            error: anyhow!("no experiments to work with"),
        });
    }
    log::info!("{} experiments loaded", out.len());
    Ok(out)
}

fn create(path: &Path) -> CliResult<BufWriter<fs::File>> {
    let file = fs::File::create(path)
        .with_context(|| format!("cannot create {}", path.display()))
        .kind(Kind::Data)?;
    Ok(BufWriter::new(file))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text)
        .with_context(|| format!("cannot write {}", path.display()))
        .kind(Kind::Data)
}

fn simulate(args: &SimulateArgs) -> CliResult<()> {
    let params = KineticParameters::load(&args.params).kind(Kind::Data)?;
    let reactor = match &args.reactor {
        Some(p) => ReactorConfig::load(p).kind(Kind::Data)?,
        None => bundled::calorimeter_reactor(),
    };
    let gauge = args
        .gauge_pressure
        .map(|bar| bar * PA_PER_BAR)
        .unwrap_or(reactor.default_gauge_pressure);
    let inputs = SimulationInputs::at_conditions(
        &reactor,
        celsius_to_kelvin(args.temperature),
        args.residence_time,
        gauge,
    )
    .kind(Kind::Data)?;
    let profile = pfr::solve(&inputs, &params)
        .with_context(|| {
            format!(
                "simulation failed at {} °C, τ = {} s, {} bar gauge",
                args.temperature,
                args.residence_time,
                gauge / PA_PER_BAR
            )
        })
        .kind(Kind::Numerical)?;
    let mut w = create(&args.out)?;
    profile
        .write_csv(&mut w)
        .and_then(|_| w.flush())
        .with_context(|| format!("cannot write {}", args.out.display()))
        .kind(Kind::Data)?;
    log::info!(
        "{} samples written to {} ({} accepted, {} rejected steps)",
        profile.samples.len(),
        args.out.display(),
        profile.stats.accepted_steps,
        profile.stats.rejected_steps
    );
    println!("{}", profile.observables(&params).summary_line());
    Ok(())
}

fn print_fit_summary(report: &FitReport) {
    let c = &report.cost;
    println!(
        "J = {:.6e}  (J1 = {:.6e}, J2 = {:.6e}, J3 = {:.6e}; normalizers {:.6e}, {:.6e}, {:.6e}; weights {:?})",
        c.total, c.terms[0], c.terms[1], c.terms[2], c.normalizers[0], c.normalizers[1], c.normalizers[2], c.weights
    );
    for kind in Observable::ALL {
        if let Some(m) = report.metrics.get(kind) {
            let r2 = m.r_squared.map_or("n/a".to_string(), |v| format!("{v:.4}"));
            println!(
                "{:<10} R² = {:<8} MAE = {:.4}  (n = {})",
                kind.as_str(),
                r2,
                m.mae,
                m.count
            );
        }
    }
}

fn fit(args: &FitArgs) -> CliResult<()> {
    let params_path = args.out.with_extension("toml");
    if params_path == args.out {
        return Err(Failure {
            kind: Kind::Usage,
            error: anyhow!("--out must not end in .toml; the parameter file is written there"),
        });
    }
    let experiments = load_experiments(&args.data)?;
    let settings = args.optimizer.settings();
    log::info!(
        "fitting {} mode with {} starts (seed {})",
        args.optimizer.decomposition,
        settings.n_starts,
        settings.seed
    );
    let report =
        calibration::fit(&experiments, &settings, args.optimizer.decomposition).map_err(|e| {
            Failure {
                kind: calibration_kind(&e),
                error: e.into(),
            }
        })?;
    write_text(&args.out, &report.to_json())?;
    report.kinetics.save(&params_path).kind(Kind::Data)?;
    log::info!(
        "report written to {}, parameters to {} ({:.1} s)",
        args.out.display(),
        params_path.display(),
        report.wall_time_s
    );
    print_fit_summary(&report);
    if !report.converged {
        return Err(Failure {
            kind: Kind::Numerical,
            error: anyhow!(
                "none of the {} starts met a convergence criterion; the best point was still written",
                report.starts.len()
            ),
        });
    }
    Ok(())
}

fn crossval(args: &CrossvalArgs) -> CliResult<()> {
    let json_path = args.out.with_extension("json");
    if json_path == args.out {
        return Err(Failure {
            kind: Kind::Usage,
            error: anyhow!("--out must not end in .json; the full report is written there"),
        });
    }
    let experiments = load_experiments(&args.data)?;
    let mut optimizer = args.optimizer.settings();
    let layout = calibration::ParameterLayout::new(args.optimizer.decomposition);
    if let Some(path) = &args.warm_start {
        let params = KineticParameters::load(path).kind(Kind::Data)?;
        optimizer.warm_start = Some(layout.pack(&params).kind(Kind::Usage)?);
    }
    let settings = CrossValSettings {
        optimizer,
        folds: match args.folds {
            Some(k) => FoldScheme::Grouped(k),
            None => FoldScheme::LeaveOneOut,
        },
    };
    log::info!("cross-validating over {} experiments", experiments.len());
    let report = validation::cross_validate(&experiments, &settings, args.optimizer.decomposition)
        .map_err(|e| Failure {
            kind: validation_kind(&e),
            error: e.into(),
        })?;
    let mut w = create(&args.out)?;
    validation::write_crossval(&mut w, &report)
        .and_then(|_| w.flush())
        .with_context(|| format!("cannot write {}", args.out.display()))
        .kind(Kind::Data)?;
    write_text(&json_path, &report.to_json())?;
    println!(
        "{:<10} {:>12} {:>12} {:>8}",
        "observable", "train_mae", "test_mae", "ratio"
    );
    for kind in Observable::ALL {
        let (train, test) = (
            report.train_mae[kind.index()],
            report.test_mae[kind.index()],
        );
        if let (Some(a), Some(b)) = (train, test) {
            println!(
                "{:<10} {:>12.4} {:>12.4} {:>8.3}",
                kind.as_str(),
                a,
                b,
                b / a
            );
        }
    }
    if report.failed_folds > 0 {
        log::warn!(
            "{} of {} folds failed",
            report.failed_folds,
            report.folds.len()
        );
    }
    Ok(())
}

fn parity(args: &ParityArgs) -> CliResult<()> {
    let params = KineticParameters::load(&args.params).kind(Kind::Data)?;
    let experiments = load_experiments(&args.data)?;
    let rows =
        validation::parity_export(&params, &experiments, &args.out).map_err(|e| Failure {
            kind: validation_kind(&e),
            error: e.into(),
        })?;
    log::info!("{} rows written to {}", rows.len(), args.out.display());
    Ok(())
}

fn run(cli: &Cli) -> CliResult<()> {
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build_global()
            .kind(Kind::Usage)?;
    }
    match &cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Fit(a) => fit(a),
        Command::Crossval(a) => crossval(a),
        Command::Parity(a) => parity(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(Kind::Usage as u8)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.kind as u8)
        }
    }
}
