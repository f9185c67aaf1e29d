//! Command-line front end.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 environment error
//! (probe, harness, file system), 3 internal error. Results go to standard
//! output, diagnostics to standard error.

pub mod config;

use std::ffi::OsString;
use std::io::{self, IsTerminal, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use crate::experiment::{self, ExperimentError, Progress};
use crate::harness::{self, HarnessError};
use crate::probe::{open_probe, EnergyDomain, ProbeError};
use crate::report::{self, Format, ReportError, ReportRequest, Scope};
use crate::sampler::{calibrate_baseline, SamplerError};
use crate::store::{Store, StoreError, DATA_DIR_ENV, DEFAULT_DATA_DIR};

use config::{BackendChoice, BaselineSpec, ConfigError, Settings};

pub const EXIT_OK: u8 = 0;
pub const EXIT_USER: u8 = 1;
pub const EXIT_ENVIRONMENT: u8 = 2;
pub const EXIT_INTERNAL: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "manai", version, about = "Per-test energy profiler for test harnesses")]
pub struct Cli {
    /// Experiment config file.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Result store directory (overrides MANAI_DATA_DIR and the config file).
    #[arg(long, global = true, value_name = "PATH")]
    pub data_dir: Option<PathBuf>,
    /// Disable ANSI colors.
    #[arg(long, global = true)]
    pub no_color: bool,
    /// More log output on standard error (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Show the energy probe, its domains and whether the counters are readable.
    ProbeCheck(ProbeArgs),
    /// List the tests the harness declares.
    List(HarnessArgs),
    /// Run an energy experiment and store the results.
    Run(RunArgs),
    /// Render stored results.
    Report(ReportArgs),
    /// Compare two stored revisions.
    Compare(CompareArgs),
    /// Measure idle power for later subtraction.
    Baseline(BaselineArgs),
}

#[derive(Debug, Default, Args)]
pub struct HarnessArgs {
    /// Harness program and arguments, shell-quoted.
    #[arg(long = "harness", value_name = "COMMAND")]
    pub command: Option<String>,
    /// Arguments that make the harness list its tests.
    #[arg(long, value_name = "ARGS", allow_hyphen_values = true)]
    pub list_args: Option<String>,
    /// Directory the harness runs in.
    #[arg(long, value_name = "PATH")]
    pub working_dir: Option<PathBuf>,
    /// Per-process timeout in seconds.
    #[arg(long, value_name = "SECS")]
    pub timeout: Option<f64>,
    /// Extra environment for the harness (repeatable).
    #[arg(long, value_name = "KEY=VALUE")]
    pub env: Vec<String>,
}

#[derive(Debug, Default, Args)]
pub struct ProbeArgs {
    /// `rapl` or `simulated`.
    #[arg(long, value_name = "BACKEND")]
    pub probe: Option<BackendChoice>,
    /// Simulation scenario (implies --probe simulated unless given).
    #[arg(long, value_name = "PATH")]
    pub scenario: Option<PathBuf>,
    /// Powercap sysfs root for the rapl backend.
    #[arg(long, value_name = "PATH")]
    pub powercap_root: Option<PathBuf>,
    /// Counter refresh interval of the rapl backend.
    #[arg(long, value_name = "NS")]
    pub update_interval_ns: Option<u64>,
    /// `real` or `virtual` (virtual time reported by a cooperating harness).
    #[arg(long, value_name = "MODE")]
    pub clock: Option<experiment::ClockMode>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub harness: HarnessArgs,
    #[command(flatten)]
    pub probe: ProbeArgs,
    /// Probe polls per second.
    #[arg(long, value_name = "HZ")]
    pub rate: Option<f64>,
    /// Executions per test.
    #[arg(long, value_name = "N")]
    pub iterations: Option<u32>,
    /// Tests to run, comma separated (default: all discovered).
    #[arg(long, value_name = "ID,...")]
    pub select: Option<String>,
    /// Revision label (default: git HEAD of the working directory).
    #[arg(long, value_name = "LABEL")]
    pub revision: Option<String>,
    /// `off`, `calibrate:<secs>` or `fixed:<profile.json>`.
    #[arg(long, value_name = "MODE")]
    pub baseline: Option<BaselineSpec>,
    /// Print the effective configuration and exit.
    #[arg(long)]
    pub dry_run: bool,
    #[command(flatten)]
    pub render: RenderArgs,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    /// Domains to show, comma separated (default: all recorded).
    #[arg(long, value_name = "DOMAIN,...")]
    pub domains: Option<String>,
    /// Domain for bar charts and sparklines.
    #[arg(long, value_name = "DOMAIN", default_value = "package-0")]
    pub highlight: EnergyDomain,
    /// Relative change that counts as an increase or decrease.
    #[arg(long, value_name = "FRACTION", default_value_t = report::DEFAULT_TREND_THRESHOLD)]
    pub trend_threshold: f64,
    /// Terminal width (default: $COLUMNS or 100).
    #[arg(long, value_name = "COLS")]
    pub width: Option<usize>,
}

#[derive(Debug, Args)]
pub struct OutputArgs {
    #[arg(long, value_name = "FORMAT", default_value = "term")]
    pub format: Format,
    /// Write to a file instead of standard output.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Revision to summarize (default: newest record).
    #[arg(long, value_name = "LABEL", conflicts_with = "history")]
    pub revision: Option<String>,
    /// Show the evolution of tests across revisions.
    #[arg(long)]
    pub history: bool,
    /// Tests for --history, comma separated (default: all).
    #[arg(long, value_name = "ID,...", requires = "history")]
    pub select: Option<String>,
    /// Keep only the most recent N records in --history.
    #[arg(long, value_name = "N", requires = "history")]
    pub limit: Option<usize>,
    #[command(flatten)]
    pub output: OutputArgs,
    #[command(flatten)]
    pub render: RenderArgs,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    pub base: String,
    pub head: String,
    #[command(flatten)]
    pub output: OutputArgs,
    #[command(flatten)]
    pub render: RenderArgs,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    #[command(flatten)]
    pub probe: ProbeArgs,
    /// Calibration length in seconds (at least 1).
    #[arg(long, value_name = "SECS", default_value_t = 5.0)]
    pub duration: f64,
    /// Write the profile as JSON for `--baseline fixed:<path>`.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

/// Entry point used by the `manai` binary.
pub fn main() -> ExitCode {
    ExitCode::from(run_with_args(std::env::args_os()))
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_with_args<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USER } else { EXIT_OK };
        }
    };
    init_logging(cli.verbose);
    match std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| dispatch(&cli))) {
        Ok(Ok(())) => EXIT_OK,
        Ok(Err(e)) if is_broken_pipe(&e) => EXIT_OK,
        Ok(Err(e)) => {
            let code = exit_code(&e);
            if code != EXIT_OK {
                eprintln!("error: {e:#}");
            }
            code
        }
        Err(_) => {
            eprintln!("error: internal error (see message above); please report this");
            EXIT_INTERNAL
        }
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .try_init();
}

/// A closed standard output (e.g. piped into `head`) is not a failure.
fn is_broken_pipe(err: &anyhow::Error) -> bool {
    err.chain()
        .filter_map(|c| c.downcast_ref::<io::Error>())
        .any(|e| e.kind() == io::ErrorKind::BrokenPipe)
}

/// Maps an error chain onto the exit-code contract.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() || cause.is::<clap::Error>() {
            return EXIT_USER;
        }
        if let Some(e) = cause.downcast_ref::<ExperimentError>() {
            return match e {
                ExperimentError::InvalidConfig(_) | ExperimentError::EmptySelection => EXIT_USER,
                ExperimentError::Probe(_) | ExperimentError::Harness(_) => EXIT_ENVIRONMENT,
                ExperimentError::Sampler(e) => sampler_code(e),
                ExperimentError::Store(e) => store_code(e),
            };
        }
        if let Some(e) = cause.downcast_ref::<ReportError>() {
            return match e {
                ReportError::EmptyScope(_) | ReportError::NoHistory(_) | ReportError::InvalidRequest(_) => EXIT_USER,
                ReportError::Store(e) => store_code(e),
                ReportError::Write { .. } => EXIT_ENVIRONMENT,
            };
        }
        if let Some(e) = cause.downcast_ref::<StoreError>() {
            return store_code(e);
        }
        if let Some(e) = cause.downcast_ref::<SamplerError>() {
            return sampler_code(e);
        }
        if let Some(e) = cause.downcast_ref::<HarnessError>() {
            return match e {
                HarnessError::InvalidCommand(_) => EXIT_USER,
                _ => EXIT_ENVIRONMENT,
            };
        }
        if cause.is::<ProbeError>() || cause.is::<io::Error>() {
            return EXIT_ENVIRONMENT;
        }
    }
    EXIT_INTERNAL
}

fn store_code(e: &StoreError) -> u8 {
    match e {
        StoreError::UnknownRevision(_) | StoreError::InvalidLabel(_) | StoreError::Invalid(_) => EXIT_USER,
        _ => EXIT_ENVIRONMENT,
    }
}

fn sampler_code(e: &SamplerError) -> u8 {
    match e {
        SamplerError::InvalidConfig(_) | SamplerError::RateTooLow { .. } => EXIT_USER,
        SamplerError::ProbeLost { .. } | SamplerError::DomainMismatch(_) | SamplerError::NonMonotonic { .. } => {
            EXIT_ENVIRONMENT
        }
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    let file = match &cli.config {
        Some(path) => Settings::load(path)?,
        None => Settings::default(),
    };
    match &cli.command {
        Command::ProbeCheck(args) => probe_check(file.overlay(probe_settings(args))),
        Command::List(args) => list(file.overlay(harness_settings(args)?)),
        Command::Run(args) => {
            let settings = file.overlay(run_settings(args)?);
            run(cli, settings, args)
        }
        Command::Report(args) => {
            let scope = if args.history {
                let tests = match &args.select {
                    Some(s) => config::parse_selection(s)?,
                    None => Vec::new(),
                };
                Scope::History {
                    tests,
                    limit: args.limit,
                }
            } else {
                Scope::Revision(args.revision.clone())
            };
            render(cli, &file, scope, &args.output, &args.render)
        }
        Command::Compare(args) => {
            let scope = Scope::Compare {
                base: args.base.clone(),
                head: args.head.clone(),
            };
            render(cli, &file, scope, &args.output, &args.render)
        }
        Command::Baseline(args) => baseline(file.overlay(probe_settings(&args.probe)), args),
    }
}

/// Data directory: flag, then `MANAI_DATA_DIR`, then config file, then `.manai`.
pub fn data_dir(flag: Option<&Path>, settings: &Settings) -> PathBuf {
    if let Some(dir) = flag {
        return dir.to_owned();
    }
    if let Some(dir) = std::env::var_os(DATA_DIR_ENV).filter(|v| !v.is_empty()) {
        return dir.into();
    }
    settings
        .data_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from(DEFAULT_DATA_DIR))
}

fn harness_settings(args: &HarnessArgs) -> Result<Settings, ConfigError> {
    Ok(Settings {
        command: args.command.as_deref().map(|c| config::split_words("harness", c)).transpose()?,
        list_args: args.list_args.as_deref().map(|c| config::split_words("list-args", c)).transpose()?,
        working_dir: args.working_dir.clone(),
        timeout_s: args.timeout,
        env: args.env.iter().map(|e| config::parse_env_pair(e)).collect::<Result<_, _>>()?,
        ..Settings::default()
    })
}

fn probe_settings(args: &ProbeArgs) -> Settings {
    Settings {
        backend: args.probe,
        scenario: args.scenario.clone(),
        powercap_root: args.powercap_root.clone(),
        update_interval_ns: args.update_interval_ns,
        clock: args.clock,
        ..Settings::default()
    }
}

fn run_settings(args: &RunArgs) -> Result<Settings, ConfigError> {
    let s = Settings {
        rate_hz: args.rate,
        iterations: args.iterations,
        select: args.select.as_deref().map(config::parse_selection).transpose()?,
        revision: args.revision.clone(),
        baseline: args.baseline.clone(),
        ..Settings::default()
    };
    Ok(harness_settings(&args.harness)?.overlay(probe_settings(&args.probe)).overlay(s))
}

fn probe_check(settings: Settings) -> Result<()> {
    let selection = settings.probe_selection();
    let clock = settings.clock_mode().make_clock();
    let mut probe = open_probe(&selection, clock)?;
    let d = probe.descriptor().clone();
    let mut out = io::stdout().lock();
    writeln!(out, "backend: {}", d.backend)?;
    writeln!(out, "update interval: {} ns", d.update_interval_ns)?;
    let names: Vec<String> = d.domains.iter().map(ToString::to_string).collect();
    writeln!(out, "domains: {}", names.join(", "))?;
    match probe.read() {
        Ok(reading) => {
            writeln!(out, "read permission: ok")?;
            for (domain, c) in &reading.counters {
                writeln!(out, "  {domain}: {} uJ (wraps at {} uJ)", c.value_uj, c.max_range_uj)?;
            }
            Ok(())
        }
        Err(e) => {
            writeln!(out, "read permission: failed")?;
            Err(e.into())
        }
    }
}

fn list(settings: Settings) -> Result<()> {
    let cmd = settings.harness()?;
    cmd.validate()?;
    let tests = harness::discover(&cmd)?;
    let mut out = io::stdout().lock();
    for t in tests {
        writeln!(out, "{t}")?;
    }
    Ok(())
}

fn term_width(flag: Option<usize>) -> usize {
    flag.or_else(|| std::env::var("COLUMNS").ok()?.parse().ok())
        .unwrap_or(report::DEFAULT_WIDTH)
}

fn use_color(cli: &Cli, format: Format, to_file: bool) -> bool {
    format == Format::Term
        && !to_file
        && !cli.no_color
        && std::env::var_os("NO_COLOR").is_none()
        && io::stdout().is_terminal()
}

fn request(cli: &Cli, scope: Scope, format: Format, out: Option<PathBuf>, render: &RenderArgs) -> Result<ReportRequest> {
    let domains = match &render.domains {
        Some(list) => list
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<EnergyDomain>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| ConfigError::Value {
                key: "domains".into(),
                message: e.to_string(),
            })?,
        None => Vec::new(),
    };
    if !(render.trend_threshold.is_finite() && render.trend_threshold >= 0.0) {
        return Err(ConfigError::Value {
            key: "trend-threshold".into(),
            message: "must be >= 0".into(),
        }
        .into());
    }
    let color = use_color(cli, format, out.is_some());
    let mut req = ReportRequest::new(scope, format);
    req.domains = domains;
    req.output_path = out;
    req.highlight = render.highlight;
    req.trend_threshold = render.trend_threshold;
    req.color = color;
    req.width = term_width(render.width);
    Ok(req)
}

fn emit(document: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => report::write_document(path, document)?,
        None => io::stdout().lock().write_all(document.as_bytes())?,
    }
    Ok(())
}

fn render(cli: &Cli, file: &Settings, scope: Scope, output: &OutputArgs, render: &RenderArgs) -> Result<()> {
    let store = Store::open(data_dir(cli.data_dir.as_deref(), file));
    let req = request(cli, scope, output.format, output.out.clone(), render)?;
    let document = report::render(&store, &req)?;
    emit(&document, req.output_path.as_deref())
}

fn run(cli: &Cli, settings: Settings, args: &RunArgs) -> Result<()> {
    let data_dir = data_dir(cli.data_dir.as_deref(), &settings);
    let echo = settings.echo(&data_dir)?;
    let mut out = io::stdout().lock();
    writeln!(out, "# effective configuration")?;
    out.write_all(echo.as_bytes())?;
    writeln!(out)?;
    out.flush()?;
    if args.dry_run {
        return Ok(());
    }
    let config = settings.experiment()?;
    let store = Store::open(&data_dir);

    let mut done = 0usize;
    let mut total = 0usize;
    let mut progress = |p: Progress<'_>| {
        let _ = match p {
            Progress::Started {
                revision_label,
                tests,
                probe,
            } => {
                total = tests.len();
                writeln!(
                    out,
                    "running {} test(s) x {} iteration(s) for revision {revision_label} on the {} probe",
                    tests.len(),
                    config.iterations,
                    probe.backend
                )
            }
            Progress::Baseline(b) => {
                let parts: Vec<String> = b.power_w.iter().map(|(d, w)| format!("{d} {} W", report::fmt_sig(*w))).collect();
                writeln!(out, "baseline: {}", parts.join(", "))
            }
            Progress::Iteration(r) => {
                log::debug!("{} iteration {}: {:?} in {} ns", r.test, r.iteration, r.status, r.duration_ns);
                Ok(())
            }
            Progress::TestDone(s) => {
                done += 1;
                let energy = s
                    .domains
                    .get(&args.render.highlight)
                    .or_else(|| s.domains.values().next())
                    .map_or("no measurement".to_owned(), |d| format!("{} J", report::fmt_sig(d.energy_j.mean)));
                let flag = if s.any_low_confidence { format!("  {}", report::LOW_CONFIDENCE_MARKER) } else { String::new() };
                writeln!(
                    out,
                    "[{done}/{total}] {}  {energy}  {}  pass/fail/skip {}/{}/{}{flag}",
                    s.test,
                    report::fmt_duration_ns(s.mean_duration_ns),
                    s.pass_count,
                    s.fail_count,
                    s.skip_count
                )
            }
        };
        let _ = out.flush();
    };
    let record = experiment::run_experiment(&config, &store, &mut progress)?;

    let req = request(cli, Scope::Revision(Some(record.revision_label.clone())), Format::Term, None, &args.render)?;
    let table = report::render_record(&record, &req)?;
    let mut out = io::stdout().lock();
    writeln!(out)?;
    out.write_all(table.as_bytes())?;
    writeln!(
        out,
        "\nstored revision {} ({}) in {}",
        record.revision_label,
        record.created_at.format("%Y-%m-%dT%H:%M:%S%.9fZ"),
        data_dir.display()
    )?;
    Ok(())
}

fn baseline(settings: Settings, args: &BaselineArgs) -> Result<()> {
    let clock = settings.clock_mode().make_clock();
    let mut probe = open_probe(&settings.probe_selection(), clock.clone())?;
    let profile = calibrate_baseline(probe.as_mut(), args.duration, &clock)?;
    let mut out = io::stdout().lock();
    for (d, w) in &profile.power_w {
        writeln!(out, "{d}: {} W", report::fmt_sig(*w))?;
    }
    if let Some(path) = &args.out {
        let json = serde_json::to_string_pretty(&profile)? + "\n";
        std::fs::write(path, json).with_context(|| format!("writing {}", path.display()))?;
        writeln!(out, "profile written to {} (use --baseline fixed:{})", path.display(), path.display())?;
    }
    Ok(())
}
