//! `vpgen`: generate, check, summarise and predict virtual patient
//! repositories.
//!
//! Exit codes: 0 success, 2 validation or comparison failure, 3 I/O error,
//! 4 flag misuse.

mod manifest;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use chrono::Utc;
use clap::{Args, Parser, Subcommand, ValueEnum};
use vpgen_core::cohortstats::{self, summary_tsv};
use vpgen_core::config::ConfigSources;
use vpgen_core::emit::{EmitError, Progress};
use vpgen_core::{
    compare, expected_from_config, summarize, Configs, Generator, RepositoryLayout,
    ToleranceProfile,
};

use manifest::{RunManifest, MANIFEST_FILE};

const EXIT_FAILURE: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_USAGE: u8 = 4;

const REPORT_FILE: &str = "report.txt";
const SUMMARY_FILE: &str = "summary.tsv";

#[derive(Parser)]
#[command(
    name = "vpgen",
    version,
    about = "Virtual patient repository generator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a repository of four tab-delimited files.
    Generate(GenerateArgs),
    /// Summarise a repository, optionally against a configuration's expectations.
    Stats(StatsArgs),
    /// Validate a configuration directory.
    Check(ConfigArgs),
    /// Print the statistics a configuration implies, without generating data.
    Expect(ExpectArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Configuration directory; the shipped defaults when omitted.
    #[arg(long, value_name = "DIR")]
    config: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Size {
    /// 100 patients
    Small,
    /// 10,000 patients
    Medium,
    /// 100,000 patients
    Large,
}

impl Size {
    fn patients(self) -> u64 {
        match self {
            Size::Small => 100,
            Size::Medium => 10_000,
            Size::Large => 100_000,
        }
    }
}

#[derive(Args)]
struct CohortSize {
    /// Preset cohort size.
    #[arg(long, value_enum)]
    size: Option<Size>,
    /// Number of patients; overrides `--size`.
    #[arg(long, value_name = "INT")]
    n: Option<u64>,
}

impl CohortSize {
    fn resolve(&self) -> Option<u64> {
        self.n.or(self.size.map(Size::patients))
    }
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Master seed.
    #[arg(long, value_name = "U64")]
    seed: u64,
    #[command(flatten)]
    size: CohortSize,
    /// Output directory, created if missing.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Worker threads; never changes the output.
    #[arg(long, value_name = "INT", value_parser = clap::value_parser!(u16).range(1..))]
    workers: Option<u16>,
    /// Write gzip-compressed files.
    #[arg(long)]
    gzip: bool,
    /// Print patients/s and rows/s to stderr.
    #[arg(long)]
    progress: bool,
}

#[derive(Args)]
struct StatsArgs {
    /// Repository directory.
    repository: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    /// Compare against the expectations of this configuration directory.
    #[arg(long, value_name = "DIR")]
    expect: Option<PathBuf>,
    /// Where to write report.txt and summary.tsv; the repository by default.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExpectArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    size: CohortSize,
}

/// A failed command: message for stderr and the exit code.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Failure {
            code,
            message: message.into(),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Generate(args) => cmd_generate(args),
        Command::Stats(args) => cmd_stats(args),
        Command::Check(args) => cmd_check(args),
        Command::Expect(args) => cmd_expect(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            if !f.message.is_empty() {
                eprintln!("{}", f.message);
            }
            ExitCode::from(f.code)
        }
    }
}

fn load_sources(dir: Option<&Path>) -> Result<ConfigSources, Failure> {
    match dir {
        None => Ok(ConfigSources::defaults()),
        Some(dir) => {
            ConfigSources::read_dir(dir).map_err(|e| Failure::new(EXIT_IO, format!("error: {e}")))
        }
    }
}

fn parse_sources(sources: &ConfigSources) -> Result<Configs, Failure> {
    sources.parse().map_err(|e| {
        let code = if e.is_io() { EXIT_IO } else { EXIT_FAILURE };
        Failure::new(code, format!("error: {e}"))
    })
}

fn load_configs(dir: Option<&Path>) -> Result<Configs, Failure> {
    parse_sources(&load_sources(dir)?)
}

fn require_valid(configs: &Configs) -> CmdResult {
    let report = configs.validate();
    if report.is_ok() {
        if !report.warnings.is_empty() {
            eprintln!("{report}");
        }
        Ok(())
    } else {
        Err(Failure::new(
            EXIT_FAILURE,
            format!("invalid configuration:\n{report}"),
        ))
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::new(EXIT_IO, format!("error: {}: {e}", path.display()))
}

fn cmd_generate(args: GenerateArgs) -> CmdResult {
    let started = Utc::now();
    let sources = load_sources(args.config.config.as_deref())?;
    let mut configs = parse_sources(&sources)?;
    configs.params.master_seed = args.seed;
    if let Some(n) = args.size.resolve() {
        configs.params.n_patients = n;
    }
    require_valid(&configs)?;
    let generator =
        Generator::new(&configs).map_err(|e| Failure::new(EXIT_FAILURE, format!("error: {e}")))?;

    fs::create_dir_all(&args.out).map_err(|e| io_failure(&args.out, e))?;
    let layout = RepositoryLayout {
        dir: args.out.clone(),
        gzip: args.gzip,
    };
    let workers = args
        .workers
        .map(usize::from)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));

    let clock = Instant::now();
    let mut last_report = 0.0;
    let report_progress = |p: Progress| {
        let secs = clock.elapsed().as_secs_f64();
        if args.progress && secs - last_report >= 1.0 {
            last_report = secs;
            eprintln!(
                "{} patients, {:.0} patients/s, {:.0} rows/s",
                p.patients,
                p.patients as f64 / secs,
                p.rows as f64 / secs
            );
        }
    };
    let stats = vpgen_core::write_repository(&generator, &layout, workers, report_progress)
        .map_err(|e| {
            let code = match e {
                EmitError::Io { .. } => EXIT_IO,
                _ => EXIT_FAILURE,
            };
            Failure::new(code, format!("error: {e}"))
        })?;
    if args.progress {
        let secs = clock.elapsed().as_secs_f64().max(1e-9);
        let rows: u64 = stats.files.iter().map(|f| f.rows).sum();
        eprintln!(
            "done in {secs:.2} s: {:.0} patients/s, {:.0} rows/s",
            stats.patients as f64 / secs,
            rows as f64 / secs
        );
        if let Some(kib) = peak_rss_kib() {
            eprintln!("peak resident memory: {kib} KiB");
        }
    }

    let config_dir = args.config.config.as_ref().map(|p| p.display().to_string());
    let manifest = RunManifest {
        config_dir: config_dir.as_deref(),
        sources: &sources,
        params: &configs.params,
        workers,
        gzip: args.gzip,
        started,
        finished: Utc::now(),
        stats: &stats,
    };
    let path = args.out.join(MANIFEST_FILE);
    fs::write(&path, manifest.render()).map_err(|e| io_failure(&path, e))?;
    println!("{stats}");
    Ok(())
}

/// High-water resident set size of this process image (Linux only).
fn peak_rss_kib() -> Option<u64> {
    let status = fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    line.split_whitespace().nth(1)?.parse().ok()
}

fn cmd_stats(args: StatsArgs) -> CmdResult {
    let expect_configs = match &args.expect {
        Some(dir) => {
            let configs = load_configs(Some(dir))?;
            require_valid(&configs)?;
            Some(configs)
        }
        None => None,
    };
    // Lab bounds and catalog tags come from --config, else from --expect.
    let configs = match (&args.config.config, &expect_configs) {
        (None, Some(expect)) => expect.clone(),
        (dir, _) => load_configs(dir.as_deref())?,
    };
    if !args.repository.is_dir() {
        return Err(Failure::new(
            EXIT_IO,
            format!("error: {}: not a directory", args.repository.display()),
        ));
    }
    let layout = RepositoryLayout::detect(&args.repository);
    let summary = summarize(&layout, &configs, configs.params.cutoff_date).map_err(|e| {
        let code = match e {
            cohortstats::StatsError::Io { .. } => EXIT_IO,
            _ => EXIT_FAILURE,
        };
        Failure::new(code, format!("error: {e}"))
    })?;

    let mut text = summary.table();
    let deviations = match &expect_configs {
        Some(expect) => {
            let mut expect = expect.clone();
            expect.params.n_patients = summary.n_patients;
            let expected = expected_from_config(&expect, expect.params.cutoff_date);
            let report = compare(&summary, &expected, &ToleranceProfile::default())
                .map_err(|e| Failure::new(EXIT_FAILURE, format!("error: {e}")))?;
            text.push('\n');
            text.push_str(&report.to_string());
            text.push('\n');
            Some(report)
        }
        None => None,
    };
    let out = args.out.as_deref().unwrap_or(&args.repository);
    fs::create_dir_all(out).map_err(|e| io_failure(out, e))?;
    let report_path = out.join(REPORT_FILE);
    fs::write(&report_path, &text).map_err(|e| io_failure(&report_path, e))?;
    let tsv_path = out.join(SUMMARY_FILE);
    fs::write(&tsv_path, summary_tsv(&summary, deviations.as_ref()))
        .map_err(|e| io_failure(&tsv_path, e))?;
    print!("{text}");
    match deviations {
        Some(report) if !report.pass => Err(Failure::new(EXIT_FAILURE, "")),
        _ => Ok(()),
    }
}

fn cmd_check(args: ConfigArgs) -> CmdResult {
    let configs = load_configs(args.config.as_deref())?;
    let report = configs.validate();
    println!("{report}");
    if report.is_ok() {
        Ok(())
    } else {
        Err(Failure::new(EXIT_FAILURE, ""))
    }
}

fn cmd_expect(args: ExpectArgs) -> CmdResult {
    let mut configs = load_configs(args.config.config.as_deref())?;
    if let Some(n) = args.size.resolve() {
        configs.params.n_patients = n;
    }
    require_valid(&configs)?;
    print!(
        "{}",
        expected_from_config(&configs, configs.params.cutoff_date)
    );
    Ok(())
}
