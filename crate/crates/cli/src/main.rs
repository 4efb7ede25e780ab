//! `hkforge`: runs scenario checks from a JSON configuration.
//!
//! Exit status is 0 when every check passes, 1 when any check fails and 2 on
//! configuration or I/O errors.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hkforge_core::runner::{
    load_config, read_report, report_to_csv, report_to_json, run_scenario, seed_from_env, write_report, CheckReport,
    Family, ReportFormat, ScenarioConfig, CHECKS,
};
use hkforge_core::Error;

#[derive(Parser)]
#[command(name = "hkforge", version, about = "Hyperkahler metric identity checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every check named in the configuration.
    Check(RunArgs),
    /// Semi-flat checks only (family semiflat).
    Semiflat(RunArgs),
    /// Ooguri-Vafa checks only (family ov).
    Ov(RunArgs),
    /// Integral-equation checks of a gmn scenario, without wallcross.
    Tba(RunArgs),
    /// The wallcross check of a gmn scenario.
    Wallcross(RunArgs),
    /// Re-render a saved JSON report.
    Report {
        report: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum)]
        format: Option<Format>,
    },
}

#[derive(Args)]
struct RunArgs {
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides both the configured seed and HKFORGE_SEED.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    format: Option<Format>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
}

impl From<Format> for ReportFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Json => ReportFormat::Json,
            Format::Csv => ReportFormat::Csv,
        }
    }
}

enum Filter {
    All,
    Family(Family),
    Tba,
    Wallcross,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Check(a) => run(a, Filter::All),
        Command::Semiflat(a) => run(a, Filter::Family(Family::Semiflat)),
        Command::Ov(a) => run(a, Filter::Family(Family::Ov)),
        Command::Tba(a) => run(a, Filter::Tba),
        Command::Wallcross(a) => run(a, Filter::Wallcross),
        Command::Report { report, out, format } => {
            read_report(&report).and_then(|r| emit(&r, out, format.map(Into::into).unwrap_or_default()).map(|_| r))
        }
    };
    match outcome {
        Ok(r) if r.all_passed() => ExitCode::from(0),
        Ok(_) => ExitCode::from(1),
        Err(e) => {
            eprintln!("hkforge: {e}");
            ExitCode::from(2)
        }
    }
}

fn restrict(cfg: &mut ScenarioConfig, filter: Filter) -> Result<(), Error> {
    let family = match filter {
        Filter::All => return Ok(()),
        Filter::Family(f) => f,
        Filter::Tba | Filter::Wallcross => Family::Gmn,
    };
    if cfg.family != family {
        return Err(Error::Config(format!("this subcommand needs family {family:?}, found {:?}", cfg.family)));
    }
    match filter {
        Filter::Tba => cfg.checks.retain(|c| c != "wallcross"),
        Filter::Wallcross => cfg.checks = vec!["wallcross".into()],
        _ => {}
    }
    if cfg.checks.is_empty() {
        let known: Vec<&str> = CHECKS.iter().filter(|c| c.1 == family).map(|c| c.0).collect();
        return Err(Error::Config(format!("no checks selected; available: {}", known.join(", "))));
    }
    cfg.validate()
}

fn run(args: RunArgs, filter: Filter) -> Result<CheckReport, Error> {
    let mut cfg = load_config(&args.config)?;
    if let Some(s) = args.seed.map_or_else(seed_from_env, |s| Ok(Some(s)))? {
        cfg.seed = s;
    }
    restrict(&mut cfg, filter)?;
    let report = run_scenario(&cfg)?;
    for c in &report.checks {
        let res = c.max_residual.map(|r| format!("{r:.3e}")).unwrap_or_else(|| "-".into());
        let status = if c.passed { "PASS" } else { "FAIL" };
        match &c.error {
            Some(e) => eprintln!("{status} {:<18} residual {res} (tol {:.0e}) error: {e}", c.name, c.tolerance),
            None => eprintln!("{status} {:<18} residual {res} (tol {:.0e})", c.name, c.tolerance),
        }
    }
    let out = args.out.or_else(|| cfg.output.report.as_ref().map(PathBuf::from));
    let format = args.format.map(Into::into).unwrap_or(cfg.output.format);
    emit(&report, out, format)?;
    Ok(report)
}

fn emit(report: &CheckReport, out: Option<PathBuf>, format: ReportFormat) -> Result<(), Error> {
    match out {
        Some(path) => write_report(report, path, format),
        None => {
            let text = match format {
                ReportFormat::Json => report_to_json(report),
                ReportFormat::Csv => report_to_csv(report)?,
            };
            print!("{text}");
            Ok(())
        }
    }
}
