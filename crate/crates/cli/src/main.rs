use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use cropopt::risk::RiskLevel;
use cropopt::scenario::StrategySpec;
use cropopt::seed::derive_seed;
use cropopt::weather;
use cropopt_cli::config::{EvaluatorKind, ExperimentConfig};
use cropopt_cli::experiment::Study;
use cropopt_cli::report::{self, Report, REPORT_FILE};
use cropopt_cli::CliError;

#[derive(Parser)]
#[command(name = "cropopt", version, about = "Risk-aware crop management optimization")]
struct Cli {
    /// Log progress (repeat for debug output).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Overrides the configured evaluator.
    #[arg(long, value_enum)]
    evaluator: Option<EvaluatorKind>,
}

#[derive(Subcommand)]
enum Command {
    /// Run every location × year × strategy × alpha cell and write reports.
    Experiment {
        #[command(flatten)]
        common: Common,
        /// Worker threads.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Run a single optimization and write its manifest.
    Optimize {
        #[command(flatten)]
        common: Common,
        /// Defaults to the first configured location.
        #[arg(long)]
        location: Option<String>,
        #[arg(long)]
        year: Option<i32>,
        /// `strategy-1`, `strategy-2`, `strategy-3` or `custom-MM-DD`.
        #[arg(long)]
        strategy: Option<String>,
        /// A tail probability or `robust`.
        #[arg(long)]
        alpha: Option<String>,
    },
    /// Precipitation statistics for the configured locations and years.
    Stats {
        #[command(flatten)]
        common: Common,
    },
    /// Regenerate every table from a report manifest.
    Replay {
        /// Path to `report.json`.
        #[arg(long)]
        report: PathBuf,
        /// Defaults to the report's directory.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Write synthetic daily weather archives.
    SynthWeather {
        #[arg(long)]
        output: PathBuf,
        /// Comma-separated location ids.
        #[arg(long, value_delimiter = ',', required = true)]
        locations: Vec<String>,
        #[arg(long, default_value_t = 1985)]
        first_year: i32,
        #[arg(long, default_value_t = 2016)]
        last_year: i32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

/// Loaded config, its directory and the resolved output directory.
fn load(common: &Common) -> Result<(ExperimentConfig, PathBuf, Option<PathBuf>), CliError> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.master_seed = seed;
    }
    if let Some(kind) = common.evaluator {
        cfg.evaluator = kind;
    }
    let base = common.config.parent().unwrap_or(Path::new(".")).to_path_buf();
    let output = common.output.clone().or_else(|| cfg.output_dir.clone());
    Ok((cfg, base, output))
}

fn require_output(output: Option<PathBuf>) -> Result<PathBuf, CliError> {
    output.ok_or_else(|| CliError::Config("no output directory: pass --output or set `output_dir`".into()))
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Experiment { common, jobs } => {
            let (cfg, base, output) = load(&common)?;
            let output = require_output(output)?;
            let echo = cfg.echo(&base);
            let study = Study::prepare(cfg)?;
            let mut report = study.run(jobs)?;
            report.config = echo;
            for path in report::write_all(&report, &output)? {
                println!("{}", path.display());
            }
            match report.failures() {
                0 => Ok(()),
                failed => Err(CliError::PartialFailure { failed, total: report.cells.len() + report.baselines.len() }),
            }
        }
        Command::Optimize { common, location, year, strategy, alpha } => {
            let (cfg, _, output) = load(&common)?;
            let output = require_output(output)?;
            let location = location.unwrap_or_else(|| cfg.locations[0].id().to_string());
            let year = year.unwrap_or(cfg.test_years[0]);
            let strategy = match strategy {
                None => cfg.strategies[0].clone(),
                Some(name) => parse_strategy(&name)?,
            };
            let risk = match alpha {
                None => cfg.alphas[0],
                Some(a) => parse_risk(&a)?,
            };
            if !cfg.locations.iter().any(|l| l.id() == location) {
                return Err(CliError::Config(format!("location `{location}` is not configured")));
            }
            let mut cfg = cfg;
            if !cfg.test_years.contains(&year) {
                cfg.test_years.push(year);
            }
            let study = Study::prepare(cfg)?;
            let (manifest, realized) = study.optimize(&location, year, &strategy, risk)?;
            let doc = serde_json::json!({
                "location": location,
                "year": year,
                "strategy": strategy.name(),
                "risk": risk.label(),
                "realized_yield": realized,
                "manifest": manifest,
            });
            std::fs::create_dir_all(&output)
                .map_err(|e| CliError::Environment(format!("cannot create {}: {e}", output.display())))?;
            let path = output.join("run.json");
            let mut text = serde_json::to_string_pretty(&doc).expect("manifest serializes");
            text.push('\n');
            std::fs::write(&path, text)
                .map_err(|e| CliError::Environment(format!("cannot write {}: {e}", path.display())))?;
            let values = manifest.best.x.values(&manifest.space);
            let named: Vec<String> = manifest
                .space
                .variables()
                .iter()
                .zip(values)
                .map(|(v, x)| format!("{}={}", v.name, cropopt::domain::format_number(x)))
                .collect();
            println!("best: {} objective={:.3} realized={realized:.3}", named.join(" "), manifest.best.y);
            println!("{}", path.display());
            Ok(())
        }
        Command::Stats { common } => {
            let (cfg, _, output) = load(&common)?;
            let study = Study::prepare(cfg)?;
            let text = report::weather_stats_csv(&study.weather_stats()?);
            match output {
                Some(dir) => {
                    std::fs::create_dir_all(&dir)
                        .map_err(|e| CliError::Environment(format!("cannot create {}: {e}", dir.display())))?;
                    let path = dir.join("weather_stats.csv");
                    std::fs::write(&path, &text)
                        .map_err(|e| CliError::Environment(format!("cannot write {}: {e}", path.display())))?;
                    println!("{}", path.display());
                }
                None => print!("{text}"),
            }
            Ok(())
        }
        Command::Replay { report: path, output } => {
            let report = Report::load(&path)?;
            report.check_consistency()?;
            let dir = output.unwrap_or_else(|| path.parent().unwrap_or(Path::new(".")).to_path_buf());
            for written in report::write_tables(&report, &dir)? {
                println!("{}", written.display());
            }
            if output_is_elsewhere(&path, &dir) {
                let copy = dir.join(REPORT_FILE);
                std::fs::write(&copy, report.to_json())
                    .map_err(|e| CliError::Environment(format!("cannot write {}: {e}", copy.display())))?;
            }
            Ok(())
        }
        Command::SynthWeather { output, locations, first_year, last_year, seed } => {
            if first_year > last_year {
                return Err(CliError::Config("first year after last year".into()));
            }
            std::fs::create_dir_all(&output)
                .map_err(|e| CliError::Environment(format!("cannot create {}: {e}", output.display())))?;
            for loc in &locations {
                let days = weather::synthetic::generate(derive_seed(seed, &["weather", loc]), first_year, last_year);
                let path = weather::archive_path(&output, loc);
                weather::write_csv_file(&path, &days)?;
                println!("{}", path.display());
            }
            Ok(())
        }
    }
}

fn output_is_elsewhere(report: &Path, dir: &Path) -> bool {
    let canon = |p: &Path| std::fs::canonicalize(p).ok();
    canon(report.parent().unwrap_or(Path::new("."))) != canon(dir)
}

fn parse_strategy(name: &str) -> Result<StrategySpec, CliError> {
    let bad = || CliError::Config(format!("unknown strategy `{name}`"));
    match name {
        "strategy-1" => Ok(StrategySpec::strategy_1()),
        "strategy-2" => Ok(StrategySpec::strategy_2()),
        "strategy-3" => Ok(StrategySpec::strategy_3()),
        other => {
            let rest = other.strip_prefix("custom-").ok_or_else(bad)?;
            let (m, d) = rest.split_once('-').ok_or_else(bad)?;
            let (m, d) = (m.parse().map_err(|_| bad())?, d.parse().map_err(|_| bad())?);
            StrategySpec::custom(m, d).map_err(|e| CliError::Config(e.to_string()))
        }
    }
}

fn parse_risk(text: &str) -> Result<RiskLevel, CliError> {
    let level = if text == "robust" {
        RiskLevel::Robust
    } else {
        RiskLevel::Alpha(text.parse().map_err(|_| CliError::Config(format!("invalid alpha `{text}`")))?)
    };
    level.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(level)
}
