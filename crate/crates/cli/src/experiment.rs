//! Runs the location × year × strategy × alpha grid.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use cropopt::domain::{DecisionSpace, DecisionVector, Scenario, ScenarioSet};
use cropopt::pbo::{self, RunManifest};
use cropopt::risk::RiskLevel;
use cropopt::scenario::{build_scenarios_from, precip_stats, PrecipStats, StrategySpec, WeatherArchive};
use cropopt::simulator::{ExternalEvaluator, SurrogateEvaluator, SurrogateParams};
use cropopt::Evaluator;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{EvaluatorKind, ExperimentConfig, LocationEntry};
use crate::report::{Report, FORMAT_VERSION};
use crate::CliError;

/// Outcome of one optimization cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub location: String,
    pub group: String,
    pub year: i32,
    pub strategy: String,
    /// Configured risk level label (`robust`, `stochastic`, `alpha=0.5`).
    pub risk: String,
    /// Alpha actually used, after resolving `robust` against |S|.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    pub n_scenarios: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decision: Option<DecisionVector>,
    /// Recommended decision as variable name → grid value.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decision_values: Option<BTreeMap<String, f64>>,
    /// CVaR objective of the recommendation over the scenario set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub objective: Option<f64>,
    /// Yield of the recommendation under the weather that actually occurred.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub realized_yield: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub improvement_pct: Option<f64>,
    pub evaluation_count: usize,
    pub exhausted: bool,
    pub trace: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl CellReport {
    pub fn is_ok(&self) -> bool {
        self.error.is_none()
    }
}

/// Realized yield of the baseline management at one location and year.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub location: String,
    pub year: i32,
    pub decision_values: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub realized_yield: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeatherStatsRow {
    pub location: String,
    pub group: String,
    pub year: i32,
    #[serde(flatten)]
    pub stats: PrecipStats,
}

/// Percent change of `realized` over `baseline`.
pub fn improvement_pct(realized: f64, baseline: f64) -> Option<f64> {
    (baseline > 0.0).then(|| (realized - baseline) / baseline * 100.0)
}

/// Loaded inputs shared by every cell.
pub struct Study {
    pub config: ExperimentConfig,
    pub space: DecisionSpace,
    pub archives: BTreeMap<String, WeatherArchive>,
    pub evaluator: Arc<dyn Evaluator>,
}

impl Study {
    /// Validates the configuration, loads every archive and builds the
    /// evaluator. Nothing is simulated yet.
    pub fn prepare(config: ExperimentConfig) -> Result<Self, CliError> {
        config.validate()?;
        let space = config.space();
        let mut archives = BTreeMap::new();
        for loc in &config.locations {
            let archive = WeatherArchive::load(&config.weather_dir, loc.id())
                .map_err(|e| CliError::Environment(format!("weather for `{}`: {e}", loc.id())))?;
            for &year in &config.test_years {
                archive
                    .observed(year, None)
                    .map_err(|e| CliError::Environment(format!("`{}` {year}: {e}", loc.id())))?;
            }
            archives.insert(loc.id().to_string(), archive);
        }
        let evaluator = build_evaluator(&config, &space)?;
        Ok(Study { config, space, archives, evaluator })
    }

    fn archive(&self, location: &str) -> &WeatherArchive {
        &self.archives[location]
    }

    pub fn scenarios(&self, location: &str, year: i32, strategy: &StrategySpec) -> Result<ScenarioSet, CliError> {
        let archive = self.archive(location);
        let until = (!strategy.observes_full_year()).then(|| strategy.decision_date(year));
        let observed = archive.observed(year, until)?;
        Ok(build_scenarios_from(archive, year, &observed, strategy, self.config.first_history_year)?)
    }

    /// The season as it actually happened.
    pub fn realized_scenario(&self, location: &str, year: i32) -> Result<Scenario, CliError> {
        let set = self.scenarios(location, year, &StrategySpec::strategy_3())?;
        Ok(set.scenarios()[0].clone())
    }

    pub fn weather_stats(&self) -> Result<Vec<WeatherStatsRow>, CliError> {
        let mut rows = Vec::new();
        for loc in &self.config.locations {
            for &year in &self.config.test_years {
                let observed = self.archive(loc.id()).observed(year, None)?;
                rows.push(WeatherStatsRow {
                    location: loc.id().to_string(),
                    group: loc.group().to_string(),
                    year,
                    stats: precip_stats(&observed)?,
                });
            }
        }
        Ok(rows)
    }

    fn baseline(&self, location: &str, year: i32, x: &DecisionVector) -> BaselineReport {
        let realized = self
            .realized_scenario(location, year)
            .and_then(|s| self.evaluator.evaluate(x, &self.space, &s).map_err(|e| CliError::Environment(e.to_string())));
        let (realized_yield, error) = match realized {
            Ok(y) => (Some(y), None),
            Err(e) => (None, Some(e.to_string())),
        };
        BaselineReport {
            location: location.to_string(),
            year,
            decision_values: named_values(x, &self.space),
            realized_yield,
            error,
        }
    }

    /// Single PBO run plus the realized yield of its recommendation.
    pub fn optimize(
        &self,
        location: &str,
        year: i32,
        strategy: &StrategySpec,
        risk: RiskLevel,
    ) -> Result<(RunManifest, f64), CliError> {
        let scenarios = self.scenarios(location, year, strategy)?;
        let spec = risk.resolve(scenarios.len())?;
        let seed = self.config.cell_seed(location, year, strategy);
        let cfg = self.config.pbo.instantiate(&self.space, spec, seed);
        let result = pbo::run(&cfg, &self.space, &scenarios, &*self.evaluator)?;
        let realized = self
            .evaluator
            .evaluate(&result.best.x, &self.space, &self.realized_scenario(location, year)?)
            .map_err(|e| CliError::Environment(e.to_string()))?;
        Ok((RunManifest::new(&cfg, &self.space, &scenarios, &result), realized))
    }

    fn run_cell(&self, cell: &CellKey<'_>, baseline: Option<f64>) -> CellReport {
        let seed = self.config.cell_seed(cell.location.id(), cell.year, cell.strategy);
        let mut report = CellReport {
            location: cell.location.id().to_string(),
            group: cell.location.group().to_string(),
            year: cell.year,
            strategy: cell.strategy.name(),
            risk: cell.risk.label(),
            alpha: None,
            n_scenarios: 0,
            seed,
            decision: None,
            decision_values: None,
            objective: None,
            realized_yield: None,
            improvement_pct: None,
            evaluation_count: 0,
            exhausted: false,
            trace: Vec::new(),
            error: None,
        };
        let outcome = (|| -> Result<(), CliError> {
            let scenarios = self.scenarios(cell.location.id(), cell.year, cell.strategy)?;
            report.n_scenarios = scenarios.len();
            let spec = cell.risk.resolve(scenarios.len())?;
            report.alpha = Some(spec.alpha);
            let cfg = self.config.pbo.instantiate(&self.space, spec, seed);
            let result = pbo::run(&cfg, &self.space, &scenarios, &*self.evaluator)?;
            report.evaluation_count = result.evaluation_count;
            report.exhausted = result.exhausted;
            report.trace = result.trace.clone();
            report.objective = Some(result.best.y);
            report.decision_values = Some(named_values(&result.best.x, &self.space));
            report.decision = Some(result.best.x.clone());
            let realized = self
                .evaluator
                .evaluate(&result.best.x, &self.space, &self.realized_scenario(cell.location.id(), cell.year)?)
                .map_err(|e| CliError::Environment(format!("realized yield: {e}")))?;
            report.realized_yield = Some(realized);
            report.improvement_pct = baseline.and_then(|b| improvement_pct(realized, b));
            Ok(())
        })();
        if let Err(e) = outcome {
            log::warn!("cell {} {} {} {} failed: {e}", report.location, report.year, report.strategy, report.risk);
            report.error = Some(e.to_string());
        } else {
            log::info!(
                "cell {} {} {} {}: objective {:.1}, realized {:.1}",
                report.location,
                report.year,
                report.strategy,
                report.risk,
                report.objective.unwrap_or(f64::NAN),
                report.realized_yield.unwrap_or(f64::NAN)
            );
        }
        report
    }

    /// Runs every cell on a pool of `jobs` threads. Cell order in the report
    /// follows the configuration, whatever order cells finish in.
    pub fn run(&self, jobs: usize) -> Result<Report, CliError> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build()
            .map_err(|e| CliError::Environment(format!("thread pool: {e}")))?;
        let baseline_x = self.config.baseline_decision(&self.space)?;
        let cfg = &self.config;
        let keys: Vec<CellKey<'_>> = cfg
            .locations
            .iter()
            .flat_map(|location| {
                cfg.test_years.iter().flat_map(move |&year| {
                    cfg.strategies.iter().flat_map(move |strategy| {
                        cfg.alphas.iter().map(move |&risk| CellKey { location, year, strategy, risk })
                    })
                })
            })
            .collect();
        log::info!("running {} cells on {} threads", keys.len(), jobs.max(1));
        let (baselines, cells) = pool.install(|| {
            let baselines: Vec<BaselineReport> = cfg
                .locations
                .iter()
                .flat_map(|l| cfg.test_years.iter().map(move |&y| (l.id(), y)))
                .collect::<Vec<_>>()
                .into_par_iter()
                .map(|(loc, year)| self.baseline(loc, year, &baseline_x))
                .collect();
            let lookup: BTreeMap<(&str, i32), Option<f64>> =
                baselines.iter().map(|b| ((b.location.as_str(), b.year), b.realized_yield)).collect();
            let cells: Vec<CellReport> = keys
                .par_iter()
                .map(|k| self.run_cell(k, lookup[&(k.location.id(), k.year)]))
                .collect();
            (baselines, cells)
        });
        Ok(Report {
            format_version: FORMAT_VERSION,
            config: cfg.clone(),
            space: self.space.clone(),
            baselines,
            cells,
            weather_stats: self.weather_stats()?,
        })
    }
}

struct CellKey<'a> {
    location: &'a LocationEntry,
    year: i32,
    strategy: &'a StrategySpec,
    risk: RiskLevel,
}

pub fn named_values(x: &DecisionVector, space: &DecisionSpace) -> BTreeMap<String, f64> {
    space
        .variables()
        .iter()
        .map(|v| v.name.clone())
        .zip(x.values(space))
        .collect()
}

pub fn build_evaluator(config: &ExperimentConfig, space: &DecisionSpace) -> Result<Arc<dyn Evaluator>, CliError> {
    match config.evaluator {
        EvaluatorKind::Surrogate => {
            let params = match config.surrogate.as_ref().and_then(|s| s.params.as_deref()) {
                Some(path) => SurrogateParams::load(path).map_err(|e| env_or_config(e, path))?,
                None => SurrogateParams::reference(),
            };
            Ok(Arc::new(SurrogateEvaluator::new(params)))
        }
        EvaluatorKind::External => {
            let ext = config
                .external
                .clone()
                .ok_or_else(|| CliError::Config("evaluator `external` needs an `external` section".into()))?;
            let template = ext.template.clone();
            let evaluator = ExternalEvaluator::new(ext).map_err(|e| env_or_config(e, &template))?;
            evaluator
                .check_placeholders(space)
                .map_err(|e| CliError::Config(format!("external template: {e}")))?;
            Ok(Arc::new(evaluator))
        }
    }
}

fn env_or_config(e: cropopt::Error, path: &Path) -> CliError {
    match e {
        cropopt::Error::Io { .. } => CliError::Environment(e.to_string()),
        other => CliError::Config(format!("{}: {other}", path.display())),
    }
}
