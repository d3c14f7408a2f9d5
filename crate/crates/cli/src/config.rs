//! Experiment configuration files (JSON).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use cropopt::acquisition::{AcquisitionSpec, MaximizeOptions};
use cropopt::domain::{names, DecisionSpace, DecisionVector};
use cropopt::gp::KernelSpec;
use cropopt::pbo::{BoInstanceConfig, PboConfig, SharingMode};
use cropopt::risk::{RiskLevel, RiskSpec};
use cropopt::scenario::StrategySpec;
use cropopt::seed::derive_seed;
use cropopt::simulator::ExternalAdapterConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// A location and the group it is reported under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LocationEntry {
    Id(String),
    Grouped {
        id: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        group: Option<String>,
    },
}

impl LocationEntry {
    pub fn id(&self) -> &str {
        match self {
            LocationEntry::Id(id) | LocationEntry::Grouped { id, .. } => id,
        }
    }

    /// Reporting group; defaults to the location id.
    pub fn group(&self) -> &str {
        match self {
            LocationEntry::Grouped { group: Some(g), .. } => g,
            other => other.id(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceTemplate {
    pub kernel: KernelSpec,
    pub acquisition: AcquisitionSpec,
}

/// PBO settings shared by every cell. Seeds and the risk level are filled
/// in per cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PboTemplate {
    pub n_instances: usize,
    pub max_iterations: usize,
    /// Defaults to `max(5, 2 × dimensions)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_design_size: Option<usize>,
    #[serde(default)]
    pub sharing_mode: SharingMode,
    /// Explicit instance kernels/acquisitions; the default set otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instances: Option<Vec<InstanceTemplate>>,
    #[serde(default)]
    pub maximize: MaximizeOptions,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refit_every: Option<usize>,
}

impl Default for PboTemplate {
    fn default() -> Self {
        PboTemplate {
            n_instances: 4,
            max_iterations: 50,
            initial_design_size: None,
            sharing_mode: SharingMode::default(),
            instances: None,
            maximize: MaximizeOptions::default(),
            refit_every: None,
        }
    }
}

impl PboTemplate {
    pub fn instantiate(&self, space: &DecisionSpace, risk: RiskSpec, seed: u64) -> PboConfig {
        let mut cfg = PboConfig::with_defaults(space, self.n_instances, self.max_iterations, risk, seed);
        if let Some(list) = &self.instances {
            cfg.instance_configs = list
                .iter()
                .enumerate()
                .map(|(i, t)| BoInstanceConfig {
                    kernel: t.kernel.clone(),
                    acquisition: t.acquisition,
                    seed: derive_seed(seed, &["instance", &i.to_string()]),
                })
                .collect();
        }
        if let Some(n) = self.initial_design_size {
            cfg.initial_design_size = n;
        }
        cfg.sharing_mode = self.sharing_mode;
        cfg.maximize = self.maximize.clone();
        cfg.refit_every = self.refit_every;
        cfg
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum EvaluatorKind {
    #[default]
    Surrogate,
    External,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurrogateSection {
    /// Parameter file; the shipped reference parameters when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub locations: Vec<LocationEntry>,
    /// Directory holding `<location>.csv` weather archives.
    pub weather_dir: PathBuf,
    pub test_years: Vec<i32>,
    /// Oldest historical year used to build scenarios.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub first_history_year: Option<i32>,
    pub strategies: Vec<StrategySpec>,
    /// Tail probabilities; `"robust"` means `1/|S|`.
    pub alphas: Vec<RiskLevel>,
    #[serde(default)]
    pub pbo: PboTemplate,
    /// Decision grid; the five-variable maize grid when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub space: Option<DecisionSpace>,
    #[serde(default)]
    pub evaluator: EvaluatorKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub surrogate: Option<SurrogateSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub external: Option<ExternalAdapterConfig>,
    /// Reference management (variable name → grid value) that improvements
    /// are measured against.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<BTreeMap<String, f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub master_seed: u64,
}

/// Default baseline on the maize grid: planting 6 May, 160 kg/ha N on
/// 15 April, 8 plants/m², 110-day cultivar.
pub fn default_baseline() -> BTreeMap<String, f64> {
    [
        (names::PLANTING_DATE, 126.0),
        (names::N_AMOUNT, 160.0),
        (names::N_DATE, 105.0),
        (names::DENSITY, 8.0),
        (names::CULTIVAR, 110.0),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    /// Makes relative paths relative to `base` (the config file's directory).
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.weather_dir);
        if let Some(dir) = self.output_dir.as_mut() {
            fix(dir);
        }
        if let Some(params) = self.surrogate.as_mut().and_then(|s| s.params.as_mut()) {
            fix(params);
        }
        if let Some(ext) = self.external.as_mut() {
            ext.resolve_paths(base);
        }
    }

    pub fn space(&self) -> DecisionSpace {
        self.space.clone().unwrap_or_else(DecisionSpace::maize_reference)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: String| Err(CliError::Config(msg));
        if self.locations.is_empty() || self.test_years.is_empty() || self.strategies.is_empty() || self.alphas.is_empty() {
            return bad("locations, test_years, strategies and alphas must all be nonempty".into());
        }
        for (i, l) in self.locations.iter().enumerate() {
            let id = l.id();
            if id.is_empty() || id.contains(['/', '\\']) || id.starts_with('.') {
                return bad(format!("invalid location id `{id}`"));
            }
            if self.locations[..i].iter().any(|m| m.id() == id) {
                return bad(format!("duplicate location `{id}`"));
            }
        }
        for (i, y) in self.test_years.iter().enumerate() {
            if self.test_years[..i].contains(y) {
                return bad(format!("duplicate test year {y}"));
            }
        }
        for (i, s) in self.strategies.iter().enumerate() {
            if self.strategies[..i].iter().any(|t| t.name() == s.name()) {
                return bad(format!("duplicate strategy {}", s.name()));
            }
        }
        for (i, a) in self.alphas.iter().enumerate() {
            a.validate().map_err(|e| CliError::Config(e.to_string()))?;
            if self.alphas[..i].contains(a) {
                return bad(format!("duplicate alpha {}", a.label()));
            }
        }
        let space = self.space();
        let probe = self.pbo.instantiate(&space, RiskSpec::stochastic(), 0);
        probe.validate(&space).map_err(|e| CliError::Config(format!("pbo: {e}")))?;
        if let Some(list) = &self.pbo.instances {
            if list.len() != self.pbo.n_instances {
                return bad(format!("{} instance templates for n_instances = {}", list.len(), self.pbo.n_instances));
            }
        }
        self.baseline_decision(&space)?;
        if self.evaluator == EvaluatorKind::External {
            let ext = self
                .external
                .as_ref()
                .ok_or_else(|| CliError::Config("evaluator `external` needs an `external` section".into()))?;
            ext.validate().map_err(|e| CliError::Config(format!("external: {e}")))?;
        }
        Ok(())
    }

    /// The baseline as a grid point.
    pub fn baseline_decision(&self, space: &DecisionSpace) -> Result<DecisionVector, CliError> {
        let values = match &self.baseline {
            Some(b) => b.clone(),
            None if self.space.is_none() => default_baseline(),
            None => return Err(CliError::Config("a custom decision space needs a `baseline`".into())),
        };
        for name in values.keys() {
            if space.variable(name).is_none() {
                return Err(CliError::Config(format!("baseline names unknown variable `{name}`")));
            }
        }
        let mut levels = Vec::with_capacity(space.dims());
        for v in space.variables() {
            let value = *values
                .get(&v.name)
                .ok_or_else(|| CliError::Config(format!("baseline is missing `{}`", v.name)))?;
            let level = v
                .grid
                .iter()
                .position(|g| (g - value).abs() <= 1e-9 * g.abs().max(1.0))
                .ok_or_else(|| CliError::Config(format!("baseline {} = {value} is not a grid value", v.name)))?;
            levels.push(level);
        }
        DecisionVector::new(levels, space).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Seed of the PBO run for one cell. Risk levels share the seed so that
    /// runs differing only in alpha start from the same initial design.
    pub fn cell_seed(&self, location: &str, year: i32, strategy: &StrategySpec) -> u64 {
        derive_seed(self.master_seed, &[location, &year.to_string(), &strategy.name()])
    }

    /// Copy suitable for echoing into reports: no output directory, and
    /// paths shown relative to `base` when possible.
    pub fn echo(&self, base: &Path) -> ExperimentConfig {
        let rel = |p: &Path| p.strip_prefix(base).map(Path::to_path_buf).unwrap_or_else(|_| p.to_path_buf());
        let mut c = self.clone();
        c.output_dir = None;
        c.weather_dir = rel(&c.weather_dir);
        if let Some(params) = c.surrogate.as_mut().and_then(|s| s.params.as_mut()) {
            *params = rel(params);
        }
        if let Some(ext) = c.external.as_mut() {
            ext.template = rel(&ext.template);
            if let Some(dir) = ext.cache_dir.as_mut() {
                *dir = rel(dir);
            }
        }
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> &'static str {
        r#"{
            "locations": ["ames", {"id": "nashua", "group": "north"}],
            "weather_dir": "weather",
            "test_years": [2016],
            "strategies": [{"label": "strategy-1"}, {"label": "strategy-3"}],
            "alphas": ["robust", 0.5, 1],
            "master_seed": 7
        }"#
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg: ExperimentConfig = serde_json::from_str(minimal()).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.locations[0].group(), "ames");
        assert_eq!(cfg.locations[1].group(), "north");
        assert_eq!(cfg.pbo, PboTemplate::default());
        assert_eq!(cfg.alphas[0], RiskLevel::Robust);
        let space = cfg.space();
        let base = cfg.baseline_decision(&space).unwrap();
        assert_eq!(base.values(&space), vec![126.0, 160.0, 105.0, 8.0, 110.0]);
    }

    #[test]
    fn seeds_ignore_alpha_but_not_strategy() {
        let cfg: ExperimentConfig = serde_json::from_str(minimal()).unwrap();
        let s1 = StrategySpec::strategy_1();
        let s3 = StrategySpec::strategy_3();
        assert_ne!(cfg.cell_seed("ames", 2016, &s1), cfg.cell_seed("ames", 2016, &s3));
        assert_ne!(cfg.cell_seed("ames", 2016, &s1), cfg.cell_seed("ames", 2015, &s1));
    }

    #[test]
    fn invalid_configs_are_config_errors() {
        let mut cfg: ExperimentConfig = serde_json::from_str(minimal()).unwrap();
        cfg.alphas.push(RiskLevel::Alpha(1.0));
        assert!(matches!(cfg.validate(), Err(CliError::Config(_))));

        let mut cfg: ExperimentConfig = serde_json::from_str(minimal()).unwrap();
        cfg.baseline = Some([("planting_date".to_string(), 127.0)].into());
        assert!(cfg.validate().is_err());

        let mut cfg: ExperimentConfig = serde_json::from_str(minimal()).unwrap();
        cfg.evaluator = EvaluatorKind::External;
        assert!(cfg.validate().is_err());

        assert!(serde_json::from_str::<ExperimentConfig>(&minimal().replace("\"master_seed\"", "\"seed\"")).is_err());
        assert!(serde_json::from_str::<ExperimentConfig>(&minimal().replace("0.5", "1.5")).is_err()
            || serde_json::from_str::<ExperimentConfig>(&minimal().replace("0.5", "1.5")).unwrap().validate().is_err());
    }
}
