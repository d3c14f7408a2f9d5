//! Parallel Bayesian optimization: several GP/acquisition instances take
//! turns proposing grid points and share one dataset of CVaR-aggregated
//! evaluations.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::acquisition::{self, AcquisitionSpec, MaximizeOptions, Proposal, ProposalSource};
use crate::domain::{Dataset, DecisionSpace, DecisionVector, EvaluationRecord, ScenarioSet};
use crate::error::{Error, EvalError, Result};
use crate::gp::{self, GpModel, KernelFamily, KernelSpec};
use crate::risk::{self, RiskSpec};
use crate::seed::derive_seed;
use crate::simulator::Evaluator;

/// Lengthscale used by the default instance configurations (unit-cube inputs).
pub const DEFAULT_INSTANCE_LENGTHSCALE: f64 = 0.3;

const REFIT_MULTIPLIERS: [f64; 7] = [0.25, 0.4, 0.63, 1.0, 1.6, 2.5, 4.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoInstanceConfig {
    pub kernel: KernelSpec,
    pub acquisition: AcquisitionSpec,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SharingMode {
    /// Instance n sees the results of instances 1..n-1 from the same iteration.
    #[default]
    SequentialWithinIteration,
    /// All instances propose from the dataset as it was at the start of the
    /// iteration; results are appended together at the end.
    SnapshotPerIteration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PboConfig {
    pub n_instances: usize,
    pub max_iterations: usize,
    pub risk: RiskSpec,
    pub instance_configs: Vec<BoInstanceConfig>,
    pub initial_design_size: usize,
    #[serde(default)]
    pub sharing_mode: SharingMode,
    /// Seed of the initial design.
    pub design_seed: u64,
    #[serde(default)]
    pub maximize: MaximizeOptions,
    /// Every `k` iterations, rescale each instance's lengthscales by the
    /// multiplier that maximizes the marginal likelihood. Off by default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refit_every: Option<usize>,
}

/// Default initial design size: `max(5, 2d)`.
pub fn default_initial_design_size(dims: usize) -> usize {
    (2 * dims).max(5)
}

/// Default instance set, cycling through squared-exponential/EI,
/// Matérn-5/2/EI, Matérn-5/2/UCB(κ=2) and squared-exponential/PI(ξ=0.01).
/// Instance seeds are derived from `seed`.
pub fn default_instances(n: usize, dims: usize, seed: u64) -> Vec<BoInstanceConfig> {
    let cycle = [
        (KernelFamily::SquaredExponential, AcquisitionSpec::expected_improvement(0.0)),
        (KernelFamily::Matern52, AcquisitionSpec::expected_improvement(0.0)),
        (KernelFamily::Matern52, AcquisitionSpec::upper_confidence_bound(2.0)),
        (KernelFamily::SquaredExponential, AcquisitionSpec::probability_of_improvement(0.01)),
    ];
    (0..n)
        .map(|i| {
            let (family, acquisition) = cycle[i % cycle.len()];
            let mut kernel = KernelSpec::with_defaults(family, dims);
            kernel.lengthscales = vec![DEFAULT_INSTANCE_LENGTHSCALE; dims];
            BoInstanceConfig {
                kernel,
                acquisition,
                seed: derive_seed(seed, &["instance", &i.to_string()]),
            }
        })
        .collect()
}

impl PboConfig {
    /// Default configuration for `space`, all seeds derived from `seed`.
    pub fn with_defaults(space: &DecisionSpace, n_instances: usize, max_iterations: usize, risk: RiskSpec, seed: u64) -> Self {
        PboConfig {
            n_instances,
            max_iterations,
            risk,
            instance_configs: default_instances(n_instances, space.dims(), seed),
            initial_design_size: (default_initial_design_size(space.dims()) as u64).min(space.cardinality()) as usize,
            sharing_mode: SharingMode::default(),
            design_seed: derive_seed(seed, &["design"]),
            maximize: MaximizeOptions::default(),
            refit_every: None,
        }
    }

    pub fn validate(&self, space: &DecisionSpace) -> Result<()> {
        if self.n_instances == 0 {
            return Err(Error::domain("n_instances must be at least 1"));
        }
        if self.max_iterations == 0 {
            return Err(Error::domain("max_iterations must be at least 1"));
        }
        if self.instance_configs.len() != self.n_instances {
            return Err(Error::domain(format!(
                "{} instance configs for {} instances",
                self.instance_configs.len(),
                self.n_instances
            )));
        }
        RiskSpec::new(self.risk.alpha)?;
        if self.initial_design_size == 0 {
            return Err(Error::domain("initial_design_size must be at least 1"));
        }
        if self.initial_design_size as u64 > space.cardinality() {
            return Err(Error::domain(format!(
                "initial design of {} points exceeds the {} grid points",
                self.initial_design_size,
                space.cardinality()
            )));
        }
        if self.refit_every == Some(0) {
            return Err(Error::domain("refit_every must be at least 1"));
        }
        if self.maximize.n_starts == 0 || self.maximize.max_iterations == 0 {
            return Err(Error::domain("maximize needs at least one start and one iteration"));
        }
        for inst in &self.instance_configs {
            inst.kernel.for_dims(space.dims())?;
            inst.acquisition.validate()?;
        }
        Ok(())
    }
}

/// Seeded Latin-hypercube sample of `size` distinct grid points.
///
/// Each dimension is split into `size` strata visited in random order; a
/// uniform draw within the stratum is mapped to the grid level it falls in.
/// Collisions (likely on coarse grids) are replaced by uniformly random
/// unused points.
pub fn latin_hypercube(space: &DecisionSpace, size: usize, seed: u64) -> Result<Vec<DecisionVector>> {
    if size as u64 > space.cardinality() {
        return Err(Error::domain(format!(
            "cannot draw {size} distinct points from {} grid points",
            space.cardinality()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let columns: Vec<Vec<usize>> = space
        .variables()
        .iter()
        .map(|v| {
            let mut strata: Vec<usize> = (0..size).collect();
            strata.shuffle(&mut rng);
            strata
                .into_iter()
                .map(|s| {
                    let u = (s as f64 + rng.gen::<f64>()) / size as f64;
                    ((u * v.len() as f64) as usize).min(v.len() - 1)
                })
                .collect()
        })
        .collect();

    let mut seen = HashSet::new();
    let mut points = Vec::with_capacity(size);
    for i in 0..size {
        let x = DecisionVector::new(columns.iter().map(|c| c[i]).collect(), space)?;
        let x = if seen.contains(&space.flat_index(&x)) {
            acquisition::random_unexplored(space, &seen, &mut rng).expect("size <= cardinality")
        } else {
            x
        };
        seen.insert(space.flat_index(&x));
        points.push(x);
    }
    Ok(points)
}

/// One proposal and what became of it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalRecord {
    pub iteration: usize,
    pub instance: usize,
    pub x: DecisionVector,
    pub source: ProposalSource,
    /// Acquisition value behind the proposal; absent when the point replaced
    /// a duplicate claimed by another instance.
    pub acquisition: Option<f64>,
    /// Aggregated objective, absent when evaluation failed.
    pub y: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PboResult {
    pub best: EvaluationRecord,
    pub dataset: Dataset,
    /// Incumbent objective after the initial design (entry 0) and after each
    /// completed iteration.
    pub trace: Vec<f64>,
    /// Simulator calls made, including those of failed proposals.
    pub evaluation_count: usize,
    /// True when the run stopped because every grid point was explored.
    pub exhausted: bool,
    pub proposals: Vec<ProposalRecord>,
    /// Initial-design points whose evaluation failed.
    pub failed_initial: Vec<DecisionVector>,
}

/// Everything needed to rerun an optimization bit-exactly, plus its outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: PboConfig,
    pub space: DecisionSpace,
    pub scenario_ids: Vec<String>,
    pub probabilities: Vec<f64>,
    /// SHA-256 over the weather of every scenario, in order.
    pub scenario_digest: String,
    pub trace: Vec<f64>,
    pub evaluation_count: usize,
    pub exhausted: bool,
    pub best: EvaluationRecord,
    pub dataset: Dataset,
    pub proposals: Vec<ProposalRecord>,
}

/// Digest of a scenario set's ids, probabilities and weather.
pub fn scenario_digest(scenarios: &ScenarioSet) -> String {
    let mut h = Sha256::new();
    for (s, p) in scenarios.scenarios().iter().zip(scenarios.probabilities()) {
        h.update(s.id.as_bytes());
        h.update(b"\0");
        h.update(s.source_year.to_le_bytes());
        h.update(p.to_bits().to_le_bytes());
        for d in s.days() {
            h.update(d.date.to_string().as_bytes());
            for v in [d.radiation, d.max_temp, d.min_temp, d.rain] {
                h.update(v.to_bits().to_le_bytes());
            }
        }
    }
    hex::encode(h.finalize())
}

impl RunManifest {
    pub fn new(config: &PboConfig, space: &DecisionSpace, scenarios: &ScenarioSet, result: &PboResult) -> Self {
        RunManifest {
            config: config.clone(),
            space: space.clone(),
            scenario_ids: scenarios.scenarios().iter().map(|s| s.id.clone()).collect(),
            probabilities: scenarios.probabilities().to_vec(),
            scenario_digest: scenario_digest(scenarios),
            trace: result.trace.clone(),
            evaluation_count: result.evaluation_count,
            exhausted: result.exhausted,
            best: result.best.clone(),
            dataset: result.dataset.clone(),
            proposals: result.proposals.clone(),
        }
    }
}

struct Evaluated {
    per_scenario: std::result::Result<Vec<f64>, EvalError>,
    calls: usize,
}

/// Evaluates `x` on every scenario (concurrently), reducing in scenario order.
fn evaluate_point<E: Evaluator + ?Sized>(
    evaluator: &E,
    x: &DecisionVector,
    space: &DecisionSpace,
    scenarios: &ScenarioSet,
) -> Evaluated {
    let results: Vec<std::result::Result<f64, EvalError>> = scenarios
        .scenarios()
        .par_iter()
        .map(|s| evaluator.evaluate(x, space, s).and_then(crate::simulator::check_yield))
        .collect();
    let calls = results.len();
    Evaluated {
        per_scenario: results.into_iter().collect(),
        calls,
    }
}

struct Instance {
    config: BoInstanceConfig,
    kernel: KernelSpec,
    rng: ChaCha8Rng,
}

fn fit(inst: &Instance, data: &Dataset, space: &DecisionSpace) -> Result<GpModel> {
    GpModel::fit(data, &inst.kernel, space)
}

fn propose(
    inst: &Instance,
    data: &Dataset,
    space: &DecisionSpace,
    explored: &HashSet<u64>,
    seed: u64,
    opts: &MaximizeOptions,
) -> Result<Proposal> {
    let model = fit(inst, data, space)?;
    acquisition::maximize_acquisition(&inst.config.acquisition, &model, space, data, explored, seed, opts)
}

/// Runs parallel Bayesian optimization over `space`.
///
/// A proposal whose evaluation fails on any scenario is logged, kept out of
/// the dataset and never proposed again. If at least half of an iteration's
/// proposals fail, the run aborts.
pub fn run<E: Evaluator + ?Sized>(
    config: &PboConfig,
    space: &DecisionSpace,
    scenarios: &ScenarioSet,
    evaluator: &E,
) -> Result<PboResult> {
    config.validate(space)?;
    if scenarios.is_empty() {
        return Err(Error::domain("scenario set must not be empty"));
    }
    let mut instances: Vec<Instance> = config
        .instance_configs
        .iter()
        .map(|c| {
            Ok(Instance {
                config: c.clone(),
                kernel: c.kernel.for_dims(space.dims())?,
                rng: ChaCha8Rng::seed_from_u64(c.seed),
            })
        })
        .collect::<Result<_>>()?;

    let mut data = Dataset::new();
    let mut explored: HashSet<u64> = HashSet::new();
    let mut evaluation_count = 0usize;
    let mut failed_initial = Vec::new();
    let mut first_error = None;
    let mut proposals = Vec::new();

    let aggregate = |per: &[f64]| risk::aggregate(per, scenarios, &config.risk);

    for x in latin_hypercube(space, config.initial_design_size, config.design_seed)? {
        explored.insert(space.flat_index(&x));
        let ev = evaluate_point(evaluator, &x, space, scenarios);
        evaluation_count += ev.calls;
        match ev.per_scenario {
            Ok(per) => {
                let y = aggregate(&per)?;
                data.push(EvaluationRecord { x, per_scenario: per, y });
            }
            Err(e) => {
                log::warn!("initial design point {:?} failed: {e}", x.levels());
                first_error.get_or_insert_with(|| e.to_string());
                failed_initial.push(x);
            }
        }
    }
    if data.is_empty() {
        return Err(Error::Aborted(format!(
            "all {} initial design points failed to evaluate; first error: {}",
            config.initial_design_size,
            first_error.unwrap_or_default()
        )));
    }

    let mut trace = vec![data.incumbent().expect("nonempty").y];
    let mut exhausted = false;

    'iterations: for t in 1..=config.max_iterations {
        if let Some(k) = config.refit_every {
            if t % k == 0 {
                refit(&mut instances, &data, space)?;
            }
        }
        let seeds: Vec<u64> = instances.iter_mut().map(|i| i.rng.next_u64()).collect();
        let mut made = 0usize;
        let mut failures: Vec<String> = Vec::new();

        match config.sharing_mode {
            SharingMode::SequentialWithinIteration => {
                for (n, inst) in instances.iter().enumerate() {
                    let proposal = propose(inst, &data, space, &explored, seeds[n], &config.maximize)?;
                    let Proposal::Point { x, source, acquisition } = proposal else {
                        exhausted = true;
                        break;
                    };
                    made += 1;
                    explored.insert(space.flat_index(&x));
                    let ev = evaluate_point(evaluator, &x, space, scenarios);
                    evaluation_count += ev.calls;
                    let rec = settle(t, n, x, source, Some(acquisition), ev.per_scenario, &aggregate, &mut data)?;
                    if let Some(e) = &rec.error {
                        failures.push(e.clone());
                    }
                    proposals.push(rec);
                }
            }
            SharingMode::SnapshotPerIteration => {
                let snapshot = &data;
                let raw: Vec<Result<Proposal>> = instances
                    .par_iter()
                    .enumerate()
                    .map(|(n, inst)| propose(inst, snapshot, space, &explored, seeds[n], &config.maximize))
                    .collect();
                let mut accepted = Vec::new();
                for (n, p) in raw.into_iter().enumerate() {
                    let (x, source, acquisition) = match p? {
                        Proposal::Point { x, source, acquisition } if !explored.contains(&space.flat_index(&x)) => {
                            (x, source, Some(acquisition))
                        }
                        Proposal::Point { .. } => {
                            // Another instance claimed the same point this iteration.
                            let mut rng = ChaCha8Rng::seed_from_u64(seeds[n] ^ 0x5eed_d00d);
                            match acquisition::random_unexplored(space, &explored, &mut rng) {
                                Some(x) => (x, ProposalSource::RandomUnexplored, None),
                                None => {
                                    exhausted = true;
                                    continue;
                                }
                            }
                        }
                        Proposal::Exhausted => {
                            exhausted = true;
                            continue;
                        }
                    };
                    explored.insert(space.flat_index(&x));
                    accepted.push((n, x, source, acquisition));
                }
                let evaluated: Vec<Evaluated> = accepted
                    .par_iter()
                    .map(|(_, x, _, _)| evaluate_point(evaluator, x, space, scenarios))
                    .collect();
                for ((n, x, source, acquisition), ev) in accepted.into_iter().zip(evaluated) {
                    made += 1;
                    evaluation_count += ev.calls;
                    let rec = settle(t, n, x, source, acquisition, ev.per_scenario, &aggregate, &mut data)?;
                    if let Some(e) = &rec.error {
                        failures.push(e.clone());
                    }
                    proposals.push(rec);
                }
            }
        }

        if made > 0 && 2 * failures.len() >= made {
            return Err(Error::Aborted(format!(
                "iteration {t}: {} of {made} proposals failed; first error: {}",
                failures.len(),
                failures[0]
            )));
        }
        if made > 0 {
            trace.push(data.incumbent().expect("nonempty").y);
        }
        if exhausted {
            break 'iterations;
        }
    }

    Ok(PboResult {
        best: data.incumbent().expect("nonempty").clone(),
        dataset: data,
        trace,
        evaluation_count,
        exhausted,
        proposals,
        failed_initial,
    })
}

#[allow(clippy::too_many_arguments)]
fn settle(
    iteration: usize,
    instance: usize,
    x: DecisionVector,
    source: ProposalSource,
    acquisition: Option<f64>,
    outcome: std::result::Result<Vec<f64>, EvalError>,
    aggregate: &dyn Fn(&[f64]) -> Result<f64>,
    data: &mut Dataset,
) -> Result<ProposalRecord> {
    let mut rec = ProposalRecord {
        iteration,
        instance,
        x: x.clone(),
        source,
        acquisition,
        y: None,
        error: None,
    };
    match outcome {
        Ok(per) => {
            let y = aggregate(&per)?;
            rec.y = Some(y);
            data.push(EvaluationRecord { x, per_scenario: per, y });
        }
        Err(e) => {
            log::warn!("iteration {iteration}, instance {instance}: evaluation of {:?} failed: {e}", x.levels());
            rec.error = Some(e.to_string());
        }
    }
    Ok(rec)
}

fn refit(instances: &mut [Instance], data: &Dataset, space: &DecisionSpace) -> Result<()> {
    let inputs: Vec<Vec<f64>> = data.records().iter().map(|r| space.encode(&r.x)).collect();
    let targets: Vec<f64> = data.records().iter().map(|r| r.y).collect();
    for inst in instances {
        let base = inst.config.kernel.for_dims(space.dims())?;
        inst.kernel = gp::refit_lengthscale_scale(&inputs, &targets, &base, &REFIT_MULTIPLIERS)?;
    }
    Ok(())
}
