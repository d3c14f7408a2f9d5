//! Acquisition functions over a fitted GP and their multi-start maximization.

pub mod lbfgsb;

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::domain::{Dataset, DecisionSpace, DecisionVector};
use crate::error::{Error, Result};
use crate::gp::GpModel;
use lbfgsb::{BoxLbfgsOptions, BoxLbfgsResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AcquisitionFamily {
    ExpectedImprovement,
    UpperConfidenceBound,
    ProbabilityOfImprovement,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionSpec {
    pub family: AcquisitionFamily,
    /// UCB exploration weight.
    #[serde(default = "default_kappa")]
    pub kappa: f64,
    /// EI/PI improvement offset.
    #[serde(default)]
    pub xi: f64,
}

fn default_kappa() -> f64 {
    2.0
}

impl AcquisitionSpec {
    pub fn expected_improvement(xi: f64) -> Self {
        AcquisitionSpec {
            family: AcquisitionFamily::ExpectedImprovement,
            kappa: default_kappa(),
            xi,
        }
    }

    pub fn upper_confidence_bound(kappa: f64) -> Self {
        AcquisitionSpec {
            family: AcquisitionFamily::UpperConfidenceBound,
            kappa,
            xi: 0.0,
        }
    }

    pub fn probability_of_improvement(xi: f64) -> Self {
        AcquisitionSpec {
            family: AcquisitionFamily::ProbabilityOfImprovement,
            kappa: default_kappa(),
            xi,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.family == AcquisitionFamily::UpperConfidenceBound
            && !(self.kappa.is_finite() && self.kappa > 0.0)
        {
            return Err(Error::domain(format!("UCB kappa must be positive, got {}", self.kappa)));
        }
        if !(self.xi.is_finite() && self.xi >= 0.0) {
            return Err(Error::domain(format!("xi must be nonnegative, got {}", self.xi)));
        }
        Ok(())
    }

    /// Score from a posterior mean/standard deviation and incumbent value.
    pub fn score(&self, mean: f64, sd: f64, incumbent_y: f64) -> f64 {
        match self.family {
            AcquisitionFamily::UpperConfidenceBound => mean + self.kappa * sd,
            AcquisitionFamily::ExpectedImprovement => {
                let d = mean - incumbent_y - self.xi;
                if sd <= 0.0 {
                    return d.max(0.0);
                }
                let z = d / sd;
                // Clamp away tiny negative values from cancellation.
                (d * norm_cdf(z) + sd * norm_pdf(z)).max(0.0)
            }
            AcquisitionFamily::ProbabilityOfImprovement => {
                let d = mean - incumbent_y - self.xi;
                if sd <= 0.0 {
                    return if d > 0.0 { 1.0 } else { 0.0 };
                }
                norm_cdf(d / sd)
            }
        }
    }
}

pub fn norm_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

pub fn norm_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Below this z the tails of `Φ` and `φ` are taken from asymptotic series;
/// above it the direct forms keep full relative accuracy up to cancellation.
const TAIL_Z: f64 = -35.0;

fn log_norm_pdf(z: f64) -> f64 {
    -0.5 * z * z - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

/// `ln Φ(z)` without underflow for very negative `z`.
pub fn log_norm_cdf(z: f64) -> f64 {
    if z >= TAIL_Z {
        return norm_cdf(z).ln();
    }
    let w = 1.0 / (z * z);
    log_norm_pdf(z) - (-z).ln() + (1.0 - w + 3.0 * w * w - 15.0 * w * w * w).ln()
}

/// `ln(φ(z) + zΦ(z))`, the log of expected improvement per unit sd.
pub fn log_ei_unit(z: f64) -> f64 {
    if z >= -1.0 {
        return (norm_pdf(z) + z * norm_cdf(z)).ln();
    }
    if z >= TAIL_Z {
        // φ(z)(1 + zΦ(z)/φ(z)); the ratio is formed before either factor
        // underflows.
        let ratio = norm_cdf(z) / norm_pdf(z);
        return log_norm_pdf(z) + (1.0 + z * ratio).ln();
    }
    let w = 1.0 / (z * z);
    log_norm_pdf(z) + w.ln() + (1.0 - 3.0 * w + 15.0 * w * w - 105.0 * w * w * w).ln()
}

impl AcquisitionSpec {
    /// Strictly increasing transform of [`score`](Self::score) that local
    /// searches climb. EI and PI underflow to zero far from promising
    /// regions, which leaves no gradient; their logarithms do not.
    pub fn search_objective(&self, mean: f64, sd: f64, incumbent_y: f64) -> f64 {
        let d = mean - incumbent_y - self.xi;
        match self.family {
            AcquisitionFamily::UpperConfidenceBound => self.score(mean, sd, incumbent_y),
            _ if sd <= 0.0 => self.score(mean, sd, incumbent_y).ln().max(f64::MIN),
            AcquisitionFamily::ExpectedImprovement => sd.ln() + log_ei_unit(d / sd),
            AcquisitionFamily::ProbabilityOfImprovement => log_norm_cdf(d / sd),
        }
    }
}

/// Acquisition value at unit-cube point `u`.
pub fn acquisition_value(spec: &AcquisitionSpec, model: &GpModel, u: &[f64], incumbent_y: f64) -> f64 {
    let p = model.predict(u);
    spec.score(p.mean, p.std_dev(), incumbent_y)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaximizeOptions {
    pub n_starts: usize,
    pub max_iterations: usize,
    pub pg_tolerance: f64,
    pub fd_step: f64,
    /// Uniform candidates scored before the local searches.
    pub screen_pool: usize,
    /// Best-scoring candidates from the pool added as extra starts.
    pub screened_starts: usize,
}

impl Default for MaximizeOptions {
    fn default() -> Self {
        MaximizeOptions {
            n_starts: 16,
            screen_pool: 1000,
            screened_starts: 4,
            max_iterations: 200,
            pg_tolerance: 1e-8,
            fd_step: 1e-6,
        }
    }
}

/// Outcome of one local run of the continuous maximizer.
#[derive(Debug, Clone)]
pub struct LocalOptimum {
    pub start: Vec<f64>,
    pub point: Vec<f64>,
    pub value: f64,
    pub converged: bool,
}

/// Runs the box-constrained quasi-Newton method on `-acquisition` from each
/// start in `[0,1]^d`. Results keep the order of `starts`.
pub fn maximize_continuous(
    spec: &AcquisitionSpec,
    model: &GpModel,
    incumbent_y: f64,
    starts: &[Vec<f64>],
    opts: &MaximizeOptions,
) -> Vec<LocalOptimum> {
    let dims = model.dims();
    let lower = vec![0.0; dims];
    let upper = vec![1.0; dims];
    let lbfgs = BoxLbfgsOptions {
        max_iterations: opts.max_iterations,
        pg_tolerance: opts.pg_tolerance,
        ..Default::default()
    };
    starts
        .par_iter()
        .map(|start| {
            let mut neg = |u: &[f64]| {
                let p = model.predict(u);
                -spec.search_objective(p.mean, p.std_dev(), incumbent_y)
            };
            let run: BoxLbfgsResult = lbfgsb::minimize(
                |u, g| {
                    lbfgsb::central_gradient(&mut neg, u, opts.fd_step, g);
                    neg(u)
                },
                start,
                &lower,
                &upper,
                &lbfgs,
            );
            LocalOptimum {
                start: start.clone(),
                converged: run.converged(),
                value: acquisition_value(spec, model, &run.x, incumbent_y),
                point: run.x,
            }
        })
        .collect()
}

/// Best converged local optimum, or the best of all when none converged.
/// Ties resolve to the earliest start.
pub fn best_local(results: &[LocalOptimum]) -> Option<&LocalOptimum> {
    let pick = |converged_only: bool| {
        results
            .iter()
            .filter(|r| !converged_only || r.converged)
            .fold(None, |best: Option<&LocalOptimum>, r| match best {
                Some(b) if b.value >= r.value => Some(b),
                _ => Some(r),
            })
    };
    pick(true).or_else(|| pick(false))
}

/// How a proposal was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposalSource {
    /// Decoded best local optimum.
    Optimizer,
    /// Decoded optimum of a lower-ranked start; the best one was already explored.
    AlternateStart,
    RandomUnexplored,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Proposal {
    Point {
        x: DecisionVector,
        source: ProposalSource,
        /// Acquisition value at the continuous optimum that produced `x`.
        acquisition: f64,
    },
    /// Every grid point has been explored.
    Exhausted,
}

/// Proposes the next grid point to evaluate.
///
/// Starts are `opts.n_starts` uniform draws, the encoded incumbent and the
/// `opts.screened_starts` best points of a uniform pool. The best converged continuous optimum is decoded to the grid; if that point is
/// in `explored`, decoded optima of the remaining starts are tried in order of
/// acquisition value, then a uniformly random unexplored point.
pub fn maximize_acquisition(
    spec: &AcquisitionSpec,
    model: &GpModel,
    space: &DecisionSpace,
    data: &Dataset,
    explored: &HashSet<u64>,
    seed: u64,
    opts: &MaximizeOptions,
) -> Result<Proposal> {
    if opts.n_starts == 0 {
        return Err(Error::domain("n_starts must be at least 1"));
    }
    if explored.len() as u64 >= space.cardinality() {
        return Ok(Proposal::Exhausted);
    }
    let incumbent = data
        .incumbent()
        .ok_or_else(|| Error::domain("acquisition needs a nonempty dataset"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = space.dims();
    let mut starts: Vec<Vec<f64>> = (0..opts.n_starts)
        .map(|_| (0..dims).map(|_| rng.gen::<f64>()).collect())
        .collect();
    starts.push(space.encode(&incumbent.x));
    if opts.screened_starts > 0 {
        // Narrow acquisition peaks can fall between the random starts; a
        // cheap scan of a larger pool seeds searches inside them.
        let pool: Vec<Vec<f64>> = (0..opts.screen_pool)
            .map(|_| (0..dims).map(|_| rng.gen::<f64>()).collect())
            .collect();
        let scores: Vec<f64> = pool
            .par_iter()
            .map(|u| {
                let p = model.predict(u);
                spec.search_objective(p.mean, p.std_dev(), incumbent.y)
            })
            .collect();
        let mut order: Vec<usize> = (0..pool.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
        starts.extend(order.into_iter().take(opts.screened_starts).map(|i| pool[i].clone()));
    }

    let results = maximize_continuous(spec, model, incumbent.y, &starts, opts);
    let best = best_local(&results).expect("at least one start");
    let best_x = space.decode(&best.point)?;
    if !explored.contains(&space.flat_index(&best_x)) {
        return Ok(Proposal::Point {
            x: best_x,
            source: ProposalSource::Optimizer,
            acquisition: best.value,
        });
    }

    let mut ranked: Vec<&LocalOptimum> = results.iter().collect();
    ranked.sort_by(|a, b| b.value.total_cmp(&a.value));
    for r in ranked {
        let x = space.decode(&r.point)?;
        if !explored.contains(&space.flat_index(&x)) {
            return Ok(Proposal::Point {
                x,
                source: ProposalSource::AlternateStart,
                acquisition: r.value,
            });
        }
    }

    match random_unexplored(space, explored, &mut rng) {
        Some(x) => {
            let value = acquisition_value(spec, model, &space.encode(&x), incumbent.y);
            Ok(Proposal::Point {
                x,
                source: ProposalSource::RandomUnexplored,
                acquisition: value,
            })
        }
        None => Ok(Proposal::Exhausted),
    }
}

/// Uniformly random grid point outside `explored`, if any remain.
pub fn random_unexplored<R: Rng>(
    space: &DecisionSpace,
    explored: &HashSet<u64>,
    rng: &mut R,
) -> Option<DecisionVector> {
    let total = space.cardinality();
    if explored.len() as u64 >= total {
        return None;
    }
    for _ in 0..64 {
        let i = rng.gen_range(0..total);
        if !explored.contains(&i) {
            return Some(space.from_flat_index(i));
        }
    }
    let free: Vec<u64> = (0..total).filter(|i| !explored.contains(i)).collect();
    let pick = free[rng.gen_range(0..free.len())];
    Some(space.from_flat_index(pick))
}
