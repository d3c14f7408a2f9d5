//! Exact Gaussian-process regression on the encoded unit cube.
//!
//! Targets are standardized with the dataset's sample mean and standard
//! deviation before fitting a zero-mean GP; predictions are returned in the
//! original units. The regularized kernel matrix `K + (noise + jitter) I` is
//! Cholesky-factorized once per fit, escalating the jitter from 1e-10 by
//! decades up to 1e-4 when the factorization fails.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::domain::{Dataset, DecisionSpace};
use crate::error::{Error, Result};

pub const JITTER_START: f64 = 1e-10;
pub const JITTER_MAX: f64 = 1e-4;
/// Standard deviations below this are treated as "no spread" and replaced by 1.
pub const STD_FLOOR: f64 = 1e-8;

pub const DEFAULT_LENGTHSCALE: f64 = 0.2;
pub const DEFAULT_SIGNAL_VARIANCE: f64 = 1.0;
pub const DEFAULT_NOISE_VARIANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelFamily {
    SquaredExponential,
    #[serde(rename = "matern-5/2")]
    Matern52,
    #[serde(rename = "matern-3/2")]
    Matern32,
}

/// Stationary ARD kernel with additive observation noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub lengthscales: Vec<f64>,
    pub signal_variance: f64,
    pub noise_variance: f64,
}

impl KernelSpec {
    pub fn new(
        family: KernelFamily,
        lengthscales: Vec<f64>,
        signal_variance: f64,
        noise_variance: f64,
    ) -> Result<Self> {
        let k = KernelSpec {
            family,
            lengthscales,
            signal_variance,
            noise_variance,
        };
        k.validate()?;
        Ok(k)
    }

    /// Default hyperparameters with one shared lengthscale.
    pub fn with_defaults(family: KernelFamily, dims: usize) -> Self {
        KernelSpec {
            family,
            lengthscales: vec![DEFAULT_LENGTHSCALE; dims],
            signal_variance: DEFAULT_SIGNAL_VARIANCE,
            noise_variance: DEFAULT_NOISE_VARIANCE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lengthscales.is_empty() {
            return Err(Error::domain("kernel needs at least one lengthscale"));
        }
        if self.lengthscales.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
            return Err(Error::domain("lengthscales must be finite and positive"));
        }
        if !(self.signal_variance.is_finite() && self.signal_variance > 0.0) {
            return Err(Error::domain("signal variance must be finite and positive"));
        }
        if !(self.noise_variance.is_finite() && self.noise_variance >= 0.0) {
            return Err(Error::domain("noise variance must be finite and nonnegative"));
        }
        Ok(())
    }

    /// Adapts the lengthscale vector to `dims`: a single value is broadcast.
    pub fn for_dims(&self, dims: usize) -> Result<Self> {
        let mut k = self.clone();
        if k.lengthscales.len() == 1 && dims > 1 {
            k.lengthscales = vec![k.lengthscales[0]; dims];
        }
        if k.lengthscales.len() != dims {
            return Err(Error::domain(format!(
                "kernel has {} lengthscales for {dims} dimensions",
                k.lengthscales.len()
            )));
        }
        k.validate()?;
        Ok(k)
    }

    /// Covariance between two points (no noise term).
    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        let r2: f64 = a
            .iter()
            .zip(b)
            .zip(&self.lengthscales)
            .map(|((x, y), l)| {
                let d = (x - y) / l;
                d * d
            })
            .sum();
        self.signal_variance * self.profile(r2)
    }

    /// Correlation as a function of squared scaled distance.
    fn profile(&self, r2: f64) -> f64 {
        match self.family {
            KernelFamily::SquaredExponential => (-0.5 * r2).exp(),
            KernelFamily::Matern52 => {
                let s = (5.0 * r2).sqrt();
                (1.0 + s + 5.0 * r2 / 3.0) * (-s).exp()
            }
            KernelFamily::Matern32 => {
                let s = (3.0 * r2).sqrt();
                (1.0 + s) * (-s).exp()
            }
        }
    }
}

/// Posterior mean and variance at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub mean: f64,
    pub variance: f64,
}

impl Prediction {
    pub fn std_dev(&self) -> f64 {
        self.variance.sqrt()
    }
}

/// A fitted GP. Immutable after construction and safe to share.
#[derive(Debug, Clone)]
pub struct GpModel {
    kernel: KernelSpec,
    dims: usize,
    /// Row-major `n × dims`.
    inputs: Vec<f64>,
    targets: Vec<f64>,
    y_mean: f64,
    y_std: f64,
    /// Row-major lower Cholesky factor, `n × n`.
    chol: Vec<f64>,
    /// `(K + (noise + jitter) I)^{-1} y_standardized`.
    weights: Vec<f64>,
    jitter: f64,
}

impl GpModel {
    /// Fits on every record of `data`, encoded into the unit cube.
    pub fn fit(data: &Dataset, kernel: &KernelSpec, space: &DecisionSpace) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::domain("cannot fit a GP to an empty dataset"));
        }
        let inputs: Vec<Vec<f64>> = data.records().iter().map(|r| space.encode(&r.x)).collect();
        let targets: Vec<f64> = data.records().iter().map(|r| r.y).collect();
        Self::fit_points(&inputs, &targets, kernel)
    }

    pub fn fit_points(inputs: &[Vec<f64>], targets: &[f64], kernel: &KernelSpec) -> Result<Self> {
        let n = inputs.len();
        if n == 0 || n != targets.len() {
            return Err(Error::domain(format!(
                "need matching nonempty inputs and targets, got {n} and {}",
                targets.len()
            )));
        }
        let dims = inputs[0].len();
        if inputs.iter().any(|u| u.len() != dims) {
            return Err(Error::domain("inputs have inconsistent dimension"));
        }
        if targets.iter().any(|y| !y.is_finite()) || inputs.iter().flatten().any(|c| !c.is_finite())
        {
            return Err(Error::domain("inputs and targets must be finite"));
        }
        let kernel = kernel.for_dims(dims)?;

        let (y_mean, y_std) = standardization(targets);
        let ys: Vec<f64> = targets.iter().map(|y| (y - y_mean) / y_std).collect();

        let gram = DMatrix::from_fn(n, n, |i, j| kernel.eval(&inputs[i], &inputs[j]));
        let mut jitter = JITTER_START;
        let factor = loop {
            let mut k = gram.clone();
            for i in 0..n {
                k[(i, i)] += kernel.noise_variance + jitter;
            }
            if let Some(c) = k.cholesky() {
                break c;
            }
            if jitter >= JITTER_MAX {
                return Err(Error::Numerical(format!(
                    "kernel matrix ({n}×{n}) not positive definite with jitter {jitter:e} \
                     on top of noise {:e}; reciprocal condition estimate {:e}",
                    kernel.noise_variance,
                    reciprocal_condition(&gram)
                )));
            }
            jitter *= 10.0;
        };
        if jitter > JITTER_START {
            log::debug!("gp fit needed jitter {jitter:e} for {n} points");
        }

        let l = factor.l();
        let mut chol = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                chol[i * n + j] = l[(i, j)];
            }
        }
        let mut model = GpModel {
            kernel,
            dims,
            inputs: inputs.iter().flatten().copied().collect(),
            targets: targets.to_vec(),
            y_mean,
            y_std,
            chol,
            weights: Vec::new(),
            jitter,
        };
        let z = model.forward(ys);
        model.weights = model.backward(z);
        Ok(model)
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// Jitter added to the diagonal on top of the noise variance.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// `(mean, std)` used to standardize targets.
    pub fn standardization(&self) -> (f64, f64) {
        (self.y_mean, self.y_std)
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.dims..(i + 1) * self.dims]
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    /// Posterior mean and variance in the original target units.
    pub fn predict(&self, u: &[f64]) -> Prediction {
        let (m, v) = self.predict_standardized(u);
        if v < -1e-12 {
            log::debug!("clamping predictive variance {v:e}");
        }
        Prediction {
            mean: self.y_mean + self.y_std * m,
            variance: self.y_std * self.y_std * v.max(0.0),
        }
    }

    /// Posterior mean and (unclamped) variance on the standardized scale.
    pub fn predict_standardized(&self, u: &[f64]) -> (f64, f64) {
        debug_assert_eq!(u.len(), self.dims);
        let n = self.len();
        let kstar: Vec<f64> = (0..n).map(|i| self.kernel.eval(self.input(i), u)).collect();
        let mean = kstar.iter().zip(&self.weights).map(|(a, b)| a * b).sum();
        let v = self.forward(kstar);
        let var = self.kernel.signal_variance - v.iter().map(|x| x * x).sum::<f64>();
        (mean, var)
    }

    /// Log marginal likelihood of the standardized targets.
    pub fn log_marginal_likelihood(&self) -> f64 {
        let n = self.len();
        let ys = self.targets.iter().map(|y| (y - self.y_mean) / self.y_std);
        let fit: f64 = ys.zip(&self.weights).map(|(y, w)| y * w).sum();
        let logdet: f64 = (0..n).map(|i| self.chol[i * n + i].ln()).sum();
        -0.5 * fit - logdet - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln()
    }

    /// Solves `L z = b`.
    fn forward(&self, mut b: Vec<f64>) -> Vec<f64> {
        let n = self.len();
        for i in 0..n {
            let row = &self.chol[i * n..i * n + i];
            let s: f64 = row.iter().zip(&b[..i]).map(|(l, z)| l * z).sum();
            b[i] = (b[i] - s) / self.chol[i * n + i];
        }
        b
    }

    /// Solves `Lᵀ x = b`.
    fn backward(&self, mut b: Vec<f64>) -> Vec<f64> {
        let n = self.len();
        for i in (0..n).rev() {
            let mut s = b[i];
            for k in i + 1..n {
                s -= self.chol[k * n + i] * b[k];
            }
            b[i] = s / self.chol[i * n + i];
        }
        b
    }
}

/// Sample mean and standard deviation; spreads below [`STD_FLOOR`] map to 1.
fn standardization(y: &[f64]) -> (f64, f64) {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    if y.len() < 2 {
        return (mean, 1.0);
    }
    let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let std = var.sqrt();
    (mean, if std < STD_FLOOR { 1.0 } else { std })
}

fn reciprocal_condition(m: &DMatrix<f64>) -> f64 {
    let eig = m.clone().symmetric_eigenvalues();
    let max = eig.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    if max > 0.0 {
        min / max
    } else {
        0.0
    }
}

/// Rescales all lengthscales by the multiplier (from `multipliers`) that
/// maximizes the log marginal likelihood on the given data. Used by the
/// optional periodic refit in the optimizer.
pub fn refit_lengthscale_scale(
    inputs: &[Vec<f64>],
    targets: &[f64],
    kernel: &KernelSpec,
    multipliers: &[f64],
) -> Result<KernelSpec> {
    let mut best: Option<(f64, KernelSpec)> = None;
    for &m in multipliers {
        let mut k = kernel.clone();
        k.lengthscales.iter_mut().for_each(|l| *l *= m);
        if let Ok(model) = GpModel::fit_points(inputs, targets, &k) {
            let lml = model.log_marginal_likelihood();
            if best.as_ref().map_or(true, |(b, _)| lml > *b) {
                best = Some((lml, k));
            }
        }
    }
    best.map(|(_, k)| k)
        .ok_or_else(|| Error::Numerical("no lengthscale candidate could be fitted".into()))
}
