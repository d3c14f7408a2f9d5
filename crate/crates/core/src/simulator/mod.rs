//! Crop-simulator contract and its implementations.

pub mod external;
pub mod surrogate;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use crate::domain::{DecisionSpace, DecisionVector, Scenario};
use crate::error::EvalError;

pub use external::{ExternalAdapterConfig, ExternalEvaluator, OutputRule};
pub use surrogate::{SurrogateEvaluator, SurrogateFactors, SurrogateParams};

/// Yield of one decision under one weather scenario.
///
/// Implementations must be pure per `(x, scenario)`: repeated calls return
/// the same finite, nonnegative value. Calls for different scenarios may run
/// concurrently.
pub trait Evaluator: Send + Sync {
    fn evaluate(
        &self,
        x: &DecisionVector,
        space: &DecisionSpace,
        scenario: &Scenario,
    ) -> Result<f64, EvalError>;
}

impl<E: Evaluator + ?Sized> Evaluator for &E {
    fn evaluate(&self, x: &DecisionVector, space: &DecisionSpace, s: &Scenario) -> Result<f64, EvalError> {
        (**self).evaluate(x, space, s)
    }
}

impl<E: Evaluator + ?Sized> Evaluator for Box<E> {
    fn evaluate(&self, x: &DecisionVector, space: &DecisionSpace, s: &Scenario) -> Result<f64, EvalError> {
        (**self).evaluate(x, space, s)
    }
}

impl<E: Evaluator + ?Sized> Evaluator for Arc<E> {
    fn evaluate(&self, x: &DecisionVector, space: &DecisionSpace, s: &Scenario) -> Result<f64, EvalError> {
        (**self).evaluate(x, space, s)
    }
}

/// Wraps an evaluator and counts calls.
#[derive(Debug)]
pub struct CountingEvaluator<E> {
    inner: E,
    calls: AtomicUsize,
}

impl<E> CountingEvaluator<E> {
    pub fn new(inner: E) -> Self {
        CountingEvaluator {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn inner(&self) -> &E {
        &self.inner
    }
}

impl<E: Evaluator> Evaluator for CountingEvaluator<E> {
    fn evaluate(&self, x: &DecisionVector, space: &DecisionSpace, s: &Scenario) -> Result<f64, EvalError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.evaluate(x, space, s)
    }
}

/// Adapts a closure into an evaluator; handy for tests and toy problems.
pub struct FnEvaluator<F>(pub F);

impl<F> Evaluator for FnEvaluator<F>
where
    F: Fn(&DecisionVector, &DecisionSpace, &Scenario) -> Result<f64, EvalError> + Send + Sync,
{
    fn evaluate(&self, x: &DecisionVector, space: &DecisionSpace, s: &Scenario) -> Result<f64, EvalError> {
        (self.0)(x, space, s)
    }
}

/// Rejects non-finite or negative yields.
pub fn check_yield(value: f64) -> Result<f64, EvalError> {
    if value.is_finite() && value >= 0.0 {
        Ok(value)
    } else {
        Err(EvalError::InvalidYield(value))
    }
}
