//! Discrete conditional value-at-risk over scenario outcomes.
//!
//! Outcomes are yields, so larger is better and the "worst" tail is the
//! lower tail. `cvar(values, p, alpha)` is the probability-weighted mean of
//! the lowest `alpha` mass of the outcome distribution, splitting the
//! boundary scenario's mass fractionally. `alpha = 1` gives the expected
//! value; `alpha` at or below the worst scenario's mass gives the minimum.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::domain::ScenarioSet;
use crate::error::{Error, Result};

/// Tolerance on `sum(probabilities) == 1`.
pub const PROBABILITY_SUM_TOL: f64 = 1e-12;

pub(crate) fn validate_probabilities(probabilities: &[f64]) -> Result<()> {
    if probabilities.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::domain("probabilities must be finite and nonnegative"));
    }
    let total: f64 = probabilities.iter().sum();
    if (total - 1.0).abs() > PROBABILITY_SUM_TOL {
        return Err(Error::domain(format!("probabilities sum to {total}, not 1")));
    }
    Ok(())
}

/// Risk attitude implied by a tail probability.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskMode {
    /// Worst single scenario.
    Robust,
    Intermediate,
    /// Expected value over all scenarios.
    Stochastic,
}

/// Tail probability `alpha` in (0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskSpec {
    pub alpha: f64,
}

impl RiskSpec {
    pub fn new(alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        Ok(RiskSpec { alpha })
    }

    pub fn stochastic() -> Self {
        RiskSpec { alpha: 1.0 }
    }

    /// `alpha = 1/|S|`.
    pub fn robust(n_scenarios: usize) -> Self {
        RiskSpec {
            alpha: 1.0 / n_scenarios.max(1) as f64,
        }
    }

    pub fn mode(&self, n_scenarios: usize) -> RiskMode {
        if self.alpha <= 1.0 / n_scenarios.max(1) as f64 {
            RiskMode::Robust
        } else if self.alpha >= 1.0 {
            RiskMode::Stochastic
        } else {
            RiskMode::Intermediate
        }
    }
}

/// A configured risk level: either a fixed `alpha` or the literal `robust`,
/// which resolves to `1/|S|` once the scenario count is known.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RiskLevel {
    Robust,
    Alpha(f64),
}

impl RiskLevel {
    pub fn resolve(&self, n_scenarios: usize) -> Result<RiskSpec> {
        match *self {
            RiskLevel::Robust => Ok(RiskSpec::robust(n_scenarios)),
            RiskLevel::Alpha(a) => RiskSpec::new(a),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            RiskLevel::Robust => Ok(()),
            RiskLevel::Alpha(a) => check_alpha(a),
        }
    }

    /// `robust`, `stochastic` (alpha = 1) or the alpha value.
    pub fn label(&self) -> String {
        match *self {
            RiskLevel::Robust => "robust".to_string(),
            RiskLevel::Alpha(a) if a == 1.0 => "stochastic".to_string(),
            RiskLevel::Alpha(a) => format!("alpha={a}"),
        }
    }
}

impl Serialize for RiskLevel {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match *self {
            RiskLevel::Robust => s.serialize_str("robust"),
            RiskLevel::Alpha(a) => s.serialize_f64(a),
        }
    }
}

impl<'de> Deserialize<'de> for RiskLevel {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(a) => Ok(RiskLevel::Alpha(a)),
            Raw::Text(t) if t == "robust" => Ok(RiskLevel::Robust),
            Raw::Text(t) if t == "stochastic" => Ok(RiskLevel::Alpha(1.0)),
            Raw::Text(t) => t.parse::<f64>().map(RiskLevel::Alpha).map_err(|_| {
                serde::de::Error::custom(format!(
                    "risk level must be a number, \"robust\" or \"stochastic\", got {t:?}"
                ))
            }),
        }
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha.is_nan() || alpha <= 0.0 || alpha > 1.0 {
        return Err(Error::domain(format!("alpha must lie in (0, 1], got {alpha}")));
    }
    Ok(())
}

/// Mean of the worst `alpha` probability mass of `values`.
///
/// Values are visited in ascending order (stable, so ties keep scenario
/// order); each contributes `min(p_i, remaining)` until `alpha` mass has
/// been taken.
pub fn cvar(values: &[f64], probabilities: &[f64], alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    if values.is_empty() {
        return Err(Error::domain("cvar needs at least one value"));
    }
    if values.len() != probabilities.len() {
        return Err(Error::domain(format!(
            "{} values but {} probabilities",
            values.len(),
            probabilities.len()
        )));
    }
    validate_probabilities(probabilities)?;

    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));

    let mut remaining = alpha;
    let mut acc = 0.0;
    for &i in &order {
        let take = probabilities[i].min(remaining);
        acc += take * values[i];
        remaining -= take;
        if remaining <= 0.0 {
            break;
        }
    }
    Ok(acc / alpha)
}

/// Aggregates per-scenario yields with the set's probabilities.
pub fn aggregate(per_scenario: &[f64], set: &ScenarioSet, spec: &RiskSpec) -> Result<f64> {
    if per_scenario.len() != set.len() {
        return Err(Error::domain(format!(
            "{} per-scenario values for {} scenarios",
            per_scenario.len(),
            set.len()
        )));
    }
    if per_scenario.len() == 1 {
        check_alpha(spec.alpha)?;
        return Ok(per_scenario[0]);
    }
    cvar(per_scenario, set.probabilities(), spec.alpha)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn uniform(n: usize) -> Vec<f64> {
        vec![1.0 / n as f64; n]
    }

    // Rockafellar–Uryasev form for the lower tail:
    // max_t { t - E[(t - Y)^+] / alpha }, attained at one of the values.
    fn ru_oracle(values: &[f64], p: &[f64], alpha: f64) -> f64 {
        values
            .iter()
            .map(|&t| {
                let shortfall: f64 = values
                    .iter()
                    .zip(p)
                    .map(|(&v, &pi)| pi * (t - v).max(0.0))
                    .sum();
                t - shortfall / alpha
            })
            .fold(f64::NEG_INFINITY, f64::max)
    }

    #[test]
    fn limits_match_mean_and_min() {
        let v = [1.0, 2.0, 3.0];
        assert_eq!(cvar(&v, &uniform(3), 1.0).unwrap(), 2.0);
        assert_eq!(cvar(&v, &uniform(3), 1.0 / 3.0).unwrap(), 1.0);
    }

    #[test]
    fn fractional_boundary() {
        let v = [0.0, 4.0, 8.0, 12.0];
        let got = cvar(&v, &uniform(4), 0.375).unwrap();
        assert!((got - 4.0 / 3.0).abs() < 1e-14);
        assert!((ru_oracle(&v, &uniform(4), 0.375) - 4.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn aggregate_examples() {
        use crate::domain::{Scenario, ScenarioSet, WeatherDay};
        let day = WeatherDay {
            date: chrono::NaiveDate::from_ymd_opt(2001, 1, 1).unwrap(),
            radiation: 1.0,
            max_temp: 1.0,
            min_temp: 0.0,
            rain: 0.0,
        };
        let s = Scenario::new("s", 2001, vec![day]).unwrap();
        let one = ScenarioSet::uniform(vec![s.clone()]).unwrap();
        for a in [0.01, 0.5, 1.0] {
            assert_eq!(aggregate(&[200.0], &one, &RiskSpec::new(a).unwrap()).unwrap(), 200.0);
        }
        let four = ScenarioSet::uniform(vec![s; 4]).unwrap();
        let got = aggregate(&[100.0, 200.0, 300.0, 400.0], &four, &RiskSpec::new(0.5).unwrap());
        assert_eq!(got.unwrap(), 150.0);
        assert!(aggregate(&[1.0, 2.0], &four, &RiskSpec::stochastic()).is_err());
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(cvar(&[1.0], &[1.0], 0.0).is_err());
        assert!(cvar(&[1.0], &[1.0], 1.0 + 1e-9).is_err());
        assert!(cvar(&[1.0], &[1.0], f64::NAN).is_err());
        assert!(cvar(&[], &[], 0.5).is_err());
        assert!(cvar(&[1.0, 2.0], &[1.0], 0.5).is_err());
        assert!(cvar(&[1.0, 2.0], &[0.5, 0.6], 0.5).is_err());
    }

    #[test]
    fn risk_modes() {
        assert_eq!(RiskSpec::robust(10).mode(10), RiskMode::Robust);
        assert_eq!(RiskSpec::new(0.5).unwrap().mode(10), RiskMode::Intermediate);
        assert_eq!(RiskSpec::stochastic().mode(10), RiskMode::Stochastic);
        assert_eq!(RiskSpec::stochastic().mode(1), RiskMode::Robust);
    }

    #[test]
    fn risk_level_serde() {
        let levels: Vec<RiskLevel> = serde_json::from_str(r#"["robust", 0.25, 1, "stochastic"]"#).unwrap();
        assert_eq!(
            levels,
            vec![
                RiskLevel::Robust,
                RiskLevel::Alpha(0.25),
                RiskLevel::Alpha(1.0),
                RiskLevel::Alpha(1.0)
            ]
        );
        assert_eq!(serde_json::to_string(&levels).unwrap(), r#"["robust",0.25,1.0,1.0]"#);
        assert!(serde_json::from_str::<RiskLevel>(r#""worst""#).is_err());
        assert_eq!(RiskLevel::Robust.resolve(8).unwrap().alpha, 0.125);
        assert!(RiskLevel::Alpha(1.5).validate().is_err());
    }

    fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (1usize..30).prop_flat_map(|n| {
            (
                prop::collection::vec(-500.0f64..500.0, n),
                prop::collection::vec(0.01f64..1.0, n),
            )
                .prop_map(|(v, w)| {
                    let total: f64 = w.iter().sum();
                    let mut p: Vec<f64> = w.iter().map(|x| x / total).collect();
                    let head: f64 = p[..p.len() - 1].iter().sum();
                    *p.last_mut().unwrap() = 1.0 - head;
                    (v, p)
                })
        })
    }

    proptest! {
        #[test]
        fn translation_and_scaling((v, p) in instance(), alpha in 0.001f64..=1.0, c in -100.0f64..100.0, lambda in 0.1f64..10.0) {
            let base = cvar(&v, &p, alpha).unwrap();
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let scaled: Vec<f64> = v.iter().map(|x| x * lambda).collect();
            prop_assert!((cvar(&shifted, &p, alpha).unwrap() - (base + c)).abs() < 1e-9);
            prop_assert!((cvar(&scaled, &p, alpha).unwrap() - lambda * base).abs() < 1e-9 * (1.0 + lambda * base.abs()));
        }

        #[test]
        fn permutation_invariant((v, p) in instance(), alpha in 0.001f64..=1.0, rot in 0usize..30) {
            let n = v.len();
            let k = rot % n;
            let v2: Vec<f64> = (0..n).map(|i| v[(i + k) % n]).collect();
            let p2: Vec<f64> = (0..n).map(|i| p[(i + k) % n]).collect();
            let a = cvar(&v, &p, alpha).unwrap();
            let b = cvar(&v2, &p2, alpha).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
        }

        #[test]
        fn bounded_by_min_and_mean((v, p) in instance(), alpha in 0.001f64..=1.0) {
            let c = cvar(&v, &p, alpha).unwrap();
            let min = v.iter().cloned().fold(f64::INFINITY, f64::min);
            let mean: f64 = v.iter().zip(&p).map(|(a, b)| a * b).sum();
            prop_assert!(c >= min - 1e-9);
            prop_assert!(c <= mean + 1e-9);
            prop_assert!((c - ru_oracle(&v, &p, alpha)).abs() < 1e-8);
        }
    }
}
