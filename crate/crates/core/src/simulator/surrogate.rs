//! Deterministic closed-form stand-in for a process-based crop model.
//!
//! ```text
//! yield = base_yield · g_mat · g_water · g_N · g_dens
//!
//! TT        = Σ_{d ∈ [P, end)} max(0, (min(tmax, cap) + max(tmin, base)) / 2 − base)
//!             end = first day ≥ frost_search_start with tmin ≤ frost_temp, else season_end
//! TT_req    = required_tt_rm100 + required_tt_per_rm · (RM − 100)
//! g_mat     = (1 + gain · (RM − 100)) · min(1, TT / TT_req)^cliff
//!             · (1 − min(chill_max, chill_rate · max(0, chill_temp − T̄_chill)))
//! W         = rain over [P, P + window_days)
//! g_water   = floor + (1 − floor) · exp(−½ ((W − optimum) / width)²)
//! R_leach   = rain over [N_date, P + leach_window)            (0 when empty)
//! late      = late_max · clamp((N_date − P − grace) / span, 0, 1)
//!             · (1 + wet_gain · clamp((W − optimum) / width, 0, 1))
//! N_eff     = amount · (1 − min(leach_max, leach_rate · R_leach)) · (1 − late)
//! g_N       = floor + (1 − floor) · N_eff (K + N_ref) / (N_ref (N_eff + K))
//! D*        = optimum_base + optimum_water_gain · min(W / optimum, availability_cap)
//! g_dens    = max(floor, 1 − curvature · (density − D*)²)
//! ```
//!
//! Planting date `P` and N date are day-of-year values; every quantity is
//! read from the scenario's daily series, so the model is pure.

use serde::{Deserialize, Serialize};

use crate::domain::{names, DecisionSpace, DecisionVector, Scenario, WeatherDay};
use crate::error::{EvalError, Error, Result};

use super::Evaluator;

/// The reference parameter file shipped with the crate.
pub const REFERENCE_PARAMS_JSON: &str = include_str!("../../params/surrogate_v1.json");

/// Upper bound on any single response factor.
pub const FACTOR_CAP: f64 = 1.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaturityParams {
    pub gdd_base: f64,
    pub gdd_cap: f64,
    pub season_end_doy: u32,
    pub frost_search_start_doy: u32,
    pub frost_temp: f64,
    pub required_tt_rm100: f64,
    pub required_tt_per_rm: f64,
    pub potential_gain_per_rm: f64,
    pub cliff_exponent: f64,
    pub chill_days: u32,
    pub chill_temp: f64,
    pub chill_penalty_per_degree: f64,
    pub chill_max_penalty: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaterParams {
    pub window_days: u32,
    pub optimum_mm: f64,
    pub width_mm: f64,
    pub floor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NitrogenParams {
    pub half_saturation: f64,
    pub reference_amount: f64,
    pub floor: f64,
    pub leach_window_after_planting: u32,
    pub leach_per_mm: f64,
    pub leach_max: f64,
    pub late_grace_days: f64,
    pub late_span_days: f64,
    pub late_max_penalty: f64,
    pub late_wet_gain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityParams {
    pub optimum_base: f64,
    pub optimum_water_gain: f64,
    pub availability_cap: f64,
    pub curvature: f64,
    pub floor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateParams {
    pub version: u32,
    /// bu/ac
    pub base_yield: f64,
    pub maturity: MaturityParams,
    pub water: WaterParams,
    pub nitrogen: NitrogenParams,
    pub density: DensityParams,
}

impl SurrogateParams {
    pub fn reference() -> Self {
        Self::from_json(REFERENCE_PARAMS_JSON).expect("reference surrogate parameters are valid")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let p: SurrogateParams = serde_json::from_str(text)?;
        p.validate()?;
        Ok(p)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Every parameter finite and each factor's range within `[0, 1.5]`.
    pub fn validate(&self) -> Result<()> {
        let m = &self.maturity;
        let w = &self.water;
        let n = &self.nitrogen;
        let d = &self.density;
        let all = [
            self.base_yield,
            m.gdd_base,
            m.gdd_cap,
            m.frost_temp,
            m.required_tt_rm100,
            m.required_tt_per_rm,
            m.potential_gain_per_rm,
            m.cliff_exponent,
            m.chill_temp,
            m.chill_penalty_per_degree,
            m.chill_max_penalty,
            w.optimum_mm,
            w.width_mm,
            w.floor,
            n.half_saturation,
            n.reference_amount,
            n.floor,
            n.leach_per_mm,
            n.leach_max,
            n.late_grace_days,
            n.late_span_days,
            n.late_max_penalty,
            n.late_wet_gain,
            d.optimum_base,
            d.optimum_water_gain,
            d.availability_cap,
            d.curvature,
            d.floor,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("surrogate parameters must be finite"));
        }
        let unit = |v: f64, what: &str| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::domain(format!("surrogate parameter {what} must lie in [0, 1]")))
            }
        };
        unit(w.floor, "water.floor")?;
        unit(n.floor, "nitrogen.floor")?;
        unit(d.floor, "density.floor")?;
        unit(n.leach_max, "nitrogen.leach_max")?;
        unit(m.chill_max_penalty, "maturity.chill_max_penalty")?;
        unit(n.late_max_penalty * (1.0 + n.late_wet_gain), "nitrogen late penalty")?;
        let positive = [
            self.base_yield,
            m.required_tt_rm100,
            m.cliff_exponent,
            w.width_mm,
            w.optimum_mm,
            n.half_saturation,
            n.reference_amount,
            n.late_span_days,
            d.curvature,
        ];
        if positive.iter().any(|v| *v <= 0.0) {
            return Err(Error::domain("surrogate scale parameters must be positive"));
        }
        if m.gdd_cap <= m.gdd_base {
            return Err(Error::domain("gdd_cap must exceed gdd_base"));
        }
        if m.season_end_doy < 2 || m.season_end_doy > 366 || w.window_days == 0 {
            return Err(Error::domain("season window out of range"));
        }
        let n_max = n.floor + (1.0 - n.floor) * (n.half_saturation + n.reference_amount) / n.reference_amount;
        if n_max > FACTOR_CAP {
            return Err(Error::domain(format!("nitrogen factor can reach {n_max} > {FACTOR_CAP}")));
        }
        Ok(())
    }

    /// Largest value the maturity factor can take for relative maturity `rm`.
    fn potential(&self, rm: f64) -> f64 {
        1.0 + self.maturity.potential_gain_per_rm * (rm - 100.0)
    }
}

/// Intermediate quantities and factors of one surrogate evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SurrogateFactors {
    pub thermal_time: f64,
    pub required_thermal_time: f64,
    pub chill_temp_mean: f64,
    pub g_mat: f64,
    pub rain_after_planting: f64,
    pub g_water: f64,
    pub leach_rain: f64,
    pub effective_n: f64,
    pub g_n: f64,
    pub optimal_density: f64,
    pub g_dens: f64,
    pub yield_value: f64,
}

/// Decision values the surrogate reads, in physical units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Management {
    pub planting_doy: u32,
    pub n_amount: f64,
    pub n_doy: u32,
    pub density: f64,
    pub relative_maturity: f64,
}

impl Management {
    pub fn from_decision(x: &DecisionVector, space: &DecisionSpace) -> Result<Self, EvalError> {
        let get = |name: &str| {
            x.value_of(space, name)
                .ok_or_else(|| EvalError::MissingVariable(name.to_string()))
        };
        Ok(Management {
            planting_doy: get(names::PLANTING_DATE)?.round() as u32,
            n_amount: get(names::N_AMOUNT)?,
            n_doy: get(names::N_DATE)?.round() as u32,
            density: get(names::DENSITY)?,
            relative_maturity: get(names::CULTIVAR)?,
        })
    }
}

fn sum_rain(days: &[WeatherDay]) -> f64 {
    days.iter().map(|d| d.rain).sum()
}

/// Evaluates every factor of the closed-form model.
pub fn surrogate_factors(
    m: &Management,
    scenario: &Scenario,
    p: &SurrogateParams,
) -> Result<SurrogateFactors, EvalError> {
    let mp = &p.maturity;
    let needed = mp
        .season_end_doy
        .max(m.planting_doy + p.water.window_days)
        .max(m.planting_doy + p.nitrogen.leach_window_after_planting);
    if scenario.last_doy() < needed {
        return Err(EvalError::ScenarioTooShort {
            scenario: scenario.id.clone(),
            needed,
            available: scenario.last_doy(),
        });
    }

    // Maturity: thermal time from planting to frost or season end.
    let end = (mp.frost_search_start_doy..mp.season_end_doy)
        .find(|&d| scenario.day(d).is_some_and(|w| w.min_temp <= mp.frost_temp))
        .unwrap_or(mp.season_end_doy);
    let thermal_time: f64 = scenario
        .window(m.planting_doy, end.max(m.planting_doy))
        .iter()
        .map(|d| {
            let hi = d.max_temp.min(mp.gdd_cap);
            let lo = d.min_temp.max(mp.gdd_base);
            (0.5 * (hi + lo) - mp.gdd_base).max(0.0)
        })
        .sum();
    let required = mp.required_tt_rm100 + mp.required_tt_per_rm * (m.relative_maturity - 100.0);
    let fill = (thermal_time / required).min(1.0).max(0.0).powf(mp.cliff_exponent);
    let chill_days = scenario.window(m.planting_doy, m.planting_doy + mp.chill_days);
    let chill_temp_mean = chill_days.iter().map(WeatherDay::mean_temp).sum::<f64>()
        / chill_days.len().max(1) as f64;
    let chill = (mp.chill_penalty_per_degree * (mp.chill_temp - chill_temp_mean).max(0.0))
        .min(mp.chill_max_penalty);
    let g_mat = (p.potential(m.relative_maturity) * fill * (1.0 - chill)).clamp(0.0, FACTOR_CAP);

    // Water: rain in the window after planting.
    let wp = &p.water;
    let rain = sum_rain(scenario.window(m.planting_doy, m.planting_doy + wp.window_days));
    let z = (rain - wp.optimum_mm) / wp.width_mm;
    let g_water = wp.floor + (1.0 - wp.floor) * (-0.5 * z * z).exp();

    // Nitrogen: saturating uptake of what survives leaching and late application.
    let np = &p.nitrogen;
    let leach_end = m.planting_doy + np.leach_window_after_planting;
    let leach_rain = if m.n_doy < leach_end {
        sum_rain(scenario.window(m.n_doy, leach_end))
    } else {
        0.0
    };
    let leach = (np.leach_per_mm * leach_rain).min(np.leach_max);
    let gap = m.n_doy as f64 - m.planting_doy as f64;
    let late_frac = ((gap - np.late_grace_days) / np.late_span_days).clamp(0.0, 1.0);
    let wet_excess = z.clamp(0.0, 1.0);
    let late = np.late_max_penalty * late_frac * (1.0 + np.late_wet_gain * wet_excess);
    let effective_n = m.n_amount.max(0.0) * (1.0 - leach) * (1.0 - late);
    let k = np.half_saturation;
    let g_n = np.floor
        + (1.0 - np.floor) * effective_n * (k + np.reference_amount)
            / (np.reference_amount * (effective_n + k));

    // Density: concave quadratic whose optimum rises with water availability.
    let dp = &p.density;
    let availability = (rain / wp.optimum_mm).min(dp.availability_cap);
    let optimal_density = dp.optimum_base + dp.optimum_water_gain * availability;
    let g_dens = (1.0 - dp.curvature * (m.density - optimal_density).powi(2)).max(dp.floor);

    let yield_value =
        (p.base_yield * g_mat * g_water * g_n * g_dens).clamp(0.0, FACTOR_CAP * p.base_yield);

    Ok(SurrogateFactors {
        thermal_time,
        required_thermal_time: required,
        chill_temp_mean,
        g_mat,
        rain_after_planting: rain,
        g_water,
        leach_rain,
        effective_n,
        g_n,
        optimal_density,
        g_dens,
        yield_value,
    })
}

/// Yield (bu/ac) of decision `x` under `scenario`.
pub fn surrogate_yield(
    x: &DecisionVector,
    space: &DecisionSpace,
    scenario: &Scenario,
    p: &SurrogateParams,
) -> Result<f64, EvalError> {
    let m = Management::from_decision(x, space)?;
    Ok(surrogate_factors(&m, scenario, p)?.yield_value)
}

#[derive(Debug, Clone)]
pub struct SurrogateEvaluator {
    params: SurrogateParams,
}

impl SurrogateEvaluator {
    pub fn new(params: SurrogateParams) -> Self {
        SurrogateEvaluator { params }
    }

    pub fn reference() -> Self {
        Self::new(SurrogateParams::reference())
    }

    pub fn params(&self) -> &SurrogateParams {
        &self.params
    }
}

impl Evaluator for SurrogateEvaluator {
    fn evaluate(
        &self,
        x: &DecisionVector,
        space: &DecisionSpace,
        scenario: &Scenario,
    ) -> Result<f64, EvalError> {
        surrogate_yield(x, space, scenario, &self.params)
    }
}
