//! Shared value types: the decision grid, weather scenarios and the
//! evaluation dataset accumulated by the optimizer.

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance used when decoding unit-cube coordinates slightly outside [0, 1].
pub const DECODE_SLACK: f64 = 1e-9;

/// Variable names used by the reference maize decision space.
pub mod names {
    pub const PLANTING_DATE: &str = "planting_date";
    pub const N_AMOUNT: &str = "n_amount";
    pub const N_DATE: &str = "n_date";
    pub const DENSITY: &str = "density";
    pub const CULTIVAR: &str = "cultivar";
}

/// Unit tag for day-of-year grids; used when rendering level labels.
pub const UNIT_DAY_OF_YEAR: &str = "doy";

/// One decision variable and its admissible levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableSpec {
    pub name: String,
    pub grid: Vec<f64>,
    #[serde(default)]
    pub unit: String,
}

impl VariableSpec {
    pub fn new(name: impl Into<String>, grid: Vec<f64>, unit: impl Into<String>) -> Result<Self> {
        let spec = VariableSpec {
            name: name.into(),
            grid,
            unit: unit.into(),
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Evenly spaced levels `start, start + step, ...` (`count` of them).
    pub fn stepped(
        name: impl Into<String>,
        start: f64,
        step: f64,
        count: usize,
        unit: impl Into<String>,
    ) -> Result<Self> {
        let grid = (0..count).map(|k| start + step * k as f64).collect();
        Self::new(name, grid, unit)
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::domain("variable name must not be empty"));
        }
        if self.grid.len() < 2 {
            return Err(Error::domain(format!(
                "variable `{}` needs at least 2 grid levels, got {}",
                self.name,
                self.grid.len()
            )));
        }
        if let Some(bad) = self.grid.iter().find(|v| !v.is_finite()) {
            return Err(Error::domain(format!(
                "variable `{}` has non-finite level {bad}",
                self.name
            )));
        }
        if self.grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::domain(format!(
                "grid of variable `{}` must be strictly increasing",
                self.name
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    /// Human-readable label of one level, e.g. `15 Apr` for day-of-year grids.
    pub fn level_label(&self, index: usize) -> String {
        let value = self.grid[index];
        if self.unit == UNIT_DAY_OF_YEAR {
            doy_label(value.round() as u32)
        } else {
            format_number(value)
        }
    }
}

/// Ordered set of decision variables; the cartesian product of their grids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SpaceRepr", into = "SpaceRepr")]
pub struct DecisionSpace {
    variables: Vec<VariableSpec>,
}

#[derive(Serialize, Deserialize)]
struct SpaceRepr {
    variables: Vec<VariableSpec>,
}

impl TryFrom<SpaceRepr> for DecisionSpace {
    type Error = Error;
    fn try_from(repr: SpaceRepr) -> Result<Self> {
        DecisionSpace::new(repr.variables)
    }
}

impl From<DecisionSpace> for SpaceRepr {
    fn from(space: DecisionSpace) -> Self {
        SpaceRepr {
            variables: space.variables,
        }
    }
}

impl DecisionSpace {
    pub fn new(variables: Vec<VariableSpec>) -> Result<Self> {
        if variables.is_empty() {
            return Err(Error::domain("decision space needs at least one variable"));
        }
        for (i, v) in variables.iter().enumerate() {
            v.validate()?;
            if variables[..i].iter().any(|w| w.name == v.name) {
                return Err(Error::domain(format!("duplicate variable name `{}`", v.name)));
            }
        }
        Ok(DecisionSpace { variables })
    }

    /// The five-variable maize management grid: weekly planting dates from
    /// 15 April, N amount 0..400 kg/ha in 20 kg steps, weekly N dates from
    /// 1 April, density 2..14 pl/m² in steps of 2, and four relative-maturity
    /// cultivars. 10 × 21 × 10 × 7 × 4 = 58,800 points.
    pub fn maize_reference() -> Self {
        let planting = VariableSpec::stepped(
            names::PLANTING_DATE,
            reference_doy(4, 15) as f64,
            7.0,
            10,
            UNIT_DAY_OF_YEAR,
        );
        let n_amount = VariableSpec::stepped(names::N_AMOUNT, 0.0, 20.0, 21, "kg/ha");
        let n_date = VariableSpec::stepped(
            names::N_DATE,
            reference_doy(4, 1) as f64,
            7.0,
            10,
            UNIT_DAY_OF_YEAR,
        );
        let density = VariableSpec::stepped(names::DENSITY, 2.0, 2.0, 7, "pl/m2");
        let cultivar = VariableSpec::stepped(names::CULTIVAR, 100.0, 5.0, 4, "RM");
        let variables = [planting, n_amount, n_date, density, cultivar]
            .into_iter()
            .collect::<Result<Vec<_>>>()
            .expect("reference grid is valid");
        DecisionSpace::new(variables).expect("reference space is valid")
    }

    pub fn variables(&self) -> &[VariableSpec] {
        &self.variables
    }

    pub fn dims(&self) -> usize {
        self.variables.len()
    }

    pub fn variable_index(&self, name: &str) -> Option<usize> {
        self.variables.iter().position(|v| v.name == name)
    }

    pub fn variable(&self, name: &str) -> Option<&VariableSpec> {
        self.variables.iter().find(|v| v.name == name)
    }

    /// Number of grid points.
    pub fn cardinality(&self) -> u64 {
        self.variables.iter().map(|v| v.len() as u64).product()
    }

    /// Mixed-radix index of `x`, first variable most significant.
    pub fn flat_index(&self, x: &DecisionVector) -> u64 {
        self.variables
            .iter()
            .zip(&x.levels)
            .fold(0u64, |acc, (v, &l)| acc * v.len() as u64 + l as u64)
    }

    pub fn from_flat_index(&self, mut index: u64) -> DecisionVector {
        let mut levels = vec![0usize; self.dims()];
        for (slot, v) in levels.iter_mut().zip(&self.variables).rev() {
            let n = v.len() as u64;
            *slot = (index % n) as usize;
            index /= n;
        }
        DecisionVector { levels }
    }

    /// Iterates over every grid point in flat-index order.
    pub fn iter_points(&self) -> impl Iterator<Item = DecisionVector> + '_ {
        (0..self.cardinality()).map(move |i| self.from_flat_index(i))
    }

    pub fn contains(&self, x: &DecisionVector) -> bool {
        x.levels.len() == self.dims()
            && x.levels.iter().zip(&self.variables).all(|(&l, v)| l < v.len())
    }

    /// Maps `x` into the unit cube: coordinate `i` is `index_i / (len_i - 1)`.
    pub fn encode(&self, x: &DecisionVector) -> Vec<f64> {
        debug_assert!(self.contains(x));
        x.levels
            .iter()
            .zip(&self.variables)
            .map(|(&l, v)| l as f64 / (v.len() - 1) as f64)
            .collect()
    }

    /// Rounds a unit-cube point to the nearest grid point. Exact midpoints
    /// round to the lower index.
    pub fn decode(&self, u: &[f64]) -> Result<DecisionVector> {
        if u.len() != self.dims() {
            return Err(Error::domain(format!(
                "point has {} coordinates, space has {} variables",
                u.len(),
                self.dims()
            )));
        }
        let mut levels = Vec::with_capacity(u.len());
        for (&c, v) in u.iter().zip(&self.variables) {
            if !(-DECODE_SLACK..=1.0 + DECODE_SLACK).contains(&c) {
                return Err(Error::domain(format!(
                    "coordinate {c} for `{}` lies outside the unit interval",
                    v.name
                )));
            }
            let top = (v.len() - 1) as f64;
            let scaled = c.clamp(0.0, 1.0) * top;
            let lower = scaled.floor();
            let index = if scaled - lower > 0.5 { lower + 1.0 } else { lower };
            levels.push((index as usize).min(v.len() - 1));
        }
        Ok(DecisionVector { levels })
    }
}

/// A grid point, stored as one level index per variable.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DecisionVector {
    levels: Vec<usize>,
}

impl DecisionVector {
    pub fn new(levels: Vec<usize>, space: &DecisionSpace) -> Result<Self> {
        let x = DecisionVector { levels };
        if !space.contains(&x) {
            return Err(Error::domain(format!(
                "levels {:?} are out of bounds for the decision space",
                x.levels
            )));
        }
        Ok(x)
    }

    pub fn levels(&self) -> &[usize] {
        &self.levels
    }

    /// Physical values of the chosen levels.
    pub fn values(&self, space: &DecisionSpace) -> Vec<f64> {
        self.levels
            .iter()
            .zip(space.variables())
            .map(|(&l, v)| v.grid[l])
            .collect()
    }

    pub fn value_of(&self, space: &DecisionSpace, name: &str) -> Option<f64> {
        space
            .variable_index(name)
            .map(|i| space.variables()[i].grid[self.levels[i]])
    }
}

/// One day of weather.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeatherDay {
    pub date: NaiveDate,
    /// MJ/m²
    pub radiation: f64,
    /// °C
    pub max_temp: f64,
    /// °C
    pub min_temp: f64,
    /// mm
    pub rain: f64,
}

impl WeatherDay {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.radiation, self.max_temp, self.min_temp, self.rain]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Ingestion(format!("{}: non-finite field", self.date)));
        }
        if self.max_temp < self.min_temp {
            return Err(Error::Ingestion(format!(
                "{}: max temperature {} below min temperature {}",
                self.date, self.max_temp, self.min_temp
            )));
        }
        if self.rain < 0.0 || self.radiation < 0.0 {
            return Err(Error::Ingestion(format!(
                "{}: negative rain or radiation",
                self.date
            )));
        }
        Ok(())
    }

    pub fn mean_temp(&self) -> f64 {
        0.5 * (self.max_temp + self.min_temp)
    }
}

/// A weather realization for one calendar year, starting on 1 January.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub id: String,
    pub source_year: i32,
    days: Vec<WeatherDay>,
}

impl Scenario {
    /// Days must be contiguous, begin on 1 January and stay in one year.
    pub fn new(id: impl Into<String>, source_year: i32, days: Vec<WeatherDay>) -> Result<Self> {
        let id = id.into();
        let first = days
            .first()
            .ok_or_else(|| Error::Ingestion(format!("scenario `{id}` has no days")))?;
        if first.date.ordinal() != 1 {
            return Err(Error::Ingestion(format!(
                "scenario `{id}` starts on {} instead of 1 January",
                first.date
            )));
        }
        check_contiguous(&days)?;
        let year = first.date.year();
        if let Some(last) = days.last() {
            if last.date.year() != year {
                return Err(Error::Ingestion(format!(
                    "scenario `{id}` spans more than one calendar year"
                )));
            }
        }
        for d in &days {
            d.validate()?;
        }
        Ok(Scenario {
            id,
            source_year,
            days,
        })
    }

    pub fn days(&self) -> &[WeatherDay] {
        &self.days
    }

    pub fn year(&self) -> i32 {
        self.days[0].date.year()
    }

    /// Last covered day-of-year.
    pub fn last_doy(&self) -> u32 {
        self.days.len() as u32
    }

    /// Weather on day-of-year `doy` (1-based), if covered.
    pub fn day(&self, doy: u32) -> Option<&WeatherDay> {
        doy.checked_sub(1).and_then(|i| self.days.get(i as usize))
    }

    /// Days with day-of-year in `[from, to)`, clipped to the covered range.
    pub fn window(&self, from: u32, to: u32) -> &[WeatherDay] {
        let n = self.days.len();
        let lo = (from.max(1) as usize - 1).min(n);
        let hi = (to.max(1) as usize - 1).clamp(lo, n);
        &self.days[lo..hi]
    }
}

/// Fails on the first gap or duplicate in a date-ordered series.
pub fn check_contiguous(days: &[WeatherDay]) -> Result<()> {
    for w in days.windows(2) {
        let expected = w[0].date.succ_opt().expect("date in range");
        if w[1].date <= w[0].date {
            return Err(Error::Ingestion(format!(
                "duplicate or out-of-order date {} after {}",
                w[1].date, w[0].date
            )));
        }
        if w[1].date != expected {
            let last_missing = w[1].date.pred_opt().expect("date in range");
            return Err(Error::Ingestion(format!(
                "missing dates {expected}..={last_missing}"
            )));
        }
    }
    Ok(())
}

/// Weighted collection of scenarios.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSet {
    scenarios: Vec<Scenario>,
    probabilities: Vec<f64>,
}

impl ScenarioSet {
    pub fn uniform(scenarios: Vec<Scenario>) -> Result<Self> {
        let n = scenarios.len();
        if n == 0 {
            return Err(Error::domain("scenario set must not be empty"));
        }
        let probabilities = vec![1.0 / n as f64; n];
        Ok(ScenarioSet {
            scenarios,
            probabilities,
        })
    }

    pub fn with_probabilities(scenarios: Vec<Scenario>, probabilities: Vec<f64>) -> Result<Self> {
        if scenarios.is_empty() {
            return Err(Error::domain("scenario set must not be empty"));
        }
        if scenarios.len() != probabilities.len() {
            return Err(Error::domain(format!(
                "{} scenarios but {} probabilities",
                scenarios.len(),
                probabilities.len()
            )));
        }
        crate::risk::validate_probabilities(&probabilities)?;
        Ok(ScenarioSet {
            scenarios,
            probabilities,
        })
    }

    pub fn scenarios(&self) -> &[Scenario] {
        &self.scenarios
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    pub fn len(&self) -> usize {
        self.scenarios.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenarios.is_empty()
    }
}

/// A decision with its per-scenario yields and aggregated objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRecord {
    pub x: DecisionVector,
    pub per_scenario: Vec<f64>,
    pub y: f64,
}

/// Append-only evaluation history with incumbent tracking.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "DatasetRepr")]
pub struct Dataset {
    records: Vec<EvaluationRecord>,
    incumbent_index: Option<usize>,
}

#[derive(Deserialize)]
struct DatasetRepr {
    records: Vec<EvaluationRecord>,
}

impl From<DatasetRepr> for Dataset {
    fn from(repr: DatasetRepr) -> Self {
        let mut ds = Dataset::new();
        for r in repr.records {
            ds.push(r);
        }
        ds
    }
}

impl Dataset {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a record; the incumbent moves only on strict improvement so
    /// ties stay with the earliest record.
    pub fn push(&mut self, record: EvaluationRecord) {
        let improves = match self.incumbent() {
            None => true,
            Some(best) => record.y > best.y,
        };
        self.records.push(record);
        if improves {
            self.incumbent_index = Some(self.records.len() - 1);
        }
    }

    pub fn records(&self) -> &[EvaluationRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn incumbent_index(&self) -> Option<usize> {
        self.incumbent_index
    }

    pub fn incumbent(&self) -> Option<&EvaluationRecord> {
        self.incumbent_index.map(|i| &self.records[i])
    }

    pub fn contains(&self, x: &DecisionVector) -> bool {
        self.records.iter().any(|r| &r.x == x)
    }
}

/// Day-of-year of a month/day in a non-leap reference year.
pub fn reference_doy(month: u32, day: u32) -> u32 {
    NaiveDate::from_ymd_opt(2001, month, day)
        .expect("valid reference date")
        .ordinal()
}

/// `15 Apr`-style label for a reference-year day-of-year.
pub fn doy_label(doy: u32) -> String {
    match NaiveDate::from_yo_opt(2001, doy) {
        Some(d) => d.format("%-d %b").to_string(),
        None => format!("doy {doy}"),
    }
}

/// Shortest decimal rendering without a trailing `.0`.
pub fn format_number(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}
