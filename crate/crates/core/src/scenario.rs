//! Weather-scenario ensembles spliced from historical years.
//!
//! A scenario for target year `Y` and decision date `d` is the observed
//! weather of `Y` up to (not including) `d`, followed by one historical
//! year's weather from `d` to 31 December, re-dated into `Y`. Feb 29 is
//! dropped from leap donors for non-leap targets and filled with the donor's
//! Feb 28 for leap targets with non-leap donors.

use std::collections::BTreeMap;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::domain::{check_contiguous, Scenario, ScenarioSet, WeatherDay};
use crate::error::{Error, Result};

/// Complete calendar years of daily weather for one location.
#[derive(Debug, Clone, PartialEq)]
pub struct WeatherArchive {
    pub location_id: String,
    years: BTreeMap<i32, Vec<WeatherDay>>,
    /// Trailing incomplete year, if the series stops mid-year.
    partial: Option<(i32, Vec<WeatherDay>)>,
}

fn days_in_year(year: i32) -> usize {
    if NaiveDate::from_ymd_opt(year, 2, 29).is_some() {
        366
    } else {
        365
    }
}

impl WeatherArchive {
    /// Groups a contiguous daily series into years. Every year must be
    /// complete except possibly the last, which is kept as a partial year.
    pub fn from_days(location_id: impl Into<String>, days: Vec<WeatherDay>) -> Result<Self> {
        let location_id = location_id.into();
        check_contiguous(&days)?;
        let mut grouped: BTreeMap<i32, Vec<WeatherDay>> = BTreeMap::new();
        for d in days {
            d.validate()?;
            grouped.entry(d.date.year()).or_default().push(d);
        }
        let last_year = grouped.keys().next_back().copied();
        let mut years = BTreeMap::new();
        let mut partial = None;
        for (year, series) in grouped {
            if series.len() == days_in_year(year) {
                years.insert(year, series);
            } else if Some(year) == last_year && series[0].date.ordinal() == 1 {
                partial = Some((year, series));
            } else {
                return Err(Error::Ingestion(format!(
                    "{location_id}: year {year} is incomplete ({} of {} days, starting {})",
                    series.len(),
                    days_in_year(year),
                    series[0].date
                )));
            }
        }
        Ok(WeatherArchive {
            location_id,
            years,
            partial,
        })
    }

    pub fn load(dir: &std::path::Path, location_id: &str) -> Result<Self> {
        let path = crate::weather::archive_path(dir, location_id);
        let days = crate::weather::read_csv_file(&path)?;
        Self::from_days(location_id, days)
    }

    pub fn years(&self) -> impl Iterator<Item = i32> + '_ {
        self.years.keys().copied()
    }

    pub fn year(&self, year: i32) -> Option<&[WeatherDay]> {
        self.years.get(&year).map(Vec::as_slice)
    }

    /// Observed days of `year` before `until` (exclusive), or the whole
    /// year when `until` is `None`.
    pub fn observed(&self, year: i32, until: Option<NaiveDate>) -> Result<Vec<WeatherDay>> {
        let series = match self.years.get(&year) {
            Some(s) => s.as_slice(),
            None => match &self.partial {
                Some((y, s)) if *y == year => s.as_slice(),
                _ => {
                    return Err(Error::Ingestion(format!(
                        "{}: no weather for year {year}",
                        self.location_id
                    )))
                }
            },
        };
        match until {
            None if series.len() == days_in_year(year) => Ok(series.to_vec()),
            None => Err(Error::Ingestion(format!(
                "{}: year {year} is incomplete",
                self.location_id
            ))),
            Some(date) => {
                let needed = date.ordinal0() as usize;
                if series.len() < needed {
                    return Err(Error::Ingestion(format!(
                        "{}: observed weather for {year} ends on {}, before {date}",
                        self.location_id,
                        series.last().map(|d| d.date.to_string()).unwrap_or_default()
                    )));
                }
                Ok(series[..needed].to_vec())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyLabel {
    /// Before planting (1 March).
    #[serde(rename = "strategy-1")]
    Strategy1,
    /// Around planting (1 May).
    #[serde(rename = "strategy-2")]
    Strategy2,
    /// After harvest (1 November): the season's weather is fully known.
    #[serde(rename = "strategy-3")]
    Strategy3,
    Custom,
}

/// When the decision is made.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "StrategyRepr", into = "StrategyRepr")]
pub struct StrategySpec {
    label: StrategyLabel,
    month: u32,
    day: u32,
}

#[derive(Serialize, Deserialize)]
struct StrategyRepr {
    label: StrategyLabel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    month: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    day: Option<u32>,
}

impl TryFrom<StrategyRepr> for StrategySpec {
    type Error = Error;
    fn try_from(r: StrategyRepr) -> Result<Self> {
        let fixed = match r.label {
            StrategyLabel::Strategy1 => Some(StrategySpec::strategy_1()),
            StrategyLabel::Strategy2 => Some(StrategySpec::strategy_2()),
            StrategyLabel::Strategy3 => Some(StrategySpec::strategy_3()),
            StrategyLabel::Custom => None,
        };
        match (fixed, r.month, r.day) {
            (Some(s), None, None) => Ok(s),
            (Some(s), Some(m), Some(d)) if (m, d) == (s.month, s.day) => Ok(s),
            (Some(s), _, _) => Err(Error::domain(format!(
                "{:?} is fixed to {}/{}",
                s.label, s.month, s.day
            ))),
            (None, Some(m), Some(d)) => StrategySpec::custom(m, d),
            (None, _, _) => Err(Error::domain("custom strategy needs month and day")),
        }
    }
}

impl From<StrategySpec> for StrategyRepr {
    fn from(s: StrategySpec) -> Self {
        let custom = s.label == StrategyLabel::Custom;
        StrategyRepr {
            label: s.label,
            month: custom.then_some(s.month),
            day: custom.then_some(s.day),
        }
    }
}

impl StrategySpec {
    pub fn strategy_1() -> Self {
        StrategySpec { label: StrategyLabel::Strategy1, month: 3, day: 1 }
    }

    pub fn strategy_2() -> Self {
        StrategySpec { label: StrategyLabel::Strategy2, month: 5, day: 1 }
    }

    pub fn strategy_3() -> Self {
        StrategySpec { label: StrategyLabel::Strategy3, month: 11, day: 1 }
    }

    /// Any month/day valid in every year (Feb 29 is rejected).
    pub fn custom(month: u32, day: u32) -> Result<Self> {
        if NaiveDate::from_ymd_opt(2001, month, day).is_none() {
            return Err(Error::domain(format!("invalid decision date {month}/{day}")));
        }
        Ok(StrategySpec { label: StrategyLabel::Custom, month, day })
    }

    pub fn label(&self) -> StrategyLabel {
        self.label
    }

    pub fn decision_date(&self, year: i32) -> NaiveDate {
        NaiveDate::from_ymd_opt(year, self.month, self.day).expect("validated month/day")
    }

    /// Strategy 3 optimizes against the fully observed season.
    pub fn observes_full_year(&self) -> bool {
        self.label == StrategyLabel::Strategy3
    }

    pub fn name(&self) -> String {
        match self.label {
            StrategyLabel::Strategy1 => "strategy-1".into(),
            StrategyLabel::Strategy2 => "strategy-2".into(),
            StrategyLabel::Strategy3 => "strategy-3".into(),
            StrategyLabel::Custom => format!("custom-{:02}-{:02}", self.month, self.day),
        }
    }
}

/// Historical years used as donors: those before the target year, optionally
/// starting at `first_year`.
pub fn donor_years(archive: &WeatherArchive, target_year: i32, first_year: Option<i32>) -> Vec<i32> {
    archive
        .years()
        .filter(|&y| y < target_year && first_year.map_or(true, |f| y >= f))
        .collect()
}

/// Builds one scenario per donor year by splicing.
///
/// `observed` must start on 1 January of `target_year` and end the day
/// before the decision date; a complete observed year instead yields a
/// single scenario holding just the observation.
pub fn build_scenarios(
    archive: &WeatherArchive,
    target_year: i32,
    observed: &[WeatherDay],
    strategy: &StrategySpec,
) -> Result<ScenarioSet> {
    build_scenarios_from(archive, target_year, observed, strategy, None)
}

pub fn build_scenarios_from(
    archive: &WeatherArchive,
    target_year: i32,
    observed: &[WeatherDay],
    strategy: &StrategySpec,
    first_year: Option<i32>,
) -> Result<ScenarioSet> {
    check_contiguous(observed)?;
    let jan1 = NaiveDate::from_ymd_opt(target_year, 1, 1)
        .ok_or_else(|| Error::domain(format!("invalid target year {target_year}")))?;
    if let Some(first) = observed.first() {
        if first.date != jan1 {
            return Err(Error::Ingestion(format!(
                "observed weather must start on {jan1}, starts on {}",
                first.date
            )));
        }
    }
    let location = &archive.location_id;

    if observed.len() == days_in_year(target_year) {
        let s = Scenario::new(format!("{location}:{target_year}:observed"), target_year, observed.to_vec())?;
        return ScenarioSet::uniform(vec![s]);
    }

    let decision = strategy.decision_date(target_year);
    let expected_len = decision.ordinal0() as usize;
    if observed.len() != expected_len {
        let covered_to = observed.last().map_or(jan1, |d| d.date.succ_opt().expect("in range"));
        let missing_to = decision.pred_opt().expect("in range");
        return Err(Error::Ingestion(if observed.len() < expected_len {
            format!("observed weather is missing dates {covered_to}..={missing_to}")
        } else {
            format!(
                "observed weather runs past the decision date {decision} (through {})",
                observed.last().map(|d| d.date.to_string()).unwrap_or_default()
            )
        }));
    }

    let donors = donor_years(archive, target_year, first_year);
    if donors.is_empty() {
        return Err(Error::domain(format!(
            "{location}: no historical year before {target_year} to build scenarios from"
        )));
    }

    let mut scenarios = Vec::with_capacity(donors.len());
    for donor in donors {
        let series = archive.year(donor).expect("donor years are complete");
        let mut days = observed.to_vec();
        let mut date = decision;
        while date.year() == target_year {
            let w = donor_day(series, donor, date.month(), date.day());
            days.push(WeatherDay { date, ..*w });
            date = date.succ_opt().expect("in range");
        }
        scenarios.push(Scenario::new(format!("{location}:{target_year}<-{donor}"), donor, days)?);
    }
    ScenarioSet::uniform(scenarios)
}

fn donor_day(series: &[WeatherDay], donor: i32, month: u32, day: u32) -> &WeatherDay {
    let date = NaiveDate::from_ymd_opt(donor, month, day)
        .or_else(|| NaiveDate::from_ymd_opt(donor, 2, 28))
        .expect("valid donor date");
    &series[date.ordinal0() as usize]
}

/// Table-style summary of daily rainfall.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecipStats {
    pub mean: f64,
    pub std: f64,
    pub sum: f64,
    pub p25: f64,
    pub p50: f64,
    pub p75: f64,
    pub max: f64,
}

/// Mean, population std, sum, quartiles (linear interpolation between
/// order statistics) and maximum of daily rain.
pub fn precip_stats(series: &[WeatherDay]) -> Result<PrecipStats> {
    if series.is_empty() {
        return Err(Error::domain("precipitation statistics need at least one day"));
    }
    let mut rain: Vec<f64> = series.iter().map(|d| d.rain).collect();
    let n = rain.len() as f64;
    let sum: f64 = rain.iter().sum();
    let mean = sum / n;
    let std = (rain.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    rain.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let pos = p * (rain.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        rain[lo] + (rain[hi] - rain[lo]) * (pos - lo as f64)
    };
    Ok(PrecipStats {
        mean,
        std,
        sum,
        p25: q(0.25),
        p50: q(0.5),
        p75: q(0.75),
        max: *rain.last().expect("nonempty"),
    })
}
