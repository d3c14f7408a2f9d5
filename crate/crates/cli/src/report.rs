//! The report manifest and the tables derived from it.
//!
//! Every table is a pure function of [`Report`], so `replay` regenerates
//! them byte for byte from `report.json` alone.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use cropopt::domain::DecisionSpace;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::experiment::{improvement_pct, BaselineReport, CellReport, WeatherStatsRow};
use crate::CliError;

pub const FORMAT_VERSION: u32 = 1;
pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub format_version: u32,
    pub config: ExperimentConfig,
    pub space: DecisionSpace,
    pub baselines: Vec<BaselineReport>,
    pub cells: Vec<CellReport>,
    pub weather_stats: Vec<WeatherStatsRow>,
}

impl Report {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Environment(format!("cannot read {}: {e}", path.display())))?;
        let report: Report =
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        if report.format_version != FORMAT_VERSION {
            return Err(CliError::Config(format!("unsupported report format {}", report.format_version)));
        }
        Ok(report)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn failures(&self) -> usize {
        self.cells.iter().filter(|c| !c.is_ok()).count() + self.baselines.iter().filter(|b| b.error.is_some()).count()
    }

    fn baseline_yield(&self, location: &str, year: i32) -> Option<f64> {
        self.baselines
            .iter()
            .find(|b| b.location == location && b.year == year)
            .and_then(|b| b.realized_yield)
    }

    /// Checks that every stored improvement follows from the stored yields.
    pub fn check_consistency(&self) -> Result<(), CliError> {
        for c in &self.cells {
            let want = c
                .realized_yield
                .zip(self.baseline_yield(&c.location, c.year))
                .and_then(|(r, b)| improvement_pct(r, b));
            if want != c.improvement_pct {
                return Err(CliError::Config(format!(
                    "cell {} {} {} {}: stored improvement {:?} but yields give {:?}",
                    c.location, c.year, c.strategy, c.risk, c.improvement_pct, want
                )));
            }
        }
        Ok(())
    }

    fn groups(&self) -> Vec<String> {
        let mut groups: Vec<String> = Vec::new();
        for l in &self.config.locations {
            if !groups.iter().any(|g| g == l.group()) {
                groups.push(l.group().to_string());
            }
        }
        groups
    }

    fn strategy_names(&self) -> Vec<String> {
        self.config.strategies.iter().map(|s| s.name()).collect()
    }
}

/// Percent of optimized cells choosing each level of one variable.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyTable {
    pub variable: String,
    pub levels: Vec<String>,
    pub strategies: Vec<String>,
    pub rows: Vec<FrequencyRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyRow {
    pub group: String,
    pub year: i32,
    /// Successful cells behind each strategy's percentages.
    pub counts: Vec<usize>,
    /// `percent[level][strategy]`; each strategy's column sums to 100 unless
    /// its count is zero.
    pub percent: Vec<Vec<f64>>,
}

pub fn frequency_table(report: &Report, variable: usize) -> FrequencyTable {
    let spec = &report.space.variables()[variable];
    let strategies = report.strategy_names();
    let mut rows = Vec::new();
    for group in report.groups() {
        for &year in &report.config.test_years {
            let mut tally = vec![vec![0usize; strategies.len()]; spec.len()];
            let mut counts = vec![0usize; strategies.len()];
            for c in report.cells.iter().filter(|c| c.group == group && c.year == year) {
                let (Some(x), Some(k)) = (&c.decision, strategies.iter().position(|s| *s == c.strategy)) else {
                    continue;
                };
                tally[x.levels()[variable]][k] += 1;
                counts[k] += 1;
            }
            if counts.iter().all(|&n| n == 0) {
                log::warn!("no successful cells for {group} {year}; row omitted from {} table", spec.name);
                continue;
            }
            let percent = tally
                .iter()
                .map(|per| {
                    per.iter()
                        .zip(&counts)
                        .map(|(&t, &n)| if n == 0 { 0.0 } else { 100.0 * t as f64 / n as f64 })
                        .collect()
                })
                .collect();
            rows.push(FrequencyRow { group: group.clone(), year, counts, percent });
        }
    }
    FrequencyTable {
        variable: spec.name.clone(),
        levels: (0..spec.len()).map(|i| spec.level_label(i)).collect(),
        strategies,
        rows,
    }
}

/// Percentage with at most two decimals and no trailing zeros.
pub fn format_pct(v: f64) -> String {
    let s = format!("{v:.2}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".to_string() } else { s.to_string() }
}

/// `(40,60,0)`, or `-` when every entry is zero.
pub fn format_tuple(values: &[f64]) -> String {
    if values.iter().all(|&v| v == 0.0) {
        return "-".to_string();
    }
    let parts: Vec<String> = values.iter().map(|&v| format_pct(v)).collect();
    format!("({})", parts.join(","))
}

fn csv_string(header: &[String], rows: &[Vec<String>]) -> String {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(header).expect("in-memory csv");
    for r in rows {
        w.write_record(r).expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 csv")
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.6}")).unwrap_or_default()
}

/// One row per level: `group,year,level,<strategy percentages...>`.
pub fn frequency_csv(table: &FrequencyTable) -> String {
    let mut header: Vec<String> = ["group", "year", "level"].iter().map(|s| s.to_string()).collect();
    header.extend(table.strategies.iter().cloned());
    let mut rows = Vec::new();
    for r in &table.rows {
        for (level, per) in table.levels.iter().zip(&r.percent) {
            let mut row = vec![r.group.clone(), r.year.to_string(), level.clone()];
            row.extend(per.iter().map(|&v| format_pct(v)));
            rows.push(row);
        }
    }
    csv_string(&header, &rows)
}

pub fn improvement_csv(report: &Report) -> String {
    let mut header: Vec<String> = [
        "location", "group", "year", "strategy", "risk", "alpha", "n_scenarios", "seed", "objective",
        "realized_yield", "baseline_yield", "improvement_pct",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend(report.space.variables().iter().map(|v| v.name.clone()));
    header.push("error".into());
    let rows: Vec<Vec<String>> = report
        .cells
        .iter()
        .map(|c| {
            let mut row = vec![
                c.location.clone(),
                c.group.clone(),
                c.year.to_string(),
                c.strategy.clone(),
                c.risk.clone(),
                c.alpha.map(|a| a.to_string()).unwrap_or_default(),
                c.n_scenarios.to_string(),
                c.seed.to_string(),
                opt(c.objective),
                opt(c.realized_yield),
                opt(report.baseline_yield(&c.location, c.year)),
                opt(c.improvement_pct),
            ];
            for v in report.space.variables() {
                let value = c.decision_values.as_ref().and_then(|d| d.get(&v.name));
                row.push(value.map(|&x| cropopt::domain::format_number(x)).unwrap_or_default());
            }
            row.push(c.error.clone().unwrap_or_default());
            row
        })
        .collect();
    csv_string(&header, &rows)
}

pub fn weather_stats_csv(rows: &[WeatherStatsRow]) -> String {
    let header: Vec<String> = ["location", "group", "year", "mean", "std", "sum", "p25", "p50", "p75", "max"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let s = &r.stats;
            let mut row = vec![r.location.clone(), r.group.clone(), r.year.to_string()];
            row.extend([s.mean, s.std, s.sum, s.p25, s.p50, s.p75, s.max].iter().map(|v| format!("{v:.4}")));
            row
        })
        .collect();
    csv_string(&header, &body)
}

/// Left-aligned columns separated by two spaces.
fn text_grid(header: &[String], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for r in rows {
        for (w, cell) in widths.iter_mut().zip(r) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let mut out = String::new();
    for line in std::iter::once(header).chain(rows.iter().map(Vec::as_slice)) {
        let cells: Vec<String> = line.iter().zip(&widths).map(|(c, &w)| format!("{c:<w$}")).collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
    }
    out
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Human-readable rendering of every table.
pub fn render_tables(report: &Report) -> String {
    let mut out = String::new();
    let strings = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();

    out.push_str("Daily precipitation (mm) in the test years\n\n");
    let rows: Vec<Vec<String>> = report
        .weather_stats
        .iter()
        .map(|r| {
            let s = &r.stats;
            let mut row = vec![r.location.clone(), r.year.to_string()];
            row.extend([s.mean, s.std, s.sum, s.p25, s.p50, s.p75, s.max].iter().map(|v| format!("{v:.2}")));
            row
        })
        .collect();
    out.push_str(&text_grid(&strings(&["location", "year", "mean", "std", "sum", "p25", "p50", "p75", "max"]), &rows));

    out.push_str("\nMean realized yield and improvement over the baseline (%)\n\n");
    let risks: Vec<String> = report.config.alphas.iter().map(|a| a.label()).collect();
    let mut rows = Vec::new();
    for group in report.groups() {
        for &year in &report.config.test_years {
            for strategy in report.strategy_names() {
                for risk in &risks {
                    let cells: Vec<&CellReport> = report
                        .cells
                        .iter()
                        .filter(|c| c.group == group && c.year == year && c.strategy == strategy && &c.risk == risk)
                        .collect();
                    let ok: Vec<&&CellReport> = cells.iter().filter(|c| c.is_ok()).collect();
                    let yields: Vec<f64> = ok.iter().filter_map(|c| c.realized_yield).collect();
                    let gains: Vec<f64> = ok.iter().filter_map(|c| c.improvement_pct).collect();
                    rows.push(vec![
                        group.clone(),
                        year.to_string(),
                        strategy.clone(),
                        risk.clone(),
                        format!("{}/{}", ok.len(), cells.len()),
                        mean(&yields).map(|v| format!("{v:.1}")).unwrap_or_else(|| "-".into()),
                        mean(&gains).map(|v| format!("{v:.2}")).unwrap_or_else(|| "-".into()),
                    ]);
                }
            }
        }
    }
    out.push_str(&text_grid(
        &strings(&["group", "year", "strategy", "risk", "cells", "yield", "improvement"]),
        &rows,
    ));

    for (i, v) in report.space.variables().iter().enumerate() {
        let table = frequency_table(report, i);
        let _ = write!(
            out,
            "\nChoice frequency of {} (% of cells; entries ordered {})\n\n",
            v.name,
            table.strategies.join(", ")
        );
        let mut header = strings(&["group", "year"]);
        header.extend(table.levels.iter().cloned());
        let rows: Vec<Vec<String>> = table
            .rows
            .iter()
            .map(|r| {
                let mut row = vec![r.group.clone(), r.year.to_string()];
                row.extend(r.percent.iter().map(|per| format_tuple(per)));
                row
            })
            .collect();
        out.push_str(&text_grid(&header, &rows));
    }
    out
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<PathBuf, CliError> {
    let path = dir.join(name);
    std::fs::write(&path, contents)
        .map_err(|e| CliError::Environment(format!("cannot write {}: {e}", path.display())))?;
    Ok(path)
}

/// Writes every derived table into `dir` (not `report.json`).
pub fn write_tables(report: &Report, dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Environment(format!("cannot create {}: {e}", dir.display())))?;
    let mut written = vec![
        write_file(dir, "improvement.csv", &improvement_csv(report))?,
        write_file(dir, "weather_stats.csv", &weather_stats_csv(&report.weather_stats))?,
    ];
    for (i, v) in report.space.variables().iter().enumerate() {
        let table = frequency_table(report, i);
        written.push(write_file(dir, &format!("freq_{}.csv", v.name), &frequency_csv(&table))?);
    }
    written.push(write_file(dir, "tables.txt", &render_tables(report))?);
    Ok(written)
}

/// Writes `report.json` and every table.
pub fn write_all(report: &Report, dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Environment(format!("cannot create {}: {e}", dir.display())))?;
    let mut written = vec![write_file(dir, REPORT_FILE, &report.to_json())?];
    written.extend(write_tables(report, dir)?);
    Ok(written)
}
