//! Daily weather CSV files (`date,radiation,maxt,mint,rain`).

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::domain::{check_contiguous, WeatherDay};
use crate::error::{Error, Result};

pub const CSV_HEADER: [&str; 5] = ["date", "radiation", "maxt", "mint", "rain"];

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    date: NaiveDate,
    radiation: f64,
    maxt: f64,
    mint: f64,
    rain: f64,
}

/// Parses a weather CSV. Rows must be contiguous and valid.
pub fn read_csv<R: Read>(reader: R) -> Result<Vec<WeatherDay>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != CSV_HEADER {
        return Err(Error::Ingestion(format!(
            "weather header must be `{}`, got `{}`",
            CSV_HEADER.join(","),
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut days = Vec::new();
    for (line, row) in rdr.deserialize::<Row>().enumerate() {
        let row = row.map_err(|e| Error::Ingestion(format!("row {}: {e}", line + 2)))?;
        let day = WeatherDay {
            date: row.date,
            radiation: row.radiation,
            max_temp: row.maxt,
            min_temp: row.mint,
            rain: row.rain,
        };
        day.validate()?;
        days.push(day);
    }
    check_contiguous(&days)?;
    Ok(days)
}

pub fn read_csv_file(path: &Path) -> Result<Vec<WeatherDay>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(std::io::BufReader::new(file))
        .map_err(|e| match e {
            Error::Ingestion(msg) => Error::Ingestion(format!("{}: {msg}", path.display())),
            other => other,
        })
}

pub fn write_csv<W: Write>(writer: W, days: &[WeatherDay]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    for d in days {
        wtr.serialize(Row {
            date: d.date,
            radiation: d.radiation,
            maxt: d.max_temp,
            mint: d.min_temp,
            rain: d.rain,
        })?;
    }
    wtr.flush().map_err(|e| Error::io("<weather csv>", e))?;
    Ok(())
}

pub fn write_csv_file(path: &Path, days: &[WeatherDay]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv(std::io::BufWriter::new(file), days)
}

/// `<dir>/<location_id>.csv`
pub fn archive_path(dir: &Path, location_id: &str) -> PathBuf {
    dir.join(format!("{location_id}.csv"))
}

/// Seeded synthetic daily weather with a mid-latitude continental climate.
///
/// Used for fixtures, demos and desk-scale studies; it is not a weather
/// generator intended to model any real location.
pub mod synthetic {
    use super::*;
    use crate::domain::Scenario;
    use chrono::Datelike;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Exp1, StandardNormal};

    /// Daily series for `years` (inclusive range), seeded by `seed`.
    /// Each year is generated from its own stream so any sub-range of years
    /// reproduces the same values.
    pub fn generate(seed: u64, first_year: i32, last_year: i32) -> Vec<WeatherDay> {
        (first_year..=last_year).flat_map(|y| year(seed, y)).collect()
    }

    pub fn year(seed: u64, year: i32) -> Vec<WeatherDay> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (year as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let warm_offset: f64 = 1.2 * rng.sample::<f64, _>(StandardNormal);
        // Year-level wetness: some seasons are markedly wetter than others.
        let wetness: f64 = (0.35 * rng.sample::<f64, _>(StandardNormal)).exp();
        let mut anomaly = 0.0;
        let mut wet_yesterday = false;

        let mut date = NaiveDate::from_ymd_opt(year, 1, 1).expect("valid year");
        let mut days = Vec::with_capacity(366);
        while date.year() == year {
            let phase = 2.0 * std::f64::consts::PI * (date.ordinal() as f64 - 20.0) / 365.25;
            anomaly = 0.7 * anomaly + 2.2 * rng.sample::<f64, _>(StandardNormal);
            let mean = 9.0 - 15.0 * phase.cos() + warm_offset + anomaly;
            let range = 11.0 + 1.5 * rng.sample::<f64, _>(StandardNormal);
            let range = range.clamp(4.0, 20.0);

            let summer = (2.0 * std::f64::consts::PI * (date.ordinal() as f64 - 60.0) / 365.25).sin();
            let base_p = 0.24 + 0.08 * summer;
            let p_wet = if wet_yesterday { base_p + 0.2 } else { base_p };
            let wet = rng.gen::<f64>() < (p_wet * wetness.sqrt()).min(0.9);
            let rain = if wet {
                let amount: f64 = rng.sample(Exp1);
                (amount * 7.5 * wetness.sqrt()).min(150.0)
            } else {
                0.0
            };
            wet_yesterday = wet;

            let clear = 17.0 + 9.0 * summer;
            let radiation = if wet { 0.55 * clear } else { clear } + rng.gen_range(-1.0..1.0);

            days.push(WeatherDay {
                date,
                radiation: round3(radiation.max(0.5)),
                max_temp: round3(mean + 0.5 * range),
                min_temp: round3(mean - 0.5 * range),
                rain: round3(rain),
            });
            date = date.succ_opt().expect("date in range");
        }
        days
    }

    /// A whole-year scenario built from [`year`].
    pub fn scenario_for_year(id: &str, year_value: i32, seed: u64) -> Scenario {
        Scenario::new(id, year_value, year(seed, year_value)).expect("synthetic year is valid")
    }

    // Three decimals keep CSV round trips exact.
    fn round3(v: f64) -> f64 {
        (v * 1000.0).round() / 1000.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_is_exact() {
        let days = synthetic::generate(3, 2015, 2016);
        assert_eq!(days.len(), 365 + 366);
        let mut buf = Vec::new();
        write_csv(&mut buf, &days).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("date,radiation,maxt,mint,rain\n2015-01-01,"));
        assert_eq!(read_csv(buf.as_slice()).unwrap(), days);
    }

    #[test]
    fn gaps_are_named() {
        let text = "date,radiation,maxt,mint,rain\n2016-01-01,1,5,0,0\n2016-01-04,1,5,0,0\n";
        let err = read_csv(text.as_bytes()).unwrap_err().to_string();
        assert!(err.contains("2016-01-02"), "{err}");
    }

    #[test]
    fn bad_header_and_rows() {
        assert!(read_csv("day,radiation,maxt,mint,rain\n".as_bytes()).is_err());
        let text = "date,radiation,maxt,mint,rain\n2016-01-01,1,0,5,0\n";
        assert!(read_csv(text.as_bytes()).is_err());
        let text = "date,radiation,maxt,mint,rain\n2016-01-01,x,5,0,0\n";
        assert!(read_csv(text.as_bytes()).is_err());
    }

    #[test]
    fn synthetic_years_are_reproducible_and_plausible() {
        let a = synthetic::generate(9, 2000, 2003);
        let b = synthetic::generate(9, 2002, 2003);
        assert_eq!(&a[a.len() - b.len()..], &b[..]);
        let annual: f64 = a[..366].iter().map(|d| d.rain).sum();
        assert!(annual > 300.0 && annual < 2000.0, "{annual}");
        assert!(a.iter().all(|d| d.validate().is_ok()));
    }
}
