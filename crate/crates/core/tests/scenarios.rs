use chrono::{Datelike, NaiveDate};
use cropopt::domain::WeatherDay;
use cropopt::scenario::{build_scenarios, precip_stats, StrategySpec, WeatherArchive};
use cropopt::weather::synthetic;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn archive() -> WeatherArchive {
    WeatherArchive::from_days("site", synthetic::generate(31, 1985, 2016)).unwrap()
}

#[test]
fn nested_prefix_between_strategies() {
    let a = archive();
    let s1 = StrategySpec::strategy_1();
    let s2 = StrategySpec::strategy_2();
    let obs1 = a.observed(2016, Some(s1.decision_date(2016))).unwrap();
    let obs2 = a.observed(2016, Some(s2.decision_date(2016))).unwrap();
    let set1 = build_scenarios(&a, 2016, &obs1, &s1).unwrap();
    let set2 = build_scenarios(&a, 2016, &obs2, &s2).unwrap();
    assert_eq!(set1.len(), set2.len());
    let mar1 = s1.decision_date(2016).ordinal0() as usize;
    let may1 = s2.decision_date(2016).ordinal0() as usize;
    for (x, y) in set1.scenarios().iter().zip(set2.scenarios()) {
        assert_eq!(x.source_year, y.source_year);
        assert_eq!(&x.days()[..mar1], &y.days()[..mar1]);
        assert_eq!(&y.days()[mar1..may1], &obs2[mar1..may1]);
        // After May 1 both carry the same donor year.
        assert_eq!(&x.days()[may1..], &y.days()[may1..]);
    }
}

#[test]
fn every_scenario_is_a_complete_calendar() {
    let a = archive();
    for target in [2015, 2016] {
        for strategy in [StrategySpec::strategy_1(), StrategySpec::strategy_2(), StrategySpec::custom(2, 28).unwrap()] {
            let obs = a.observed(target, Some(strategy.decision_date(target))).unwrap();
            let set = build_scenarios(&a, target, &obs, &strategy).unwrap();
            assert_eq!(set.len(), (target - 1985) as usize);
            let expected: Vec<NaiveDate> = NaiveDate::from_ymd_opt(target, 1, 1)
                .unwrap()
                .iter_days()
                .take_while(|d| d.year() == target)
                .collect();
            for s in set.scenarios() {
                let dates: Vec<NaiveDate> = s.days().iter().map(|d| d.date).collect();
                assert_eq!(dates, expected, "{}", s.id);
            }
            let total: f64 = set.probabilities().iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }
}

fn rain_series(rain: &[f64]) -> Vec<WeatherDay> {
    NaiveDate::from_ymd_opt(2001, 1, 1)
        .unwrap()
        .iter_days()
        .zip(rain)
        .map(|(date, &rain)| WeatherDay { date, radiation: 12.0, max_temp: 20.0, min_temp: 8.0, rain })
        .collect()
}

/// Order-statistics oracle: rank r = p(n-1), blend of the two neighbors.
fn quantile_oracle(mut v: Vec<f64>, p: f64) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let r = p * (v.len() as f64 - 1.0);
    let below = r as usize;
    let frac = r - below as f64;
    if below + 1 < v.len() {
        v[below] * (1.0 - frac) + v[below + 1] * frac
    } else {
        v[below]
    }
}

#[test]
fn random_year_matches_order_statistics_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(365);
    for _ in 0..20 {
        let rain: Vec<f64> = (0..365)
            .map(|_| if rng.gen_bool(0.6) { 0.0 } else { rng.gen_range(0.0..40.0) })
            .collect();
        let s = precip_stats(&rain_series(&rain)).unwrap();
        let n = rain.len() as f64;
        let mean = rain.iter().sum::<f64>() / n;
        let var = rain.iter().map(|r| r * r).sum::<f64>() / n - mean * mean;
        let tol = |want: f64| 1e-12 * want.abs().max(1.0);
        assert!((s.mean - mean).abs() <= tol(mean));
        assert!((s.std - var.sqrt()).abs() <= 1e-9 * var.sqrt().max(1.0));
        assert!((s.sum - rain.iter().sum::<f64>()).abs() <= tol(s.sum));
        for (got, p) in [(s.p25, 0.25), (s.p50, 0.5), (s.p75, 0.75)] {
            let want = quantile_oracle(rain.clone(), p);
            assert!((got - want).abs() <= tol(want), "p{p}: {got} vs {want}");
        }
        assert_eq!(s.max, rain.iter().cloned().fold(f64::MIN, f64::max));
    }
}

proptest! {
    #[test]
    fn precip_stats_ignore_order(rain in proptest::collection::vec(0.0f64..100.0, 1..120), seed in any::<u64>()) {
        let mut shuffled = rain.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..shuffled.len()).rev() {
            shuffled.swap(i, rng.gen_range(0..=i));
        }
        let a = precip_stats(&rain_series(&rain)).unwrap();
        let b = precip_stats(&rain_series(&shuffled)).unwrap();
        prop_assert_eq!(a.p25, b.p25);
        prop_assert_eq!(a.p50, b.p50);
        prop_assert_eq!(a.p75, b.p75);
        prop_assert_eq!(a.max, b.max);
        prop_assert!((a.mean - b.mean).abs() <= 1e-12 * a.mean.max(1.0));
        prop_assert!((a.std - b.std).abs() <= 1e-9 * a.std.max(1.0));
    }
}
