use cropopt::domain::{DecisionSpace, DecisionVector, Scenario, WeatherDay};
use cropopt::simulator::surrogate::{surrogate_factors, Management, REFERENCE_PARAMS_JSON};
use cropopt::simulator::{Evaluator, SurrogateEvaluator, SurrogateParams};
use cropopt::weather::synthetic;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

/// Row-by-row recomputation of the closed forms straight from the raw
/// parameter JSON, indexing days by position (day-of-year d is row d-1).
struct Sheet {
    p: Value,
}

struct Row {
    tt: f64,
    g_mat: f64,
    rain: f64,
    g_water: f64,
    leach_rain: f64,
    n_eff: f64,
    g_n: f64,
    d_opt: f64,
    g_dens: f64,
    y: f64,
}

impl Sheet {
    fn num(&self, block: &str, key: &str) -> f64 {
        self.p[block][key].as_f64().unwrap()
    }

    fn rain_between(days: &[WeatherDay], from_doy: u32, to_doy: u32) -> f64 {
        let mut total = 0.0;
        let mut d = from_doy;
        while d < to_doy {
            total += days[(d - 1) as usize].rain;
            d += 1;
        }
        total
    }

    fn row(&self, days: &[WeatherDay], planting: u32, n_amount: f64, n_doy: u32, density: f64, rm: f64) -> Row {
        let base = self.num("maturity", "gdd_base");
        let cap = self.num("maturity", "gdd_cap");
        let season_end = self.num("maturity", "season_end_doy") as u32;
        let frost_start = self.num("maturity", "frost_search_start_doy") as u32;
        let frost_temp = self.num("maturity", "frost_temp");

        let mut end = season_end;
        for d in frost_start..season_end {
            if days[(d - 1) as usize].min_temp <= frost_temp {
                end = d;
                break;
            }
        }
        let mut tt = 0.0;
        for d in planting..end {
            let w = &days[(d - 1) as usize];
            let hi = if w.max_temp > cap { cap } else { w.max_temp };
            let lo = if w.min_temp < base { base } else { w.min_temp };
            let gdd = (hi + lo) / 2.0 - base;
            if gdd > 0.0 {
                tt += gdd;
            }
        }
        let req = self.num("maturity", "required_tt_rm100") + self.num("maturity", "required_tt_per_rm") * (rm - 100.0);
        let ratio = if tt / req > 1.0 { 1.0 } else { tt / req };
        let fill = ratio.powf(self.num("maturity", "cliff_exponent"));
        let chill_n = self.num("maturity", "chill_days") as u32;
        let mut chill_sum = 0.0;
        for d in planting..planting + chill_n {
            let w = &days[(d - 1) as usize];
            chill_sum += (w.max_temp + w.min_temp) / 2.0;
        }
        let chill_mean = chill_sum / chill_n as f64;
        let shortfall = self.num("maturity", "chill_temp") - chill_mean;
        let mut chill = if shortfall > 0.0 { shortfall * self.num("maturity", "chill_penalty_per_degree") } else { 0.0 };
        if chill > self.num("maturity", "chill_max_penalty") {
            chill = self.num("maturity", "chill_max_penalty");
        }
        let potential = 1.0 + self.num("maturity", "potential_gain_per_rm") * (rm - 100.0);
        let g_mat = potential * fill * (1.0 - chill);

        let window = self.num("water", "window_days") as u32;
        let rain = Self::rain_between(days, planting, planting + window);
        let opt = self.num("water", "optimum_mm");
        let width = self.num("water", "width_mm");
        let wf = self.num("water", "floor");
        let z = (rain - opt) / width;
        let g_water = wf + (1.0 - wf) * (-(z * z) / 2.0).exp();

        let leach_end = planting + self.num("nitrogen", "leach_window_after_planting") as u32;
        let leach_rain = if n_doy < leach_end { Self::rain_between(days, n_doy, leach_end) } else { 0.0 };
        let leach = (leach_rain * self.num("nitrogen", "leach_per_mm")).min(self.num("nitrogen", "leach_max"));
        let gap = n_doy as f64 - planting as f64;
        let late_frac = ((gap - self.num("nitrogen", "late_grace_days")) / self.num("nitrogen", "late_span_days")).clamp(0.0, 1.0);
        let wet = z.clamp(0.0, 1.0);
        let late = self.num("nitrogen", "late_max_penalty") * late_frac * (1.0 + self.num("nitrogen", "late_wet_gain") * wet);
        let n_eff = n_amount * (1.0 - leach) * (1.0 - late);
        let k = self.num("nitrogen", "half_saturation");
        let nref = self.num("nitrogen", "reference_amount");
        let nf = self.num("nitrogen", "floor");
        let uptake = n_eff / (n_eff + k);
        let uptake_ref = nref / (nref + k);
        let g_n = nf + (1.0 - nf) * uptake / uptake_ref;

        let avail = (rain / opt).min(self.num("density", "availability_cap"));
        let d_opt = self.num("density", "optimum_base") + self.num("density", "optimum_water_gain") * avail;
        let g_dens = (1.0 - self.num("density", "curvature") * (density - d_opt) * (density - d_opt)).max(self.num("density", "floor"));

        let y = self.p["base_yield"].as_f64().unwrap() * g_mat * g_water * g_n * g_dens;
        Row { tt, g_mat, rain, g_water, leach_rain, n_eff, g_n, d_opt, g_dens, y }
    }
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * b.abs().max(1.0)
}

#[test]
fn factor_table_matches_recomputation_at_ten_grid_points() {
    let sheet = Sheet { p: serde_json::from_str(REFERENCE_PARAMS_JSON).unwrap() };
    let params = SurrogateParams::reference();
    let scenario = synthetic::scenario_for_year("fixed", 2014, 42);
    let space = DecisionSpace::maize_reference();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..10 {
        let x = space.from_flat_index(rng.gen_range(0..space.cardinality()));
        let v = x.values(&space);
        let m = Management::from_decision(&x, &space).unwrap();
        let f = surrogate_factors(&m, &scenario, &params).unwrap();
        let r = sheet.row(scenario.days(), v[0] as u32, v[1], v[2] as u32, v[3], v[4]);
        let pairs = [
            ("thermal_time", f.thermal_time, r.tt),
            ("g_mat", f.g_mat, r.g_mat),
            ("rain", f.rain_after_planting, r.rain),
            ("g_water", f.g_water, r.g_water),
            ("leach_rain", f.leach_rain, r.leach_rain),
            ("n_eff", f.effective_n, r.n_eff),
            ("g_n", f.g_n, r.g_n),
            ("d_opt", f.optimal_density, r.d_opt),
            ("g_dens", f.g_dens, r.g_dens),
            ("yield", f.yield_value, r.y),
        ];
        for (name, got, want) in pairs {
            assert!(close(got, want), "{name} at {v:?}: {got} vs {want}");
        }
    }
}

fn with_level(space: &DecisionSpace, x: &DecisionVector, var: &str, level: usize) -> DecisionVector {
    let mut levels = x.levels().to_vec();
    levels[space.variable_index(var).unwrap()] = level;
    DecisionVector::new(levels, space).unwrap()
}

#[test]
fn zero_nitrogen_never_beats_two_hundred() {
    let space = DecisionSpace::maize_reference();
    let ev = SurrogateEvaluator::reference();
    let n200 = space.variable("n_amount").unwrap().grid.iter().position(|&g| g == 200.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for seed in 0..8 {
        let s = synthetic::scenario_for_year("s", 2000 + seed as i32, seed);
        for _ in 0..50 {
            let x = space.from_flat_index(rng.gen_range(0..space.cardinality()));
            let y0 = ev.evaluate(&with_level(&space, &x, "n_amount", 0), &space, &s).unwrap();
            let y200 = ev.evaluate(&with_level(&space, &x, "n_amount", n200), &space, &s).unwrap();
            assert!(y0 <= y200, "{y0} > {y200}");
        }
    }
}

/// Scales post-planting rain by `factor` on days in [from, to).
fn scale_rain(s: &Scenario, from: u32, to: u32, factor: f64) -> Scenario {
    let days = s
        .days()
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let doy = i as u32 + 1;
            let rain = if (from..to).contains(&doy) { d.rain * factor } else { d.rain };
            WeatherDay { rain, ..*d }
        })
        .collect();
    Scenario::new(format!("{}x{factor}", s.id), s.source_year, days).unwrap()
}

#[test]
fn low_density_loses_in_wet_weather() {
    let space = DecisionSpace::maize_reference();
    let ev = SurrogateEvaluator::reference();
    let base = synthetic::scenario_for_year("w", 2010, 8);
    let x = space.from_flat_index(space.cardinality() / 2);
    let p = x.value_of(&space, "planting_date").unwrap() as u32;
    let m = Management::from_decision(&x, &space).unwrap();
    // Make the post-planting window wet (above the water optimum).
    let rain = surrogate_factors(&m, &base, ev.params()).unwrap().rain_after_planting;
    let wet = scale_rain(&base, p, p + 60, 330.0 / rain.max(1.0));
    let f = surrogate_factors(&m, &wet, ev.params()).unwrap();
    assert!(f.rain_after_planting > ev.params().water.optimum_mm);
    let grid = &space.variable("density").unwrap().grid;
    let best = grid
        .iter()
        .enumerate()
        .min_by(|a, b| (a.1 - f.optimal_density).abs().total_cmp(&(b.1 - f.optimal_density).abs()))
        .unwrap()
        .0;
    assert_ne!(best, 0);
    let low = ev.evaluate(&with_level(&space, &x, "density", 0), &space, &wet).unwrap();
    let opt = ev.evaluate(&with_level(&space, &x, "density", best), &space, &wet).unwrap();
    assert!(low < opt, "{low} >= {opt}");
}

#[test]
fn rain_after_planting_helps_when_dry_and_hurts_when_waterlogged() {
    let space = DecisionSpace::maize_reference();
    let ev = SurrogateEvaluator::reference();
    let base = synthetic::scenario_for_year("g", 2012, 3);
    let x = space.from_flat_index(12_345);
    let p = x.value_of(&space, "planting_date").unwrap() as u32;
    let m = Management::from_decision(&x, &space).unwrap();
    let rain = surrogate_factors(&m, &base, ev.params()).unwrap().rain_after_planting;
    let y_at = |target_mm: f64| {
        let s = scale_rain(&base, p, p + 60, target_mm / rain);
        ev.evaluate(&x, &space, &s).unwrap()
    };
    // Dry regime: 80 mm → 88 mm raises yield.
    assert!(y_at(88.0) > y_at(80.0));
    // Waterlogged regime: 420 mm → 462 mm lowers yield.
    assert!(y_at(462.0) < y_at(420.0));
}

#[test]
fn yields_are_bounded_and_reproducible() {
    let space = DecisionSpace::maize_reference();
    let ev = SurrogateEvaluator::reference();
    let cap = 1.5 * ev.params().base_yield;
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for seed in 0..5 {
        let s = synthetic::scenario_for_year("b", 1995 + seed as i32, 100 + seed);
        for _ in 0..200 {
            let x = space.from_flat_index(rng.gen_range(0..space.cardinality()));
            let y = ev.evaluate(&x, &space, &s).unwrap();
            assert!((0.0..=cap).contains(&y), "{y}");
            assert_eq!(y.to_bits(), ev.evaluate(&x, &space, &s).unwrap().to_bits());
        }
    }
}

#[test]
fn parameter_file_round_trips() {
    let p = SurrogateParams::reference();
    let text = serde_json::to_string_pretty(&p).unwrap();
    assert_eq!(SurrogateParams::from_json(&text).unwrap(), p);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.json");
    std::fs::write(&path, text).unwrap();
    assert_eq!(SurrogateParams::load(&path).unwrap(), p);
}
