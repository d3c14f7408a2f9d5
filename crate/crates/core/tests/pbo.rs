use std::collections::HashSet;

use cropopt::domain::{DecisionSpace, DecisionVector, Scenario, ScenarioSet, VariableSpec};
use cropopt::error::EvalError;
use cropopt::pbo::{self, PboConfig, RunManifest, SharingMode};
use cropopt::risk::{self, RiskSpec};
use cropopt::scenario::{build_scenarios, StrategySpec, WeatherArchive};
use cropopt::simulator::{CountingEvaluator, FnEvaluator, SurrogateEvaluator};
use cropopt::weather::synthetic;

fn small_space() -> DecisionSpace {
    let d = DecisionSpace::maize_reference();
    // Planting × N amount × density, with two-level N date and cultivar.
    DecisionSpace::new(vec![
        d.variables()[0].clone(),
        d.variables()[1].clone(),
        VariableSpec::new("n_date", vec![98.0, 105.0], "doy").unwrap(),
        d.variables()[3].clone(),
        VariableSpec::new("cultivar", vec![105.0, 110.0], "RM").unwrap(),
    ])
    .unwrap()
}

fn scenarios(n_years: i32) -> ScenarioSet {
    let archive = WeatherArchive::from_days("site", synthetic::generate(4, 2016 - n_years, 2016)).unwrap();
    let s = StrategySpec::strategy_2();
    let obs = archive.observed(2016, Some(s.decision_date(2016))).unwrap();
    build_scenarios(&archive, 2016, &obs, &s).unwrap()
}

#[test]
fn audit_budget_trace_and_determinism() {
    let space = small_space();
    let set = scenarios(6);
    for mode in [SharingMode::SequentialWithinIteration, SharingMode::SnapshotPerIteration] {
        let mut cfg = PboConfig::with_defaults(&space, 4, 6, RiskSpec::new(0.5).unwrap(), 12);
        cfg.sharing_mode = mode;
        let ev = CountingEvaluator::new(SurrogateEvaluator::reference());
        let r = pbo::run(&cfg, &space, &set, &ev).unwrap();

        assert_eq!(r.trace.len(), cfg.max_iterations + 1);
        assert!(r.trace.windows(2).all(|w| w[1] >= w[0]), "{mode:?}: {:?}", r.trace);
        assert_eq!(*r.trace.last().unwrap(), r.best.y);
        let max = r.dataset.records().iter().map(|x| x.y).fold(f64::MIN, f64::max);
        assert_eq!(r.best.y, max);

        for rec in r.dataset.records() {
            assert_eq!(risk::aggregate(&rec.per_scenario, &set, &cfg.risk).unwrap(), rec.y);
            let robust = risk::aggregate(&rec.per_scenario, &set, &RiskSpec::robust(set.len())).unwrap();
            let mean = risk::aggregate(&rec.per_scenario, &set, &RiskSpec::stochastic()).unwrap();
            assert!(robust <= rec.y + 1e-12 && rec.y <= mean + 1e-12);
        }
        let distinct: HashSet<&DecisionVector> = r.dataset.records().iter().map(|x| &x.x).collect();
        assert_eq!(distinct.len(), r.dataset.len());

        let accepted = r.proposals.iter().filter(|p| p.y.is_some()).count();
        assert_eq!(ev.calls(), (cfg.initial_design_size + accepted) * set.len());
        assert_eq!(r.evaluation_count, ev.calls());

        let again = pbo::run(&cfg, &space, &set, &SurrogateEvaluator::reference()).unwrap();
        assert_eq!(again, r);
    }
}

#[test]
fn single_scenario_makes_alpha_irrelevant() {
    let space = small_space();
    let one = ScenarioSet::uniform(vec![synthetic::scenario_for_year("obs", 2016, 4)]).unwrap();
    let ev = SurrogateEvaluator::reference();
    let stochastic = pbo::run(&PboConfig::with_defaults(&space, 2, 4, RiskSpec::stochastic(), 3), &space, &one, &ev).unwrap();
    let robust = pbo::run(&PboConfig::with_defaults(&space, 2, 4, RiskSpec::robust(1), 3), &space, &one, &ev).unwrap();
    assert_eq!(stochastic.dataset, robust.dataset);
}

#[test]
fn failed_proposals_are_logged_and_skipped() {
    let space = DecisionSpace::new(vec![VariableSpec::stepped("x", 0.0, 1.0, 40, "").unwrap()]).unwrap();
    let set = ScenarioSet::uniform(vec![synthetic::scenario_for_year("s", 2001, 2)]).unwrap();
    // A peak at 30 next to a point that always fails.
    let eval = FnEvaluator(|x: &DecisionVector, _: &DecisionSpace, _: &Scenario| {
        let l = x.levels()[0] as f64;
        if l == 31.0 {
            Err(EvalError::Setup("band".into()))
        } else {
            Ok(100.0 - (l - 30.0).abs())
        }
    });
    // With three instances one failure per iteration stays under the abort threshold.
    let mut cfg = PboConfig::with_defaults(&space, 3, 12, RiskSpec::stochastic(), 8);
    cfg.initial_design_size = 5;
    let r = pbo::run(&cfg, &space, &set, &eval).unwrap();
    let failed: Vec<_> = r.proposals.iter().filter(|p| p.error.is_some()).collect();
    assert_eq!(failed.len(), 1);
    for p in &failed {
        assert!(p.y.is_none());
        assert!(!r.dataset.contains(&p.x));
    }
    let proposed: Vec<&DecisionVector> = r.proposals.iter().map(|p| &p.x).collect();
    let unique: HashSet<_> = proposed.iter().collect();
    assert_eq!(unique.len(), proposed.len(), "no point is proposed twice");
    assert_eq!(r.best.x.levels(), &[30]);
}

#[test]
fn manifest_round_trips() {
    let space = small_space();
    let set = scenarios(3);
    let cfg = PboConfig::with_defaults(&space, 2, 2, RiskSpec::new(0.4).unwrap(), 99);
    let r = pbo::run(&cfg, &space, &set, &SurrogateEvaluator::reference()).unwrap();
    let manifest = RunManifest::new(&cfg, &space, &set, &r);
    let text = serde_json::to_string_pretty(&manifest).unwrap();
    let back: RunManifest = serde_json::from_str(&text).unwrap();
    assert_eq!(back, manifest);
    assert_eq!(back.scenario_digest, pbo::scenario_digest(&set));

    let rerun = pbo::run(&back.config, &back.space, &set, &SurrogateEvaluator::reference()).unwrap();
    assert_eq!(rerun.trace, manifest.trace);
    assert_eq!(rerun.best, manifest.best);
}
