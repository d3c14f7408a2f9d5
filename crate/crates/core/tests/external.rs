use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use cropopt::domain::{DecisionSpace, Scenario};
use cropopt::error::EvalError;
use cropopt::simulator::{Evaluator, ExternalAdapterConfig, ExternalEvaluator, OutputRule};
use cropopt::weather::synthetic;

fn script(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, format!("#!/bin/sh\n{body}\n")).unwrap();
    path
}

fn template(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("model.in");
    std::fs::write(&path, text).unwrap();
    path
}

fn adapter(dir: &Path, body: &str, rule: &str) -> ExternalAdapterConfig {
    let s = script(dir, "model.sh", body);
    let t = template(dir, "planting={{planting_date}}\nweather={{weather_file}}\n");
    ExternalAdapterConfig::new(t, vec!["sh".into(), s.display().to_string(), "{{input_file}}".into()], rule.parse().unwrap())
}

fn scenario() -> Scenario {
    synthetic::scenario_for_year("obs-2016", 2016, 1)
}

#[test]
fn constant_stub_returns_its_value_for_any_point() {
    let dir = tempfile::tempdir().unwrap();
    let ev = ExternalEvaluator::new(adapter(dir.path(), "echo 'yield: 100'", r"regex:yield:\s*([0-9.]+)")).unwrap();
    let space = DecisionSpace::maize_reference();
    for i in [0, 17, 40_000] {
        assert_eq!(ev.evaluate(&space.from_flat_index(i), &space, &scenario()).unwrap(), 100.0);
    }
    assert_eq!(ev.invocations(), 3);
}

#[test]
fn echoed_inputs_round_trip_through_placeholders() {
    let dir = tempfile::tempdir().unwrap();
    let body = r#"sum=$(awk -F= '{ s += $2 } END { printf "%.6f", s }' "$1")
test -s weather.csv || exit 7
echo "year,yield" > out.csv
echo "2016,$sum" >> out.csv"#;
    let s = script(dir.path(), "sum.sh", body);
    let t = template(
        dir.path(),
        "p={{planting_date}}\nn={{n_amount}}\nd={{n_date}}\nrho={{density}}\nrm={{ cultivar }}\n",
    );
    let cfg = ExternalAdapterConfig::new(t, vec!["sh".into(), s.display().to_string(), "{{input_file}}".into()], "csv:out.csv:yield".parse().unwrap());
    let ev = ExternalEvaluator::new(cfg).unwrap();
    let space = DecisionSpace::maize_reference();
    ev.check_placeholders(&space).unwrap();
    for i in [0, 1234, 58_799] {
        let x = space.from_flat_index(i);
        let want: f64 = x.values(&space).iter().sum();
        let got = ev.evaluate(&x, &space, &scenario()).unwrap();
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }
}

#[test]
fn timeout_kills_the_process_and_keeps_output() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = adapter(dir.path(), "echo started\nsleep 5\necho 'yield: 1'", r"regex:yield:\s*([0-9.]+)");
    cfg.timeout_seconds = 0.3;
    let ev = ExternalEvaluator::new(cfg).unwrap();
    let space = DecisionSpace::maize_reference();
    let t = Instant::now();
    let err = ev.evaluate(&space.from_flat_index(0), &space, &scenario()).unwrap_err();
    assert!(t.elapsed() < Duration::from_secs(3), "{:?}", t.elapsed());
    match err {
        EvalError::Timeout { seconds, output } => {
            assert_eq!(seconds, 0.3);
            assert!(output.contains("started"), "{output}");
        }
        other => panic!("expected timeout, got {other:?}"),
    }
}

#[test]
fn unparseable_output_and_failures_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let space = DecisionSpace::maize_reference();
    let x = space.from_flat_index(3);

    let ev = ExternalEvaluator::new(adapter(dir.path(), "echo 'no number here'", r"regex:yield:\s*([0-9.]+)")).unwrap();
    match ev.evaluate(&x, &space, &scenario()).unwrap_err() {
        EvalError::Unparseable { output, .. } => assert!(output.contains("no number here")),
        other => panic!("{other:?}"),
    }

    let ev = ExternalEvaluator::new(adapter(dir.path(), "echo 'yield: 1.2.3'", r"regex:yield:\s*([0-9.]+)")).unwrap();
    assert!(matches!(ev.evaluate(&x, &space, &scenario()), Err(EvalError::Unparseable { .. })));

    let ev = ExternalEvaluator::new(adapter(dir.path(), "echo 'a,b' > out.csv", "csv:out.csv:yield")).unwrap();
    assert!(matches!(ev.evaluate(&x, &space, &scenario()), Err(EvalError::Unparseable { .. })));

    let ev = ExternalEvaluator::new(adapter(dir.path(), "echo boom >&2\nexit 3", r"regex:(\d+)")).unwrap();
    match ev.evaluate(&x, &space, &scenario()).unwrap_err() {
        EvalError::ProcessFailed { status, output } => {
            assert!(status.contains('3'), "{status}");
            assert!(output.contains("boom"));
        }
        other => panic!("{other:?}"),
    }

    let ev = ExternalEvaluator::new(adapter(dir.path(), "echo 'yield: -4'", r"regex:yield:\s*(-?[0-9.]+)")).unwrap();
    assert!(matches!(ev.evaluate(&x, &space, &scenario()), Err(EvalError::InvalidYield(_))));
}

#[test]
fn cache_prevents_reinvocation() {
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("cache");
    let mut cfg = adapter(dir.path(), "echo 'yield: 42.5'", r"regex:yield:\s*([0-9.]+)");
    cfg.cache_dir = Some(cache.clone());
    let space = DecisionSpace::maize_reference();
    let x = space.from_flat_index(99);
    let s = scenario();

    let ev = ExternalEvaluator::new(cfg.clone()).unwrap();
    assert_eq!(ev.evaluate(&x, &space, &s).unwrap(), 42.5);
    assert_eq!(ev.evaluate(&x, &space, &s).unwrap(), 42.5);
    assert_eq!(ev.invocations(), 1);
    assert_eq!(ev.cache_hits(), 1);

    // A different scenario or point is a different key.
    let other = synthetic::scenario_for_year("obs-2015", 2015, 1);
    ev.evaluate(&x, &space, &other).unwrap();
    ev.evaluate(&space.from_flat_index(100), &space, &s).unwrap();
    assert_eq!(ev.invocations(), 3);

    // The on-disk cache survives a restart.
    let entries: Vec<_> = std::fs::read_dir(&cache).unwrap().collect();
    assert_eq!(entries.len(), 3);
    let fresh = ExternalEvaluator::new(cfg).unwrap();
    assert_eq!(fresh.evaluate(&x, &space, &s).unwrap(), 42.5);
    assert_eq!(fresh.invocations(), 0);
}

#[test]
fn bad_configuration_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let space = DecisionSpace::maize_reference();
    let s = script(dir.path(), "m.sh", "echo 1");
    let t = template(dir.path(), "{{planting_date}} {{not_a_variable}}");
    let cfg = ExternalAdapterConfig::new(t, vec!["sh".into(), s.display().to_string()], OutputRule::Regex("(\\d+)".into()));
    let ev = ExternalEvaluator::new(cfg.clone()).unwrap();
    assert!(ev.check_placeholders(&space).is_err());
    match ev.evaluate(&space.from_flat_index(0), &space, &scenario()).unwrap_err() {
        EvalError::Setup(msg) => assert!(msg.contains("not_a_variable")),
        other => panic!("{other:?}"),
    }
    assert_eq!(ev.invocations(), 0);

    let mut empty = cfg.clone();
    empty.command.clear();
    assert!(ExternalEvaluator::new(empty).is_err());
    let mut zero = cfg.clone();
    zero.timeout_seconds = 0.0;
    assert!(ExternalEvaluator::new(zero).is_err());
    let mut missing = cfg;
    missing.template = dir.path().join("nope.in");
    assert!(ExternalEvaluator::new(missing).is_err());

    let json = r#"{"template":"t.in","command":["m"],"output":"regex:(x)"}"#;
    let parsed: ExternalAdapterConfig = serde_json::from_str(json).unwrap();
    assert_eq!(parsed.timeout_seconds, 120.0);
    assert!(serde_json::from_str::<ExternalAdapterConfig>(r#"{"template":"t","command":["m"],"output":"regex:x"}"#).is_err());
}
