use hydra_core::harness::{run_scenario, HarnessError, JobStatus, Scenario, Summary};
use std::path::PathBuf;

fn scenario(file: &str) -> Scenario {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(file);
    Scenario::load(&path).unwrap()
}

fn failed(out: &hydra_core::harness::RunOutput) -> Vec<String> {
    out.assertions.iter().filter(|a| !a.passed).map(|a| format!("{}: {}", a.check, a.detail)).collect()
}

#[test]
fn minimal_scenario_trains_and_passes_its_checks() {
    let out = run_scenario(&scenario("minimal.toml")).unwrap();
    assert!(out.passed(), "{:?}", failed(&out));
    let job = out.job("toy").unwrap();
    assert_eq!(job.status, JobStatus::Finished);
    assert!(job.losses.last().unwrap().1 < job.losses[0].1);
    assert!(out.violations.is_empty());
}

#[test]
fn flagship_chaos_elects_leaders_without_safety_violations() {
    let out = run_scenario(&scenario("flagship.toml")).unwrap();
    assert!(out.passed(), "{:?}", failed(&out));
    assert!(out.count("raft_leader") > 0);
    assert!(out.violations.is_empty(), "{:?}", out.violations);
    let job = out.job("scenes").unwrap();
    assert_eq!(job.lost.len(), 1, "one rank was killed mid-step");
    assert!(matches!(out.job("overdrawn").unwrap().status, JobStatus::Rejected(_)));
}

#[test]
fn same_seed_gives_identical_metric_streams() {
    let s = scenario("minimal.toml");
    let a = run_scenario(&s).unwrap().metrics_jsonl();
    let b = run_scenario(&s).unwrap().metrics_jsonl();
    assert_eq!(a, b);
    let mut other = s.clone();
    other.seed += 1;
    assert_ne!(a, run_scenario(&other).unwrap().metrics_jsonl());
}

#[test]
fn failing_assertion_fails_the_run() {
    let mut s = scenario("minimal.toml");
    s.asserts.push(toml::from_str("check = \"max_count\"\nmetric = \"step_committed\"\ncount = 3").unwrap());
    let out = run_scenario(&s).unwrap();
    assert!(!out.passed());
    assert_eq!(failed(&out).len(), 1);
}

#[test]
fn unresolved_references_are_listed_before_running() {
    let mut s = scenario("minimal.toml");
    s.jobs[0].dataset = "missing".into();
    s.jobs[0].coordinator = 4;
    match run_scenario(&s) {
        Err(HarnessError::Invalid(errors)) => {
            assert!(errors.len() >= 2, "{errors:?}");
            assert!(errors.iter().any(|e| e.contains("missing")), "{errors:?}");
        }
        other => panic!("expected validation errors, got {other:?}"),
    }
}

#[test]
fn report_tables_round_trip_through_jsonl() {
    let out = run_scenario(&scenario("minimal.toml")).unwrap();
    let dir = std::env::temp_dir().join(format!("hydra-report-{}", std::process::id()));
    out.write_dir(&dir).unwrap();
    let text = std::fs::read_to_string(dir.join("metrics.jsonl")).unwrap();
    let parsed = hydra_core::sim::MetricsSink::parse_jsonl(&text).unwrap();
    assert_eq!(Summary::from_records(&parsed), Summary::from_records(&out.metrics));
    let loss = std::fs::read_to_string(dir.join("loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 1 + out.job("toy").unwrap().losses.len());
    std::fs::remove_dir_all(dir).unwrap();
}
