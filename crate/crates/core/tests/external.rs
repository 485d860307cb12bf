use std::path::PathBuf;

use tailshift::{
    estimate_probability, run_ladder, run_to_precision, Error, LadderConfig, Model, ModelSpec, PrecisionConfig,
    RngStream, ShiftVector,
};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn external(name: &str, dim: usize, workers: usize) -> Model {
    Model::new(ModelSpec::external(fixture(name), Vec::new(), dim), workers).unwrap()
}

#[test]
fn external_matches_builtin_exactly() {
    let ext = external("first_coord.py", 2, 2);
    let builtin = Model::builtin(ModelSpec::linear(vec![1.0], vec![0.0])).unwrap();
    let rng = RngStream::new(21, 0);
    let cfg = LadderConfig::new(3.5);
    let prec = PrecisionConfig::default();
    let a = run_to_precision(&ext, &cfg, &prec, &rng).unwrap();
    let b = run_to_precision(&builtin, &cfg, &prec, &rng).unwrap();
    assert_eq!(a.report, b.report);
    assert_eq!(a.trace, b.trace);
}

#[test]
fn worker_count_does_not_change_results() {
    let rng = RngStream::new(5, 0);
    let cfg = LadderConfig::new(3.0);
    let one = run_ladder(&external("first_coord.py", 1, 1), &cfg, &rng).unwrap();
    let three = run_ladder(&external("first_coord.py", 1, 3), &cfg, &rng).unwrap();
    assert_eq!(one, three);
}

#[test]
fn crashing_simulator_reports_failed_points() {
    let m = external("crashes.py", 1, 1);
    let rng = RngStream::new(2, 0);
    let theta = ShiftVector(vec![2.5]);
    let pts: Vec<_> = rng
        .std_normal_batch(0, 200, 1)
        .into_iter()
        .map(|x| tailshift::Point(vec![x.0[0] + 2.5]))
        .collect();
    let first_bad = pts.iter().position(|p| p.0[0] > 2.5).unwrap();
    match m.evaluate_values(&pts) {
        Err(Error::Simulator { indices, .. }) => {
            assert_eq!(indices, (first_bad..200).collect::<Vec<_>>());
        }
        other => panic!("expected a simulator error, got {other:?}"),
    }
    // the dead worker is replaced on the next call
    let ok = m.evaluate_values(&pts[..first_bad]).unwrap();
    assert_eq!(ok.len(), first_bad);
    assert!(matches!(
        estimate_probability(&m, 3.0, &theta, 500, &rng),
        Err(Error::Simulator { .. })
    ));
}

#[test]
fn unreachable_threshold_stalls() {
    let m = external("clamped.py", 1, 1);
    match run_ladder(&m, &LadderConfig::new(2.0), &RngStream::new(1, 0)) {
        Err(Error::MaxLevelsExceeded { trace }) => {
            assert!(!trace.levels.is_empty());
            assert!(trace.levels.iter().all(|l| l.gamma <= 1.0));
        }
        other => panic!("expected a stall, got {other:?}"),
    }
}

#[test]
fn missing_program_is_a_simulator_error() {
    let m = Model::new(ModelSpec::external("/nonexistent/simulator", Vec::new(), 1), 1).unwrap();
    let pts = RngStream::new(1, 0).std_normal_batch(0, 4, 1);
    assert!(matches!(m.evaluate_values(&pts), Err(Error::Simulator { .. })));
}
