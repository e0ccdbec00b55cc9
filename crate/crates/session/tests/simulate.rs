use std::path::Path;
use std::sync::Arc;

use xtamer::config::SessionConfig;
use xtamer::report::{
    converged_interaction, parse_report, read_log, summarize, CHECKPOINT_FILE, CURVE_FILE, LOG_FILE, REPORT_FILE,
    SUMMARY_FILE,
};
use xtamer::simulate::run_simulation;
use xtamer_core::cnn::CnnModel;
use xtamer_core::expression::decode_action;
use xtamer_core::face::Emotion;
use xtamer_core::som::SomConfig;
use xtamer_core::user::UserProfile;

fn small_config(epochs: usize) -> SessionConfig {
    SessionConfig {
        seed: 3,
        calibration_samples: 3,
        interactions_per_epoch: 21,
        epochs,
        eval_per_class: 4,
        som: SomConfig {
            rows: 6,
            cols: 6,
            iterations: 200,
            ..SomConfig::default()
        },
        ..SessionConfig::default()
    }
}

fn cnn() -> Arc<CnnModel> {
    Arc::new(CnnModel::new_random(2))
}

fn profile() -> UserProfile {
    UserProfile::new(4, 0.8, 0.05, 6).unwrap()
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join(name)).unwrap()
}

#[test]
fn identical_runs_write_identical_files() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let sa = run_simulation(&small_config(2), cnn(), &profile(), a.path(), false, |_| {}).unwrap();
    let sb = run_simulation(&small_config(2), cnn(), &profile(), b.path(), false, |_| {}).unwrap();
    assert_eq!(sa, sb);
    for f in [LOG_FILE, REPORT_FILE, CURVE_FILE, SUMMARY_FILE, CHECKPOINT_FILE] {
        assert_eq!(read(a.path(), f), read(b.path(), f), "{f}");
    }
    let c = tempfile::tempdir().unwrap();
    let other = SessionConfig { seed: 4, ..small_config(2) };
    run_simulation(&other, cnn(), &profile(), c.path(), false, |_| {}).unwrap();
    assert_ne!(read(a.path(), LOG_FILE), read(c.path(), LOG_FILE));
}

#[test]
fn records_and_reports_agree() {
    let dir = tempfile::tempdir().unwrap();
    let mut seen = Vec::new();
    let summary = run_simulation(&small_config(3), cnn(), &profile(), dir.path(), false, |e| seen.push(e.clone())).unwrap();
    let records = read_log(&dir.path().join(LOG_FILE)).unwrap();
    assert_eq!(records.len(), 63);
    assert_eq!(summary.updates, 63);
    for (i, r) in records.iter().enumerate() {
        assert_eq!(r.index, i as u64);
        assert_eq!(r.timestamp, i as u64);
        assert_eq!(r.predicted.len(), 7);
        assert!((-2.0..=2.0).contains(&r.reward) && r.reward.fract() == 0.0);
        assert!(r.cost >= 0.0);
        assert_eq!(decode_action(&r.action.encode()).unwrap(), r.action);
        assert!(r.emotion.is_some() && r.mimic_emotion.is_some());
        let d = r.distance.unwrap();
        assert!((0.0..=1.0).contains(&d));
        let ideal = r.predicted.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(r.predicted[r.action.action_id().unwrap()], ideal);
    }
    let recomputed = summarize(&records, 21).unwrap();
    assert_eq!(recomputed, seen);
    assert_eq!(recomputed, summary.epochs);
    for (e, chunk) in recomputed.iter().zip(records.chunks(21)) {
        let mean = chunk.iter().map(|r| r.cost).sum::<f64>() / 21.0;
        assert!((mean - e.avg_cost).abs() < 1e-12);
        let mut counts = [0; Emotion::COUNT];
        for r in chunk {
            counts[r.emotion.unwrap().code()] += 1;
        }
        assert_eq!(counts, [3; 7]);
    }
    let rows = parse_report(&String::from_utf8(read(dir.path(), REPORT_FILE)).unwrap()).unwrap();
    assert_eq!(rows.len(), 3);
    for (row, e) in rows.iter().zip(&recomputed) {
        assert_eq!(row.0, e.epoch);
        assert_eq!(row.1, e.avg_cost);
        assert_eq!(row.2, e.accuracy);
    }
    let curve = String::from_utf8(read(dir.path(), CURVE_FILE)).unwrap();
    assert_eq!(curve.lines().filter(|l| !l.starts_with('#')).count(), 3);
    assert_eq!(summary.convergence.interaction, converged_interaction(&records, 21, 0.85));
    assert_eq!(summary.evaluation.correct.len(), 7);
    assert_eq!(summary.evaluation.per_class, 4);
}

#[test]
fn resume_matches_an_uninterrupted_run() {
    let full = tempfile::tempdir().unwrap();
    run_simulation(&small_config(4), cnn(), &profile(), full.path(), false, |_| {}).unwrap();

    let split = tempfile::tempdir().unwrap();
    run_simulation(&small_config(2), cnn(), &profile(), split.path(), false, |_| {}).unwrap();
    // A crash mid-epoch leaves extra log lines past the checkpoint.
    let log = split.path().join(LOG_FILE);
    let mut text = std::fs::read_to_string(&log).unwrap();
    text.push_str("{\"partial\": true}\n");
    std::fs::write(&log, text).unwrap();
    run_simulation(&small_config(4), cnn(), &profile(), split.path(), true, |_| {}).unwrap();

    for f in [LOG_FILE, REPORT_FILE, CURVE_FILE, CHECKPOINT_FILE, SUMMARY_FILE] {
        assert_eq!(read(full.path(), f), read(split.path(), f), "{f}");
    }
}

#[test]
fn resume_rejects_a_different_setup() {
    let dir = tempfile::tempdir().unwrap();
    run_simulation(&small_config(1), cnn(), &profile(), dir.path(), false, |_| {}).unwrap();
    let changed = SessionConfig { seed: 99, ..small_config(2) };
    assert!(run_simulation(&changed, cnn(), &profile(), dir.path(), true, |_| {}).is_err());
}

#[test]
fn direct_mode_runs_without_mimicry() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = small_config(1);
    config.reward.mode = xtamer_core::reward::RewardMode::Direct;
    run_simulation(&config, cnn(), &profile(), dir.path(), false, |_| {}).unwrap();
    for r in read_log(&dir.path().join(LOG_FILE)).unwrap() {
        assert!(r.distance.is_none());
        assert_eq!(r.reward, if r.correct() == Some(true) { 2.0 } else { -2.0 });
    }
}

#[test]
fn one_calibration_sample_per_class_is_enough() {
    let dir = tempfile::tempdir().unwrap();
    let config = SessionConfig { calibration_samples: 1, ..small_config(1) };
    let s = run_simulation(&config, cnn(), &profile(), dir.path(), false, |_| {}).unwrap();
    assert_eq!(s.calibration.unwrap().samples, 7);
}
