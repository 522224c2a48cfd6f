//! Library-level flow through files: simulate, save, reload, calibrate.

use trajcal::eval::evaluate;
use trajcal::io::{load_database, load_json, load_transform, save_database, save_json};
use trajcal::pipeline::{calibrate, update_continuous, CalibrationSession, PipelineConfig};
use trajcal::simulator::{diagonal_poses, make_pair, Layout, ScenarioConfig};

fn scene(seed: u64) -> ScenarioConfig {
    let (pose_p, pose_q) = diagonal_poses(75.0, 2.35);
    ScenarioConfig {
        layout: Layout::ThreeWay,
        pose_p,
        pose_q,
        seed,
        ..ScenarioConfig::default()
    }
}

#[test]
fn reloaded_databases_calibrate_identically() {
    let dir = tempfile::tempdir().unwrap();
    let pair = make_pair(&scene(3)).unwrap();
    save_database(&pair.db_p, dir.path().join("p.jsonl")).unwrap();
    save_database(&pair.db_q, dir.path().join("q.jsonl")).unwrap();
    save_json(&pair.truth, dir.path().join("truth.json")).unwrap();

    let db_p = load_database(dir.path().join("p.jsonl")).unwrap();
    let db_q = load_database(dir.path().join("q.jsonl")).unwrap();
    assert_eq!(db_p, pair.db_p);
    assert_eq!(db_q, pair.db_q);
    let truth = load_transform(dir.path().join("truth.json")).unwrap();
    assert_eq!(truth, pair.truth);

    let cfg = PipelineConfig::default();
    let a = calibrate(&pair.db_p, &pair.db_q, &cfg).unwrap();
    let b = calibrate(&db_p, &db_q, &cfg).unwrap();
    assert_eq!(a.transform, b.transform);
    assert!(b.converged);
    let m = evaluate(&b.transform, &truth, 5.0);
    assert!(m.success && m.rte_m < 0.05 && m.toe_s < 0.01, "{m:?}");
}

#[test]
fn fused_sessions_survive_a_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig::default();
    let sessions: Vec<CalibrationSession> = (10..12)
        .map(|seed| {
            let pair = make_pair(&scene(seed)).unwrap();
            calibrate(&pair.db_p, &pair.db_q, &cfg).unwrap()
        })
        .collect();
    let fused = update_continuous(&sessions[0], &sessions[1]).unwrap();
    let path = dir.path().join("fused.json");
    save_json(&fused, &path).unwrap();
    let back: CalibrationSession = load_json(&path).unwrap();
    assert_eq!(back, fused);
    assert_eq!(back.score, sessions[0].score.max(sessions[1].score));
}
