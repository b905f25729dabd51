use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nalgebra::Vector3;
use psi_cli::{Prediction, Selection, TrackSummary};
use psi_core::filterpipe::{DatasetStats, Manifest, TrackedEpisode};
use psi_core::geom::{Pose, PoseTrajectory};
use psi_core::grasp::{generate_anchors, CandidateGrasp};
use psi_core::imitate::{FeatureVector, PolicyModel};
use psi_core::io::{read_json, write_json};
use psi_core::taskeval::{TaskSpec, Verdict};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn psi(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_psi")).args(args).output().expect("run psi")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn empty_manifest_tracks_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("m.json");
    std::fs::write(&m, r#"{"episodes": []}"#).unwrap();
    let out = dir.path().join("out");
    let o = psi(&["track", "--manifest", s(&m), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let r: TrackSummary = read_json(out.join("track_report.json")).unwrap();
    assert!(r.episodes.is_empty());
}

#[test]
fn missing_frame_names_the_episode() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("m.json");
    std::fs::write(&m, r#"{"episodes": [{"episode_id": "ep_missing", "task": {"kind": "Stir", "region_center": [0.4, 0, 0], "table_height": 0}, "frames": ["nope.pcbin"]}]}"#).unwrap();
    let o = psi(&["track", "--manifest", s(&m), "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("ep_missing"), "{}", stderr(&o));
}

#[test]
fn malformed_manifest_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("m.json");
    std::fs::write(&m, "{ not json").unwrap();
    assert_eq!(psi(&["track", "--manifest", s(&m), "--out", s(dir.path())]).status.code(), Some(2));
}

#[test]
fn unknown_arm_and_dry_run() {
    let m = fixtures().join("manifest.json");
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let o = psi(&["filter", "--manifest", s(&m), "--arm", "kuka", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("kuka"));

    let o = psi(&["--json", "filter", "--manifest", s(&m), "--arm", "ur5e", "--out", s(&out), "--dry-run"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let plan: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let n = Manifest::load(&m).unwrap().episodes.len();
    assert_eq!(plan.as_array().unwrap().len(), n);
    assert!(!out.exists());
}

#[test]
fn all_discarded_is_a_task_failure() {
    let dir = tempfile::tempdir().unwrap();
    let u = Vector3::new(0.45, 0.0, 0.035);
    let sink: Vec<Pose> = (0..10).map(|i| Pose::from_translation(Vector3::new(0.0, 0.0, -0.05 * i as f64))).collect();
    let t = TrackedEpisode { episode_id: "sink".into(), u, trajectory: PoseTrajectory::from_poses("c", sink).unwrap(), report: None };
    write_json(dir.path().join("sink.json"), &t).unwrap();
    let m = dir.path().join("m.json");
    std::fs::write(&m, r#"{"episodes": [{"episode_id": "sink", "task": {"kind": "PickPlace", "table_height": 0}, "trajectory": "sink.json"}]}"#).unwrap();
    let o = psi(&["filter", "--manifest", s(&m), "--arm", "ur5e", "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    let stats: DatasetStats = read_json(dir.path().join("o/stats.json")).unwrap();
    assert_eq!((stats.total, stats.discarded), (1, 1));
}

fn model_file(dir: &Path, m: &PolicyModel) -> PathBuf {
    let p = dir.join("model.json");
    write_json(&p, m).unwrap();
    p
}

#[test]
fn untrained_model_cannot_predict() {
    let dir = tempfile::tempdir().unwrap();
    let model = model_file(dir.path(), &PolicyModel::untrained());
    let o = psi(&["predict", "--model", s(&model), "--features", s(&fixtures().join("features.json"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn select_with_one_candidate_echoes_it() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = PolicyModel::untrained();
    m.trained_stages = vec![psi_core::imitate::Stage::Trajectory, psi_core::imitate::Stage::Grasp];
    let model = model_file(dir.path(), &m);
    let f: FeatureVector = read_json(fixtures().join("features.json")).unwrap();
    let c = CandidateGrasp { pose: generate_anchors(&f.u, 0.0).anchors[5], provenance: "only".into() };
    let cands = dir.path().join("c.json");
    write_json(&cands, &vec![c.clone()]).unwrap();
    let o = psi(&["select", "--model", s(&model), "--features", s(&fixtures().join("features.json")), "--candidates", s(&cands)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let sel: Selection = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!((sel.index, sel.anchor), (0, 5));
    assert_eq!(sel.candidate, c);
}

#[test]
fn eval_verdicts_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let u = Vector3::new(0.45, 0.0, 0.035);
    let goal = Vector3::new(0.45, 0.1, 0.035);
    let task = dir.path().join("task.json");
    write_json(&task, &TaskSpec::pick_place(goal, 0.0)).unwrap();
    let write = |name: &str, end: Vector3<f64>| {
        let t = TrackedEpisode { episode_id: name.into(), u, trajectory: PoseTrajectory::from_poses("c", vec![Pose::identity(), Pose::from_translation(end)]).unwrap(), report: None };
        let p = dir.path().join(name);
        write_json(&p, &t).unwrap();
        p
    };
    let pass = write("pass.json", Vector3::new(0.0, 0.1, 0.0));
    let fail = write("fail.json", Vector3::new(0.0, 0.3, 0.0));
    let o = psi(&["--json", "eval", "--task", s(&task), "--trajectory", s(&pass)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: Verdict = serde_json::from_slice(&o.stdout).unwrap();
    assert!(v.success && v.checks.len() == 3);
    assert_eq!(psi(&["eval", "--task", s(&task), "--trajectory", s(&fail)]).status.code(), Some(1));
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"episode_id": "x", "u": [0, 0], "trajectory": []}"#).unwrap();
    let o = psi(&["eval", "--task", s(&task), "--trajectory", s(&bad)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn fixture_pipeline_matches_frozen_outputs() {
    let fx = fixtures();
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = psi(&["--config", s(&fx.join("config.json")), "filter", "--out", s(&d.join("filter"))]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let stats: DatasetStats = read_json(d.join("filter/stats.json")).unwrap();
    let frozen: DatasetStats = read_json(fx.join("expected/stats.json")).unwrap();
    assert_eq!(stats, frozen);

    let model = d.join("model.json");
    assert_eq!(psi(&["train", "--dataset", s(&d.join("filter/dataset.json")), "--out", s(&model)]).status.code(), Some(0));
    let feats = fx.join("features.json");
    let o = psi(&["predict", "--model", s(&model), "--features", s(&feats)]);
    let got: Vec<Prediction> = serde_json::from_slice(&o.stdout).unwrap();
    let want: Vec<Prediction> = read_json(fx.join("expected/prediction.json")).unwrap();
    assert_eq!(got.len(), want.len());
    for (g, w) in got.iter().zip(&want) {
        for (a, b) in g.waypoints.waypoints().iter().zip(w.waypoints.waypoints()) {
            assert!((a.trans - b.trans).amax() < 1e-9 && (a.rotvec - b.rotvec).amax() < 1e-9);
        }
        for (a, b) in g.scores.values().iter().zip(w.scores.values()) {
            assert!((a - b).abs() < 1e-9);
        }
    }
    let o = psi(&["--config", s(&fx.join("config.json")), "select", "--model", s(&model), "--features", s(&feats)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let sel: Selection = serde_json::from_slice(&o.stdout).unwrap();
    let frozen: Selection = read_json(fx.join("expected/selection.json")).unwrap();
    assert_eq!((sel.index, sel.anchor, &sel.candidate.provenance), (frozen.index, frozen.anchor, &frozen.candidate.provenance));
}
