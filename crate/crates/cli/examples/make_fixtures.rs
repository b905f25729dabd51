//! Regenerates the synthetic fixture manifest under `fixtures/`.
//!
//! cargo run -p psi-cli --example make_fixtures -- fixtures

use std::path::PathBuf;

use nalgebra::Vector3;
use psi_core::cloud::save_pcbin;
use psi_core::filterpipe::{Camera, Manifest, ManifestEpisode, TrackedEpisode};
use psi_core::geom::{Pose, PoseTrajectory};
use psi_core::imitate::FeatureVector;
use psi_core::io::write_json;
use psi_core::synth;
use psi_core::taskeval::{TaskKind, TaskSpec};

const FRAMES: usize = 40;
const POINTS: usize = 800;

fn task(kind: TaskKind, u: Vector3<f64>) -> TaskSpec {
    match kind {
        // Goals are filled in from the demonstration.
        TaskKind::PickPlace => TaskSpec::pick_place(u, 0.0),
        TaskKind::Pour => TaskSpec::pour(u, 0.0),
        TaskKind::Stir => TaskSpec::stir(u, 0.0),
        TaskKind::Draw => TaskSpec::draw(u, 0.0),
    }
}

fn main() {
    let root = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "fixtures".into()));
    let mut episodes = Vec::new();

    // Object base center on the table; the tracked center sits a few cm up.
    let clouds = [
        ("cloud_pick", TaskKind::PickPlace, Vector3::new(0.45, 0.05, 0.0), Vector3::new(0.0, 0.12, 0.0)),
        ("cloud_pour", TaskKind::Pour, Vector3::new(0.50, -0.10, 0.0), Vector3::new(0.08, 0.10, 0.0)),
        ("cloud_stir", TaskKind::Stir, Vector3::new(0.40, 0.15, 0.0), Vector3::zeros()),
    ];
    for (i, (id, kind, base, target)) in clouds.into_iter().enumerate() {
        let rest = Pose::from_translation(base);
        let u = base + Vector3::new(0.0, 0.0, 0.03);
        let motion = synth::demo_motion(kind, &u, &target, FRAMES);
        let mut counts = vec![POINTS; FRAMES];
        // A sparse first frame exercises the reference-frame rule.
        if i == 0 {
            counts[0] = 300;
        }
        let seq = synth::sequence_from_poses(&rest, &motion, POINTS, Some(&counts), 0.001, 100 + i as u64);
        let mut frames = Vec::new();
        for (j, (_, c)) in seq.frames().iter().enumerate() {
            let rel = format!("frames/{id}/{j:03}.pcbin");
            save_pcbin(c, root.join(&rel)).expect("write frame");
            frames.push(rel);
        }
        episodes.push(ManifestEpisode { episode_id: id.into(), task: task(kind, u), frames, trajectory: None });
    }

    let demos = [
        ("demo_pick_a", TaskKind::PickPlace, Vector3::new(0.45, 0.00, 0.035), Vector3::new(0.0, 0.12, 0.0)),
        ("demo_pick_b", TaskKind::PickPlace, Vector3::new(0.50, -0.15, 0.035), Vector3::new(-0.08, 0.10, 0.0)),
        ("demo_pick_c", TaskKind::PickPlace, Vector3::new(0.38, 0.20, 0.035), Vector3::new(0.10, -0.05, 0.0)),
        ("demo_pour_a", TaskKind::Pour, Vector3::new(0.48, 0.05, 0.035), Vector3::new(0.05, 0.12, 0.0)),
        ("demo_pour_b", TaskKind::Pour, Vector3::new(0.42, -0.08, 0.035), Vector3::new(0.12, 0.0, 0.0)),
        ("demo_stir_a", TaskKind::Stir, Vector3::new(0.45, -0.05, 0.035), Vector3::zeros()),
        ("demo_draw_a", TaskKind::Draw, Vector3::new(0.50, 0.10, 0.035), Vector3::zeros()),
        ("demo_draw_b", TaskKind::Draw, Vector3::new(0.40, -0.12, 0.035), Vector3::zeros()),
    ];
    for (id, kind, u, target) in demos {
        let poses = synth::demo_motion(kind, &u, &target, 48);
        write_traj(&root, id, u, poses, kind, &mut episodes);
    }
    // Pushed into the table: no anchor can execute it.
    let u = Vector3::new(0.45, 0.10, 0.035);
    let sink = (0..24).map(|i| Pose::from_translation(Vector3::new(0.0, 0.0, -0.4 * i as f64 / 23.0))).collect();
    write_traj(&root, "demo_sink", u, sink, TaskKind::PickPlace, &mut episodes);

    let camera = Camera { fx: 600.0, fy: 600.0, cx: 320.0, cy: 240.0, pose: Pose::new(Vector3::new(std::f64::consts::PI, 0.0, 0.0), Vector3::new(0.45, 0.0, 1.0)) };
    let manifest = Manifest { camera: Some(camera), episodes, base_dir: PathBuf::new() };
    write_json(root.join("manifest.json"), &manifest).expect("write manifest");

    let query = FeatureVector::new(Vector3::new(0.46, 0.02, 0.035), camera.project(&Vector3::new(0.46, 0.14, 0.035)));
    write_json(root.join("features.json"), &query).expect("write features");
    write_json(root.join("task_pick.json"), &TaskSpec::pick_place(Vector3::new(0.45, 0.12, 0.035), 0.0)).expect("write task");
}

fn write_traj(root: &std::path::Path, id: &str, u: Vector3<f64>, poses: Vec<Pose>, kind: TaskKind, episodes: &mut Vec<ManifestEpisode>) {
    let t = TrackedEpisode { episode_id: id.into(), u, trajectory: PoseTrajectory::from_poses("c", poses).expect("trajectory"), report: None };
    let rel = format!("trajectories/{id}.traj.json");
    write_json(root.join(&rel), &t).expect("write trajectory");
    episodes.push(ManifestEpisode { episode_id: id.into(), task: task(kind, u), frames: vec![], trajectory: Some(rel) });
}
