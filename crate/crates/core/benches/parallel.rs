use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nalgebra::Vector3;

use psi_core::cloud::remove_outliers;
use psi_core::exec::{self, Strategy};
use psi_core::filterpipe::{filter_episode, PipelineParams};
use psi_core::geom::{Pose, PoseTrajectory};
use psi_core::grasp::generate_anchors;
use psi_core::posegraph::{build_graph, GraphParams};
use psi_core::registration::IcpParams;
use psi_core::simarm::builtin_arm;
use psi_core::synth;
use psi_core::taskeval::{TaskKind, TaskSpec};

fn strategies() -> Vec<(&'static str, Strategy)> {
    let mut s = vec![("sequential", Strategy::Sequential)];
    if Strategy::available() == Strategy::Parallel {
        s.push(("parallel", Strategy::Parallel));
    }
    s
}

fn bench_filter(c: &mut Criterion) {
    let arm = builtin_arm("ur5e").expect("built-in arm");
    let u = Vector3::new(0.45, 0.0, 0.035);
    let anchors = generate_anchors(&u, 0.0);
    let params = PipelineParams::default();
    let poses = synth::demo_motion(TaskKind::PickPlace, &u, &Vector3::new(0.0, 0.12, 0.0), 48);
    let traj = PoseTrajectory::from_poses("c", poses).unwrap();
    let task = TaskSpec::pick_place(u, 0.0);
    let mut g = c.benchmark_group("filter_episode");
    g.sample_size(10);
    for (name, s) in strategies() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| filter_episode("b", &traj, &u, &task, &anchors, &arm, &params, s)));
    }
    g.finish();
}

fn bench_graph(c: &mut Criterion) {
    let rest = Pose::from_translation(Vector3::new(0.45, 0.0, 0.0));
    let center = Vector3::new(0.45, 0.0, 0.03);
    let motion = synth::demo_motion(TaskKind::Stir, &center, &Vector3::zeros(), 70);
    let seq = synth::sequence_from_poses(&rest, &motion, 1000, None, 0.001, 3);
    let traj = PoseTrajectory::from_poses("c", motion.clone()).unwrap();
    let mut g = c.benchmark_group("build_graph");
    g.sample_size(10);
    for (name, s) in strategies() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| build_graph(&traj, &seq, &GraphParams::default(), &IcpParams::default(), s).unwrap()));
    }
    g.finish();
}

fn bench_outliers(c: &mut Criterion) {
    let clouds: Vec<_> = (0..16).map(|i| synth::object_surface(2000, i)).collect();
    let mut g = c.benchmark_group("remove_outliers_x16");
    for (name, s) in strategies() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| exec::map(s, &clouds, |c| remove_outliers(c, 30, 2.0))));
    }
    g.finish();
}

criterion_group!(benches, bench_filter, bench_graph, bench_outliers);
criterion_main!(benches);
