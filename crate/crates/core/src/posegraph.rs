//! Pose-graph refinement of tracked trajectories.
//!
//! Nodes are absolute poses, edges are relative measurements
//! `measured ≈ node_i⁻¹ ∘ node_j`. The robust objective
//!
//! ```text
//! Σ_valid ρ_huber( e_ijᵀ Ω_ij e_ij ),   e_ij = log(measured⁻¹ ∘ node_i⁻¹ ∘ node_j)
//! ```
//!
//! is minimized with Levenberg-Marquardt over left-multiplicative tangent
//! perturbations `node ← exp(δ) ∘ node`, holding node 0 fixed.

use nalgebra::{DMatrix, DVector, Matrix6, Vector6};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::cloud::{FrameSequence, PointCloud};
use crate::exec::{self, Strategy};
use crate::geom::{compose, se3_exp, se3_log, Pose, PoseTrajectory, TrajectoryEntry};
use crate::registration::{icp_register, IcpParams};

/// Stride edges with registration fitness below this are marked invalid.
pub const MIN_EDGE_FITNESS: f64 = 0.3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("node {0} is not connected to node 0 through valid edges")]
    NotConnected(usize),
    #[error("trajectory and sequence frame indices differ")]
    Misaligned,
    #[error("edge ({0}, {1}) is out of range")]
    BadEdge(usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GraphParams {
    pub strides: Vec<usize>,
    pub huber_delta: f64,
    pub max_iters: usize,
    pub lm_lambda0: f64,
}

impl Default for GraphParams {
    fn default() -> Self {
        Self { strides: vec![32, 64], huber_delta: 0.1, max_iters: 100, lm_lambda0: 1e-4 }
    }
}

fn ser_mat6<S: Serializer>(m: &Matrix6<f64>, s: S) -> Result<S::Ok, S::Error> {
    let rows: Vec<[f64; 6]> = (0..6).map(|r| std::array::from_fn(|c| m[(r, c)])).collect();
    rows.serialize(s)
}

fn de_mat6<'de, D: Deserializer<'de>>(d: D) -> Result<Matrix6<f64>, D::Error> {
    let rows = <[[f64; 6]; 6]>::deserialize(d)?;
    Ok(Matrix6::from_fn(|r, c| rows[r][c]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub i: usize,
    pub j: usize,
    /// Pose of node j expressed in node i.
    pub measured: Pose,
    #[serde(serialize_with = "ser_mat6", deserialize_with = "de_mat6")]
    pub information: Matrix6<f64>,
    pub valid: bool,
    pub fitness: f64,
}

impl Edge {
    pub fn new(i: usize, j: usize, measured: Pose, weight: f64) -> Self {
        Self { i, j, measured, information: Matrix6::identity() * weight, valid: true, fitness: weight }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseGraph {
    pub frame_id: String,
    /// Frame index of each node.
    pub indices: Vec<usize>,
    pub nodes: Vec<Pose>,
    pub edges: Vec<Edge>,
    /// Nodes hold inverted object poses (see [`build_graph`]); the optimized
    /// trajectory is inverted back.
    #[serde(default)]
    pub inverted: bool,
}

impl PoseGraph {
    /// Plain graph over `nodes` with consecutive indices.
    pub fn new(frame_id: impl Into<String>, nodes: Vec<Pose>, edges: Vec<Edge>) -> Result<Self, GraphError> {
        let n = nodes.len();
        if let Some(e) = edges.iter().find(|e| e.i >= e.j || e.j >= n) {
            return Err(GraphError::BadEdge(e.i, e.j));
        }
        Ok(Self { frame_id: frame_id.into(), indices: (0..n).collect(), nodes, edges, inverted: false })
    }

    pub fn count_stride(&self, stride: usize) -> usize {
        self.edges.iter().filter(|e| e.j - e.i == stride).count()
    }
}

/// Graph for a tracked sequence.
///
/// Nodes are the inverses of the tracked object poses, i.e. the camera seen
/// from the object's reference placement. In that form a pairwise
/// registration of frame `i` onto frame `j`, `D_ij`, gives the edge measurement
/// `D_ij⁻¹` without reference to any absolute estimate.
///
/// Sequential edges come from the tracked deltas with unit information. Each
/// stride `s` adds an edge `(i, i + s)` registered from scratch with the
/// tracked relative motion as initializer, weighted by its fitness and
/// marked invalid below [`MIN_EDGE_FITNESS`] or on registration failure.
pub fn build_graph(
    traj: &PoseTrajectory,
    seq: &FrameSequence,
    params: &GraphParams,
    icp: &IcpParams,
    strategy: Strategy,
) -> Result<PoseGraph, GraphError> {
    if traj.len() != seq.len() || traj.indices().zip(seq.frames()).any(|(a, (b, _))| a != *b) {
        return Err(GraphError::Misaligned);
    }
    let n = traj.len();
    let poses: Vec<Pose> = traj.poses().copied().collect();
    let nodes: Vec<Pose> = poses.iter().map(Pose::inverse).collect();

    let mut edges: Vec<Edge> = (0..n.saturating_sub(1))
        .map(|k| Edge::new(k, k + 1, compose(&nodes[k].inverse(), &nodes[k + 1]), 1.0))
        .collect();

    let pairs: Vec<(usize, usize)> = params
        .strides
        .iter()
        .flat_map(|&s| (0..n).filter(move |k| s > 0 && k + s < n).map(move |k| (k, k + s)))
        .collect();
    let clouds: Vec<&PointCloud> = seq.frames().iter().map(|(_, c)| c).collect();

    let stride_edges = exec::map(strategy, &pairs, |&(i, j)| {
        let init = compose(&poses[j], &poses[i].inverse());
        match icp_register(clouds[i], clouds[j], init, icp) {
            Ok(reg) => {
                let mut e = Edge::new(i, j, reg.pose.inverse(), reg.fitness);
                e.valid = reg.fitness >= MIN_EDGE_FITNESS;
                e
            }
            Err(err) => {
                log::debug!("edge ({i}, {j}) invalid: {err}");
                let mut e = Edge::new(i, j, compose(&nodes[i].inverse(), &nodes[j]), 0.0);
                e.valid = false;
                e
            }
        }
    });
    edges.extend(stride_edges);

    Ok(PoseGraph { frame_id: traj.frame_id.clone(), indices: traj.indices().collect(), nodes, edges, inverted: true })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizeStatus {
    Converged,
    MaxIterations,
    /// No step reduced the cost; the input poses are returned.
    Diverged,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimized {
    pub trajectory: PoseTrajectory,
    pub nodes: Vec<Pose>,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    pub status: OptimizeStatus,
}

pub fn edge_residual(nodes: &[Pose], e: &Edge) -> Vector6<f64> {
    let rel = compose(&nodes[e.i].inverse(), &nodes[e.j]);
    se3_log(&compose(&e.measured.inverse(), &rel))
}

fn huber(s: f64, delta: f64) -> (f64, f64) {
    // Returns (rho(s), rho'(s)) for squared residual s.
    if s <= delta * delta {
        (s, 1.0)
    } else {
        let r = s.sqrt();
        (2.0 * delta * r - delta * delta, delta / r)
    }
}

/// Total robust cost over valid edges.
pub fn robust_cost(nodes: &[Pose], edges: &[Edge], delta: f64) -> f64 {
    edges
        .iter()
        .filter(|e| e.valid)
        .map(|e| {
            let r = edge_residual(nodes, e);
            huber((r.transpose() * e.information * r)[0], delta).0
        })
        .sum()
}

fn check_connected(n: usize, edges: &[Edge]) -> Result<(), GraphError> {
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for e in edges.iter().filter(|e| e.valid) {
        let (a, b) = (find(&mut parent, e.i), find(&mut parent, e.j));
        parent[a.max(b)] = a.min(b);
    }
    match (1..n).find(|&k| find(&mut parent, k) != find(&mut parent, 0)) {
        Some(k) => Err(GraphError::NotConnected(k)),
        None => Ok(()),
    }
}

const JAC_STEP: f64 = 1e-7;

/// Central-difference Jacobians of one edge residual w.r.t. left
/// perturbations of node i and node j.
fn edge_jacobians(nodes: &[Pose], e: &Edge) -> (Matrix6<f64>, Matrix6<f64>) {
    let residual = |ni: &Pose, nj: &Pose| se3_log(&compose(&e.measured.inverse(), &compose(&ni.inverse(), nj)));
    let mut ji = Matrix6::zeros();
    let mut jj = Matrix6::zeros();
    for k in 0..6 {
        let mut d = Vector6::zeros();
        d[k] = JAC_STEP;
        let (plus, minus) = (se3_exp(&d), se3_exp(&-d));
        let ci = (residual(&compose(&plus, &nodes[e.i]), &nodes[e.j]) - residual(&compose(&minus, &nodes[e.i]), &nodes[e.j])) / (2.0 * JAC_STEP);
        let cj = (residual(&nodes[e.i], &compose(&plus, &nodes[e.j])) - residual(&nodes[e.i], &compose(&minus, &nodes[e.j]))) / (2.0 * JAC_STEP);
        ji.set_column(k, &ci);
        jj.set_column(k, &cj);
    }
    (ji, jj)
}

fn normal_equations(nodes: &[Pose], edges: &[Edge], delta: f64) -> (DMatrix<f64>, DVector<f64>) {
    let dim = 6 * (nodes.len() - 1);
    let mut h = DMatrix::zeros(dim, dim);
    let mut b = DVector::zeros(dim);
    for e in edges.iter().filter(|e| e.valid) {
        let r = edge_residual(nodes, e);
        let w = huber((r.transpose() * e.information * r)[0], delta).1;
        let omega = e.information * w;
        let (ji, jj) = edge_jacobians(nodes, e);
        let blocks = [(e.i, ji), (e.j, jj)];
        for (a, ja) in &blocks {
            if *a == 0 {
                continue;
            }
            let oa = 6 * (a - 1);
            let g = ja.transpose() * omega * r;
            for k in 0..6 {
                b[oa + k] += g[k];
            }
            for (c, jc) in &blocks {
                if *c == 0 {
                    continue;
                }
                let oc = 6 * (c - 1);
                let blk = ja.transpose() * omega * jc;
                let mut view = h.view_mut((oa, oc), (6, 6));
                view += blk;
            }
        }
    }
    (h, b)
}

/// Levenberg-Marquardt refinement with node 0 held fixed.
///
/// The damping starts at `lm_lambda0` and is multiplied by 10 after a
/// rejected step and by 0.5 after an accepted one. Only steps that lower the
/// robust cost are accepted, so the final cost never exceeds the initial one.
pub fn optimize(graph: &PoseGraph, params: &GraphParams) -> Result<Optimized, GraphError> {
    let n = graph.nodes.len();
    if let Some(e) = graph.edges.iter().find(|e| e.i >= e.j || e.j >= n) {
        return Err(GraphError::BadEdge(e.i, e.j));
    }
    check_connected(n, &graph.edges)?;

    let delta = params.huber_delta;
    let mut nodes = graph.nodes.clone();
    let initial_cost = robust_cost(&nodes, &graph.edges, delta);
    let mut cost = initial_cost;
    let mut lambda = params.lm_lambda0;
    let mut accepted = 0usize;
    let mut iterations = 0usize;
    let mut status = OptimizeStatus::MaxIterations;

    if n < 2 || cost == 0.0 {
        status = OptimizeStatus::Converged;
    }

    'outer: while status == OptimizeStatus::MaxIterations && iterations < params.max_iters {
        let (h, b) = normal_equations(&nodes, &graph.edges, delta);
        if b.amax() < 1e-14 {
            status = OptimizeStatus::Converged;
            break;
        }
        loop {
            iterations += 1;
            let mut a = h.clone();
            for k in 0..a.nrows() {
                a[(k, k)] += lambda * h[(k, k)].max(1e-9);
            }
            let step = a.cholesky().map(|c| -c.solve(&b));
            if let Some(step) = step {
                let trial: Vec<Pose> = nodes
                    .iter()
                    .enumerate()
                    .map(|(k, p)| {
                        if k == 0 {
                            *p
                        } else {
                            let d: Vector6<f64> = step.fixed_rows::<6>(6 * (k - 1)).into_owned();
                            compose(&se3_exp(&d), p)
                        }
                    })
                    .collect();
                let trial_cost = robust_cost(&trial, &graph.edges, delta);
                if trial_cost < cost {
                    let gain = cost - trial_cost;
                    nodes = trial;
                    cost = trial_cost;
                    lambda = (lambda * 0.5).max(1e-12);
                    accepted += 1;
                    if gain <= 1e-15 * cost.max(1e-300) || step.amax() < 1e-12 {
                        status = OptimizeStatus::Converged;
                    }
                    break;
                }
                if step.amax() < 1e-12 {
                    status = OptimizeStatus::Converged;
                    break 'outer;
                }
            }
            lambda *= 10.0;
            if lambda > 1e12 {
                status = OptimizeStatus::Converged;
                break 'outer;
            }
            if iterations >= params.max_iters {
                break 'outer;
            }
        }
    }

    if accepted == 0 && status != OptimizeStatus::Converged {
        log::warn!("pose graph optimization made no progress; returning input");
        status = OptimizeStatus::Diverged;
        nodes = graph.nodes.clone();
        cost = initial_cost;
    }

    let poses: Vec<Pose> = if graph.inverted { nodes.iter().map(Pose::inverse).collect() } else { nodes.clone() };
    let entries = graph.indices.iter().zip(poses).map(|(&index, pose)| TrajectoryEntry { index, pose }).collect();
    let trajectory = PoseTrajectory::new(graph.frame_id.clone(), entries).expect("graph indices are increasing");
    Ok(Optimized { trajectory, nodes, initial_cost, final_cost: cost, iterations, status })
}

/// Diagnostics dump: graph plus per-edge residual norms.
#[derive(Debug, Clone, Serialize)]
pub struct GraphDump<'a> {
    pub graph: &'a PoseGraph,
    pub residual_norms: Vec<f64>,
    pub cost: f64,
}

pub fn dump<'a>(graph: &'a PoseGraph, params: &GraphParams) -> GraphDump<'a> {
    GraphDump {
        graph,
        residual_norms: graph.edges.iter().map(|e| edge_residual(&graph.nodes, e).norm()).collect(),
        cost: robust_cost(&graph.nodes, &graph.edges, params.huber_delta),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::rotation_distance;
    use crate::synth;
    use nalgebra::Vector3;
    use rand_distr::{Distribution, Normal};

    fn chain(n: usize) -> Vec<Pose> {
        (0..n)
            .map(|k| {
                let t = k as f64;
                Pose::new(Vector3::new(0.01 * t, -0.005 * t, 0.02 * t), Vector3::new(0.003 * t, 0.001 * t, -0.002 * t))
            })
            .collect()
    }

    fn exact_edges(nodes: &[Pose], strides: &[usize]) -> Vec<Edge> {
        let mut edges = Vec::new();
        for s in std::iter::once(1).chain(strides.iter().copied()) {
            for i in 0..nodes.len() {
                if i + s < nodes.len() {
                    edges.push(Edge::new(i, i + s, compose(&nodes[i].inverse(), &nodes[i + s]), 1.0));
                }
            }
        }
        edges
    }

    #[test]
    fn consistent_graph_is_unchanged() {
        let nodes = chain(20);
        let g = PoseGraph::new("c", nodes.clone(), exact_edges(&nodes, &[5])).unwrap();
        let out = optimize(&g, &GraphParams::default()).unwrap();
        for (a, b) in out.nodes.iter().zip(&nodes) {
            assert!((a.rotvec - b.rotvec).norm() < 1e-9 && (a.trans - b.trans).norm() < 1e-9);
        }
        assert_eq!(out.status, OptimizeStatus::Converged);
    }

    #[test]
    fn single_edge_sets_node_to_measurement() {
        let m = Pose::new(Vector3::new(0.1, 0.2, -0.3), Vector3::new(0.5, 0.0, 0.1));
        let g = PoseGraph::new("c", vec![Pose::identity(); 2], vec![Edge::new(0, 1, m, 1.0)]).unwrap();
        let out = optimize(&g, &GraphParams::default()).unwrap();
        assert_eq!(out.nodes[0], Pose::identity());
        assert!((out.nodes[1].rotvec - m.rotvec).norm() < 1e-9);
        assert!((out.nodes[1].trans - m.trans).norm() < 1e-9);
    }

    #[test]
    fn disconnected_graph_rejected() {
        let mut e = Edge::new(1, 2, Pose::identity(), 1.0);
        e.valid = false;
        let g = PoseGraph::new("c", vec![Pose::identity(); 3], vec![Edge::new(0, 1, Pose::identity(), 1.0), e]).unwrap();
        assert_eq!(optimize(&g, &GraphParams::default()).unwrap_err(), GraphError::NotConnected(2));
    }

    fn noisy_chain(n: usize, sigma: f64, seed: u64) -> (Vec<Pose>, PoseGraph) {
        let truth = chain(n);
        let mut rng = synth::rng(seed);
        let nd = Normal::new(0.0, sigma).unwrap();
        let mut edges = Vec::new();
        let mut init = vec![truth[0]];
        for i in 0..n - 1 {
            let exact = compose(&truth[i].inverse(), &truth[i + 1]);
            let noise = Pose::from_rotvec(Vector3::new(nd.sample(&mut rng), nd.sample(&mut rng), nd.sample(&mut rng)));
            let m = compose(&noise, &exact);
            init.push(compose(&init[i], &m));
            edges.push(Edge::new(i, i + 1, m, 1.0));
        }
        for s in [32, 64] {
            for i in 0..n {
                if i + s < n {
                    edges.push(Edge::new(i, i + s, compose(&truth[i].inverse(), &truth[i + s]), 1.0));
                }
            }
        }
        (truth, PoseGraph::new("c", init, edges).unwrap())
    }

    #[test]
    fn loop_edges_reduce_drift() {
        let (truth, g) = noisy_chain(65, 0.01, 7);
        let params = GraphParams::default();
        let out = optimize(&g, &params).unwrap();
        let err = |p: &Pose| rotation_distance(p, &truth[64]) + (p.trans - truth[64].trans).norm();
        assert!(err(&out.nodes[64]) <= 0.5 * err(&g.nodes[64]));
        assert!(out.final_cost <= out.initial_cost);
    }

    #[test]
    fn left_multiplication_equivariance() {
        let (_, g) = noisy_chain(40, 0.01, 9);
        let params = GraphParams { strides: vec![32], ..GraphParams::default() };
        let out = optimize(&g, &params).unwrap();
        let t = Pose::new(Vector3::new(0.4, -0.1, 0.9), Vector3::new(1.0, -2.0, 0.5));
        let mut moved = g.clone();
        moved.nodes = g.nodes.iter().map(|p| compose(&t, p)).collect();
        let out2 = optimize(&moved, &params).unwrap();
        for (a, b) in out.nodes.iter().zip(&out2.nodes) {
            let expect = compose(&t, a);
            assert!(rotation_distance(&expect, b) < 1e-6 && (expect.trans - b.trans).norm() < 1e-6);
        }
    }

    #[test]
    fn build_graph_edge_counts() {
        let rest = Pose::identity();
        let motions: Vec<Pose> = (0..10).map(|k| Pose::from_translation(Vector3::new(0.002 * k as f64, 0.0, 0.0))).collect();
        let seq = synth::sequence_from_poses(&rest, &motions, 300, None, 0.0, 1);
        let traj = PoseTrajectory::from_poses("c", motions.clone()).unwrap();
        let g = build_graph(&traj, &seq, &GraphParams::default(), &IcpParams::default(), Strategy::available()).unwrap();
        assert_eq!(g.edges.len(), 9);

        let motions: Vec<Pose> = (0..65).map(|k| Pose::from_translation(Vector3::new(0.0005 * k as f64, 0.0, 0.0))).collect();
        let seq = synth::sequence_from_poses(&rest, &motions, 200, None, 0.0, 2);
        let traj = PoseTrajectory::from_poses("c", motions).unwrap();
        let g = build_graph(&traj, &seq, &GraphParams::default(), &IcpParams::default(), Strategy::available()).unwrap();
        assert_eq!((g.count_stride(1), g.count_stride(32), g.count_stride(64)), (64, 33, 1));
    }

    #[test]
    fn failed_edge_is_invalid_but_graph_builds() {
        let rest = Pose::identity();
        let motions = vec![Pose::identity(), Pose::identity(), Pose::from_translation(Vector3::new(1.0, 0.0, 0.0))];
        let seq = synth::sequence_from_poses(&rest, &motions, 300, None, 0.0, 3);
        // The tracked trajectory (wrongly) says the object never moved.
        let traj = PoseTrajectory::from_poses("c", vec![Pose::identity(); 3]).unwrap();
        let params = GraphParams { strides: vec![2], ..GraphParams::default() };
        let g = build_graph(&traj, &seq, &params, &IcpParams::default(), Strategy::Sequential).unwrap();
        let e = g.edges.iter().find(|e| e.i == 0 && e.j == 2).unwrap();
        assert!(!e.valid);
    }

    #[test]
    fn build_graph_rejects_misaligned_input() {
        let seq = synth::sequence_from_poses(&Pose::identity(), &[Pose::identity(); 3], 50, None, 0.0, 4);
        let traj = PoseTrajectory::from_poses("c", vec![Pose::identity(); 2]).unwrap();
        assert_eq!(
            build_graph(&traj, &seq, &GraphParams::default(), &IcpParams::default(), Strategy::Sequential).unwrap_err(),
            GraphError::Misaligned
        );
    }
}
