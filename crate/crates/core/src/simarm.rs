//! Kinematic serial-arm simulator.
//!
//! Arms are DH chains (standard or modified convention) with capsule link
//! geometry. Execution teleports the arm to the grasp, rigidly attaches the
//! object and tracks the commanded end-effector waypoints with damped
//! least-squares IK, checking limits and table collision on every sub-step.

use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{compose, grasp_to_ee_trajectory, interpolate, matrix_to_rotvec, Pose, PoseTrajectory, TrajectoryEntry};
use crate::io::{self, IoError};

/// Slack allowed on joint limits when validating a configuration.
pub const LIMIT_SLACK: f64 = 1e-9;
pub const MAX_SUBSTEP_TRANS: f64 = 0.02;
pub const MAX_SUBSTEP_ROT: f64 = 0.05;
/// A joint moving more than this between sub-steps means the IK jumped branch.
pub const MAX_JOINT_JUMP: f64 = 1.0;

#[derive(Debug, Error)]
pub enum ArmError {
    #[error("joint {joint} = {value} outside [{lo}, {hi}]")]
    OutOfLimits { joint: usize, value: f64, lo: f64, hi: f64 },
    #[error("expected {expected} joint values, got {found}")]
    WrongDof { expected: usize, found: usize },
    #[error("invalid arm config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] IoError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DhConvention {
    /// `Rz(θ) Tz(d) Tx(a) Rx(α)`; joint i turns about z of frame i-1.
    Standard,
    /// `Rx(α) Tx(a) Rz(θ) Tz(d)`; joint i turns about z of frame i.
    Modified,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DhRow {
    pub a: f64,
    pub alpha: f64,
    pub d: f64,
    pub theta_offset: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Capsule {
    /// Link frame the segment is expressed in; 0 is the base frame.
    pub joint_index: usize,
    #[serde(with = "crate::serde_vec3")]
    pub p0: Vector3<f64>,
    #[serde(with = "crate::serde_vec3")]
    pub p1: Vector3<f64>,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfTest {
    pub q: Vec<f64>,
    pub ee: Pose,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmModel {
    pub name: String,
    pub convention: DhConvention,
    pub dh_rows: Vec<DhRow>,
    pub joint_limits: Vec<[f64; 2]>,
    pub link_capsules: Vec<Capsule>,
    pub base_pose: Pose,
    /// Flange to tool-center transform.
    pub tool: Pose,
    pub home_q: Vec<f64>,
    #[serde(default)]
    pub self_test: Vec<SelfTest>,
}

impl ArmModel {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ArmError> {
        let arm: ArmModel = io::read_json(path)?;
        arm.validate()?;
        Ok(arm)
    }

    pub fn dof(&self) -> usize {
        self.dh_rows.len()
    }

    pub fn validate(&self) -> Result<(), ArmError> {
        let n = self.dof();
        if !(6..=8).contains(&n) {
            return Err(ArmError::Invalid(format!("{n} joints, expected 6 to 8")));
        }
        if self.joint_limits.len() != n {
            return Err(ArmError::Invalid(format!("{} joint limits for {n} joints", self.joint_limits.len())));
        }
        if let Some(j) = self.joint_limits.iter().position(|[lo, hi]| !(lo < hi)) {
            return Err(ArmError::Invalid(format!("joint {j} has lo >= hi")));
        }
        if let Some(c) = self.link_capsules.iter().find(|c| !(c.radius > 0.0) || c.joint_index > n) {
            return Err(ArmError::Invalid(format!("bad capsule on link {}", c.joint_index)));
        }
        self.check_limits(&self.home_q)
    }

    pub fn check_limits(&self, q: &[f64]) -> Result<(), ArmError> {
        if q.len() != self.dof() {
            return Err(ArmError::WrongDof { expected: self.dof(), found: q.len() });
        }
        for (joint, (&value, &[lo, hi])) in q.iter().zip(&self.joint_limits).enumerate() {
            if value < lo - LIMIT_SLACK || value > hi + LIMIT_SLACK || !value.is_finite() {
                return Err(ArmError::OutOfLimits { joint, value, lo, hi });
            }
        }
        Ok(())
    }

    fn clamp(&self, q: &mut [f64]) {
        for (v, [lo, hi]) in q.iter_mut().zip(&self.joint_limits) {
            *v = v.clamp(*lo, *hi);
        }
    }

    fn at_limit(&self, q: &[f64]) -> bool {
        q.iter().zip(&self.joint_limits).any(|(v, [lo, hi])| (v - lo).abs() <= LIMIT_SLACK || (v - hi).abs() <= LIMIT_SLACK)
    }
}

const BUILTIN_ARMS: [(&str, &str); 4] = [
    ("xarm7", include_str!("../../../configs/arms/xarm7.json")),
    ("panda", include_str!("../../../configs/arms/panda.json")),
    ("gen3", include_str!("../../../configs/arms/gen3.json")),
    ("ur5e", include_str!("../../../configs/arms/ur5e.json")),
];

pub fn builtin_arm_names() -> impl Iterator<Item = &'static str> {
    BUILTIN_ARMS.iter().map(|(n, _)| *n)
}

/// One of the shipped arm configurations by name.
pub fn builtin_arm(name: &str) -> Option<ArmModel> {
    let (_, text) = BUILTIN_ARMS.iter().find(|(n, _)| *n == name)?;
    let arm: ArmModel = serde_json::from_str(text).expect("shipped arm config parses");
    arm.validate().expect("shipped arm config is valid");
    Some(arm)
}

/// Rigid frame kept as a rotation matrix during chain products.
#[derive(Debug, Clone, Copy)]
struct Frame {
    r: Matrix3<f64>,
    t: Vector3<f64>,
}

impl Frame {
    fn from_pose(p: &Pose) -> Self {
        Self { r: p.rotation(), t: p.trans }
    }

    fn mul(&self, o: &Frame) -> Frame {
        Frame { r: self.r * o.r, t: self.r * o.t + self.t }
    }

    fn to_pose(self) -> Pose {
        // Chain products of exact rotations stay orthonormal to ~1e-15.
        Pose::new(matrix_to_rotvec(&self.r).expect("orthonormal chain product"), self.t)
    }

    fn point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.r * p + self.t
    }
}

fn rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

fn rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

fn dh_frame(conv: DhConvention, row: &DhRow, q: f64) -> Frame {
    let th = q + row.theta_offset;
    match conv {
        DhConvention::Standard => {
            let rz = rot_z(th);
            Frame { r: rz * rot_x(row.alpha), t: rz * Vector3::new(row.a, 0.0, 0.0) + Vector3::new(0.0, 0.0, row.d) }
        }
        DhConvention::Modified => {
            let rx = rot_x(row.alpha);
            Frame { r: rx * rot_z(th), t: Vector3::new(row.a, 0.0, 0.0) + rx * Vector3::new(0.0, 0.0, row.d) }
        }
    }
}

struct Chain {
    /// Base frame followed by one frame per joint.
    links: Vec<Frame>,
    ee: Frame,
}

fn chain(arm: &ArmModel, q: &[f64]) -> Chain {
    let mut t = Frame::from_pose(&arm.base_pose);
    let mut links = Vec::with_capacity(q.len() + 1);
    links.push(t);
    for (row, &qi) in arm.dh_rows.iter().zip(q) {
        t = t.mul(&dh_frame(arm.convention, row, qi));
        links.push(t);
    }
    let ee = t.mul(&Frame::from_pose(&arm.tool));
    Chain { links, ee }
}

/// End-effector pose and link frames (base frame first) in the scene frame.
pub fn fk(arm: &ArmModel, q: &[f64]) -> Result<(Pose, Vec<Pose>), ArmError> {
    arm.check_limits(q)?;
    let c = chain(arm, q);
    Ok((c.ee.to_pose(), c.links.into_iter().map(Frame::to_pose).collect()))
}

fn jacobian(arm: &ArmModel, c: &Chain) -> DMatrix<f64> {
    let n = arm.dof();
    let mut j = DMatrix::zeros(6, n);
    for i in 0..n {
        let f = match arm.convention {
            DhConvention::Standard => &c.links[i],
            DhConvention::Modified => &c.links[i + 1],
        };
        let z = f.r.column(2).into_owned();
        let lin = z.cross(&(c.ee.t - f.t));
        for k in 0..3 {
            j[(k, i)] = lin[k];
            j[(k + 3, i)] = z[k];
        }
    }
    j
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IkParams {
    pub damping: f64,
    pub max_step: f64,
    pub max_iters: usize,
    pub pos_tol: f64,
    pub rot_tol: f64,
}

impl Default for IkParams {
    fn default() -> Self {
        Self { damping: 1e-3, max_step: 0.2, max_iters: 200, pos_tol: 1e-3, rot_tol: 0.01 }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IkError {
    #[error("IK did not converge: position error {pos_err} m, rotation error {rot_err} rad")]
    IkUnreachable { pos_err: f64, rot_err: f64, at_limit: bool, q: Vec<f64> },
}

/// Converged to well inside the acceptance tolerance; further iterations
/// would only chase rounding.
const IK_TIGHT: f64 = 1e-9;

fn pose_error(c: &Chain, target: &Frame) -> (Vector3<f64>, Vector3<f64>) {
    let dp = target.t - c.ee.t;
    let dr = matrix_to_rotvec(&(target.r * c.ee.r.transpose())).expect("orthonormal");
    (dp, dr)
}

/// Damped least-squares IK from `q_seed`. Limits are enforced by clamping.
pub fn solve_ik(arm: &ArmModel, target: &Pose, q_seed: &[f64], params: &IkParams) -> Result<Vec<f64>, IkError> {
    let target = Frame::from_pose(target);
    let n = arm.dof();
    let mut q = q_seed.to_vec();
    arm.clamp(&mut q);
    let mut c = chain(arm, &q);
    let (mut dp, mut dr) = pose_error(&c, &target);
    for _ in 0..params.max_iters {
        if dp.norm() < IK_TIGHT && dr.norm() < IK_TIGHT {
            break;
        }
        let j = jacobian(arm, &c);
        let e = DVector::from_iterator(6, dp.iter().chain(dr.iter()).copied());
        let jjt = &j * j.transpose() + DMatrix::identity(6, 6) * params.damping;
        let Some(chol) = jjt.cholesky() else { break };
        let mut dq = j.transpose() * chol.solve(&e);
        let amax = dq.amax();
        if amax > params.max_step {
            dq *= params.max_step / amax;
        }
        let mut next = q.clone();
        for k in 0..n {
            next[k] += dq[k];
        }
        arm.clamp(&mut next);
        let nc = chain(arm, &next);
        let (ndp, ndr) = pose_error(&nc, &target);
        if next == q {
            break;
        }
        q = next;
        c = nc;
        dp = ndp;
        dr = ndr;
    }
    if dp.norm() < params.pos_tol && dr.norm() < params.rot_tol {
        Ok(q)
    } else {
        Err(IkError::IkUnreachable { pos_err: dp.norm(), rot_err: dr.norm(), at_limit: arm.at_limit(&q), q })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    #[serde(with = "crate::serde_vec3")]
    pub min: Vector3<f64>,
    #[serde(with = "crate::serde_vec3")]
    pub max: Vector3<f64>,
}

impl Aabb {
    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] && p[k] <= self.max[k])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    /// Everything at or below this height is table.
    pub table_height: f64,
    /// Tool-center targets outside this box are rejected as unreachable.
    pub workspace_box: Aabb,
}

impl Default for Scene {
    fn default() -> Self {
        Self {
            table_height: 0.0,
            workspace_box: Aabb { min: Vector3::new(-0.2, -0.8, 0.0), max: Vector3::new(1.0, 0.8, 1.2) },
        }
    }
}

impl Scene {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ArmError> {
        let s: Scene = io::read_json(path)?;
        if s.workspace_box.min.z < s.table_height || (0..3).any(|k| s.workspace_box.min[k] >= s.workspace_box.max[k]) {
            return Err(ArmError::Invalid("workspace box must be nonempty and above the table".into()));
        }
        Ok(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollisionKind {
    Table,
    /// Not checked; kept so reports can grow without a format change.
    SelfCollision,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollisionReport {
    pub kind: CollisionKind,
    /// Index into `ArmModel::link_capsules`.
    pub capsule: usize,
    pub link: usize,
    /// Clearance minus radius; negative means penetration.
    pub depth: f64,
}

fn table_collision(arm: &ArmModel, c: &Chain, scene: &Scene) -> Option<CollisionReport> {
    arm.link_capsules.iter().enumerate().find_map(|(idx, cap)| {
        let f = &c.links[cap.joint_index];
        let z = f.point(&cap.p0).z.min(f.point(&cap.p1).z);
        let clearance = z - scene.table_height;
        (clearance < cap.radius).then_some(CollisionReport {
            kind: CollisionKind::Table,
            capsule: idx,
            link: cap.joint_index,
            depth: clearance - cap.radius,
        })
    })
}

/// First capsule (in config order) reaching into the table half-space.
pub fn check_collision(arm: &ArmModel, q: &[f64], scene: &Scene) -> Result<Option<CollisionReport>, ArmError> {
    arm.check_limits(q)?;
    Ok(table_collision(arm, &chain(arm, q), scene))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Failure {
    None,
    IkUnreachable,
    JointLimit,
    TableCollision,
    ControllerDiverged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionResult {
    pub success: bool,
    pub failure: Failure,
    /// Waypoint index at which execution stopped, if it failed.
    pub failed_waypoint: Option<usize>,
    pub collision: Option<CollisionReport>,
    /// World motion of the attached object per sub-step, identity at the grasp.
    pub realized_traj: PoseTrajectory,
    /// Sub-step index of each waypoint reached, aligned with the commanded waypoints.
    pub waypoint_steps: Vec<usize>,
    pub joint_path: Vec<Vec<f64>>,
}

impl ExecutionResult {
    fn finish(failure: Failure, at: Option<usize>, collision: Option<CollisionReport>, realized: Vec<Pose>, steps: Vec<usize>, path: Vec<Vec<f64>>) -> Self {
        let realized_traj = if realized.is_empty() {
            PoseTrajectory::new("c", vec![TrajectoryEntry { index: 0, pose: Pose::identity() }])
        } else {
            PoseTrajectory::from_poses("c", realized)
        }
        .expect("finite sub-step poses");
        Self {
            success: failure == Failure::None,
            failure,
            failed_waypoint: at,
            collision,
            realized_traj,
            waypoint_steps: steps,
            joint_path: path,
        }
    }
}

fn substeps(a: &Pose, b: &Pose) -> usize {
    let dt = (b.trans - a.trans).norm() / MAX_SUBSTEP_TRANS;
    let dr = crate::geom::rotation_distance(a, b) / MAX_SUBSTEP_ROT;
    (dt.max(dr).ceil() as usize).max(1)
}

/// Execute `grasp` followed by the relative object trajectory `rel` about
/// center `u`. Failures are reported in the result, never returned as errors.
pub fn execute_grasp_trajectory(arm: &ArmModel, grasp: &Pose, rel: &[Pose], u: &Vector3<f64>, scene: &Scene, ik: &IkParams) -> ExecutionResult {
    let classify = |e: &IkError| match e {
        IkError::IkUnreachable { at_limit: true, .. } => Failure::JointLimit,
        IkError::IkUnreachable { .. } => Failure::IkUnreachable,
    };
    let mut path = Vec::new();
    let mut realized = Vec::new();
    let mut steps = Vec::new();

    if !scene.workspace_box.contains(&grasp.trans) {
        return ExecutionResult::finish(Failure::IkUnreachable, Some(0), None, realized, steps, path);
    }
    let q0 = match solve_ik(arm, grasp, &arm.home_q, ik) {
        Ok(q) => q,
        Err(e) => return ExecutionResult::finish(classify(&e), Some(0), None, realized, steps, path),
    };
    let c0 = chain(arm, &q0);
    if let Some(col) = table_collision(arm, &c0, scene) {
        return ExecutionResult::finish(Failure::TableCollision, Some(0), Some(col), realized, steps, path);
    }
    // Object motion is ee motion relative to the attachment pose.
    let attach_inv = c0.ee.to_pose().inverse();
    let object_motion = |c: &Chain| compose(&c.ee.to_pose(), &attach_inv);
    realized.push(object_motion(&c0));
    steps.push(0);
    path.push(q0.clone());

    let targets = grasp_to_ee_trajectory(grasp, rel, u);
    let mut q = q0;
    let mut prev = targets[0];
    for (w, target) in targets.iter().enumerate().skip(1) {
        let n = substeps(&prev, target);
        for s in 1..=n {
            let sub = interpolate(&prev, target, s as f64 / n as f64);
            if !scene.workspace_box.contains(&sub.trans) {
                return ExecutionResult::finish(Failure::IkUnreachable, Some(w), None, realized, steps, path);
            }
            let next = match solve_ik(arm, &sub, &q, ik) {
                Ok(next) => next,
                Err(e) => return ExecutionResult::finish(classify(&e), Some(w), None, realized, steps, path),
            };
            if next.iter().zip(&q).any(|(a, b)| (a - b).abs() > MAX_JOINT_JUMP) {
                return ExecutionResult::finish(Failure::ControllerDiverged, Some(w), None, realized, steps, path);
            }
            let c = chain(arm, &next);
            if let Some(col) = table_collision(arm, &c, scene) {
                return ExecutionResult::finish(Failure::TableCollision, Some(w), Some(col), realized, steps, path);
            }
            realized.push(object_motion(&c));
            path.push(next.clone());
            q = next;
        }
        steps.push(realized.len() - 1);
        prev = *target;
    }
    ExecutionResult::finish(Failure::None, None, None, realized, steps, path)
}
