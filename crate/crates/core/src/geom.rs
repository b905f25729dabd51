//! Rigid transforms stored as rotation vector + translation.
//!
//! Rotation matrices are built on demand; every stored [`Pose`] keeps its
//! rotation as an axis-angle vector with norm at most pi. Composition follows
//! the usual convention: `compose(a, b)` applies `b` first, then `a`.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Matrix4, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::serde_vec3;

/// Orthonormality tolerance used by [`matrix_to_rotvec`].
pub const ROTATION_TOLERANCE: f64 = 1e-6;

/// Number of waypoints predicted and stored per demonstration.
pub const NUM_WAYPOINTS: usize = 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeomError {
    #[error("matrix is not a rotation (orthonormality error {0:.3e})")]
    NotARotation(f64),
    #[error("trajectory is empty")]
    EmptyTrajectory,
    #[error("frame indices must be strictly increasing ({prev} then {next})")]
    NonIncreasingIndex { prev: usize, next: usize },
    #[error("cannot resample to {0} poses (need at least 2)")]
    TooFewSamples(usize),
    #[error("expected {expected} waypoints, got {got}")]
    WaypointCount { expected: usize, got: usize },
    #[error("non-finite value in pose")]
    NonFinite,
}

#[inline]
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

#[inline]
fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)])
}

/// Rodrigues' formula.
pub fn rotvec_to_matrix(r: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = r.norm_squared();
    let k = skew(r);
    let (a, b) = if theta2 < 1e-12 {
        // Taylor expansions of sin(t)/t and (1 - cos(t))/t^2.
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        let theta = theta2.sqrt();
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    Matrix3::identity() + k * a + k * k * b
}

/// Pick the representative of an axis with angle exactly pi: first nonzero
/// component among z, y, x is made nonnegative.
fn pi_axis_sign(axis: Vector3<f64>) -> Vector3<f64> {
    for c in [2, 1, 0] {
        if axis[c].abs() > 1e-12 {
            return if axis[c] < 0.0 { -axis } else { axis };
        }
    }
    axis
}

/// Inverse of [`rotvec_to_matrix`]; result norm lies in `[0, pi]`.
pub fn matrix_to_rotvec(m: &Matrix3<f64>) -> Result<Vector3<f64>, GeomError> {
    let err = (m.transpose() * m - Matrix3::identity()).abs().max();
    if !err.is_finite() || err > ROTATION_TOLERANCE || m.determinant() <= 0.0 {
        return Err(GeomError::NotARotation(err));
    }
    let w = vee(m);
    let sin_t = 0.5 * w.norm();
    let cos_t = 0.5 * (m.trace() - 1.0);
    let theta = sin_t.atan2(cos_t);

    if theta < 1e-6 {
        return Ok(w * (0.5 * (1.0 + theta * theta / 6.0)));
    }
    if theta < PI - 1e-2 {
        return Ok(w * (theta / (2.0 * sin_t)));
    }

    // Near pi the antisymmetric part vanishes; recover the axis from the
    // symmetric part (1 - cos t) a a^T and take its sign from `w`.
    let s = (m + m.transpose()) * 0.5 - Matrix3::identity() * cos_t;
    let col = (0..3)
        .max_by(|&i, &j| s[(i, i)].total_cmp(&s[(j, j)]))
        .unwrap_or(0);
    let mut axis: Vector3<f64> = s.column(col).into_owned();
    axis /= axis.norm();
    if w.norm() > 1e-12 {
        if axis.dot(&w) < 0.0 {
            axis = -axis;
        }
    } else {
        axis = pi_axis_sign(axis);
    }
    Ok(axis * theta)
}

/// Map any rotation vector to the equivalent one with norm in `[0, pi]`.
pub fn canonical_rotvec(r: &Vector3<f64>) -> Vector3<f64> {
    let theta = r.norm();
    if theta <= PI - 1e-12 {
        return *r;
    }
    let axis = r / theta;
    let wrapped = theta.rem_euclid(2.0 * PI);
    if (wrapped - PI).abs() <= 1e-12 {
        pi_axis_sign(axis) * PI
    } else if wrapped > PI {
        -axis * (2.0 * PI - wrapped)
    } else {
        axis * wrapped
    }
}

fn rotation_from_matrix(m: &Matrix3<f64>) -> Vector3<f64> {
    // Products of valid rotations stay orthonormal to ~1e-15, far inside
    // ROTATION_TOLERANCE.
    matrix_to_rotvec(m).expect("product of rotations is a rotation")
}

/// SE(3) element: rotation vector (radians * unit axis) and translation (m).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    #[serde(with = "serde_vec3")]
    pub rotvec: Vector3<f64>,
    #[serde(with = "serde_vec3")]
    pub trans: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self { rotvec: Vector3::zeros(), trans: Vector3::zeros() }
    }

    /// Canonicalizes the rotation vector.
    pub fn new(rotvec: Vector3<f64>, trans: Vector3<f64>) -> Self {
        Self { rotvec: canonical_rotvec(&rotvec), trans }
    }

    pub fn from_translation(trans: Vector3<f64>) -> Self {
        Self { rotvec: Vector3::zeros(), trans }
    }

    pub fn from_rotvec(rotvec: Vector3<f64>) -> Self {
        Self::new(rotvec, Vector3::zeros())
    }

    pub fn from_matrix(rot: &Matrix3<f64>, trans: Vector3<f64>) -> Result<Self, GeomError> {
        Ok(Self { rotvec: matrix_to_rotvec(rot)?, trans })
    }

    pub fn from_homogeneous(h: &Matrix4<f64>) -> Result<Self, GeomError> {
        let rot: Matrix3<f64> = h.fixed_view::<3, 3>(0, 0).into_owned();
        let trans: Vector3<f64> = h.fixed_view::<3, 1>(0, 3).into_owned();
        Self::from_matrix(&rot, trans)
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        rotvec_to_matrix(&self.rotvec)
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut h = Matrix4::identity();
        h.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation());
        h.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.trans);
        h
    }

    pub fn is_finite(&self) -> bool {
        self.rotvec.iter().chain(self.trans.iter()).all(|v| v.is_finite())
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation().transpose();
        Self { rotvec: canonical_rotvec(&-self.rotvec), trans: -(rt * self.trans) }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * p + self.trans
    }

    pub fn transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * v
    }

    /// Rotation angle in radians.
    pub fn angle(&self) -> f64 {
        self.rotvec.norm()
    }
}

/// `a ∘ b`: apply `b` first, then `a`.
pub fn compose(a: &Pose, b: &Pose) -> Pose {
    let ra = a.rotation();
    let rot = ra * b.rotation();
    Pose { rotvec: rotation_from_matrix(&rot), trans: ra * b.trans + a.trans }
}

/// Geodesic angle between the rotations of two poses, in `[0, pi]`.
pub fn rotation_distance(a: &Pose, b: &Pose) -> f64 {
    let rel = a.rotation().transpose() * b.rotation();
    rotation_from_matrix(&rel).norm()
}

/// Spherical interpolation of rotation, linear interpolation of translation.
pub fn interpolate(a: &Pose, b: &Pose, t: f64) -> Pose {
    let ra = a.rotation();
    let delta = rotation_from_matrix(&(ra.transpose() * b.rotation()));
    let rot = ra * rotvec_to_matrix(&(delta * t));
    Pose { rotvec: rotation_from_matrix(&rot), trans: a.trans.lerp(&b.trans, t) }
}

/// SE(3) logarithm as `[omega, rho]` (rotation first).
pub fn se3_log(p: &Pose) -> Vector6<f64> {
    let omega = p.rotvec;
    let theta2 = omega.norm_squared();
    let k = skew(&omega);
    // V^{-1} = I - K/2 + c K^2
    let c = if theta2 < 1e-10 {
        1.0 / 12.0 + theta2 / 720.0
    } else {
        let theta = theta2.sqrt();
        (1.0 - theta * theta.sin() / (2.0 * (1.0 - theta.cos()))) / theta2
    };
    let v_inv = Matrix3::identity() - k * 0.5 + k * k * c;
    let rho = v_inv * p.trans;
    Vector6::new(omega.x, omega.y, omega.z, rho.x, rho.y, rho.z)
}

/// SE(3) exponential of `[omega, rho]`.
pub fn se3_exp(xi: &Vector6<f64>) -> Pose {
    let omega = Vector3::new(xi[0], xi[1], xi[2]);
    let rho = Vector3::new(xi[3], xi[4], xi[5]);
    let theta2 = omega.norm_squared();
    let k = skew(&omega);
    let (b, c) = if theta2 < 1e-10 {
        (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        let theta = theta2.sqrt();
        ((1.0 - theta.cos()) / theta2, (theta - theta.sin()) / (theta2 * theta))
    };
    let v = Matrix3::identity() + k * b + k * k * c;
    Pose::new(omega, v * rho)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryEntry {
    pub index: usize,
    #[serde(flatten)]
    pub pose: Pose,
}

/// Ordered sequence of poses in one coordinate frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTrajectory")]
pub struct PoseTrajectory {
    pub frame_id: String,
    entries: Vec<TrajectoryEntry>,
}

#[derive(Deserialize)]
struct RawTrajectory {
    frame_id: String,
    entries: Vec<TrajectoryEntry>,
}

impl TryFrom<RawTrajectory> for PoseTrajectory {
    type Error = GeomError;
    fn try_from(raw: RawTrajectory) -> Result<Self, GeomError> {
        PoseTrajectory::new(raw.frame_id, raw.entries)
    }
}

impl PoseTrajectory {
    pub fn new(frame_id: impl Into<String>, entries: Vec<TrajectoryEntry>) -> Result<Self, GeomError> {
        if entries.is_empty() {
            return Err(GeomError::EmptyTrajectory);
        }
        for w in entries.windows(2) {
            if w[1].index <= w[0].index {
                return Err(GeomError::NonIncreasingIndex { prev: w[0].index, next: w[1].index });
            }
        }
        if entries.iter().any(|e| !e.pose.is_finite()) {
            return Err(GeomError::NonFinite);
        }
        Ok(Self { frame_id: frame_id.into(), entries })
    }

    /// Consecutive frame indices starting at zero.
    pub fn from_poses(frame_id: impl Into<String>, poses: Vec<Pose>) -> Result<Self, GeomError> {
        let entries = poses.into_iter().enumerate().map(|(index, pose)| TrajectoryEntry { index, pose }).collect();
        Self::new(frame_id, entries)
    }

    pub fn entries(&self) -> &[TrajectoryEntry] {
        &self.entries
    }

    pub fn poses(&self) -> impl Iterator<Item = &Pose> + '_ {
        self.entries.iter().map(|e| &e.pose)
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().map(|e| e.index)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn first(&self) -> &Pose {
        &self.entries[0].pose
    }

    pub fn last(&self) -> &Pose {
        &self.entries[self.entries.len() - 1].pose
    }

    /// Same indices, poses replaced by `f`.
    pub fn map_poses(&self, mut f: impl FnMut(&Pose) -> Pose) -> Self {
        let entries = self.entries.iter().map(|e| TrajectoryEntry { index: e.index, pose: f(&e.pose) }).collect();
        Self { frame_id: self.frame_id.clone(), entries }
    }
}

/// Exactly [`NUM_WAYPOINTS`] relative poses in the object-centered frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Pose>", into = "Vec<Pose>")]
pub struct WaypointTrajectory(Vec<Pose>);

impl TryFrom<Vec<Pose>> for WaypointTrajectory {
    type Error = GeomError;
    fn try_from(v: Vec<Pose>) -> Result<Self, GeomError> {
        if v.len() != NUM_WAYPOINTS {
            return Err(GeomError::WaypointCount { expected: NUM_WAYPOINTS, got: v.len() });
        }
        Ok(Self(v))
    }
}

impl From<WaypointTrajectory> for Vec<Pose> {
    fn from(w: WaypointTrajectory) -> Self {
        w.0
    }
}

impl WaypointTrajectory {
    pub fn identity() -> Self {
        Self(vec![Pose::identity(); NUM_WAYPOINTS])
    }

    pub fn waypoints(&self) -> &[Pose] {
        &self.0
    }
}

/// Uniform-index resampling to `n` poses. Endpoints are reproduced exactly.
///
/// A single-entry trajectory yields `n` copies and logs a warning.
pub fn resample_trajectory(traj: &PoseTrajectory, n: usize) -> Result<Vec<Pose>, GeomError> {
    if n < 2 {
        return Err(GeomError::TooFewSamples(n));
    }
    let m = traj.len();
    if m == 1 {
        log::warn!("degenerate trajectory: one entry resampled to {n} copies");
        return Ok(vec![*traj.first(); n]);
    }
    let entries = traj.entries();
    let out = (0..n)
        .map(|k| {
            let num = k * (m - 1);
            let (i, rem) = (num / (n - 1), num % (n - 1));
            if rem == 0 {
                entries[i].pose
            } else {
                let t = rem as f64 / (n - 1) as f64;
                interpolate(&entries[i].pose, &entries[i + 1].pose, t)
            }
        })
        .collect();
    Ok(out)
}

/// World-frame motion equivalent to the relative pose `rel` about center `u`:
/// `x -> R (x - u) + u + t`.
pub fn relative_to_world(rel: &Pose, u: &Vector3<f64>) -> Pose {
    let r = rel.rotation();
    Pose { rotvec: rel.rotvec, trans: u + rel.trans - r * u }
}

/// Inverse of [`relative_to_world`].
pub fn world_to_relative(motion: &Pose, u: &Vector3<f64>) -> Pose {
    let r = motion.rotation();
    Pose { rotvec: motion.rotvec, trans: r * u + motion.trans - u }
}

/// Apply a relative pose about `u` to a point.
pub fn apply_relative_point(rel: &Pose, u: &Vector3<f64>, x: &Vector3<f64>) -> Vector3<f64> {
    rel.rotation() * (x - u) + u + rel.trans
}

/// Move a pose rigidly with the object: `relative_to_world(rel, u) ∘ pose`.
pub fn apply_relative(rel: &Pose, u: &Vector3<f64>, pose: &Pose) -> Pose {
    compose(&relative_to_world(rel, u), pose)
}

/// Express an absolute trajectory as relative poses about the center `u`,
/// with the first entry mapped to identity.
pub fn to_object_frame(traj: &PoseTrajectory, u: &Vector3<f64>) -> PoseTrajectory {
    let first_inv = traj.first().inverse();
    let mut out = traj.map_poses(|p| world_to_relative(&compose(p, &first_inv), u));
    out.entries[0].pose = Pose::identity();
    out
}

/// Rebuild absolute poses from relative ones, the center, and the first pose.
pub fn from_object_frame(rel: &PoseTrajectory, u: &Vector3<f64>, first: &Pose) -> PoseTrajectory {
    rel.map_poses(|d| compose(&relative_to_world(d, u), first))
}

/// End-effector poses that keep `grasp` rigidly attached to the moving object.
pub fn grasp_to_ee_trajectory(grasp: &Pose, rel: &[Pose], u: &Vector3<f64>) -> Vec<Pose> {
    rel.iter().map(|d| apply_relative(d, u, grasp)).collect()
}
