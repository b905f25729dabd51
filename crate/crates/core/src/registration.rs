//! Point-to-plane ICP and sequential pose tracking.
//!
//! Registration runs coarse-to-fine: a pass with a wide correspondence gate
//! pulls the clouds into the basin, a second pass with a tight gate refines.
//! Tracking chains pairwise registrations over a frame sequence and applies
//! the skip rule for sparse frames and the jump-rejection rule for implausible
//! per-step motion.

use nalgebra::{Matrix3, Matrix6, SymmetricEigen, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloud::{self, FrameSequence, PointCloud, PointIndex};
use crate::geom::{compose, Pose, PoseTrajectory, TrajectoryEntry};

/// Number of neighbours used for normal estimation.
pub const NORMAL_NEIGHBOURS: usize = 20;
const MIN_REGISTRATION_POINTS: usize = 10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegistrationError {
    #[error("too few points for registration (source {src}, target {dst})")]
    InsufficientPoints { src: usize, dst: usize },
    #[error("no correspondences within {0} m under the initial pose")]
    NoCorrespondences(f64),
    #[error("degenerate geometry: normal equations are singular")]
    Degenerate,
    #[error("no frame has enough points to track")]
    NoValidFrames,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IcpParams {
    pub coarse_dist: f64,
    pub fine_dist: f64,
    pub max_iters: usize,
    pub convergence_eps: f64,
    /// Voxel size for the source cloud; zero disables downsampling.
    pub voxel_size: f64,
}

impl Default for IcpParams {
    fn default() -> Self {
        Self { coarse_dist: 0.08, fine_dist: 0.02, max_iters: 50, convergence_eps: 1e-7, voxel_size: 0.005 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackParams {
    pub min_points: usize,
    pub max_jump_trans: f64,
    pub max_jump_rot: f64,
    /// Statistical outlier removal applied before tracking by [`preprocess`].
    pub outlier_neighbors: usize,
    pub outlier_std_ratio: f64,
}

impl Default for TrackParams {
    fn default() -> Self {
        Self { min_points: 500, max_jump_trans: 0.02, max_jump_rot: 0.2, outlier_neighbors: 30, outlier_std_ratio: 2.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Registration {
    pub pose: Pose,
    /// Fraction of source points with a target point within `fine_dist`.
    pub fitness: f64,
    /// RMS point distance over those inliers.
    pub rmse: f64,
}

/// Target cloud with its search index and per-point normals.
pub struct Target<'a> {
    points: &'a [Vector3<f64>],
    index: PointIndex,
    normals: Vec<Vector3<f64>>,
}

impl<'a> Target<'a> {
    pub fn new(cloud: &'a PointCloud) -> Self {
        let index = PointIndex::new(&cloud.points);
        let normals = cloud.points.iter().map(|p| estimate_normal(&cloud.points, &index, p)).collect();
        Self { points: &cloud.points, index, normals }
    }
}

fn estimate_normal(points: &[Vector3<f64>], index: &PointIndex, p: &Vector3<f64>) -> Vector3<f64> {
    let nn = index.nearest_k(p, NORMAL_NEIGHBOURS);
    if nn.len() < 3 {
        return Vector3::z();
    }
    let mean = nn.iter().map(|(i, _)| points[*i]).sum::<Vector3<f64>>() / nn.len() as f64;
    let cov = nn.iter().fold(Matrix3::zeros(), |acc, (i, _)| {
        let d = points[*i] - mean;
        acc + d * d.transpose()
    });
    let eig = SymmetricEigen::new(cov);
    let min = eig.eigenvalues.imin();
    eig.eigenvectors.column(min).into_owned()
}

fn icp_pass(src: &[Vector3<f64>], dst: &Target<'_>, init: Pose, max_dist: f64, params: &IcpParams) -> Result<Pose, RegistrationError> {
    let max_d2 = max_dist * max_dist;
    let mut pose = init;
    for iter in 0..params.max_iters {
        let rot = pose.rotation();
        let mut h = Matrix6::<f64>::zeros();
        let mut g = Vector6::<f64>::zeros();
        let mut pairs = 0;
        for p in src {
            let q = rot * p + pose.trans;
            let Some((j, d2)) = dst.index.nearest(&q) else { continue };
            if d2 > max_d2 {
                continue;
            }
            pairs += 1;
            let n = dst.normals[j];
            let r = n.dot(&(q - dst.points[j]));
            // Left perturbation: d(q)/d(omega) = -[q]x, d(q)/d(v) = I.
            let jw = q.cross(&n);
            let jac = Vector6::new(jw.x, jw.y, jw.z, n.x, n.y, n.z);
            h += jac * jac.transpose();
            g += jac * r;
        }
        if pairs == 0 {
            return Err(RegistrationError::NoCorrespondences(max_dist));
        }
        if pairs < 6 {
            break;
        }
        let Some(chol) = h.cholesky() else {
            return Err(RegistrationError::Degenerate);
        };
        let delta = -chol.solve(&g);
        // The twist here is (omega, v) with v the translation of the
        // increment, so build it directly rather than through the exp map.
        let step = Pose::new(Vector3::new(delta[0], delta[1], delta[2]), Vector3::new(delta[3], delta[4], delta[5]));
        pose = compose(&step, &pose);
        if delta.norm() < params.convergence_eps {
            log::trace!("icp pass converged after {} iterations", iter + 1);
            break;
        }
    }
    Ok(pose)
}

/// Register `src` onto `dst`: the returned pose maps source points onto the
/// target surface.
pub fn icp_register(src: &PointCloud, dst: &PointCloud, init: Pose, params: &IcpParams) -> Result<Registration, RegistrationError> {
    let target = Target::new(dst);
    icp_register_to(src, &target, init, params)
}

/// Like [`icp_register`] but reuses a prepared target.
pub fn icp_register_to(src: &PointCloud, dst: &Target<'_>, init: Pose, params: &IcpParams) -> Result<Registration, RegistrationError> {
    let src_ds = cloud::voxel_subsample(src, params.voxel_size);
    if src_ds.len() < MIN_REGISTRATION_POINTS || dst.points.len() < MIN_REGISTRATION_POINTS {
        return Err(RegistrationError::InsufficientPoints { src: src_ds.len(), dst: dst.points.len() });
    }
    let coarse = icp_pass(&src_ds.points, dst, init, params.coarse_dist, params)?;
    let fine = match icp_pass(&src_ds.points, dst, coarse, params.fine_dist, params) {
        Ok(f) => f,
        Err(RegistrationError::NoCorrespondences(_)) => coarse,
        Err(e) => return Err(e),
    };
    let (fitness, rmse) = evaluate(&src_ds.points, dst, &fine, params.fine_dist);
    Ok(Registration { pose: fine, fitness, rmse })
}

fn evaluate(src: &[Vector3<f64>], dst: &Target<'_>, pose: &Pose, max_dist: f64) -> (f64, f64) {
    let rot = pose.rotation();
    let mut inliers = 0usize;
    let mut sq = 0.0;
    for p in src {
        if let Some((_, d2)) = dst.index.nearest(&(rot * p + pose.trans)) {
            if d2 <= max_dist * max_dist {
                inliers += 1;
                sq += d2;
            }
        }
    }
    let fitness = inliers as f64 / src.len() as f64;
    let rmse = if inliers > 0 { (sq / inliers as f64).sqrt() } else { 0.0 };
    (fitness, rmse)
}

/// Why a tracked frame did not come straight from its own registration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameStatus {
    Reference,
    Tracked,
    /// Too few points; previous pose carried forward.
    Skipped,
    /// Step exceeded the jump limits; previous step reused.
    JumpRejected,
    /// Registration failed; previous step reused.
    RegistrationFailed,
    /// Before the first frame with enough points.
    BeforeReference,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackResult {
    /// Object pose per frame, relative to the reference (first valid) frame.
    pub trajectory: PoseTrajectory,
    pub status: Vec<FrameStatus>,
    /// Position in the sequence of the reference frame.
    pub reference: usize,
}

impl TrackResult {
    pub fn count(&self, s: FrameStatus) -> usize {
        self.status.iter().filter(|x| **x == s).count()
    }
}

/// Track an object through a frame sequence of preprocessed clouds.
///
/// Frames with fewer than `min_points` points are skipped and keep the previous
/// pose. A per-step transform that moves the current object center by more
/// than `max_jump_trans`, or rotates by more than `max_jump_rot`, is replaced
/// by the previous accepted step. Each registration is initialized with the
/// previous accepted step.
pub fn track_sequence(seq: &FrameSequence, params: &TrackParams, icp: &IcpParams) -> Result<TrackResult, RegistrationError> {
    let frames = seq.frames();
    let reference = frames
        .iter()
        .position(|(_, c)| c.len() >= params.min_points)
        .ok_or(RegistrationError::NoValidFrames)?;

    let mut status = vec![FrameStatus::BeforeReference; frames.len()];
    let mut poses = vec![Pose::identity(); frames.len()];
    status[reference] = FrameStatus::Reference;

    let mut prev_cloud = &frames[reference].1;
    let center0 = cloud::object_center(prev_cloud).map_err(|_| RegistrationError::NoValidFrames)?;
    let mut current = Pose::identity();
    let mut last_step = Pose::identity();

    for pos in reference + 1..frames.len() {
        let (index, raw) = &frames[pos];
        if raw.len() < params.min_points {
            log::debug!("frame {index}: {} points, skipped", raw.len());
            status[pos] = FrameStatus::Skipped;
            poses[pos] = current;
            continue;
        }
        let (step, s) = match icp_register(prev_cloud, raw, last_step, icp) {
            Ok(reg) => {
                let center = current.transform_point(&center0);
                let moved = reg.pose.transform_point(&center) - center;
                if moved.norm() > params.max_jump_trans || reg.pose.angle() > params.max_jump_rot {
                    log::debug!("frame {index}: jump of {:.4} m / {:.4} rad rejected", moved.norm(), reg.pose.angle());
                    (last_step, FrameStatus::JumpRejected)
                } else {
                    (reg.pose, FrameStatus::Tracked)
                }
            }
            Err(e) => {
                log::warn!("frame {index}: registration failed ({e}); reusing previous step");
                (last_step, FrameStatus::RegistrationFailed)
            }
        };
        current = compose(&step, &current);
        last_step = step;
        poses[pos] = current;
        status[pos] = s;
        prev_cloud = raw;
    }

    let entries = frames.iter().zip(poses).map(|((index, _), pose)| TrajectoryEntry { index: *index, pose }).collect();
    let trajectory = PoseTrajectory::new(seq.frame_id.clone(), entries).expect("sequence indices are increasing");
    Ok(TrackResult { trajectory, status, reference })
}

/// Outlier removal on every frame.
pub fn preprocess(seq: &FrameSequence, params: &TrackParams) -> FrameSequence {
    let frames = seq
        .frames()
        .iter()
        .map(|(i, c)| (*i, cloud::remove_outliers(c, params.outlier_neighbors, params.outlier_std_ratio)))
        .collect();
    FrameSequence::new(seq.frame_id.clone(), frames).expect("indices unchanged")
}
