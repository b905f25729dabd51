//! Rigid alignment of corresponded point sets and flow labels from poses.

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::geom::{apply_relative_point, Pose};

/// Second singular value of the centered cross-covariance, relative to the
/// first, below which the point set counts as collinear.
pub const DEGENERACY_RATIO: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error("point sets have {0} and {1} points")]
    LengthMismatch(usize, usize),
    #[error("degenerate geometry: need at least three non-collinear points")]
    DegenerateGeometry,
}

fn centroid(p: &[Vector3<f64>]) -> Vector3<f64> {
    p.iter().sum::<Vector3<f64>>() / p.len() as f64
}

/// Least-squares rigid transform `T` minimizing `Σ |T p0_i - p1_i|²`.
pub fn flow_to_se3(p0: &[Vector3<f64>], p1: &[Vector3<f64>]) -> Result<Pose, FlowError> {
    if p0.len() != p1.len() {
        return Err(FlowError::LengthMismatch(p0.len(), p1.len()));
    }
    if p0.len() < 3 {
        return Err(FlowError::DegenerateGeometry);
    }
    let (c0, c1) = (centroid(p0), centroid(p1));
    let cov0: Matrix3<f64> = p0.iter().map(|a| (a - c0) * (a - c0).transpose()).sum();
    let s0 = cov0.symmetric_eigenvalues();
    let mut s0: Vec<f64> = s0.iter().copied().collect();
    s0.sort_by(|a, b| b.total_cmp(a));
    if !(s0[0] > 0.0) || s0[1] <= DEGENERACY_RATIO * s0[0] {
        return Err(FlowError::DegenerateGeometry);
    }
    let h: Matrix3<f64> = p0.iter().zip(p1).map(|(a, b)| (b - c1) * (a - c0).transpose()).sum();
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v requested"));
    // nalgebra does not sort singular values; put the guard on the smallest.
    let smallest = svd.singular_values.imin();
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(smallest, smallest)] = -1.0;
    }
    let r = u * d * v_t;
    Pose::from_matrix(&r, c1 - r * c0).map_err(|_| FlowError::DegenerateGeometry)
}

/// Points carried by each relative pose about center `u`.
pub fn gen_flow_labels(points: &[Vector3<f64>], rel: &[Pose], u: &Vector3<f64>) -> Vec<Vec<Vector3<f64>>> {
    rel.iter().map(|d| points.iter().map(|x| apply_relative_point(d, u, x)).collect()).collect()
}
