//! Anchor grasps, candidate generation, nearest-anchor assignment and
//! score-based selection.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{compose, rotation_distance, Pose};
use crate::synth;

pub const NUM_ANCHORS: usize = 8;
pub const AZIMUTHS_DEG: [f64; 4] = [0.0, 90.0, 180.0, 270.0];
pub const ELEVATIONS_DEG: [f64; 2] = [10.0, 50.0];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraspError {
    #[error("no candidate grasps")]
    EmptyCandidates,
    #[error("score {0} outside [0, 1]")]
    BadScore(f64),
}

/// Anchor `k` sits at azimuth `AZIMUTHS_DEG[k / 2]` and elevation
/// `ELEVATIONS_DEG[k % 2]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorGraspSet {
    pub anchors: [Pose; NUM_ANCHORS],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateGrasp {
    #[serde(flatten)]
    pub pose: Pose,
    pub provenance: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; NUM_ANCHORS]", into = "[f64; NUM_ANCHORS]")]
pub struct GraspScores([f64; NUM_ANCHORS]);

impl GraspScores {
    pub fn new(scores: [f64; NUM_ANCHORS]) -> Result<Self, GraspError> {
        match scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            Some(&s) => Err(GraspError::BadScore(s)),
            None => Ok(Self(scores)),
        }
    }

    pub fn values(&self) -> &[f64; NUM_ANCHORS] {
        &self.0
    }
}

impl TryFrom<[f64; NUM_ANCHORS]> for GraspScores {
    type Error = GraspError;
    fn try_from(v: [f64; NUM_ANCHORS]) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<GraspScores> for [f64; NUM_ANCHORS] {
    fn from(s: GraspScores) -> Self {
        s.0
    }
}

/// Unit approach direction for azimuth `phi` and elevation `e`: from a point
/// above and to the side of the object toward its center.
pub fn approach_direction(phi: f64, e: f64) -> Vector3<f64> {
    -Vector3::new(e.cos() * phi.cos(), e.cos() * phi.sin(), e.sin())
}

/// Gripper frame with z along `approach` and x horizontal.
pub fn grasp_frame(approach: &Vector3<f64>, position: Vector3<f64>) -> Pose {
    let z = approach.normalize();
    let x = Vector3::z().cross(&z).normalize();
    let y = z.cross(&x);
    Pose::from_matrix(&Matrix3::from_columns(&[x, y, z]), position).expect("orthonormal grasp frame")
}

pub fn generate_anchors(u: &Vector3<f64>, standoff: f64) -> AnchorGraspSet {
    let anchors = std::array::from_fn(|k| {
        let phi = AZIMUTHS_DEG[k / 2] * PI / 180.0;
        let e = ELEVATIONS_DEG[k % 2] * PI / 180.0;
        let a = approach_direction(phi, e);
        grasp_frame(&a, u - standoff * a)
    });
    AnchorGraspSet { anchors }
}

/// Index of the anchor closest in rotation; ties go to the lowest index.
pub fn assign_candidate(c: &Pose, anchors: &AnchorGraspSet) -> usize {
    let mut best = (0, f64::INFINITY);
    for (k, a) in anchors.anchors.iter().enumerate() {
        let d = rotation_distance(c, a);
        if d < best.1 {
            best = (k, d);
        }
    }
    best.0
}

/// Candidate with the highest inherited anchor score; ties go to the earliest.
pub fn select_grasp<'a>(candidates: &'a [CandidateGrasp], scores: &GraspScores, anchors: &AnchorGraspSet) -> Result<(usize, &'a CandidateGrasp), GraspError> {
    let mut best: Option<(usize, f64)> = None;
    for (j, c) in candidates.iter().enumerate() {
        let s = scores.0[assign_candidate(&c.pose, anchors)];
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((j, s));
        }
    }
    let (j, _) = best.ok_or(GraspError::EmptyCandidates)?;
    Ok((j, &candidates[j]))
}

/// `n_per_anchor` seeded rotational perturbations of each anchor, each of
/// angle at most `jitter_rot`, applied about the grasp point.
pub fn generate_candidates_grid(u: &Vector3<f64>, n_per_anchor: usize, jitter_rot: f64, seed: u64) -> Vec<CandidateGrasp> {
    let anchors = generate_anchors(u, 0.0);
    let mut rng = synth::rng(seed);
    let mut out = Vec::with_capacity(NUM_ANCHORS * n_per_anchor);
    for (k, a) in anchors.anchors.iter().enumerate() {
        for j in 0..n_per_anchor {
            let angle = if jitter_rot > 0.0 { rng.random::<f64>() * jitter_rot } else { 0.0 };
            let axis = synth::random_unit(&mut rng);
            let pose = if angle == 0.0 {
                *a
            } else {
                Pose::new(compose(a, &Pose::from_rotvec(axis * angle)).rotvec, a.trans)
            };
            out.push(CandidateGrasp { pose, provenance: format!("grid:{k}:{j}") });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};

    fn u() -> Vector3<f64> {
        Vector3::new(0.45, -0.1, 0.03)
    }

    fn min_pairwise(a: &AnchorGraspSet) -> f64 {
        let mut m = f64::INFINITY;
        for i in 0..NUM_ANCHORS {
            for j in i + 1..NUM_ANCHORS {
                m = m.min(rotation_distance(&a.anchors[i], &a.anchors[j]));
            }
        }
        m
    }

    #[test]
    fn anchor_layout() {
        let a = generate_anchors(&u(), 0.0);
        assert_eq!(a.anchors.len(), 8);
        assert!(min_pairwise(&a) > 0.1);
        for (k, g) in a.anchors.iter().enumerate() {
            let z = g.rotation().column(2).into_owned();
            let x = g.rotation().column(0).into_owned();
            assert!(x.z.abs() < 1e-15, "x axis horizontal");
            let expect = if k % 2 == 0 { -(10f64.to_radians().sin()) } else { -(50f64.to_radians().sin()) };
            assert!((z.z - expect).abs() < 1e-12);
            assert!((g.trans - u()).norm() < 1e-15);
        }
        assert!((a.anchors[0].rotation().column(2).z + 0.1736).abs() < 1e-4);
    }

    #[test]
    fn approach_axes_hit_center() {
        let a = generate_anchors(&u(), 0.12);
        for g in &a.anchors {
            let z = g.rotation().column(2).into_owned();
            let to_u = u() - g.trans;
            assert!((to_u - z * z.dot(&to_u)).norm() < 1e-9);
            assert!(z.dot(&to_u) > 0.0);
        }
    }

    #[test]
    fn assignment_examples() {
        let a = generate_anchors(&u(), 0.0);
        assert_eq!(assign_candidate(&a.anchors[3], &a), 3);
        let perturbed = compose(&a.anchors[2], &Pose::from_rotvec(Vector3::new(0.0, 5f64.to_radians(), 0.0)));
        let dists: Vec<f64> = a.anchors.iter().map(|g| rotation_distance(&perturbed, g)).collect();
        assert!(dists.iter().enumerate().all(|(k, d)| k == 2 || *d >= 30f64.to_radians()));
        assert_eq!(assign_candidate(&perturbed, &a), 2);
        // Slots 0 and 4 coincide, so every candidate is equidistant from them.
        let mut tied = a.clone();
        tied.anchors[4] = tied.anchors[0];
        assert_eq!(assign_candidate(&compose(&a.anchors[0], &Pose::from_rotvec(Vector3::new(0.01, 0.0, 0.0))), &tied), 0);
    }

    fn cand(p: Pose) -> CandidateGrasp {
        CandidateGrasp { pose: p, provenance: "t".into() }
    }

    #[test]
    fn selection_examples() {
        let a = generate_anchors(&u(), 0.0);
        assert_eq!(select_grasp(&[], &GraspScores::new([0.5; 8]).unwrap(), &a).unwrap_err(), GraspError::EmptyCandidates);
        let only = [cand(a.anchors[6])];
        assert_eq!(select_grasp(&only, &GraspScores::new([0.0; 8]).unwrap(), &a).unwrap().0, 0);
        let mut one_hot = [0.0; 8];
        one_hot[5] = 1.0;
        let cs = [cand(a.anchors[1]), cand(a.anchors[5]), cand(a.anchors[6])];
        assert_eq!(select_grasp(&cs, &GraspScores::new(one_hot).unwrap(), &a).unwrap().0, 1);
        assert_eq!(select_grasp(&cs, &GraspScores::new([0.3; 8]).unwrap(), &a).unwrap().0, 0);
        assert!(GraspScores::new([1.5; 8]).is_err());
    }

    #[test]
    fn grid_candidates() {
        let zero = generate_candidates_grid(&u(), 2, 0.0, 1);
        let a = generate_anchors(&u(), 0.0);
        for (i, c) in zero.iter().enumerate() {
            assert_eq!(c.pose, a.anchors[i / 2]);
        }
        let half = min_pairwise(&a) / 2.0;
        let jit = generate_candidates_grid(&u(), 5, half * 0.99, 7);
        assert_eq!(jit, generate_candidates_grid(&u(), 5, half * 0.99, 7));
        for (i, c) in jit.iter().enumerate() {
            assert!(rotation_distance(&c.pose, &a.anchors[i / 5]) <= half * 0.99 + 1e-12);
            assert_eq!(assign_candidate(&c.pose, &a), i / 5);
        }
    }

    proptest! {
        #[test]
        fn anchors_translate_with_center(dx in -1.0..1.0f64, dy in -1.0..1.0f64, dz in -1.0..1.0f64) {
            let d = Vector3::new(dx, dy, dz);
            let a = generate_anchors(&u(), 0.05);
            let b = generate_anchors(&(u() + d), 0.05);
            for (p, q) in a.anchors.iter().zip(&b.anchors) {
                prop_assert_eq!(p.rotvec, q.rotvec);
                prop_assert!((q.trans - p.trans - d).norm() < 1e-12);
            }
        }

        #[test]
        fn selection_invariant_to_monotone_scores(seed in 0u64..500) {
            let mut rng = synth::rng(seed);
            let a = generate_anchors(&u(), 0.0);
            let cs = generate_candidates_grid(&u(), 2, 0.3, seed);
            let raw: [f64; 8] = std::array::from_fn(|_| rng.random::<f64>());
            let squashed = raw.map(|s| s * s * s);
            let i = select_grasp(&cs, &GraspScores::new(raw).unwrap(), &a).unwrap().0;
            let j = select_grasp(&cs, &GraspScores::new(squashed).unwrap(), &a).unwrap().0;
            prop_assert_eq!(i, j);
        }
    }
}
