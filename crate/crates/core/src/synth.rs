//! Seeded synthetic objects, motions and frame sequences.
//!
//! Used to build fixtures and by the test and bench suites; every generator is
//! a pure function of its arguments.

use std::f64::consts::PI;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::cloud::{FrameSequence, PointCloud};
use crate::geom::Pose;
use crate::taskeval::TaskKind;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Surface samples of an asymmetric desk object about 12 x 8 x 7 cm: a box
/// with a spherical bump on top and a cylindrical handle on one side. The base
/// sits on z = 0 and the box is centered on the z axis.
pub fn object_surface(n: usize, seed: u64) -> PointCloud {
    let mut rng = rng(seed);
    let (hx, hy, hz) = (0.06, 0.04, 0.05);
    let faces = [
        (2.0 * hx) * (2.0 * hy),
        (2.0 * hx) * (2.0 * hy),
        (2.0 * hx) * hz,
        (2.0 * hx) * hz,
        (2.0 * hy) * hz,
        (2.0 * hy) * hz,
    ];
    let bump_r = 0.025;
    let bump_area = 2.0 * PI * bump_r * bump_r;
    let (handle_r, handle_h) = (0.008, 0.04);
    let handle_area = 2.0 * PI * handle_r * handle_h;
    let mut weights = faces.to_vec();
    weights.push(bump_area);
    weights.push(handle_area);
    let total: f64 = weights.iter().sum();

    let points = (0..n)
        .map(|_| {
            let mut pick = rng.random::<f64>() * total;
            let mut which = 0;
            while which + 1 < weights.len() && pick > weights[which] {
                pick -= weights[which];
                which += 1;
            }
            let (a, b): (f64, f64) = (rng.random(), rng.random());
            match which {
                0 => Vector3::new(hx * (2.0 * a - 1.0), hy * (2.0 * b - 1.0), 0.0),
                1 => Vector3::new(hx * (2.0 * a - 1.0), hy * (2.0 * b - 1.0), hz),
                2 => Vector3::new(hx * (2.0 * a - 1.0), -hy, hz * b),
                3 => Vector3::new(hx * (2.0 * a - 1.0), hy, hz * b),
                4 => Vector3::new(-hx, hy * (2.0 * a - 1.0), hz * b),
                5 => Vector3::new(hx, hy * (2.0 * a - 1.0), hz * b),
                6 => {
                    // Upper hemisphere, uniform by area.
                    let z = b;
                    let phi = 2.0 * PI * a;
                    let s = (1.0 - z * z).sqrt();
                    Vector3::new(0.03, 0.0, hz) + bump_r * Vector3::new(s * phi.cos(), s * phi.sin(), z)
                }
                _ => {
                    let phi = 2.0 * PI * a;
                    Vector3::new(-hx - handle_r, 0.015, 0.005) + Vector3::new(handle_r * phi.cos(), handle_r * phi.sin(), handle_h * b)
                }
            }
        })
        .collect();
    PointCloud::new(points)
}

/// Random rigid motion with rotation angle `rot` about a random axis and
/// translation of length `trans` in a random direction.
pub fn random_motion(rng: &mut impl Rng, rot: f64, trans: f64) -> Pose {
    let axis = random_unit(rng);
    let dir = random_unit(rng);
    Pose::new(axis * rot, dir * trans)
}

pub fn random_unit(rng: &mut impl Rng) -> Vector3<f64> {
    let nd = Normal::new(0.0, 1.0).expect("unit normal");
    loop {
        let v = Vector3::new(nd.sample(rng), nd.sample(rng), nd.sample(rng));
        let n = v.norm();
        if n > 1e-6 {
            return v / n;
        }
    }
}

pub fn add_noise(cloud: &PointCloud, sigma: f64, rng: &mut impl Rng) -> PointCloud {
    if sigma <= 0.0 {
        return cloud.clone();
    }
    let nd = Normal::new(0.0, sigma).expect("positive sigma");
    PointCloud::new(cloud.points.iter().map(|p| p + Vector3::new(nd.sample(rng), nd.sample(rng), nd.sample(rng))).collect())
}

/// One cloud per pose: the object (resampled each frame) moved by `poses[i]`
/// applied to its rest placement `rest`. `point_counts` overrides the
/// per-frame sample count when given.
pub fn sequence_from_poses(
    rest: &Pose,
    poses: &[Pose],
    points_per_frame: usize,
    point_counts: Option<&[usize]>,
    noise: f64,
    seed: u64,
) -> FrameSequence {
    let mut noise_rng = rng(seed ^ 0x5eed);
    let frames = poses
        .iter()
        .enumerate()
        .map(|(i, motion)| {
            let n = point_counts.map_or(points_per_frame, |c| c[i]);
            let body = object_surface(n, seed.wrapping_mul(1000).wrapping_add(i as u64));
            let placed = body.transformed(&crate::geom::compose(motion, rest));
            (i, add_noise(&placed, noise, &mut noise_rng))
        })
        .collect();
    FrameSequence::new("c", frames).expect("consecutive indices")
}

/// Smoothstep easing on `[0, 1]`.
fn ease(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Phase-local progress of `t` through `[a, b]`.
fn phase(t: f64, a: f64, b: f64) -> f64 {
    ease((t - a) / (b - a))
}

/// Hand-demonstration-like object motion for a task, as world motions about
/// center `u` (identity first). `target` is the horizontal goal offset for
/// pick-and-place and pour.
pub fn demo_motion(kind: TaskKind, u: &Vector3<f64>, target: &Vector3<f64>, n_frames: usize) -> Vec<Pose> {
    let n = n_frames.max(2);
    (0..n)
        .map(|i| {
            let t = i as f64 / (n - 1) as f64;
            let rel = match kind {
                TaskKind::PickPlace => {
                    let lift = 0.10 * (phase(t, 0.0, 0.3) - phase(t, 0.7, 1.0));
                    Pose::from_translation(target * phase(t, 0.2, 0.8) + Vector3::new(0.0, 0.0, lift))
                }
                TaskKind::Pour => {
                    let lift = 0.12 * phase(t, 0.0, 0.3);
                    let dir = Vector3::new(target.x, target.y, 0.0).normalize();
                    // Tip the top toward the goal.
                    let axis = Vector3::z().cross(&dir);
                    Pose::new(axis * (1.6 * phase(t, 0.55, 1.0)), target * phase(t, 0.2, 0.6) + Vector3::new(0.0, 0.0, lift))
                }
                TaskKind::Stir | TaskKind::Draw => {
                    let r = if kind == TaskKind::Stir { 0.04 } else { 0.05 };
                    let a = 2.0 * PI * 1.25 * phase(t, 0.2, 1.0);
                    let lift = 0.015 * phase(t, 0.0, 0.2);
                    let spiral = phase(t, 0.1, 0.3);
                    Pose::from_translation(Vector3::new(r * spiral * a.sin(), -r * spiral * a.cos(), lift))
                }
            };
            crate::geom::relative_to_world(&rel, u)
        })
        .collect()
}
