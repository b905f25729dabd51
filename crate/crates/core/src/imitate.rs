//! Linear stand-in for the imitation policy: predicts the 16 relative
//! waypoints and the 8 anchor success probabilities from the object center
//! and the 2D goal point.
//!
//! Stage 1 fits the trajectory head in closed form (ridge regression).
//! Stage 2 trains the logistic grasp head by full-batch gradient descent on
//! the mean binary cross-entropy.

use nalgebra::{DMatrix, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::filterpipe::{EpisodeRecord, FilteredDataset};
use crate::geom::{Pose, WaypointTrajectory, NUM_WAYPOINTS};
use crate::grasp::{GraspScores, NUM_ANCHORS};

pub const MODEL_VERSION: u32 = 1;
/// Raw features: u (3) and goal2d (2).
pub const NUM_FEATURES: usize = 5;
pub const TRAJ_OUTPUTS: usize = NUM_WAYPOINTS * 6;
/// Fewer kept episodes than this counts as small data.
pub const SMALL_DATA_EPISODES: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ImitateError {
    #[error("dataset has no kept episodes")]
    EmptyDataset,
    #[error("stage 2 requires a stage-1 model")]
    StageOrder,
    #[error("model is not trained")]
    Untrained,
    #[error("model version {0} is not supported")]
    Version(u32),
    #[error("model weights have the wrong shape")]
    Shape,
    #[error("non-finite features")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    #[serde(with = "crate::serde_vec3")]
    pub u: Vector3<f64>,
    #[serde(default)]
    pub goal2d: [f64; 2],
}

impl FeatureVector {
    pub fn new(u: Vector3<f64>, goal2d: Option<[f64; 2]>) -> Self {
        Self { u, goal2d: goal2d.unwrap_or([0.0; 2]) }
    }

    pub fn of(rec: &EpisodeRecord) -> Self {
        Self::new(rec.u, rec.goal2d)
    }

    fn raw(&self) -> [f64; NUM_FEATURES] {
        [self.u.x, self.u.y, self.u.z, self.goal2d[0], self.goal2d[1]]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Trajectory,
    Grasp,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainParams {
    pub ridge: f64,
    pub lr: f64,
    /// Multiplier on `lr` in the small-data regime.
    pub small_data_lr_scale: f64,
    pub epochs: usize,
    /// Weight of the grasp loss in the joint objective used with enough data.
    pub joint_grasp_weight: f64,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self { ridge: 1e-6, lr: 1e-4, small_data_lr_scale: 0.1, epochs: 500, joint_grasp_weight: 0.01 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyModel {
    pub version: u32,
    /// Per-feature standardization fitted on the stage-1 data.
    pub feature_mean: [f64; NUM_FEATURES],
    pub feature_scale: [f64; NUM_FEATURES],
    /// `TRAJ_OUTPUTS` rows of `NUM_FEATURES + 1` weights, bias last.
    pub traj_weights: Vec<Vec<f64>>,
    /// `NUM_ANCHORS` rows of `NUM_FEATURES + 1` weights, bias last.
    pub grasp_weights: Vec<Vec<f64>>,
    pub trained_stages: Vec<Stage>,
    /// Mean squared error of the trajectory head on its training data.
    pub traj_loss: Option<f64>,
    /// Mean BCE after each stage-2 epoch.
    #[serde(default)]
    pub grasp_loss_history: Vec<f64>,
}

impl PolicyModel {
    pub fn untrained() -> Self {
        Self {
            version: MODEL_VERSION,
            feature_mean: [0.0; NUM_FEATURES],
            feature_scale: [1.0; NUM_FEATURES],
            traj_weights: vec![vec![0.0; NUM_FEATURES + 1]; TRAJ_OUTPUTS],
            grasp_weights: vec![vec![0.0; NUM_FEATURES + 1]; NUM_ANCHORS],
            trained_stages: Vec::new(),
            traj_loss: None,
            grasp_loss_history: Vec::new(),
        }
    }

    pub fn has(&self, s: Stage) -> bool {
        self.trained_stages.contains(&s)
    }

    pub fn check(&self) -> Result<(), ImitateError> {
        if self.version != MODEL_VERSION {
            return Err(ImitateError::Version(self.version));
        }
        let ok = |w: &Vec<Vec<f64>>, rows: usize| w.len() == rows && w.iter().all(|r| r.len() == NUM_FEATURES + 1);
        if !ok(&self.traj_weights, TRAJ_OUTPUTS) || !ok(&self.grasp_weights, NUM_ANCHORS) {
            return Err(ImitateError::Shape);
        }
        Ok(())
    }

    /// Standardized features with a trailing 1.
    fn design_row(&self, f: &FeatureVector) -> [f64; NUM_FEATURES + 1] {
        let raw = f.raw();
        std::array::from_fn(|k| if k == NUM_FEATURES { 1.0 } else { (raw[k] - self.feature_mean[k]) / self.feature_scale[k] })
    }
}

fn flatten(w: &WaypointTrajectory) -> Vec<f64> {
    w.waypoints().iter().flat_map(|p| p.rotvec.iter().chain(p.trans.iter()).copied().collect::<Vec<_>>()).collect()
}

fn targets(recs: &[&EpisodeRecord]) -> DMatrix<f64> {
    let rows: Vec<Vec<f64>> = recs.iter().map(|r| flatten(&r.waypoints)).collect();
    DMatrix::from_fn(recs.len(), TRAJ_OUTPUTS, |i, o| rows[i][o])
}

fn design(model: &PolicyModel, feats: &[FeatureVector]) -> DMatrix<f64> {
    DMatrix::from_fn(feats.len(), NUM_FEATURES + 1, |i, k| model.design_row(&feats[i])[k])
}

fn fit_standardization(feats: &[FeatureVector]) -> ([f64; NUM_FEATURES], [f64; NUM_FEATURES]) {
    let n = feats.len() as f64;
    let mut mean = [0.0; NUM_FEATURES];
    let mut scale = [1.0; NUM_FEATURES];
    for k in 0..NUM_FEATURES {
        mean[k] = feats.iter().map(|f| f.raw()[k]).sum::<f64>() / n;
        let var = feats.iter().map(|f| (f.raw()[k] - mean[k]).powi(2)).sum::<f64>() / n;
        // Constant features stay centered at zero.
        if var.sqrt() > 1e-12 {
            scale[k] = var.sqrt();
        }
    }
    (mean, scale)
}

/// Ridge solution with an unpenalized bias column.
fn ridge(x: &DMatrix<f64>, y: &DMatrix<f64>, lambda: f64) -> DMatrix<f64> {
    let n = x.nrows() as f64;
    let mut a = x.transpose() * x / n;
    for k in 0..NUM_FEATURES {
        a[(k, k)] += lambda;
    }
    let b = x.transpose() * y / n;
    match a.clone().cholesky() {
        Some(c) => c.solve(&b),
        None => a.pseudo_inverse(1e-12).expect("svd") * b,
    }
}

pub fn traj_mse(model: &PolicyModel, feats: &[FeatureVector], targets: &DMatrix<f64>) -> f64 {
    let x = design(model, feats);
    let w = DMatrix::from_fn(NUM_FEATURES + 1, TRAJ_OUTPUTS, |k, o| model.traj_weights[o][k]);
    let r = x * w - targets;
    r.norm_squared() / (r.nrows() * r.ncols()).max(1) as f64
}

/// Stage 1: closed-form fit of the trajectory head.
pub fn train_stage1(dataset: &FilteredDataset, params: &TrainParams) -> Result<PolicyModel, ImitateError> {
    let recs = dataset.kept().collect::<Vec<_>>();
    if recs.is_empty() {
        return Err(ImitateError::EmptyDataset);
    }
    let feats: Vec<FeatureVector> = recs.iter().map(|r| FeatureVector::of(r)).collect();
    if feats.iter().any(|f| f.raw().iter().any(|v| !v.is_finite())) {
        return Err(ImitateError::NonFinite);
    }
    let mut model = PolicyModel::untrained();
    (model.feature_mean, model.feature_scale) = fit_standardization(&feats);
    let x = design(&model, &feats);
    let y = targets(&recs);
    let w = ridge(&x, &y, params.ridge);
    model.traj_weights = (0..TRAJ_OUTPUTS).map(|o| (0..=NUM_FEATURES).map(|k| w[(k, o)]).collect()).collect();
    model.traj_loss = Some(traj_mse(&model, &feats, &y));
    model.trained_stages = vec![Stage::Trajectory];
    Ok(model)
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean BCE over all (episode, anchor) pairs, computed from logits.
fn bce(logits: &DMatrix<f64>, labels: &DMatrix<f64>) -> f64 {
    let mut total = 0.0;
    for (z, y) in logits.iter().zip(labels.iter()) {
        // log(1 + e^z) - y z, stable for large |z|.
        let softplus = if *z > 0.0 { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() };
        total += softplus - y * z;
    }
    total / logits.len().max(1) as f64
}

/// Stage 2: grasp head by gradient descent on the mean BCE. With
/// `small_data` the trajectory head is left untouched and the learning rate
/// is scaled down; otherwise both heads are trained on the joint objective.
pub fn train_stage2(model: &PolicyModel, dataset: &FilteredDataset, small_data: bool, params: &TrainParams) -> Result<PolicyModel, ImitateError> {
    if !model.has(Stage::Trajectory) {
        return Err(ImitateError::StageOrder);
    }
    model.check()?;
    let recs = dataset.kept().collect::<Vec<_>>();
    if recs.is_empty() {
        return Err(ImitateError::EmptyDataset);
    }
    let feats: Vec<FeatureVector> = recs.iter().map(|r| FeatureVector::of(r)).collect();
    let x = design(model, &feats);
    let labels = DMatrix::from_fn(recs.len(), NUM_ANCHORS, |i, k| if recs[i].labels()[k] { 1.0 } else { 0.0 });
    let lr = if small_data { params.lr * params.small_data_lr_scale } else { params.lr };
    let mut w = DMatrix::from_fn(NUM_FEATURES + 1, NUM_ANCHORS, |k, a| model.grasp_weights[a][k]);
    let n = (recs.len() * NUM_ANCHORS) as f64;

    // The grasp head shares no parameters with the trajectory head, so under
    // the joint objective the trajectory part has the ridge minimizer and the
    // grasp gradient is scaled by its loss weight.
    let mut out = model.clone();
    let step = if small_data {
        lr
    } else {
        let y = targets(&recs);
        let tw = ridge(&x, &y, params.ridge);
        out.traj_weights = (0..TRAJ_OUTPUTS).map(|o| (0..=NUM_FEATURES).map(|k| tw[(k, o)]).collect()).collect();
        out.traj_loss = Some(traj_mse(&out, &feats, &y));
        lr * params.joint_grasp_weight
    };
    let mut history = Vec::with_capacity(params.epochs);
    for _ in 0..params.epochs {
        let probs = (&x * &w).map(sigmoid);
        let grad = x.transpose() * (probs - &labels) / n;
        w -= grad * step;
        history.push(bce(&(&x * &w), &labels));
    }
    out.grasp_weights = (0..NUM_ANCHORS).map(|a| (0..=NUM_FEATURES).map(|k| w[(k, a)]).collect()).collect();
    out.grasp_loss_history = history;
    if !out.has(Stage::Grasp) {
        out.trained_stages.push(Stage::Grasp);
    }
    Ok(out)
}

/// Both stages, choosing the regime from the number of kept episodes.
pub fn train(dataset: &FilteredDataset, params: &TrainParams) -> Result<PolicyModel, ImitateError> {
    let m = train_stage1(dataset, params)?;
    let small = dataset.kept().count() < SMALL_DATA_EPISODES;
    train_stage2(&m, dataset, small, params)
}

/// Waypoints from the trajectory head, with waypoint 0 set to identity.
pub fn predict_waypoints(model: &PolicyModel, f: &FeatureVector) -> Result<WaypointTrajectory, ImitateError> {
    if !model.has(Stage::Trajectory) {
        return Err(ImitateError::Untrained);
    }
    model.check()?;
    let row = model.design_row(f);
    let out: Vec<f64> = model.traj_weights.iter().map(|w| w.iter().zip(&row).map(|(a, b)| a * b).sum()).collect();
    let poses: Vec<Pose> = (0..NUM_WAYPOINTS)
        .map(|i| {
            if i == 0 {
                return Pose::identity();
            }
            let o = &out[6 * i..6 * i + 6];
            Pose::new(Vector3::new(o[0], o[1], o[2]), Vector3::new(o[3], o[4], o[5]))
        })
        .collect();
    WaypointTrajectory::try_from(poses).map_err(|_| ImitateError::NonFinite)
}

pub fn predict_scores(model: &PolicyModel, f: &FeatureVector) -> Result<GraspScores, ImitateError> {
    if !model.has(Stage::Grasp) {
        return Err(ImitateError::Untrained);
    }
    model.check()?;
    let row = model.design_row(f);
    let s: [f64; NUM_ANCHORS] = std::array::from_fn(|a| sigmoid(model.grasp_weights[a].iter().zip(&row).map(|(w, x)| w * x).sum()));
    GraspScores::new(s).map_err(|_| ImitateError::NonFinite)
}

pub fn predict(model: &PolicyModel, f: &FeatureVector) -> Result<(WaypointTrajectory, GraspScores), ImitateError> {
    if !model.has(Stage::Trajectory) || !model.has(Stage::Grasp) {
        return Err(ImitateError::Untrained);
    }
    Ok((predict_waypoints(model, f)?, predict_scores(model, f)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taskeval::TaskSpec;
    use crate::synth;
    use rand::Rng;

    /// Waypoints depend linearly on `u`; anchor `k` succeeds iff `k` is odd
    /// and `u.x` is above 0.45.
    fn record(id: usize, u: Vector3<f64>) -> EpisodeRecord {
        let poses: Vec<Pose> = (0..NUM_WAYPOINTS)
            .map(|i| {
                let s = i as f64 / (NUM_WAYPOINTS - 1) as f64;
                Pose::new(Vector3::new(0.0, 0.0, s * u.y), Vector3::new(s * 0.1, s * (u.x - 0.4), s * 0.05))
            })
            .collect();
        let labels = std::array::from_fn(|k| Some(k % 2 == 1 && u.x > 0.45));
        EpisodeRecord {
            episode_id: format!("ep{id:03}"),
            u,
            goal2d: Some([u.x * 100.0, u.y * 50.0]),
            task: TaskSpec::stir(u, 0.0),
            waypoints: WaypointTrajectory::try_from(poses).unwrap(),
            grasp_labels: labels,
            outcomes: vec![],
            discarded: false,
            discard_reason: None,
        }
    }

    fn dataset(n: usize, seed: u64) -> FilteredDataset {
        let mut rng = synth::rng(seed);
        let recs = (0..n)
            .map(|i| record(i, Vector3::new(rng.random_range(0.35..0.55), rng.random_range(-0.2..0.2), rng.random_range(0.02..0.05))))
            .collect();
        FilteredDataset::new("test", recs)
    }

    #[test]
    fn stage1_recovers_linear_targets() {
        let d = dataset(30, 1);
        let m = train_stage1(&d, &TrainParams::default()).unwrap();
        assert!(m.traj_loss.unwrap() < 1e-12);
        let u = Vector3::new(0.47, 0.1, 0.03);
        let w = predict_waypoints(&m, &FeatureVector::new(u, Some([47.0, 5.0]))).unwrap();
        let want = record(0, u).waypoints;
        assert_eq!(w.waypoints()[0], Pose::identity());
        for (a, b) in w.waypoints().iter().zip(want.waypoints()) {
            assert!((a.trans - b.trans).norm() < 1e-6 && (a.rotvec - b.rotvec).norm() < 1e-6);
        }
    }

    #[test]
    fn stage_order_and_empty_data() {
        let d = dataset(5, 2);
        let p = TrainParams::default();
        assert_eq!(train_stage2(&PolicyModel::untrained(), &d, true, &p), Err(ImitateError::StageOrder));
        assert_eq!(train_stage1(&FilteredDataset::new("x", vec![]), &p), Err(ImitateError::EmptyDataset));
        let m = train_stage1(&d, &p).unwrap();
        assert_eq!(predict(&m, &FeatureVector::new(Vector3::zeros(), None)).unwrap_err(), ImitateError::Untrained);
    }

    #[test]
    fn small_data_freezes_trajectory_head() {
        let d = dataset(20, 3);
        let p = TrainParams::default();
        let m1 = train_stage1(&d, &p).unwrap();
        let m2 = train_stage2(&m1, &d, true, &p).unwrap();
        assert_eq!(m1.traj_weights, m2.traj_weights);
        assert_ne!(m1.grasp_weights, m2.grasp_weights);
        assert_eq!(m2.grasp_loss_history.len(), p.epochs);
        let h = &m2.grasp_loss_history;
        assert!(h.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn separable_labels_rank_positive_anchors_first() {
        let d = dataset(60, 4);
        let p = TrainParams { lr: 1.0, small_data_lr_scale: 1.0, epochs: 2000, ..TrainParams::default() };
        let m = train(&d, &p).unwrap();
        let h = &m.grasp_loss_history;
        assert!(h.last().unwrap() < &0.2, "{}", h.last().unwrap());
        let f = FeatureVector::new(Vector3::new(0.53, 0.0, 0.03), Some([53.0, 0.0]));
        let s = predict_scores(&m, &f).unwrap();
        for k in 0..NUM_ANCHORS {
            assert_eq!(s.values()[k] > 0.5, k % 2 == 1, "{:?}", s.values());
        }
    }

    #[test]
    fn single_episode_and_constant_features() {
        let one = FilteredDataset::new("t", vec![record(0, Vector3::new(0.5, 0.1, 0.03))]);
        assert!(train_stage1(&one, &TrainParams::default()).unwrap().traj_loss.unwrap() < 1e-12);
        let u = Vector3::new(0.5, 0.0, 0.03);
        let mut a = record(0, u);
        let b = record(1, Vector3::new(0.4, 0.2, 0.03));
        a.waypoints = record(2, Vector3::new(0.3, -0.1, 0.0)).waypoints;
        let mut b2 = b.clone();
        b2.u = u;
        b2.goal2d = a.goal2d;
        let m = train_stage1(&FilteredDataset::new("t", vec![a.clone(), b2.clone()]), &TrainParams::default()).unwrap();
        let got = predict_waypoints(&m, &FeatureVector::of(&a)).unwrap();
        for i in 1..NUM_WAYPOINTS {
            let (p, q, r) = (got.waypoints()[i], a.waypoints.waypoints()[i], b2.waypoints.waypoints()[i]);
            assert!((p.trans - (q.trans + r.trans) / 2.0).norm() < 1e-9);
        }
    }

    #[test]
    fn noisy_linear_map_is_recovered() {
        let mut d = dataset(200, 6);
        let mut rng = synth::rng(60);
        let sigma = 1e-3;
        let clean = d.clone();
        for r in &mut d.records {
            let poses: Vec<Pose> = r.waypoints.waypoints().iter().map(|p| Pose::new(p.rotvec, p.trans + sigma * synth::random_unit(&mut rng))).collect();
            r.waypoints = WaypointTrajectory::try_from(poses).unwrap();
        }
        let m = train_stage1(&d, &TrainParams::default()).unwrap();
        for r in clean.records.iter().take(20) {
            let w = predict_waypoints(&m, &FeatureVector::of(r)).unwrap();
            for (a, b) in w.waypoints().iter().zip(r.waypoints.waypoints()).skip(1) {
                assert!((a.trans - b.trans).norm() < 3.0 * sigma);
            }
        }
    }

    #[test]
    fn uninformative_features_rank_by_label_frequency() {
        let u = Vector3::new(0.45, 0.0, 0.03);
        let mut rng = synth::rng(7);
        let rates: [f64; NUM_ANCHORS] = [0.1, 0.6, 0.3, 0.8, 0.2, 0.5, 0.05, 0.4];
        let recs: Vec<EpisodeRecord> = (0..50)
            .map(|i| {
                let mut r = record(i, u);
                r.grasp_labels = std::array::from_fn(|k| Some(rng.random::<f64>() < rates[k]));
                r
            })
            .collect();
        let d = FilteredDataset::new("t", recs);
        let freq: [f64; NUM_ANCHORS] = std::array::from_fn(|k| d.records.iter().filter(|r| r.labels()[k]).count() as f64 / 50.0);
        let m = train(&d, &TrainParams::default()).unwrap();
        let predicted = predict_scores(&m, &FeatureVector::of(&d.records[0])).unwrap();
        let empirical = GraspScores::new(freq).unwrap();
        let anchors = crate::grasp::generate_anchors(&u, 0.0);
        let cands = crate::grasp::generate_candidates_grid(&u, 3, 0.2, 11);
        let sel = |s: &GraspScores| crate::grasp::select_grasp(&cands, s, &anchors).unwrap().0;
        assert_eq!(sel(&predicted), sel(&empirical));
        assert!(predicted.values().iter().all(|s| *s > 0.0 && *s < 1.0));
    }

    #[test]
    fn model_roundtrips_through_json() {
        let d = dataset(10, 5);
        let m = train(&d, &TrainParams { epochs: 5, ..TrainParams::default() }).unwrap();
        let s = crate::io::to_json_string(&m).unwrap();
        let back: PolicyModel = serde_json::from_str(&s).unwrap();
        assert_eq!(m, back);
        let mut bad = back.clone();
        bad.grasp_weights.pop();
        assert_eq!(bad.check(), Err(ImitateError::Shape));
    }
}
