//! Dataset orchestration: perceive demonstrations, execute every anchor grasp
//! with the demonstrated trajectory in simulation, label and discard.

use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloud::{self, CloudError, FrameSequence, PointCloud};
use crate::exec::{self, Strategy};
use crate::geom::{resample_trajectory, to_object_frame, GeomError, Pose, PoseTrajectory, WaypointTrajectory, NUM_WAYPOINTS};
use crate::grasp::{generate_anchors, AnchorGraspSet, NUM_ANCHORS};
use crate::io::{self, IoError};
use crate::posegraph::{build_graph, optimize, GraphError, GraphParams, OptimizeStatus};
use crate::registration::{track_sequence, FrameStatus, IcpParams, RegistrationError, TrackParams};
use crate::simarm::{execute_grasp_trajectory, ArmModel, Failure, IkParams, Scene};
use crate::taskeval::{evaluate, TaskKind, TaskSpec, TaskThresholds};

pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("episode {id}: {source}")]
    Cloud { id: String, source: CloudError },
    #[error("episode {id}: {source}")]
    Io { id: String, source: IoError },
    #[error("episode {id}: tracking failed: {source}")]
    Tracking { id: String, source: RegistrationError },
    #[error("episode {id}: pose graph: {source}")]
    Graph { id: String, source: GraphError },
    #[error("episode {id}: {source}")]
    Trajectory { id: String, source: GeomError },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    ManifestIo(#[from] IoError),
}

impl PipelineError {
    /// Short discard reason stored in the dataset.
    pub fn reason(&self) -> String {
        match self {
            PipelineError::Tracking { .. } => "tracking".into(),
            PipelineError::Graph { .. } => "pose_graph".into(),
            PipelineError::Trajectory { .. } => "trajectory".into(),
            PipelineError::Cloud { .. } | PipelineError::Io { .. } => "input".into(),
            PipelineError::Manifest(_) | PipelineError::ManifestIo(_) => "manifest".into(),
        }
    }
}

/// Pinhole intrinsics plus the camera pose in frame `c`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    #[serde(default = "Pose::identity")]
    pub pose: Pose,
}

impl Camera {
    /// Pixel coordinates of `p`, or `None` behind the camera.
    pub fn project(&self, p: &Vector3<f64>) -> Option<[f64; 2]> {
        let q = self.pose.inverse().transform_point(p);
        (q.z > 0.0).then(|| [self.fx * q.x / q.z + self.cx, self.fy * q.y / q.z + self.cy])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEpisode {
    pub episode_id: String,
    pub task: TaskSpec,
    /// Point cloud frames (`.pcbin`), relative to the manifest directory.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub frames: Vec<String>,
    /// Previously tracked episode file, used instead of `frames`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trajectory: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub camera: Option<Camera>,
    pub episodes: Vec<ManifestEpisode>,
    /// Directory relative paths resolve against; set on load.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let path = path.as_ref();
        let mut m: Manifest = io::read_json(path)?;
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let mut ids: Vec<&str> = self.episodes.iter().map(|e| e.episode_id.as_str()).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(PipelineError::Manifest(format!("duplicate episode id {}", w[0])));
        }
        for e in &self.episodes {
            if e.frames.is_empty() == e.trajectory.is_none() {
                return Err(PipelineError::Manifest(format!("episode {}: give exactly one of `frames` or `trajectory`", e.episode_id)));
            }
        }
        Ok(())
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.base_dir.join(rel)
    }

    /// Every input file referenced by the manifest that does not exist.
    pub fn missing_files(&self) -> Vec<(String, PathBuf)> {
        self.episodes
            .iter()
            .flat_map(|e| e.frames.iter().chain(&e.trajectory).map(move |f| (e.episode_id.clone(), self.resolve(f))))
            .filter(|(_, p)| !p.is_file())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineParams {
    pub track: TrackParams,
    pub icp: IcpParams,
    pub graph: GraphParams,
    pub ik: IkParams,
    pub thresholds: TaskThresholds,
    pub scene: Scene,
    /// Anchor grasp offset back along the approach axis.
    pub standoff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackReport {
    pub frames: usize,
    pub reference_index: usize,
    pub tracked: usize,
    pub skipped: usize,
    pub jump_rejected: usize,
    pub registration_failed: usize,
    pub before_reference: usize,
    pub edges: usize,
    pub valid_edges: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    pub status: OptimizeStatus,
}

/// Output of the perceive step for one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackedEpisode {
    pub episode_id: String,
    #[serde(with = "crate::serde_vec3")]
    pub u: Vector3<f64>,
    /// World motion of the object per frame, identity at the reference frame.
    pub trajectory: PoseTrajectory,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<TrackReport>,
}

/// Outlier removal, frame-to-frame tracking and pose-graph refinement.
/// Frames before the first one with enough points are dropped.
pub fn perceive(id: &str, seq: &FrameSequence, params: &PipelineParams, strategy: Strategy) -> Result<TrackedEpisode, PipelineError> {
    let tp = &params.track;
    let cleaned = exec::map(strategy, seq.frames(), |(i, c)| (*i, cloud::remove_outliers(c, tp.outlier_neighbors, tp.outlier_std_ratio)));
    let cleaned = FrameSequence::new(seq.frame_id.clone(), cleaned).map_err(|source| PipelineError::Cloud { id: id.into(), source })?;
    let track = track_sequence(&cleaned, tp, &params.icp).map_err(|source| PipelineError::Tracking { id: id.into(), source })?;

    let r = track.reference;
    let tail = FrameSequence::new(seq.frame_id.clone(), cleaned.frames()[r..].to_vec()).expect("suffix of a valid sequence");
    let traj = PoseTrajectory::new(seq.frame_id.clone(), track.trajectory.entries()[r..].to_vec()).expect("suffix of a valid trajectory");
    let u = cloud::object_center(&tail.frames()[0].1).map_err(|source| PipelineError::Cloud { id: id.into(), source })?;

    let graph = build_graph(&traj, &tail, &params.graph, &params.icp, strategy).map_err(|source| PipelineError::Graph { id: id.into(), source })?;
    let opt = optimize(&graph, &params.graph).map_err(|source| PipelineError::Graph { id: id.into(), source })?;

    let report = TrackReport {
        frames: seq.len(),
        reference_index: seq.frames()[r].0,
        tracked: track.count(FrameStatus::Tracked),
        skipped: track.count(FrameStatus::Skipped),
        jump_rejected: track.count(FrameStatus::JumpRejected),
        registration_failed: track.count(FrameStatus::RegistrationFailed),
        before_reference: track.count(FrameStatus::BeforeReference),
        edges: graph.edges.len(),
        valid_edges: graph.edges.iter().filter(|e| e.valid).count(),
        initial_cost: opt.initial_cost,
        final_cost: opt.final_cost,
        iterations: opt.iterations,
        status: opt.status,
    };
    Ok(TrackedEpisode { episode_id: id.into(), u, trajectory: opt.trajectory, report: Some(report) })
}

pub fn load_frames(manifest: &Manifest, ep: &ManifestEpisode) -> Result<FrameSequence, PipelineError> {
    let frames = ep
        .frames
        .iter()
        .enumerate()
        .map(|(i, f)| cloud::load_pcbin(manifest.resolve(f)).map(|c| (i, c)))
        .collect::<Result<Vec<(usize, PointCloud)>, _>>()
        .map_err(|source| PipelineError::Cloud { id: ep.episode_id.clone(), source })?;
    FrameSequence::new("c", frames).map_err(|source| PipelineError::Cloud { id: ep.episode_id.clone(), source })
}

/// Tracked trajectory for an episode, from its clouds or its stored file.
pub fn episode_trajectory(manifest: &Manifest, ep: &ManifestEpisode, params: &PipelineParams, strategy: Strategy) -> Result<TrackedEpisode, PipelineError> {
    match &ep.trajectory {
        Some(f) => io::read_json(manifest.resolve(f)).map_err(|source| PipelineError::Io { id: ep.episode_id.clone(), source }),
        None => perceive(&ep.episode_id, &load_frames(manifest, ep)?, params, strategy),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnchorOutcome {
    pub failure: Failure,
    /// Task criterion on the realized trajectory; false when execution failed.
    pub task_success: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode_id: String,
    #[serde(with = "crate::serde_vec3")]
    pub u: Vector3<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub goal2d: Option<[f64; 2]>,
    /// Task as evaluated, with goals filled in from the demonstration.
    pub task: TaskSpec,
    pub waypoints: WaypointTrajectory,
    pub grasp_labels: [Option<bool>; NUM_ANCHORS],
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub outcomes: Vec<AnchorOutcome>,
    pub discarded: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub discard_reason: Option<String>,
}

impl EpisodeRecord {
    fn discarded(id: &str, task: TaskSpec, reason: String) -> Self {
        Self {
            episode_id: id.into(),
            u: Vector3::zeros(),
            goal2d: None,
            task,
            waypoints: WaypointTrajectory::identity(),
            grasp_labels: [Some(false); NUM_ANCHORS],
            outcomes: Vec::new(),
            discarded: true,
            discard_reason: Some(reason),
        }
    }

    pub fn labels(&self) -> [bool; NUM_ANCHORS] {
        self.grasp_labels.map(|l| l.unwrap_or(false))
    }
}

/// Label every anchor for one demonstrated trajectory.
///
/// For pick-and-place and pour the goal is the demonstration's final object
/// center.
#[allow(clippy::too_many_arguments)]
pub fn filter_episode(
    id: &str,
    traj: &PoseTrajectory,
    u: &Vector3<f64>,
    task: &TaskSpec,
    anchors: &AnchorGraspSet,
    arm: &ArmModel,
    params: &PipelineParams,
    strategy: Strategy,
) -> EpisodeRecord {
    let mut task = task.clone();
    if matches!(task.kind, TaskKind::PickPlace | TaskKind::Pour) {
        task.goal3d = Some(traj.last().transform_point(u));
    }
    let rel = to_object_frame(traj, u);
    let waypoints = match resample_trajectory(&rel, NUM_WAYPOINTS).and_then(WaypointTrajectory::try_from) {
        Ok(w) => w,
        Err(e) => return EpisodeRecord::discarded(id, task, format!("trajectory: {e}")),
    };
    let outcomes = exec::map(strategy, &anchors.anchors, |g| {
        let res = execute_grasp_trajectory(arm, g, waypoints.waypoints(), u, &params.scene, &params.ik);
        let task_success = res.success && evaluate(&task, &res.realized_traj, u, &params.thresholds).unwrap_or(false);
        AnchorOutcome { failure: res.failure, task_success }
    });
    let grasp_labels: [Option<bool>; NUM_ANCHORS] = std::array::from_fn(|k| Some(outcomes[k].task_success));
    let discarded = grasp_labels.iter().all(|l| *l == Some(false));
    EpisodeRecord {
        episode_id: id.into(),
        u: *u,
        goal2d: None,
        task,
        waypoints,
        grasp_labels,
        outcomes,
        discarded,
        discard_reason: discarded.then(|| "no_feasible_grasp".to_string()),
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DatasetStats {
    pub total: usize,
    pub discarded: usize,
    pub per_anchor_success: [usize; NUM_ANCHORS],
}

impl DatasetStats {
    pub fn from_records(records: &[EpisodeRecord]) -> Self {
        let mut s = DatasetStats { total: records.len(), ..Default::default() };
        for r in records {
            s.discarded += r.discarded as usize;
            for (k, l) in r.labels().iter().enumerate() {
                s.per_anchor_success[k] += *l as usize;
            }
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilteredDataset {
    pub version: u32,
    pub arm_name: String,
    pub records: Vec<EpisodeRecord>,
    pub stats: DatasetStats,
}

impl FilteredDataset {
    pub fn new(arm_name: impl Into<String>, mut records: Vec<EpisodeRecord>) -> Self {
        records.sort_by(|a, b| a.episode_id.cmp(&b.episode_id));
        let stats = DatasetStats::from_records(&records);
        Self { version: DATASET_VERSION, arm_name: arm_name.into(), records, stats }
    }

    pub fn kept(&self) -> impl Iterator<Item = &EpisodeRecord> {
        self.records.iter().filter(|r| !r.discarded)
    }
}

/// Filter one manifest episode end to end. Failures become discarded records.
pub fn process_episode(manifest: &Manifest, ep: &ManifestEpisode, arm: &ArmModel, params: &PipelineParams, strategy: Strategy) -> EpisodeRecord {
    let tracked = match episode_trajectory(manifest, ep, params, strategy) {
        Ok(t) => t,
        Err(e) => {
            log::warn!("{e}");
            return EpisodeRecord::discarded(&ep.episode_id, ep.task.clone(), e.reason());
        }
    };
    let anchors = generate_anchors(&tracked.u, params.standoff);
    let mut rec = filter_episode(&ep.episode_id, &tracked.trajectory, &tracked.u, &ep.task, &anchors, arm, params, strategy);
    if ep.task.kind == TaskKind::PickPlace {
        if let Some(cam) = &manifest.camera {
            rec.goal2d = cam.project(&tracked.trajectory.last().transform_point(&tracked.u));
        }
    }
    rec
}

/// Filter every episode of a manifest. Output order is by episode id and
/// does not depend on scheduling.
pub fn run_dataset(manifest: &Manifest, arm: &ArmModel, params: &PipelineParams, strategy: Strategy) -> FilteredDataset {
    let records = exec::map(strategy, &manifest.episodes, |ep| process_episode(manifest, ep, arm, params, strategy));
    FilteredDataset::new(arm.name.clone(), records)
}
