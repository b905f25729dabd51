//! Success evaluators for the pick-and-place, pour, stir and draw tasks.
//!
//! Trajectories are world motions of the object (identity at the start);
//! the center path is `u` carried by each pose.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{Pose, PoseTrajectory};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TaskError {
    #[error("{kind:?} task requires `{field}`")]
    MissingField { kind: TaskKind, field: &'static str },
    #[error("empty trajectory")]
    EmptyTrajectory,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskKind {
    PickPlace,
    Pour,
    Stir,
    Draw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    #[serde(default, with = "crate::serde_vec3::option", skip_serializing_if = "Option::is_none")]
    pub goal3d: Option<Vector3<f64>>,
    #[serde(default, with = "crate::serde_vec3::option", skip_serializing_if = "Option::is_none")]
    pub region_center: Option<Vector3<f64>>,
    pub table_height: f64,
    /// Object up direction at the first frame.
    #[serde(with = "crate::serde_vec3", default = "up")]
    pub upright_axis: Vector3<f64>,
}

fn up() -> Vector3<f64> {
    Vector3::z()
}

impl TaskSpec {
    pub fn pick_place(goal: Vector3<f64>, table_height: f64) -> Self {
        Self { kind: TaskKind::PickPlace, goal3d: Some(goal), region_center: None, table_height, upright_axis: up() }
    }

    pub fn pour(goal: Vector3<f64>, table_height: f64) -> Self {
        Self { kind: TaskKind::Pour, goal3d: Some(goal), region_center: None, table_height, upright_axis: up() }
    }

    pub fn stir(center: Vector3<f64>, table_height: f64) -> Self {
        Self { kind: TaskKind::Stir, goal3d: None, region_center: Some(center), table_height, upright_axis: up() }
    }

    pub fn draw(center: Vector3<f64>, table_height: f64) -> Self {
        Self { kind: TaskKind::Draw, goal3d: None, region_center: Some(center), table_height, upright_axis: up() }
    }

    fn goal(&self) -> Result<Vector3<f64>, TaskError> {
        self.goal3d.ok_or(TaskError::MissingField { kind: self.kind, field: "goal3d" })
    }

    fn region(&self) -> Result<Vector3<f64>, TaskError> {
        self.region_center.ok_or(TaskError::MissingField { kind: self.kind, field: "region_center" })
    }
}

/// Lengths in meters, angles in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskThresholds {
    pub pp_table: f64,
    pub pp_pos: f64,
    pub pp_upright: f64,
    pub pour_tilt: f64,
    pub pour_pos: f64,
    pub stir_h: f64,
    pub stir_r: f64,
    pub stir_path: f64,
    pub draw_h: f64,
    pub draw_r: f64,
    pub draw_path: f64,
}

impl Default for TaskThresholds {
    fn default() -> Self {
        Self {
            pp_table: 0.15,
            pp_pos: 0.08,
            pp_upright: 45.0,
            pour_tilt: 60.0,
            pour_pos: 0.08,
            stir_h: 0.08,
            stir_r: 0.15,
            stir_path: 0.10,
            draw_h: 0.05,
            draw_r: 0.12,
            draw_path: 0.20,
        }
    }
}

/// Angle in degrees between two directions.
fn angle_deg(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    a.cross(b).norm().atan2(a.dot(b)).to_degrees()
}

pub fn center_path(traj: &PoseTrajectory, u: &Vector3<f64>) -> Vec<Vector3<f64>> {
    traj.poses().map(|p| p.transform_point(u)).collect()
}

fn inside_cylinder(p: &Vector3<f64>, c: &Vector3<f64>, r: f64, h: f64) -> bool {
    let d = p - c;
    (d.x * d.x + d.y * d.y).sqrt() <= r && d.z.abs() <= h / 2.0
}

/// Length of the polyline restricted to segments with both ends inside the
/// cylinder of radius `r` and height `h` centered on `c`.
pub fn path_in_cylinder(path: &[Vector3<f64>], c: &Vector3<f64>, r: f64, h: f64) -> f64 {
    path.windows(2)
        .filter(|w| inside_cylinder(&w[0], c, r, h) && inside_cylinder(&w[1], c, r, h))
        .map(|w| (w[1] - w[0]).norm())
        .sum()
}

/// Per-criterion breakdown of a verdict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub success: bool,
    pub checks: Vec<(String, f64, bool)>,
}

pub fn evaluate_detailed(task: &TaskSpec, traj: &PoseTrajectory, u: &Vector3<f64>, th: &TaskThresholds) -> Result<Verdict, TaskError> {
    if traj.is_empty() {
        return Err(TaskError::EmptyTrajectory);
    }
    let path = center_path(traj, u);
    let (first, last): (&Pose, &Pose) = (traj.first(), traj.last());
    let start = path[0];
    let end = *path.last().expect("nonempty");
    let up0 = first.transform_vector(&task.upright_axis);
    let up1 = last.transform_vector(&task.upright_axis);
    let tilt = angle_deg(&up0, &up1);

    let mut checks = Vec::new();
    let mut check = |name: &str, value: f64, ok: bool| checks.push((name.to_string(), value, ok));
    match task.kind {
        TaskKind::PickPlace => {
            let goal = task.goal()?;
            let height = end.z - task.table_height;
            check("height", height, height <= th.pp_table);
            let dist = (end - goal).norm();
            check("goal_distance", dist, dist <= th.pp_pos);
            check("tilt_deg", tilt, tilt <= th.pp_upright);
        }
        TaskKind::Pour => {
            let goal = task.goal()?;
            check("tilt_deg", tilt, tilt > th.pour_tilt);
            let mut top = up1 - up0;
            top.z = 0.0;
            let dot = top.dot(&(goal - start));
            check("tilt_toward_goal", dot, dot > 0.0);
            let dist = (end - goal).norm();
            check("goal_distance", dist, dist <= th.pour_pos);
        }
        TaskKind::Stir => {
            let len = path_in_cylinder(&path, &task.region()?, th.stir_r, th.stir_h);
            check("path_length", len, len > th.stir_path);
        }
        TaskKind::Draw => {
            let len = path_in_cylinder(&path, &task.region()?, th.draw_r, th.draw_h);
            check("path_length", len, len > th.draw_path);
        }
    }
    Ok(Verdict { success: checks.iter().all(|c| c.2), checks })
}

pub fn evaluate(task: &TaskSpec, traj: &PoseTrajectory, u: &Vector3<f64>, th: &TaskThresholds) -> Result<bool, TaskError> {
    evaluate_detailed(task, traj, u, th).map(|v| v.success)
}
