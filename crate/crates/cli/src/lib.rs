//! Subcommands of the `psi` binary.
//!
//! Every command returns `Err(Exit)` with code 2 for usage or input errors
//! and code 1 for task-level failures.

use std::fmt::Display;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use psi_core::exec::{self, Strategy};
use psi_core::filterpipe::{self, FilteredDataset, Manifest, PipelineParams, TrackReport, TrackedEpisode};
use psi_core::grasp::{assign_candidate, generate_anchors, generate_candidates_grid, select_grasp, CandidateGrasp};
use psi_core::imitate::{self, FeatureVector, PolicyModel, TrainParams};
use psi_core::io;
use psi_core::simarm::{builtin_arm, builtin_arm_names, ArmModel};
use psi_core::taskeval::{evaluate_detailed, TaskSpec};

#[derive(Debug)]
pub struct Exit {
    pub code: i32,
    pub message: String,
}

impl Exit {
    pub fn usage(msg: impl Display) -> Self {
        Self { code: 2, message: msg.to_string() }
    }

    pub fn task(msg: impl Display) -> Self {
        Self { code: 1, message: msg.to_string() }
    }
}

/// Print to stdout, ignoring a closed pipe.
fn say(s: &str) {
    use std::io::Write;
    let _ = writeln!(std::io::stdout().lock(), "{s}");
}

fn input<E: Display>(what: impl Display) -> impl FnOnce(E) -> Exit {
    move |e| Exit::usage(format!("{what}: {e}"))
}

#[derive(Debug, Parser)]
#[command(name = "psi", version, about = "Perceive, simulate and imitate from object-centric demonstrations")]
pub struct Cli {
    /// Run configuration file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Print machine-readable JSON on stdout.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Track object poses from point cloud frames.
    Track(TrackArgs),
    /// Label anchor grasps by simulating every demonstrated trajectory.
    Filter(FilterArgs),
    /// Fit the trajectory and grasp heads on a filtered dataset.
    Train(TrainArgs),
    /// Predict waypoints and anchor scores.
    Predict(PredictArgs),
    /// Pick the best candidate grasp using predicted anchor scores.
    Select(SelectArgs),
    /// Evaluate a task criterion on a stored trajectory.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct TrackArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FilterArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Built-in arm name or path to an arm file.
    #[arg(long)]
    pub arm: Option<String>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Print the plan without simulating.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Model file to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// A feature vector or a list of them.
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
    /// Candidate grasps file. Without it a jittered grid around the anchors is used.
    #[arg(long)]
    pub candidates: Option<PathBuf>,
    /// Grid candidates per anchor.
    #[arg(long, default_value_t = 4)]
    pub per_anchor: usize,
    /// Maximum grid rotation jitter in radians.
    #[arg(long, default_value_t = 0.3)]
    pub jitter: f64,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Task spec file.
    #[arg(long)]
    pub task: Option<PathBuf>,
    /// Tracked trajectory file.
    #[arg(long)]
    pub trajectory: PathBuf,
}

/// Run configuration file. Relative paths resolve against its directory.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub manifest: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub arm: Option<String>,
    pub task: Option<TaskSpec>,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub params: PipelineParams,
    pub train: TrainParams,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, Exit> {
        let mut c: RunConfig = io::read_json(path).map_err(input("config"))?;
        let dir = path.parent().unwrap_or(Path::new(""));
        for p in [&mut c.manifest, &mut c.out].into_iter().flatten() {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
        if let Some(a) = &c.arm {
            if builtin_arm(a).is_none() && Path::new(a).is_relative() {
                c.arm = Some(dir.join(a).to_string_lossy().into_owned());
            }
        }
        Ok(c)
    }
}

struct Ctx {
    cfg: RunConfig,
    json: bool,
}

impl Ctx {
    fn manifest(&self, flag: &Option<PathBuf>) -> Result<Manifest, Exit> {
        let path = flag.as_ref().or(self.cfg.manifest.as_ref()).ok_or_else(|| Exit::usage("--manifest is required"))?;
        let m = Manifest::load(path).map_err(input(path.display()))?;
        if let Some((id, p)) = m.missing_files().into_iter().next() {
            return Err(Exit::usage(format!("episode {id}: missing file {}", p.display())));
        }
        Ok(m)
    }

    fn out(&self, flag: &Option<PathBuf>) -> Result<PathBuf, Exit> {
        flag.clone().or_else(|| self.cfg.out.clone()).ok_or_else(|| Exit::usage("--out is required"))
    }

    fn emit<T: Serialize>(&self, value: &T, human: impl FnOnce() -> String) -> Result<(), Exit> {
        if self.json {
            say(&io::to_json_string(value).map_err(Exit::usage)?);
        } else {
            say(&human());
        }
        Ok(())
    }
}

pub fn load_arm(spec: &str) -> Result<ArmModel, Exit> {
    if let Some(a) = builtin_arm(spec) {
        return Ok(a);
    }
    let p = Path::new(spec);
    if p.extension().is_some() || p.exists() {
        return ArmModel::load(p).map_err(input(format!("arm {spec}")));
    }
    let known: Vec<&str> = builtin_arm_names().collect();
    Err(Exit::usage(format!("unknown arm `{spec}` (built-in: {})", known.join(", "))))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackEntry {
    pub episode_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<TrackReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrackSummary {
    pub episodes: Vec<TrackEntry>,
}

pub const TRACK_REPORT: &str = "track_report.json";
pub const DATASET_FILE: &str = "dataset.json";
pub const STATS_FILE: &str = "stats.json";

fn cmd_track(ctx: &Ctx, a: &TrackArgs) -> Result<(), Exit> {
    let m = ctx.manifest(&a.manifest)?;
    let out = ctx.out(&a.out)?;
    let params = &ctx.cfg.params;
    let results = exec::map(Strategy::available(), &m.episodes, |ep| filterpipe::episode_trajectory(&m, ep, params, Strategy::available()));
    let mut summary = TrackSummary::default();
    for (ep, res) in m.episodes.iter().zip(results) {
        let entry = match res {
            Ok(t) => {
                let file = format!("{}.traj.json", ep.episode_id);
                io::write_json(out.join(&file), &t).map_err(input(format!("episode {}", ep.episode_id)))?;
                TrackEntry { episode_id: ep.episode_id.clone(), file: Some(file), report: t.report.clone(), error: None }
            }
            Err(e) => {
                log::warn!("{e}");
                TrackEntry { episode_id: ep.episode_id.clone(), file: None, report: None, error: Some(e.to_string()) }
            }
        };
        summary.episodes.push(entry);
    }
    summary.episodes.sort_by(|x, y| x.episode_id.cmp(&y.episode_id));
    io::write_json(out.join(TRACK_REPORT), &summary).map_err(input("report"))?;
    let ok = summary.episodes.iter().filter(|e| e.error.is_none()).count();
    ctx.emit(&summary, || format!("tracked {ok}/{} episodes -> {}", summary.episodes.len(), out.display()))?;
    if ok == 0 && !summary.episodes.is_empty() {
        return Err(Exit::task("no episode could be tracked"));
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct PlanEntry<'a> {
    episode_id: &'a str,
    task: &'a TaskSpec,
    source: String,
}

fn cmd_filter(ctx: &Ctx, a: &FilterArgs) -> Result<(), Exit> {
    let arm_spec = a.arm.clone().or_else(|| ctx.cfg.arm.clone()).ok_or_else(|| Exit::usage("--arm is required"))?;
    let arm = load_arm(&arm_spec)?;
    let m = ctx.manifest(&a.manifest)?;
    if a.dry_run {
        let plan: Vec<PlanEntry> = m
            .episodes
            .iter()
            .map(|e| PlanEntry {
                episode_id: &e.episode_id,
                task: &e.task,
                source: match &e.trajectory {
                    Some(t) => format!("trajectory {t}"),
                    None => format!("{} frames", e.frames.len()),
                },
            })
            .collect();
        return ctx.emit(&plan, || {
            let mut s = format!("arm {}: {} episodes x 8 anchors", arm.name, plan.len());
            for p in &plan {
                s += &format!("\n  {} {:?} ({})", p.episode_id, p.task.kind, p.source);
            }
            s
        });
    }
    let out = ctx.out(&a.out)?;
    let ds = filterpipe::run_dataset(&m, &arm, &ctx.cfg.params, Strategy::available());
    io::write_json(out.join(DATASET_FILE), &ds).map_err(input("dataset"))?;
    io::write_json(out.join(STATS_FILE), &ds.stats).map_err(input("stats"))?;
    ctx.emit(&ds.stats, || {
        format!("{} episodes, {} discarded, per-anchor successes {:?} -> {}", ds.stats.total, ds.stats.discarded, ds.stats.per_anchor_success, out.display())
    })?;
    if ds.stats.total > 0 && ds.stats.discarded == ds.stats.total {
        return Err(Exit::task("all episodes were discarded"));
    }
    Ok(())
}

fn cmd_train(ctx: &Ctx, a: &TrainArgs) -> Result<(), Exit> {
    let ds: FilteredDataset = io::read_json(&a.dataset).map_err(input(a.dataset.display()))?;
    let out = ctx.out(&a.out)?;
    let model = match imitate::train(&ds, &ctx.cfg.train) {
        Ok(m) => m,
        Err(e @ imitate::ImitateError::EmptyDataset) => return Err(Exit::task(e)),
        Err(e) => return Err(Exit::usage(e)),
    };
    io::write_json(&out, &model).map_err(input("model"))?;
    #[derive(Serialize)]
    struct Summary {
        episodes: usize,
        traj_loss: Option<f64>,
        grasp_loss: Option<f64>,
    }
    let s = Summary { episodes: ds.kept().count(), traj_loss: model.traj_loss, grasp_loss: model.grasp_loss_history.last().copied() };
    ctx.emit(&s, || format!("trained on {} episodes (traj mse {:?}, grasp bce {:?}) -> {}", s.episodes, s.traj_loss, s.grasp_loss, out.display()))
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Features {
    One(FeatureVector),
    Many(Vec<FeatureVector>),
}

fn load_features(path: &Path) -> Result<Vec<FeatureVector>, Exit> {
    Ok(match io::read_json(path).map_err(input(path.display()))? {
        Features::One(f) => vec![f],
        Features::Many(v) => v,
    })
}

fn load_model(path: &Path) -> Result<PolicyModel, Exit> {
    let m: PolicyModel = io::read_json(path).map_err(input(path.display()))?;
    m.check().map_err(input(path.display()))?;
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub waypoints: psi_core::geom::WaypointTrajectory,
    pub scores: psi_core::grasp::GraspScores,
}

fn write_or_print<T: Serialize>(ctx: &Ctx, out: &Option<PathBuf>, value: &T, human: impl FnOnce() -> String) -> Result<(), Exit> {
    match out {
        Some(p) => {
            io::write_json(p, value).map_err(input(p.display()))?;
            ctx.emit(value, human)
        }
        None => {
            say(&io::to_json_string(value).map_err(Exit::usage)?);
            Ok(())
        }
    }
}

fn cmd_predict(ctx: &Ctx, a: &PredictArgs) -> Result<(), Exit> {
    let model = load_model(&a.model)?;
    let feats = load_features(&a.features)?;
    let preds = feats
        .iter()
        .map(|f| imitate::predict(&model, f).map(|(waypoints, scores)| Prediction { waypoints, scores }))
        .collect::<Result<Vec<_>, _>>()
        .map_err(input(a.model.display()))?;
    write_or_print(ctx, &a.out, &preds, || format!("{} predictions", preds.len()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub index: usize,
    pub anchor: usize,
    pub score: f64,
    pub candidate: CandidateGrasp,
}

fn cmd_select(ctx: &Ctx, a: &SelectArgs) -> Result<(), Exit> {
    let model = load_model(&a.model)?;
    let feats = load_features(&a.features)?;
    let [f] = feats.as_slice() else {
        return Err(Exit::usage("select takes exactly one feature vector"));
    };
    let candidates: Vec<CandidateGrasp> = match &a.candidates {
        Some(p) => io::read_json(p).map_err(input(p.display()))?,
        None => {
            let seed = a.seed.or(ctx.cfg.seed);
            if a.jitter > 0.0 && seed.is_none() {
                return Err(Exit::usage("--seed is required for jittered candidates"));
            }
            generate_candidates_grid(&f.u, a.per_anchor, a.jitter, seed.unwrap_or(0))
        }
    };
    let scores = imitate::predict_scores(&model, f).map_err(input(a.model.display()))?;
    let anchors = generate_anchors(&f.u, ctx.cfg.params.standoff);
    let (index, c) = select_grasp(&candidates, &scores, &anchors).map_err(Exit::usage)?;
    let anchor = assign_candidate(&c.pose, &anchors);
    let sel = Selection { index, anchor, score: scores.values()[anchor], candidate: c.clone() };
    write_or_print(ctx, &a.out, &sel, || format!("candidate {} ({}) via anchor {} score {:.4}", sel.index, sel.candidate.provenance, sel.anchor, sel.score))
}

fn cmd_eval(ctx: &Ctx, a: &EvalArgs) -> Result<(), Exit> {
    let task = match &a.task {
        Some(p) => io::read_json::<TaskSpec>(p).map_err(input(p.display()))?,
        None => ctx.cfg.task.clone().ok_or_else(|| Exit::usage("--task is required"))?,
    };
    let t: TrackedEpisode = io::read_json(&a.trajectory).map_err(input(a.trajectory.display()))?;
    let v = evaluate_detailed(&task, &t.trajectory, &t.u, &ctx.cfg.params.thresholds).map_err(input(a.trajectory.display()))?;
    ctx.emit(&v, || {
        let mut s = format!("{:?}: {}", task.kind, if v.success { "success" } else { "failure" });
        for (name, value, ok) in &v.checks {
            s += &format!("\n  {name} = {value:.6} {}", if *ok { "ok" } else { "FAIL" });
        }
        s
    })?;
    if v.success {
        Ok(())
    } else {
        Err(Exit::task(format!("{:?} criterion not met", task.kind)))
    }
}

pub fn run(cli: Cli) -> Result<(), Exit> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let workers = cli.workers.or(cfg.workers);
    let ctx = Ctx { cfg, json: cli.json };
    exec::with_workers(workers, || match &cli.command {
        Command::Track(a) => cmd_track(&ctx, a),
        Command::Filter(a) => cmd_filter(&ctx, a),
        Command::Train(a) => cmd_train(&ctx, a),
        Command::Predict(a) => cmd_predict(&ctx, a),
        Command::Select(a) => cmd_select(&ctx, a),
        Command::Eval(a) => cmd_eval(&ctx, a),
    })
}
