//! Evaluation harness: navigation and sequential-grounding metrics, policy
//! rollouts with episode traces, benchmark suites, ablation variants, and
//! report files.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cot_memory::{self, CoTMemoryState, StepSignals, TraceStep};
use crate::data::{AnnotationSample, HiddenSample};
use crate::error::{Error, Result};
use crate::geom::Point3;
use crate::memory::MultiLevelMemory;
use crate::model::{assemble_context, decode_cot, ModelConfig, NavRef};
use crate::params::ParamStore;
use crate::scene::{self, AgentPose, EpisodeTask, Scene, CAMERA_HEIGHT};
use crate::train::{self, TrainConfig};
use crate::vocab::Vocabulary;
use crate::waypoint;

/// Success radius for goal and per-step judging, meters.
pub const SUCCESS_RADIUS: f64 = 3.0;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EvalConfig {
    pub success_radius: f64,
    pub max_steps: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { success_radius: SUCCESS_RADIUS, max_steps: train::MAX_EPISODE_STEPS, seed: 0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepJudge {
    pub nav_success: bool,
    pub ground_success: bool,
    pub grounded_token_position: Option<Point3>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub task_id: String,
    pub trajectory: Vec<Point3>,
    pub per_step: Vec<StepJudge>,
    pub stop_position: Point3,
    pub path_length: f64,
    pub optimal_length: f64,
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct NavMetrics {
    pub ne: f64,
    pub sr: f64,
    pub osr: f64,
    pub spl: f64,
}

/// NE, SR, OSR, SPL for one episode against a goal point.
pub fn episode_metrics(
    scene: &Scene,
    result: &EpisodeResult,
    goal: Point3,
    success_radius: f64,
) -> Result<NavMetrics> {
    let ne = scene::geodesic_distance(scene, result.stop_position, goal)?;
    let sr = if ne <= success_radius { 1.0 } else { 0.0 };
    let mut min_d = f64::INFINITY;
    for p in &result.trajectory {
        min_d = min_d.min(scene::geodesic_distance(scene, *p, goal)?);
    }
    let osr = if min_d <= success_radius { 1.0 } else { 0.0 };
    let spl = if result.path_length == 0.0 && result.optimal_length == 0.0 {
        sr
    } else {
        sr * result.optimal_length / result.path_length.max(result.optimal_length)
    };
    Ok(NavMetrics { ne, sr, osr, spl })
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct SeqMetrics {
    pub s_sr: f64,
    pub t_sr: f64,
    pub s_acc: f64,
    pub t_acc: f64,
}

/// Step- and task-level success over a task's expected steps; steps never
/// judged count as failures.
pub fn sequential_metrics(per_step: &[StepJudge], expected_steps: usize) -> SeqMetrics {
    let n = expected_steps.max(1) as f64;
    let mut nav_ok = 0usize;
    let mut joint_ok = 0usize;
    for k in 0..expected_steps {
        let j = per_step.get(k);
        let nav = j.map_or(false, |s| s.nav_success);
        let ground = j.map_or(false, |s| s.ground_success);
        if nav {
            nav_ok += 1;
        }
        if nav && ground {
            joint_ok += 1;
        }
    }
    SeqMetrics {
        s_sr: nav_ok as f64 / n,
        t_sr: if nav_ok == expected_steps { 1.0 } else { 0.0 },
        s_acc: joint_ok as f64 / n,
        t_acc: if joint_ok == expected_steps { 1.0 } else { 0.0 },
    }
}

/// Nearest-instance-point owner, the grounding judge of s-ACC.
pub fn grounding_owner(scene: &Scene, q: Point3) -> Option<i64> {
    let mut best: Option<(f64, i64)> = None;
    for inst in &scene.instances {
        for p in &inst.points {
            let d = p.dist(&q);
            if best.map_or(true, |(bd, _)| d < bd) {
                best = Some((d, inst.instance_id));
            }
        }
    }
    best.map(|(_, o)| o)
}

// ---------------------------------------------------------------------------
// policy rollout
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Vln,
    ObjectNav,
    SeqGround,
}

impl Suite {
    pub fn parse(s: &str) -> Result<Suite> {
        match s {
            "vln" => Ok(Suite::Vln),
            "objectnav" => Ok(Suite::ObjectNav),
            "seqground" => Ok(Suite::SeqGround),
            other => Err(Error::MissingTasks(format!("unknown suite {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Suite::Vln => "vln",
            Suite::ObjectNav => "objectnav",
            Suite::SeqGround => "seqground",
        }
    }
}

/// Instruction text fed to the model; the sequential-grounding protocol
/// provides the ground-truth planning text as input.
pub fn suite_instruction(suite: Suite, sample: &AnnotationSample, hidden: &HiddenSample) -> String {
    match suite {
        Suite::SeqGround => format!("{} {}", sample.instruction, hidden.planning.join(" ")),
        _ => sample.instruction.clone(),
    }
}

pub struct RolloutResult {
    pub result: EpisodeResult,
    pub trace: Vec<TraceStep>,
    /// Plan text emitted at each step, for replanning checks.
    pub plans: Vec<String>,
}

/// Roll the trained policy through one episode, judging declared subgoals
/// against hidden ground truth.
pub fn run_episode(
    store: &ParamStore,
    mcfg: &ModelConfig,
    scene: &Scene,
    task: &EpisodeTask,
    ecfg: &EvalConfig,
) -> Result<RolloutResult> {
    let v = Vocabulary::shared();
    let mut memory = MultiLevelMemory::new();
    let mut cot_state = CoTMemoryState::new();
    let mut pose = task.start_pose;
    let mut trajectory = vec![pose.position];
    let mut path_length = 0.0;
    let mut per_step: Vec<StepJudge> = Vec::new();
    let mut trace = Vec::new();
    let mut plans = Vec::new();
    let mut subgoal = 0usize;
    let instr = v.tokenize(&task.instruction);

    for step in 0..ecfg.max_steps {
        memory.update(&scene::observe_at(scene, &pose, step));
        let pano = memory.render_panorama(&pose);
        let candidates = waypoint::predict_waypoints(store, &pano, &pose);
        let ctx =
            assemble_context(mcfg, v, &instr, &memory, &pano, &pose, &cot_state, &candidates)?;
        let dec = decode_cot(store, mcfg, &ctx);
        plans.push(v.detokenize(&dec.seq.plan_words));

        let mut signals = StepSignals::default();
        let mut stopped = false;
        match dec.seq.nav {
            NavRef::Stop => stopped = true,
            NavRef::Waypoint(_) => {
                if let Some((_, wp)) = dec.nav_res {
                    match scene::step_to_waypoint_traced(scene, &pose, wp) {
                        Ok(out) => {
                            pose = out.pose;
                            path_length += out.traveled;
                            trajectory.extend(out.path.into_iter().skip(1));
                        }
                        Err(Error::Blocked { .. }) => signals.blocked = true,
                        Err(e) => return Err(e),
                    }
                } else {
                    stopped = true;
                }
            }
            NavRef::TextAction(w) => match v.surface(w) {
                "forward" => {
                    let wp = Point3::new(
                        pose.position.x + train::TEXT_FORWARD * pose.heading.cos(),
                        pose.position.y + train::TEXT_FORWARD * pose.heading.sin(),
                        CAMERA_HEIGHT,
                    );
                    match scene::step_to_waypoint_traced(scene, &pose, wp) {
                        Ok(out) => {
                            pose = out.pose;
                            path_length += out.traveled;
                            trajectory.extend(out.path.into_iter().skip(1));
                        }
                        Err(Error::Blocked { .. }) => signals.blocked = true,
                        Err(e) => return Err(e),
                    }
                }
                "left" => pose = AgentPose::new(pose.position, pose.heading + 0.5235987755982988),
                "right" => pose = AgentPose::new(pose.position, pose.heading - 0.5235987755982988),
                _ => stopped = true,
            },
        }

        // judge a declared subgoal at the post-move pose
        if dec.seq.reached_subgoal && subgoal < task.step_targets.len() {
            let (inst_id, target) = task.step_targets[subgoal];
            let nav_success = pose.position.dist_xy(&target) <= ecfg.success_radius;
            let grounded_pos = dec.ground_res.first().and_then(|r| r.position);
            let ground_success = match (inst_id, grounded_pos) {
                (Some(id), Some(gp)) => grounding_owner(scene, gp) == Some(id),
                (None, _) => nav_success,
                (Some(_), None) => false,
            };
            per_step.push(StepJudge {
                nav_success,
                ground_success,
                grounded_token_position: grounded_pos,
            });
            subgoal += 1;
        }

        let parsed = cot_memory::parse(
            &dec.seq,
            v,
            &dec.ground_res.iter().map(|r| r.position).collect::<Vec<_>>(),
            dec.nav_res.map(|(_, p)| p),
        );
        cot_memory::append(&mut cot_state, &parsed);
        let flag = cot_memory::detect_replan_signal(&mut cot_state, signals);
        trace.push(TraceStep {
            step,
            parsed,
            flags: flag.iter().map(|f| f.as_str().to_string()).collect(),
            pose: [pose.position.x, pose.position.y, pose.position.z, pose.heading],
            surface: dec.seq.to_text(v),
            memory_counts: (memory.patch.len(), memory.instances.len(), memory.zones.len()),
        });
        if stopped {
            break;
        }
    }

    let goal = task.step_targets.last().map(|(_, p)| *p).unwrap_or(pose.position);
    let optimal_length = scene::geodesic_distance(scene, task.start_pose.position, goal)
        .unwrap_or(0.0);
    Ok(RolloutResult {
        result: EpisodeResult {
            task_id: task.task_id.clone(),
            trajectory,
            per_step,
            stop_position: pose.position,
            path_length,
            optimal_length,
        },
        trace,
        plans,
    })
}

/// Uniform-random policy over (candidates + stop), the floor baseline.
pub fn run_random_baseline(
    store: &ParamStore,
    scene: &Scene,
    task: &EpisodeTask,
    ecfg: &EvalConfig,
    seed: u64,
) -> Result<EpisodeResult> {
    use rand::prelude::*;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut memory = MultiLevelMemory::new();
    let mut pose = task.start_pose;
    let mut trajectory = vec![pose.position];
    let mut path_length = 0.0;
    for step in 0..ecfg.max_steps {
        memory.update(&scene::observe_at(scene, &pose, step));
        let pano = memory.render_panorama(&pose);
        let candidates = waypoint::predict_waypoints(store, &pano, &pose);
        let k = candidates.len();
        let pick = rng.random_range(0..=k);
        if pick == k {
            break;
        }
        match scene::step_to_waypoint_traced(scene, &pose, candidates[pick].position) {
            Ok(out) => {
                pose = out.pose;
                path_length += out.traveled;
                trajectory.extend(out.path.into_iter().skip(1));
            }
            Err(Error::Blocked { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    let goal = task.step_targets.last().map(|(_, p)| *p).unwrap_or(pose.position);
    Ok(EpisodeResult {
        task_id: task.task_id.clone(),
        trajectory,
        per_step: Vec::new(),
        stop_position: pose.position,
        path_length,
        optimal_length: scene::geodesic_distance(scene, task.start_pose.position, goal)
            .unwrap_or(0.0),
    })
}

// ---------------------------------------------------------------------------
// benchmark suites and reports
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeReportLine {
    pub task_id: String,
    pub ne: f64,
    pub sr: f64,
    pub osr: f64,
    pub spl: f64,
    pub s_sr: f64,
    pub t_sr: f64,
    pub s_acc: f64,
    pub t_acc: f64,
    pub steps_declared: usize,
    pub steps_expected: usize,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Report {
    pub suite: String,
    pub episodes: Vec<EpisodeReportLine>,
    pub means: BTreeMap<String, f64>,
}

/// Goal point of a task for final-goal metrics; the object-goal suite scores
/// against the nearest instance of the goal category.
fn task_goal(suite: Suite, scene: &Scene, sample: &AnnotationSample, task: &EpisodeTask, from: Point3) -> Point3 {
    if suite == Suite::ObjectNav {
        if let Some(Some(cat)) = sample.instance_type.first() {
            let mut best: Option<(f64, Point3)> = None;
            for inst in scene.instances.iter().filter(|i| &i.category == cat) {
                let d = scene::geodesic_distance(scene, from, inst.center).unwrap_or(f64::INFINITY);
                if best.map_or(true, |(bd, _)| d < bd) {
                    best = Some((d, inst.center));
                }
            }
            if let Some((_, p)) = best {
                return p;
            }
        }
    }
    task.step_targets.last().map(|(_, p)| *p).unwrap_or(from)
}

pub struct BenchmarkInputs {
    pub scenes: BTreeMap<String, Scene>,
    pub tasks: Vec<(AnnotationSample, HiddenSample)>,
}

pub fn run_benchmark(
    suite: Suite,
    store: &ParamStore,
    mcfg: &ModelConfig,
    inputs: &BenchmarkInputs,
    ecfg: &EvalConfig,
) -> Result<Report> {
    let mut report = Report { suite: suite.name().into(), ..Default::default() };
    for (i, (sample, hidden)) in inputs.tasks.iter().enumerate() {
        let scene = inputs
            .scenes
            .get(&sample.scene_id)
            .ok_or_else(|| Error::MissingTasks(format!("scene {}", sample.scene_id)))?;
        let mut task =
            crate::data::to_episode_task(scene, &format!("{}#{i}", suite.name()), sample, hidden)?;
        task.instruction = suite_instruction(suite, sample, hidden);
        let out = run_episode(store, mcfg, scene, &task, ecfg)?;
        let goal = task_goal(suite, scene, sample, &task, out.result.stop_position);
        let nav = episode_metrics(scene, &out.result, goal, ecfg.success_radius)?;
        let seq = sequential_metrics(&out.result.per_step, task.step_targets.len());
        report.episodes.push(EpisodeReportLine {
            task_id: task.task_id.clone(),
            ne: nav.ne,
            sr: nav.sr,
            osr: nav.osr,
            spl: nav.spl,
            s_sr: seq.s_sr,
            t_sr: seq.t_sr,
            s_acc: seq.s_acc,
            t_acc: seq.t_acc,
            steps_declared: out.result.per_step.len(),
            steps_expected: task.step_targets.len(),
        });
    }
    finalize_means(&mut report);
    Ok(report)
}

pub fn finalize_means(report: &mut Report) {
    let n = report.episodes.len().max(1) as f64;
    let add = |k: &str, f: fn(&EpisodeReportLine) -> f64, r: &mut Report| {
        let v = r.episodes.iter().map(f).sum::<f64>() / n;
        r.means.insert(k.to_string(), v);
    };
    add("ne", |e| e.ne, report);
    add("sr", |e| e.sr, report);
    add("osr", |e| e.osr, report);
    add("spl", |e| e.spl, report);
    add("s_sr", |e| e.s_sr, report);
    add("t_sr", |e| e.t_sr, report);
    add("s_acc", |e| e.s_acc, report);
    add("t_acc", |e| e.t_acc, report);
}

pub fn write_report(report: &Report, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let mut jsonl = std::io::BufWriter::new(std::fs::File::create(out_dir.join("episodes.jsonl"))?);
    for e in &report.episodes {
        writeln!(jsonl, "{}", serde_json::to_string(e)?)?;
    }
    let mut csv = String::from("suite,metric,value,n\n");
    for (k, v) in &report.means {
        csv.push_str(&format!("{},{},{:.6},{}\n", report.suite, k, v, report.episodes.len()));
    }
    std::fs::write(out_dir.join("summary.csv"), csv)?;
    Ok(())
}

pub fn write_trace(trace: &[TraceStep], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for t in trace {
        writeln!(f, "{}", serde_json::to_string(t)?)?;
    }
    Ok(())
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceStep>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

// ---------------------------------------------------------------------------
// ablations
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AblationMode {
    Full,
    NoCotMemory,
    PlanOnly,
    PlanFree,
    TextActions,
}

impl AblationMode {
    pub fn name(&self) -> &'static str {
        match self {
            AblationMode::Full => "full",
            AblationMode::NoCotMemory => "no_cot_memory",
            AblationMode::PlanOnly => "plan_only",
            AblationMode::PlanFree => "plan_free",
            AblationMode::TextActions => "text_actions",
        }
    }
}

/// Training configuration of one ablation variant.
pub fn ablation_config(base: &TrainConfig, mode: AblationMode) -> TrainConfig {
    let mut cfg = base.clone();
    match mode {
        AblationMode::Full => {}
        AblationMode::NoCotMemory => cfg.model.cot_memory_enabled = false,
        AblationMode::PlanOnly => cfg.type_filter = Some(vec![1, 2, 3]),
        AblationMode::PlanFree => cfg.type_filter = Some(vec![4, 5, 6]),
        AblationMode::TextActions => cfg.model.text_actions = true,
    }
    cfg
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, SceneConfig};

    fn flat_result(stop: Point3, traj: Vec<Point3>, len: f64, opt: f64) -> EpisodeResult {
        EpisodeResult {
            task_id: "t".into(),
            trajectory: traj,
            per_step: Vec::new(),
            stop_position: stop,
            path_length: len,
            optimal_length: opt,
        }
    }

    #[test]
    fn metrics_perfect_episode() {
        let s = generate_scene(&SceneConfig::new(16, 16, 1, 0), 0).unwrap();
        let goal = s.cell_center(crate::geom::Cell::new(8, 8), CAMERA_HEIGHT);
        let r = flat_result(goal, vec![goal], 2.0, 2.0);
        let m = episode_metrics(&s, &r, goal, SUCCESS_RADIUS).unwrap();
        assert_eq!((m.ne, m.sr, m.osr, m.spl), (0.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn spl_half_when_path_doubles() {
        let s = generate_scene(&SceneConfig::new(16, 16, 1, 0), 0).unwrap();
        let goal = s.cell_center(crate::geom::Cell::new(8, 8), CAMERA_HEIGHT);
        let r = flat_result(goal, vec![goal], 4.0, 2.0);
        let m = episode_metrics(&s, &r, goal, SUCCESS_RADIUS).unwrap();
        assert_eq!(m.spl, 0.5);
    }

    #[test]
    fn sequential_metrics_enumeration() {
        let mk = |nav: bool, ground: bool| StepJudge {
            nav_success: nav,
            ground_success: ground,
            grounded_token_position: None,
        };
        let steps = vec![mk(true, true), mk(true, true), mk(false, false)];
        let m = sequential_metrics(&steps, 3);
        assert!((m.s_sr - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(m.t_sr, 0.0);
        assert!((m.s_acc - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(m.t_acc, 0.0);
        let all = vec![mk(true, true); 4];
        let m = sequential_metrics(&all, 4);
        assert_eq!((m.s_sr, m.t_sr, m.s_acc, m.t_acc), (1.0, 1.0, 1.0, 1.0));
        // grounding failure on a visible target zeroes the joint step
        let steps = vec![mk(true, false)];
        let m = sequential_metrics(&steps, 1);
        assert_eq!(m.s_sr, 1.0);
        assert_eq!(m.s_acc, 0.0);
        // bounds from definitions
        assert!(m.s_acc <= m.s_sr && m.t_acc <= m.t_sr);
    }

    #[test]
    fn empty_task_set_report() {
        let mut r = Report { suite: "vln".into(), ..Default::default() };
        finalize_means(&mut r);
        assert_eq!(r.episodes.len(), 0);
        assert_eq!(r.means["sr"], 0.0);
        let dir = tempfile::tempdir().unwrap();
        write_report(&r, dir.path()).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
        assert!(csv.starts_with("suite,metric,value,n"));
    }

    #[test]
    fn rollout_and_report_deterministic() {
        let mcfg = ModelConfig { layers: 2, width: 32, heads: 2, ff_mult: 2, ..ModelConfig::default() };
        let mut store = ParamStore::new();
        crate::model::register_model(&mut store, &mcfg, 3);
        let scene = generate_scene(&SceneConfig::new(20, 20, 2, 5), 3).unwrap();
        let mix: BTreeMap<u8, usize> = [(1u8, 2usize)].into_iter().collect();
        let tasks = crate::data::synthesize_samples(&scene, &mix, 4).unwrap();
        let mut scenes = BTreeMap::new();
        scenes.insert(scene.scene_id.clone(), scene);
        let inputs = BenchmarkInputs { scenes, tasks };
        let ecfg = EvalConfig::default();
        let a = run_benchmark(Suite::SeqGround, &store, &mcfg, &inputs, &ecfg).unwrap();
        let b = run_benchmark(Suite::SeqGround, &store, &mcfg, &inputs, &ecfg).unwrap();
        assert_eq!(serde_json::to_string(&a.means).unwrap(), serde_json::to_string(&b.means).unwrap());
        // means equal the mean of per-episode rows
        for key in ["sr", "s_acc", "t_acc"] {
            let mean = a.episodes.iter().map(|e| match key {
                "sr" => e.sr,
                "s_acc" => e.s_acc,
                _ => e.t_acc,
            }).sum::<f64>() / a.episodes.len() as f64;
            assert!((a.means[key] - mean).abs() < 1e-12);
        }
        // trace io round-trip
        let (sample, hidden) = &inputs.tasks[0];
        let scene = &inputs.scenes[&sample.scene_id];
        let task = crate::data::to_episode_task(scene, "t#0", sample, hidden).unwrap();
        let out = run_episode(&store, &mcfg, scene, &task, &ecfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.jsonl");
        write_trace(&out.trace, &path).unwrap();
        let back = read_trace(&path).unwrap();
        assert_eq!(back.len(), out.trace.len());
        assert_eq!(back[0].surface, out.trace[0].surface);
    }

    #[test]
    fn metric_bounds_hold_on_random_episodes() {
        let mcfg = ModelConfig { layers: 2, width: 32, heads: 2, ff_mult: 2, ..ModelConfig::default() };
        let mut store = ParamStore::new();
        crate::model::register_model(&mut store, &mcfg, 9);
        let scene = generate_scene(&SceneConfig::new(24, 24, 2, 6), 9).unwrap();
        let mix: BTreeMap<u8, usize> = [(6u8, 4usize)].into_iter().collect();
        let tasks = crate::data::synthesize_samples(&scene, &mix, 5).unwrap();
        let ecfg = EvalConfig::default();
        for (i, (sample, hidden)) in tasks.iter().enumerate() {
            let task = crate::data::to_episode_task(&scene, &format!("r#{i}"), sample, hidden).unwrap();
            let r = run_random_baseline(&store, &scene, &task, &ecfg, i as u64).unwrap();
            let goal = task.step_targets.last().unwrap().1;
            let m = episode_metrics(&scene, &r, goal, ecfg.success_radius).unwrap();
            assert!(m.ne >= 0.0);
            assert!(m.spl <= m.sr + 1e-12 && m.sr <= m.osr + 1e-12);
        }
    }
}
