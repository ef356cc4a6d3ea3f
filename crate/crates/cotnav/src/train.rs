//! Synergistic learning from fragmented supervision: per-sample target
//! construction with masking, the composite masked autoregressive loss, the
//! grouped batch policy, online imitation rollouts, and the training loop.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cot_memory::{self, CoTMemoryState, StepSignals};
use crate::data::{
    assign_grounding_labels, AnnotationSample, GroundingTarget, HiddenSample, WAYPOINT_SENTINEL,
};
use crate::error::{Error, Result};
use crate::geom::Point3;
use crate::memory::{MultiLevelMemory, PanoToken};
use crate::model::{
    assemble_context, decode_cot, forward_tape, head_logits_tape, produce, Comp, ContextSequence,
    GoldNav, GoldSections, GoldSlot, ModelConfig, PosTarget, Produced, RespTok, TapeForward,
};
use crate::params::ParamStore;
use crate::scene::{self, AgentPose, Scene, CAMERA_HEIGHT};
use crate::tape::{CeRow, Tape, T};
use crate::vocab::Vocabulary;
use crate::waypoint::{self, WaypointCandidate};

/// Episode step cap.
pub const MAX_EPISODE_STEPS: usize = 60;
/// A subgoal counts as reached within this radius, meters.
pub const SUBGOAL_RADIUS: f64 = 1.5;
/// Oracle lookahead along the shortest path, meters.
pub const LOOKAHEAD: f64 = 2.0;
/// A label candidate must be this close to the lookahead node, else the
/// fallback rule (minimum remaining geodesic) applies.
pub const LABEL_SNAP: f64 = 1.0;
/// Straight-line move of the text-actions ablation, meters.
pub const TEXT_FORWARD: f64 = 0.75;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupervisionMask {
    pub plan: bool,
    pub ground: bool,
    pub nav: bool,
    pub answer: bool,
}

impl SupervisionMask {
    pub fn for_sample(sample: &AnnotationSample) -> Self {
        Self {
            plan: sample.has_plan(),
            ground: sample.has_ground(),
            nav: sample.has_nav(),
            answer: sample.data_type == 1,
        }
    }

    pub fn all() -> Self {
        Self { plan: true, ground: true, nav: true, answer: true }
    }

    pub fn has(&self, comp: Comp) -> bool {
        match comp {
            Comp::Plan => self.plan,
            Comp::Ground => self.ground,
            Comp::Nav => self.nav,
            Comp::Answer => self.answer,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossWeights {
    pub plan: f64,
    pub ground: f64,
    pub nav: f64,
    pub answer: f64,
    /// Weight of the jointly trained waypoint-predictor loss.
    pub waypoint: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { plan: 1.0, ground: 1.0, nav: 1.0, answer: 1.0, waypoint: 1.0 }
    }
}

impl LossWeights {
    fn of(&self, comp: Comp) -> f64 {
        match comp {
            Comp::Plan => self.plan,
            Comp::Ground => self.ground,
            Comp::Nav => self.nav,
            Comp::Answer => self.answer,
        }
    }
}

/// The aligned target stream of one supervised step.
#[derive(Debug, Clone)]
pub struct TargetSequence {
    pub resp: Vec<RespTok>,
    pub targets: Vec<PosTarget>,
    pub mask: SupervisionMask,
}

// ---------------------------------------------------------------------------
// masked loss
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub plan: f64,
    pub ground: f64,
    pub nav: f64,
    pub answer: f64,
    pub waypoint: f64,
    pub supervised_positions: usize,
}

/// Assemble the masked loss from logits tensors. Masked positions carry
/// weight exactly zero; the total is the weighted mean over supervised
/// positions (so on fully annotated data with unit weights it equals the
/// plain full-sequence cross-entropy).
///
/// `vocab_logits` has one row per response position; `ground_logits` one row
/// per grounding slot in order; `nav_logits` one row per navigation slot.
pub fn masked_loss_from_logits_tape(
    tape: &mut Tape,
    vocab_logits: T,
    ground_logits: Option<T>,
    nav_logits: Option<T>,
    targets: &[PosTarget],
    weights: &LossWeights,
) -> (T, LossBreakdown) {
    let n_supervised = targets.iter().filter(|t| !matches!(t, PosTarget::Masked)).count();
    let mut breakdown = LossBreakdown { supervised_positions: n_supervised, ..Default::default() };
    if n_supervised == 0 {
        return (tape.scalar(0.0), breakdown);
    }
    let norm = 1.0 / n_supervised as f64;
    let mut vocab_rows: Vec<CeRow> = Vec::with_capacity(targets.len());
    let mut ground_rows: Vec<CeRow> = Vec::new();
    let mut nav_rows: Vec<CeRow> = Vec::new();
    for t in targets {
        match t {
            PosTarget::Vocab { id, comp } => {
                vocab_rows.push(CeRow { positives: vec![*id], weight: weights.of(*comp) * norm });
            }
            PosTarget::Ground { positives } => {
                ground_rows.push(CeRow { positives: positives.clone(), weight: weights.ground * norm });
                vocab_rows.push(CeRow { positives: Vec::new(), weight: 0.0 });
            }
            PosTarget::Nav { class } => {
                nav_rows.push(CeRow { positives: vec![*class], weight: weights.nav * norm });
                vocab_rows.push(CeRow { positives: Vec::new(), weight: 0.0 });
            }
            PosTarget::Masked => {
                vocab_rows.push(CeRow { positives: Vec::new(), weight: 0.0 });
            }
        }
    }
    // per-component raw means for logging
    {
        let (_, n_vocab) = tape.shape(vocab_logits);
        let vv = tape.value(vocab_logits);
        let mut gi = 0usize;
        let mut ni = 0usize;
        for (j, t) in targets.iter().enumerate() {
            match t {
                PosTarget::Vocab { id, comp } => {
                    let ce = ce_of(&vv[j * n_vocab..(j + 1) * n_vocab], &[*id]) * norm;
                    match comp {
                        Comp::Plan => breakdown.plan += ce,
                        Comp::Ground => breakdown.ground += ce,
                        Comp::Nav => breakdown.nav += ce,
                        Comp::Answer => breakdown.answer += ce,
                    }
                }
                PosTarget::Ground { positives } => {
                    let gl = ground_logits.expect("ground logits present");
                    let (_, c) = tape.shape(gl);
                    let gv = tape.value(gl);
                    breakdown.ground += ce_of(&gv[gi * c..(gi + 1) * c], positives) * norm;
                    gi += 1;
                }
                PosTarget::Nav { class } => {
                    let nl = nav_logits.expect("nav logits present");
                    let (_, c) = tape.shape(nl);
                    let nv = tape.value(nl);
                    breakdown.nav += ce_of(&nv[ni * c..(ni + 1) * c], &[*class]) * norm;
                    ni += 1;
                }
                PosTarget::Masked => {}
            }
        }
    }
    let mut parts: Vec<(T, f64)> = Vec::new();
    let v_loss = tape.ce_rows(vocab_logits, vocab_rows);
    parts.push((v_loss, 1.0));
    if let (Some(gl), false) = (ground_logits, ground_rows.is_empty()) {
        let g = tape.ce_rows(gl, ground_rows);
        parts.push((g, 1.0));
    }
    if let (Some(nl), false) = (nav_logits, nav_rows.is_empty()) {
        let n = tape.ce_rows(nl, nav_rows);
        parts.push((n, 1.0));
    }
    let total = tape.add_scaled(&parts);
    breakdown.total = tape.item(total);
    (total, breakdown)
}

/// Full differentiable step loss: forward the sequence, apply the language
/// head and the two pointer heads, assemble the masked loss.
pub fn step_loss_tape(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &ModelConfig,
    ctx: &ContextSequence,
    seq: &TargetSequence,
    weights: &LossWeights,
) -> (T, TapeForward, LossBreakdown) {
    let fwd = forward_tape(tape, store, cfg, ctx, &seq.resp);
    let (vocab_logits, ground_logits, nav_logits) = step_logits(tape, store, &fwd, seq);
    let (loss, mut breakdown) =
        masked_loss_from_logits_tape(tape, vocab_logits, ground_logits, nav_logits, &seq.targets, weights);
    breakdown.total = tape.item(loss);
    (loss, fwd, breakdown)
}

/// Language-model and pointer-head logits for every response position.
pub fn step_logits(
    tape: &mut Tape,
    store: &ParamStore,
    fwd: &TapeForward,
    seq: &TargetSequence,
) -> (T, Option<T>, Option<T>) {
    let base = fwd.ctx_len - 1;
    let pred_rows: Vec<(T, usize)> =
        (0..seq.resp.len()).map(|j| (fwd.hidden, base + j)).collect();
    let pred = tape.assemble_rows(&pred_rows);
    let lm = tape.param(store, "lm.w");
    let vocab_logits = tape.matmul_tb(pred, lm);
    let ground_slots: Vec<(T, usize)> = seq
        .resp
        .iter()
        .enumerate()
        .filter(|(_, t)| matches!(t, RespTok::Resolved3d(_) | RespTok::ResolvedNone))
        .map(|(j, _)| (fwd.hidden, base + j))
        .collect();
    let ground_logits = if ground_slots.is_empty() {
        None
    } else {
        let latents = tape.assemble_rows(&ground_slots);
        Some(head_logits_tape(tape, store, "ghead", latents, fwd.ground_classes))
    };
    let nav_slots: Vec<(T, usize)> = seq
        .resp
        .iter()
        .enumerate()
        .filter(|(_, t)| matches!(t, RespTok::ResolvedCand(_) | RespTok::ResolvedStop))
        .map(|(j, _)| (fwd.hidden, base + j))
        .collect();
    let nav_logits = if nav_slots.is_empty() {
        None
    } else {
        let latents = tape.assemble_rows(&nav_slots);
        Some(head_logits_tape(tape, store, "nhead", latents, fwd.nav_classes))
    };
    (vocab_logits, ground_logits, nav_logits)
}

// ---------------------------------------------------------------------------
// gold construction
// ---------------------------------------------------------------------------

/// Remaining plan lines from the current subgoal, as one token stream.
pub fn plan_tokens(v: &Vocabulary, planning: &[String], from_step: usize) -> Vec<usize> {
    let text = planning[from_step.min(planning.len().saturating_sub(1))..].join(" ");
    v.tokenize(&text)
}

/// Gold grounding slot for a target against the groundable context tokens.
/// The positive classes are the context tokens whose memory ids carry the
/// grounding label; the resolved input is the positive nearest the target.
pub fn gold_ground_slot(
    ctx: &ContextSequence,
    memory: &MultiLevelMemory,
    scene: &Scene,
    target_instance: Option<i64>,
    target_position: Point3,
) -> GoldSlot {
    let none_class = ctx.groundable.len();
    let label = match target_instance.and_then(|id| scene.instance(id)) {
        Some(inst) => {
            assign_grounding_labels(memory, &scene.instances, &GroundingTarget::Instance(inst))
        }
        None => assign_grounding_labels(
            memory,
            &scene.instances,
            &GroundingTarget::CenterOnly(target_position),
        ),
    };
    let mut positives: Vec<usize> = ctx
        .groundable
        .iter()
        .enumerate()
        .filter(|(_, g)| label.positive_token_ids.contains(&g.id))
        .map(|(i, _)| i)
        .collect();
    if positives.is_empty() {
        return GoldSlot { resolved: RespTok::ResolvedNone, positives: vec![none_class] };
    }
    // teacher-forced input: the positive nearest the target
    let best = positives
        .iter()
        .copied()
        .min_by(|&a, &b| {
            let da = ctx.groundable[a].position.dist(&target_position);
            let db = ctx.groundable[b].position.dist(&target_position);
            da.partial_cmp(&db).unwrap().then(a.cmp(&b))
        })
        .unwrap();
    positives.sort_unstable();
    GoldSlot { resolved: RespTok::Resolved3d(ctx.groundable[best].entry), positives }
}

/// Oracle navigation label: the candidate nearest the lookahead node on the
/// shortest path to the target; if none is within `LABEL_SNAP`, the candidate
/// minimizing remaining geodesic distance. Marks the subgoal reached when the
/// labeled candidate lands within `SUBGOAL_RADIUS` of the target and the
/// target is groundable (`ground_ready`): a reached declaration must coincide
/// with a correct grounding, so the oracle keeps driving until the memory has
/// seen the target.
pub fn oracle_nav_label(
    scene: &Scene,
    pose: &AgentPose,
    candidates: &[WaypointCandidate],
    target: Point3,
    ground_ready: bool,
    text_actions: bool,
) -> GoldNav {
    let path = match scene::shortest_path(scene, pose.position, target) {
        Ok(p) => p,
        Err(_) => vec![pose.position, target],
    };
    let mut node = *path.last().unwrap();
    let mut acc = 0.0;
    for w in path.windows(2) {
        acc += w[0].dist_xy(&w[1]);
        if acc >= LOOKAHEAD {
            node = w[1];
            break;
        }
    }
    if text_actions {
        let dist_left = pose.position.dist_xy(&target);
        if dist_left <= SUBGOAL_RADIUS && ground_ready {
            return GoldNav::TextAction {
                word: Vocabulary::shared().id("forward").unwrap(),
                reached: true,
            };
        }
        let dir = (node.y - pose.position.y).atan2(node.x - pose.position.x);
        let delta = crate::geom::wrap_angle(dir - pose.heading);
        let v = Vocabulary::shared();
        let word = if delta.abs() <= 15f64.to_radians() {
            v.id("forward").unwrap()
        } else if delta > 0.0 {
            v.id("left").unwrap()
        } else {
            v.id("right").unwrap()
        };
        return GoldNav::TextAction { word, reached: false };
    }
    if candidates.is_empty() {
        return GoldNav::Stop;
    }
    let nearest = (0..candidates.len())
        .min_by(|&a, &b| {
            let da = candidates[a].position.dist_xy(&node);
            let db = candidates[b].position.dist_xy(&node);
            da.partial_cmp(&db).unwrap().then(a.cmp(&b))
        })
        .unwrap();
    let index = if candidates[nearest].position.dist_xy(&node) <= LABEL_SNAP {
        nearest
    } else {
        (0..candidates.len())
            .min_by(|&a, &b| {
                let da = remaining_geodesic(scene, candidates[a].position, target);
                let db = remaining_geodesic(scene, candidates[b].position, target);
                da.partial_cmp(&db).unwrap().then(a.cmp(&b))
            })
            .unwrap()
    };
    let reached = ground_ready && candidates[index].position.dist_xy(&target) <= SUBGOAL_RADIUS;
    GoldNav::Candidate { index, reached }
}

fn remaining_geodesic(scene: &Scene, from: Point3, to: Point3) -> f64 {
    scene::geodesic_distance(scene, from, to).unwrap_or(f64::INFINITY)
}

/// Build the gold sections and the mask for one episode step.
#[allow(clippy::too_many_arguments)]
pub fn build_target_sequence(
    v: &Vocabulary,
    ctx: &ContextSequence,
    scene: &Scene,
    memory: &MultiLevelMemory,
    sample: &AnnotationSample,
    hidden: &HiddenSample,
    planning: &[String],
    subgoal: usize,
    done: bool,
    ground_ready: bool,
    mask: SupervisionMask,
    text_actions: bool,
) -> Result<(GoldSections, SupervisionMask)> {
    let n = hidden.instance_position.len();
    let k = subgoal.min(n.saturating_sub(1));
    let target_pos = Point3::from_array(hidden.instance_position[k]);
    let target_inst = hidden.instance_id[k]
        .first()
        .copied()
        .filter(|id| *id != WAYPOINT_SENTINEL);
    let mut gold = GoldSections::default();
    if mask.plan {
        gold.plan = Some(plan_tokens(v, planning, subgoal.min(planning.len().saturating_sub(1))));
    }
    if mask.ground {
        gold.ground = Some(vec![gold_ground_slot(ctx, memory, scene, target_inst, target_pos)]);
    }
    if mask.nav {
        if hidden.start_position == [0.0; 3] && sample.start_pose.is_none() {
            return Err(Error::LabelError);
        }
        gold.nav = Some(if done {
            if text_actions {
                GoldNav::TextAction { word: v.id("halt").unwrap(), reached: false }
            } else {
                GoldNav::Stop
            }
        } else {
            oracle_nav_label(scene, &ctx.pose, &ctx.candidates, target_pos, ground_ready, text_actions)
        });
    }
    if mask.answer {
        let text = hidden.answers.get(k).cloned().unwrap_or_else(|| "task complete .".into());
        gold.answer = Some(v.tokenize(&text));
    }
    Ok((gold, mask))
}

// ---------------------------------------------------------------------------
// batch policy
// ---------------------------------------------------------------------------

pub const GROUPS: [&[u8]; 3] = [&[1, 2, 3], &[4, 5], &[6]];

/// Group/type batch sampling: pick one of the three groups uniformly, then a
/// single data type within it, then `batch_size` sample indices of that type
/// with replacement.
pub fn sample_batch(
    by_type: &BTreeMap<u8, Vec<usize>>,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(u8, Vec<usize>)> {
    let group = GROUPS[rng.random_range(0..3)];
    let present: Vec<u8> = group
        .iter()
        .copied()
        .filter(|t| by_type.get(t).is_some_and(|v| !v.is_empty()))
        .collect();
    if present.is_empty() {
        let name = match group[0] {
            1 => "plan-annotated {1,2,3}",
            4 => "grounding {4,5}",
            _ => "navigation-only {6}",
        };
        return Err(Error::EmptyGroup(name));
    }
    let t = present[rng.random_range(0..present.len())];
    let pool = &by_type[&t];
    let picks = (0..batch_size).map(|_| pool[rng.random_range(0..pool.len())]).collect();
    Ok((t, picks))
}

/// Like `sample_batch` but skips empty groups, for ablation corpora that
/// drop whole groups on purpose.
pub fn sample_batch_lenient(
    by_type: &BTreeMap<u8, Vec<usize>>,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(u8, Vec<usize>)> {
    for _ in 0..64 {
        match sample_batch(by_type, batch_size, rng) {
            Ok(b) => return Ok(b),
            Err(Error::EmptyGroup(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::EmptyGroup("all"))
}

// ---------------------------------------------------------------------------
// rollouts
// ---------------------------------------------------------------------------

/// Everything needed to compute one step's loss later.
pub struct StepRecord {
    pub ctx: ContextSequence,
    pub seq: TargetSequence,
    pub pano: Vec<PanoToken>,
    pub pose: AgentPose,
    pub wp_gt: [Option<f64>; 12],
}

pub struct RolloutOutcome {
    pub records: Vec<StepRecord>,
    pub blocked_events: usize,
    pub reached_all: bool,
}

/// Run one online imitation episode. Each step's executed action is the
/// oracle's with probability beta, else the policy's; the supervision label
/// is always the oracle's. Blocked moves raise a flag, not an error.
#[allow(clippy::too_many_arguments)]
pub fn dagger_rollout(
    store: &ParamStore,
    cfg: &ModelConfig,
    scene: &Scene,
    sample: &AnnotationSample,
    hidden: &HiddenSample,
    beta: f64,
    weights_seed: u64,
    collect: bool,
) -> Result<RolloutOutcome> {
    let v = Vocabulary::shared();
    let mut rng = ChaCha8Rng::seed_from_u64(weights_seed);
    let mask = SupervisionMask::for_sample(sample);
    let mut live_scene = scene.clone();
    let mut pose = sample
        .start_pose
        .unwrap_or(AgentPose::new(Point3::from_array(hidden.start_position), hidden.start_heading));
    let mut memory = MultiLevelMemory::new();
    let mut cot_state = CoTMemoryState::new();
    let mut planning: Vec<String> = hidden.planning.clone();
    let mut targets: Vec<(Option<i64>, Point3)> = hidden
        .instance_id
        .iter()
        .zip(&hidden.instance_position)
        .map(|(ids, p)| {
            let id = ids.first().copied().unwrap_or(WAYPOINT_SENTINEL);
            ((id != WAYPOINT_SENTINEL).then_some(id), Point3::from_array(*p))
        })
        .collect();
    let mut subgoal = 0usize;
    let mut records = Vec::new();
    let mut blocked_events = 0usize;
    let mut executed_steps = 0usize;
    let mut revision_applied = false;

    for step in 0..MAX_EPISODE_STEPS {
        // scripted dynamic edit
        if let Some(rev) = &hidden.revision {
            if !revision_applied && executed_steps >= rev.remove_at_step {
                if live_scene.instance(rev.remove_instance).is_some() {
                    live_scene = scene::edit_scene(
                        &live_scene,
                        scene::SceneEdit::RemoveInstance,
                        rev.remove_instance,
                        None,
                    )?;
                }
                revision_applied = true;
            }
        }
        // revision gold: once the missing-target flag is up, the gold plan
        // skips the removed subgoal
        if revision_applied
            && cot_state.flags.contains(&cot_memory::ReplanFlag::TargetMissing)
            && planning.len() == hidden.planning.len()
        {
            if let Some(rev) = &hidden.revision {
                planning = rev.revised_planning.clone();
                let removed_idx = hidden
                    .instance_id
                    .iter()
                    .position(|ids| ids.first() == Some(&rev.remove_instance));
                if let Some(idx) = removed_idx {
                    if idx >= subgoal && idx < targets.len() {
                        targets.remove(idx);
                    }
                }
            }
        }

        memory.update(&scene::observe_at(&live_scene, &pose, step));
        // subgoal completion: within radius and (for instance targets) the
        // target is present in memory so the grounding can be judged
        while subgoal < targets.len()
            && pose.position.dist_xy(&targets[subgoal].1) <= SUBGOAL_RADIUS
            && ground_ready(&live_scene, &memory, targets[subgoal].0)
        {
            subgoal += 1;
        }
        let pano = memory.render_panorama(&pose);
        let candidates = waypoint::predict_waypoints(store, &pano, &pose);
        let instr = v.tokenize(&sample.instruction);
        let ctx = assemble_context(cfg, v, &instr, &memory, &pano, &pose, &cot_state, &candidates)?;
        let done = subgoal >= targets.len();
        let ready = !done && ground_ready(&live_scene, &memory, targets[subgoal].0);
        let plan_view: Vec<String> = if planning.is_empty() {
            vec![String::new()]
        } else {
            planning.clone()
        };
        let (gold, _) = build_target_sequence(
            v,
            &ctx,
            &live_scene,
            &memory,
            sample,
            hidden,
            &plan_view,
            subgoal,
            done,
            ready,
            mask,
            cfg.text_actions,
        )?;
        let produced = produce(store, cfg, &ctx, &gold);
        let wp_gt = waypoint::gt_by_sector(&scene::sector_waypoints(&live_scene, &pose));
        if collect {
            records.push(StepRecord {
                ctx: ctx.clone(),
                seq: TargetSequence {
                    resp: produced.resp.clone(),
                    targets: produced.targets.clone(),
                    mask,
                },
                pano: pano.clone(),
                pose,
                wp_gt,
            });
        }

        // executed action: oracle with probability beta, else the policy's
        let use_oracle = rng.random_bool(beta.clamp(0.0, 1.0));
        let (exec_nav, exec_seq): (ExecAction, Produced) = if use_oracle {
            (exec_from_gold(&gold, &ctx, v), produced)
        } else {
            let dec = decode_cot(store, cfg, &ctx);
            (exec_from_decode(&dec, v, &pose), dec)
        };

        let mut signals = StepSignals::default();
        let mut done_now = false;
        match exec_nav {
            ExecAction::Stop => done_now = true,
            ExecAction::Move(wp) => match scene::step_to_waypoint_traced(&live_scene, &pose, wp) {
                Ok(out) => {
                    pose = out.pose;
                    executed_steps += 1;
                }
                Err(Error::Blocked { .. }) => {
                    blocked_events += 1;
                    signals.blocked = true;
                }
                Err(e) => return Err(e),
            },
            ExecAction::Turn(delta) => {
                pose = AgentPose::new(pose.position, pose.heading + delta);
                executed_steps += 1;
            }
        }

        // memory bookkeeping from the executed sequence
        let parsed = cot_memory::parse(
            &exec_seq.seq,
            v,
            &exec_seq
                .ground_res
                .iter()
                .map(|r| r.position)
                .collect::<Vec<_>>(),
            exec_seq.nav_res.map(|(_, p)| p),
        );
        cot_memory::append(&mut cot_state, &parsed);
        cot_memory::detect_replan_signal(&mut cot_state, signals);

        if done_now {
            break;
        }
        // one stop-labeled record is enough once every subgoal is done
        if done {
            break;
        }
        let _ = step;
    }
    Ok(RolloutOutcome { records, blocked_events, reached_all: subgoal >= targets.len() })
}

/// An instance subgoal is groundable once some memory token's nearest
/// ground-truth point belongs to it; waypoint subgoals always are.
fn ground_ready(scene: &Scene, memory: &MultiLevelMemory, target: Option<i64>) -> bool {
    match target.and_then(|id| scene.instance(id)) {
        None => target.is_none(),
        Some(inst) => {
            !assign_grounding_labels(memory, &scene.instances, &GroundingTarget::Instance(inst))
                .is_none
        }
    }
}

enum ExecAction {
    Move(Point3),
    Turn(f64),
    Stop,
}

fn exec_from_gold(gold: &GoldSections, ctx: &ContextSequence, v: &Vocabulary) -> ExecAction {
    match &gold.nav {
        Some(GoldNav::Candidate { index, .. }) => ExecAction::Move(ctx.candidates[*index].position),
        Some(GoldNav::Stop) | None => ExecAction::Stop,
        Some(GoldNav::TextAction { word, .. }) => text_exec(*word, &ctx.pose, v),
    }
}

fn exec_from_decode(dec: &Produced, v: &Vocabulary, pose: &AgentPose) -> ExecAction {
    match dec.seq.nav {
        crate::model::NavRef::Waypoint(_) => match dec.nav_res {
            Some((_, p)) => ExecAction::Move(p),
            None => ExecAction::Stop,
        },
        crate::model::NavRef::Stop => ExecAction::Stop,
        crate::model::NavRef::TextAction(w) => text_exec(w, pose, v),
    }
}

fn text_exec(word: usize, pose: &AgentPose, v: &Vocabulary) -> ExecAction {
    match v.surface(word) {
        "forward" => ExecAction::Move(Point3::new(
            pose.position.x + TEXT_FORWARD * pose.heading.cos(),
            pose.position.y + TEXT_FORWARD * pose.heading.sin(),
            CAMERA_HEIGHT,
        )),
        "left" => ExecAction::Turn(30f64.to_radians()),
        "right" => ExecAction::Turn(-30f64.to_radians()),
        _ => ExecAction::Stop,
    }
}

/// Memory for a static (no-navigation) sample: a deterministic coverage scan
/// observing from a coarse grid of free cells, standing in for the complete
/// scenes grounding corpora come with.
pub fn coverage_memory(scene: &Scene) -> (MultiLevelMemory, AgentPose) {
    let mut memory = MultiLevelMemory::new();
    let stride = ((2.0 / scene.cell_size) as i32).max(1);
    let mut t = 0;
    for c in scene.free_cells() {
        if c.x % stride != 0 || c.y % stride != 0 {
            continue;
        }
        let pose = AgentPose::new(scene.cell_center(c, CAMERA_HEIGHT), 0.0);
        memory.update(&scene::observe_at(scene, &pose, t));
        t += 1;
    }
    // canonical pose: free cell nearest the scene center
    let cx = scene.width() as f64 * scene.cell_size / 2.0;
    let cy = scene.height() as f64 * scene.cell_size / 2.0;
    let center = Point3::new(cx, cy, CAMERA_HEIGHT);
    let pose_cell = scene
        .free_cells()
        .into_iter()
        .min_by(|a, b| {
            let da = scene.cell_center(*a, CAMERA_HEIGHT).dist_xy(&center);
            let db = scene.cell_center(*b, CAMERA_HEIGHT).dist_xy(&center);
            da.partial_cmp(&db).unwrap()
        })
        .expect("scene has free cells");
    let pose = AgentPose::new(scene.cell_center(pose_cell, CAMERA_HEIGHT), 0.0);
    memory.update(&scene::observe_at(scene, &pose, t));
    (memory, pose)
}

/// One supervised record for a static (type 2 or 5) sample.
pub fn static_record(
    store: &ParamStore,
    cfg: &ModelConfig,
    scene: &Scene,
    sample: &AnnotationSample,
    hidden: &HiddenSample,
) -> Result<StepRecord> {
    let v = Vocabulary::shared();
    let mask = SupervisionMask::for_sample(sample);
    let (memory, pose) = coverage_memory(scene);
    let pano = memory.render_panorama(&pose);
    let candidates = waypoint::predict_waypoints(store, &pano, &pose);
    let instr = v.tokenize(&sample.instruction);
    let ctx =
        assemble_context(cfg, v, &instr, &memory, &pano, &pose, &CoTMemoryState::new(), &candidates)?;
    let (gold, _) = build_target_sequence(
        v,
        &ctx,
        scene,
        &memory,
        sample,
        hidden,
        &hidden.planning,
        0,
        false,
        true,
        mask,
        cfg.text_actions,
    )?;
    let produced = produce(store, cfg, &ctx, &gold);
    let wp_gt = waypoint::gt_by_sector(&scene::sector_waypoints(scene, &pose));
    Ok(StepRecord {
        ctx,
        seq: TargetSequence { resp: produced.resp, targets: produced.targets, mask },
        pano,
        pose,
        wp_gt,
    })
}

// ---------------------------------------------------------------------------
// training loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub clip: f64,
    pub beta_floor: f64,
    pub beta_decay: f64,
    pub steps_per_epoch: usize,
    pub checkpoint_every: usize,
    pub waypoint_warmup_steps: usize,
    /// Linearly decay the learning rate to this fraction of `lr` by the
    /// final step.
    #[serde(default = "default_lr_floor")]
    pub lr_floor_fraction: f64,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub weights: LossWeights,
    /// Restrict training to these data types (ablations).
    #[serde(default)]
    pub type_filter: Option<Vec<u8>>,
}

fn default_lr_floor() -> f64 {
    0.1
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 400,
            batch_size: 4,
            lr: 3e-4,
            clip: 1.0,
            beta_floor: 0.2,
            beta_decay: 0.95,
            steps_per_epoch: 25,
            checkpoint_every: 200,
            waypoint_warmup_steps: 60,
            lr_floor_fraction: 0.1,
            model: ModelConfig::default(),
            weights: LossWeights::default(),
            type_filter: None,
        }
    }
}

pub struct TrainInputs {
    pub scenes: BTreeMap<String, Scene>,
    pub corpus: Vec<(AnnotationSample, HiddenSample)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainLogLine {
    pub step: usize,
    pub loss: f64,
    pub plan: f64,
    pub ground: f64,
    pub nav: f64,
    pub answer: f64,
    pub waypoint: f64,
    pub group_type: u8,
    pub beta: f64,
}

pub struct TrainOutcome {
    pub store: ParamStore,
    pub log: Vec<TrainLogLine>,
}

/// Beta schedule of the imitation mixture.
pub fn beta_at(cfg: &TrainConfig, step: usize) -> f64 {
    let epoch = (step / cfg.steps_per_epoch.max(1)) as i32;
    cfg.beta_decay.powi(epoch).max(cfg.beta_floor)
}

pub fn train(cfg: &TrainConfig, inputs: &TrainInputs, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let mut store = ParamStore::new();
    crate::model::register_model(&mut store, &cfg.model, cfg.seed);
    train_from(cfg, inputs, out_dir, store)
}

/// Resume-capable entry: continue from an existing parameter store.
pub fn train_from(
    cfg: &TrainConfig,
    inputs: &TrainInputs,
    out_dir: Option<&Path>,
    mut store: ParamStore,
) -> Result<TrainOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7261696e);
    let mut by_type: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
    for (i, (s, _)) in inputs.corpus.iter().enumerate() {
        if let Some(filter) = &cfg.type_filter {
            if !filter.contains(&s.data_type) {
                continue;
            }
        }
        by_type.entry(s.data_type).or_default().push(i);
    }
    if by_type.is_empty() {
        return Err(Error::EmptyGroup("all"));
    }
    let scene_ids: Vec<&String> = inputs.scenes.keys().collect();
    let mut log = Vec::new();
    let mut log_file = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(std::io::BufWriter::new(std::fs::File::create(dir.join("train_log.jsonl"))?))
        }
        None => None,
    };

    // phase 0: waypoint-predictor warmup on oracle labels
    for _ in 0..cfg.waypoint_warmup_steps {
        store.zero_grad();
        let mut tape = Tape::new();
        let mut parts: Vec<(T, f64)> = Vec::new();
        for _ in 0..cfg.batch_size.max(1) {
            let sid = scene_ids[rng.random_range(0..scene_ids.len())];
            let scene = &inputs.scenes[sid.as_str()];
            let free = scene.free_cells();
            let c = free[rng.random_range(0..free.len())];
            let pose = AgentPose::new(
                scene.cell_center(c, CAMERA_HEIGHT),
                rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
            );
            let mut mem = MultiLevelMemory::new();
            mem.update(&scene::observe_at(scene, &pose, 0));
            let pano = mem.render_panorama(&pose);
            let (logits, dist) = waypoint::forward_tape(&mut tape, &store, &pano, &pose);
            let gt = waypoint::gt_by_sector(&scene::sector_waypoints(scene, &pose));
            let l = waypoint::waypoint_loss_tape(&mut tape, logits, dist, &gt);
            parts.push((l, 1.0 / cfg.batch_size.max(1) as f64));
        }
        let loss = tape.add_scaled(&parts);
        tape.backward(loss);
        tape.harvest(&mut store);
        store.adam_step(cfg.lr, cfg.clip);
    }

    for step in 0..cfg.steps {
        let beta = beta_at(cfg, step);
        let frac = step as f64 / cfg.steps.max(1) as f64;
        let lr = cfg.lr * (1.0 - (1.0 - cfg.lr_floor_fraction) * frac);
        let (data_type, picks) = sample_batch_lenient(&by_type, cfg.batch_size, &mut rng)?;
        // collect supervised records for the whole batch
        let mut records: Vec<StepRecord> = Vec::new();
        for idx in picks {
            let (sample, hidden) = &inputs.corpus[idx];
            let scene = inputs
                .scenes
                .get(&sample.scene_id)
                .ok_or_else(|| Error::MissingTasks(format!("scene {}", sample.scene_id)))?;
            if sample.has_nav() {
                let out = dagger_rollout(
                    &store,
                    &cfg.model,
                    scene,
                    sample,
                    hidden,
                    beta,
                    rng.random(),
                    true,
                )?;
                records.extend(out.records);
            } else {
                records.push(static_record(&store, &cfg.model, scene, sample, hidden)?);
            }
        }
        if records.is_empty() {
            continue;
        }
        store.zero_grad();
        let scale = 1.0 / records.len() as f64;
        let mut agg = LossBreakdown::default();
        let mut total_loss = 0.0;
        for rec in &records {
            let mut tape = Tape::new();
            let (loss, _, bd) =
                step_loss_tape(&mut tape, &store, &cfg.model, &rec.ctx, &rec.seq, &cfg.weights);
            // joint waypoint-predictor objective at the same pose
            let (wlogits, wdist) = waypoint::forward_tape(&mut tape, &store, &rec.pano, &rec.pose);
            let wl = waypoint::waypoint_loss_tape(&mut tape, wlogits, wdist, &rec.wp_gt);
            let combined =
                tape.add_scaled(&[(loss, scale), (wl, scale * cfg.weights.waypoint)]);
            tape.backward(combined);
            tape.harvest(&mut store);
            total_loss += tape.item(combined);
            agg.plan += bd.plan * scale;
            agg.ground += bd.ground * scale;
            agg.nav += bd.nav * scale;
            agg.answer += bd.answer * scale;
            agg.waypoint += tape.item(wl) * scale;
        }
        if !total_loss.is_finite() {
            return Err(Error::Divergence(step));
        }
        store.adam_step(lr, cfg.clip);
        let line = TrainLogLine {
            step,
            loss: total_loss,
            plan: agg.plan,
            ground: agg.ground,
            nav: agg.nav,
            answer: agg.answer,
            waypoint: agg.waypoint,
            group_type: data_type,
            beta,
        };
        if let Some(f) = &mut log_file {
            writeln!(f, "{}", serde_json::to_string(&line)?)?;
        }
        log.push(line);
        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
                save_checkpoint(&store, cfg, &dir.join(format!("ckpt_{:06}.bin", step + 1)))?;
            }
        }
    }
    if let Some(dir) = out_dir {
        save_checkpoint(&store, cfg, &dir.join("ckpt_final.bin"))?;
    }
    Ok(TrainOutcome { store, log })
}

pub fn save_checkpoint(store: &ParamStore, cfg: &TrainConfig, path: &Path) -> Result<()> {
    let meta = serde_json::json!({
        "config": cfg,
        "vocab_hash": Vocabulary::shared().hash(),
    });
    store.save_archive(path, meta)
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, TrainConfig)> {
    let (store, meta) = ParamStore::load_archive(path)?;
    let cfg: TrainConfig = serde_json::from_value(
        meta.get("config").cloned().ok_or_else(|| Error::BadArchive("missing config".into()))?,
    )?;
    if let Some(h) = meta.get("vocab_hash").and_then(|v| v.as_u64()) {
        if h != Vocabulary::shared().hash() {
            return Err(Error::BadArchive("vocabulary hash mismatch".into()));
        }
    }
    Ok((store, cfg))
}

/// Unmasked full-sequence cross-entropy over the same logits, the reference
/// the gold-equivalence check compares against.
pub fn unmasked_reference_loss(
    vocab_logits: &[f64],
    n_vocab: usize,
    ground_logits: Option<(&[f64], usize)>,
    nav_logits: Option<(&[f64], usize)>,
    targets: &[PosTarget],
) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    let mut gi = 0usize;
    let mut ni = 0usize;
    for (j, t) in targets.iter().enumerate() {
        match t {
            PosTarget::Vocab { id, .. } => {
                let row = &vocab_logits[j * n_vocab..(j + 1) * n_vocab];
                total += ce_of(row, &[*id]);
                count += 1;
            }
            PosTarget::Ground { positives } => {
                let (gl, c) = ground_logits.expect("ground logits");
                let row = &gl[gi * c..(gi + 1) * c];
                total += ce_of(row, positives);
                gi += 1;
                count += 1;
            }
            PosTarget::Nav { class } => {
                let (nl, c) = nav_logits.expect("nav logits");
                let row = &nl[ni * c..(ni + 1) * c];
                total += ce_of(row, &[*class]);
                ni += 1;
                count += 1;
            }
            PosTarget::Masked => {}
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

fn ce_of(logits: &[f64], positives: &[usize]) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    positives.iter().map(|&p| (lse - logits[p]) / positives.len() as f64).sum()
}

// used by tests and the acceptance suite
pub fn corpus_by_type(corpus: &[(AnnotationSample, HiddenSample)]) -> BTreeMap<u8, Vec<usize>> {
    let mut by_type: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
    for (i, (s, _)) in corpus.iter().enumerate() {
        by_type.entry(s.data_type).or_default().push(i);
    }
    by_type
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, SceneConfig};

    fn tiny_inputs(seed: u64) -> (TrainConfig, TrainInputs) {
        let mut cfg = TrainConfig::default();
        cfg.model = ModelConfig { layers: 2, width: 32, heads: 2, ff_mult: 2, ..ModelConfig::default() };
        cfg.steps = 2;
        cfg.batch_size = 1;
        cfg.waypoint_warmup_steps = 2;
        cfg.checkpoint_every = 0;
        cfg.seed = seed;
        let scene = generate_scene(&SceneConfig::new(16, 16, 1, 4), seed).unwrap();
        let mix: BTreeMap<u8, usize> = [(1u8, 1usize), (5, 1), (6, 1)].into_iter().collect();
        let corpus = crate::data::synthesize_samples(&scene, &mix, seed).unwrap();
        let mut scenes = BTreeMap::new();
        scenes.insert(scene.scene_id.clone(), scene);
        (cfg, TrainInputs { scenes, corpus })
    }

    fn gold_record(seed: u64) -> (TrainConfig, TrainInputs, StepRecord) {
        let (cfg, inputs) = tiny_inputs(seed);
        let mut store = ParamStore::new();
        crate::model::register_model(&mut store, &cfg.model, seed);
        let (sample, hidden) =
            inputs.corpus.iter().find(|(s, _)| s.data_type == 1).unwrap().clone();
        let scene = &inputs.scenes[&sample.scene_id];
        let out = dagger_rollout(&store, &cfg.model, scene, &sample, &hidden, 1.0, 7, true).unwrap();
        let rec = out.records.into_iter().next().unwrap();
        (cfg, inputs, rec)
    }

    #[test]
    fn all_masks_zero_gives_exactly_zero() {
        let (cfg, _, rec) = gold_record(3);
        let mut store = ParamStore::new();
        crate::model::register_model(&mut store, &cfg.model, 3);
        let masked = TargetSequence {
            resp: rec.seq.resp.clone(),
            targets: rec.seq.targets.iter().map(|_| PosTarget::Masked).collect(),
            mask: SupervisionMask { plan: false, ground: false, nav: false, answer: false },
        };
        let mut tape = Tape::new();
        let (loss, _, _) = step_loss_tape(&mut tape, &store, &cfg.model, &rec.ctx, &masked, &LossWeights::default());
        assert_eq!(tape.item(loss), 0.0);
    }

    #[test]
    fn gold_equals_unmasked_reference() {
        let (cfg, _, rec) = gold_record(5);
        let mut store = ParamStore::new();
        crate::model::register_model(&mut store, &cfg.model, 5);
        assert!(rec.seq.targets.iter().all(|t| !matches!(t, PosTarget::Masked)));
        let mut tape = Tape::new();
        let fwd = forward_tape(&mut tape, &store, &cfg.model, &rec.ctx, &rec.seq.resp);
        let (vl, gl, nl) = step_logits(&mut tape, &store, &fwd, &rec.seq);
        let (loss, _) = masked_loss_from_logits_tape(
            &mut tape, vl, gl, nl, &rec.seq.targets, &LossWeights::default());
        let n_vocab = tape.shape(vl).1;
        let reference = unmasked_reference_loss(
            tape.value(vl),
            n_vocab,
            gl.map(|g| (tape.value(g), tape.shape(g).1)),
            nl.map(|n| (tape.value(n), tape.shape(n).1)),
            &rec.seq.targets,
        );
        assert!((tape.item(loss) - reference).abs() < 1e-9, "{} vs {}", tape.item(loss), reference);
    }

    #[test]
    fn mask_positions_have_exactly_zero_influence() {
        let (cfg, _, rec) = gold_record(7);
        let mut store = ParamStore::new();
        crate::model::register_model(&mut store, &cfg.model, 7);
        // nav-only masking: everything else masked
        let targets: Vec<PosTarget> = rec
            .seq
            .targets
            .iter()
            .map(|t| match t {
                PosTarget::Nav { class } => PosTarget::Nav { class: *class },
                _ => PosTarget::Masked,
            })
            .collect();
        let seq = TargetSequence { resp: rec.seq.resp.clone(), targets: targets.clone(), mask: rec.seq.mask };
        let mut tape = Tape::new();
        let fwd = forward_tape(&mut tape, &store, &cfg.model, &rec.ctx, &seq.resp);
        let (vl, gl, nl) = step_logits(&mut tape, &store, &fwd, &seq);
        let base_vals = tape.value(vl).to_vec();
        let (l0, _) = masked_loss_from_logits_tape(&mut tape, vl, gl, nl, &targets, &LossWeights::default());
        let base = tape.item(l0);
        // perturb vocab logits at masked rows via a fresh leaf graph
        let (rows, cols) = tape.shape(vl);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let mut perturbed = base_vals.clone();
            for (j, t) in targets.iter().enumerate() {
                if matches!(t, PosTarget::Masked) {
                    for c in 0..cols {
                        perturbed[j * cols + c] += rng.random_range(-3.0..3.0);
                    }
                }
            }
            let mut t2 = Tape::new();
            let vl2 = t2.leaf(rows, cols, perturbed);
            let gl2 = gl.map(|g| {
                let (r, c) = tape.shape(g);
                t2.leaf(r, c, tape.value(g).to_vec())
            });
            let nl2 = nl.map(|n| {
                let (r, c) = tape.shape(n);
                t2.leaf(r, c, tape.value(n).to_vec())
            });
            let (l2, _) = masked_loss_from_logits_tape(&mut t2, vl2, gl2, nl2, &targets, &LossWeights::default());
            assert_eq!(t2.item(l2), base, "masked perturbation changed the loss");
        }
    }

    #[test]
    fn micro_ce_matches_hand_computation() {
        // 3-class single-row case
        let mut tape = Tape::new();
        let logits = tape.leaf(1, 3, vec![0.2, -0.4, 1.1]);
        let targets = vec![PosTarget::Vocab { id: 2, comp: Comp::Plan }];
        let (loss, bd) = masked_loss_from_logits_tape(&mut tape, logits, None, None, &targets, &LossWeights::default());
        let z: f64 = [0.2f64, -0.4, 1.1].iter().map(|x| x.exp()).sum();
        let expect = z.ln() - 1.1;
        assert!((tape.item(loss) - expect).abs() < 1e-12);
        assert!((bd.plan - expect).abs() < 1e-12);
    }

    #[test]
    fn batch_policy_group_frequencies_and_consistency() {
        let by_type: BTreeMap<u8, Vec<usize>> = [
            (1u8, vec![0, 1]),
            (2, vec![2]),
            (4, vec![3, 4]),
            (5, vec![5]),
            (6, vec![6, 7, 8]),
        ]
        .into_iter()
        .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut group_counts = [0usize; 3];
        for _ in 0..6000 {
            let (t, picks) = sample_batch(&by_type, 4, &mut rng).unwrap();
            assert_eq!(picks.len(), 4);
            for p in &picks {
                assert!(by_type[&t].contains(p), "within-batch type consistency");
            }
            let g = GROUPS.iter().position(|g| g.contains(&t)).unwrap();
            group_counts[g] += 1;
        }
        for c in group_counts {
            let f = c as f64 / 6000.0;
            assert!((f - 1.0 / 3.0).abs() < 0.02, "group freq {f}");
        }
        // empty group errors
        let sparse: BTreeMap<u8, Vec<usize>> = [(6u8, vec![0])].into_iter().collect();
        let mut hit_err = false;
        for _ in 0..20 {
            if matches!(sample_batch(&sparse, 2, &mut rng), Err(Error::EmptyGroup(_))) {
                hit_err = true;
            }
        }
        assert!(hit_err);
    }

    #[test]
    fn dagger_beta_one_follows_oracle_and_labels_match_scan() {
        let (cfg, inputs) = tiny_inputs(11);
        let mut store = ParamStore::new();
        crate::model::register_model(&mut store, &cfg.model, 11);
        let (sample, hidden) =
            inputs.corpus.iter().find(|(s, _)| s.data_type == 6).unwrap().clone();
        let scene = &inputs.scenes[&sample.scene_id];
        let out = dagger_rollout(&store, &cfg.model, scene, &sample, &hidden, 1.0, 3, true).unwrap();
        assert!(!out.records.is_empty());
        for rec in &out.records {
            // label matches the exhaustive candidate-distance oracle
            let nav_target = rec.seq.targets.iter().find_map(|t| match t {
                PosTarget::Nav { class } => Some(*class),
                _ => None,
            });
            let Some(class) = nav_target else { continue };
            if class == rec.ctx.candidates.len() {
                continue; // stop label
            }
            // recompute: nearest candidate to the lookahead node, else best
            // remaining geodesic
            let target = {
                // the oracle pursued some subgoal; verify the label is optimal
                // for at least one of the task's targets under the stated rule
                let mut ok = false;
                for pos in &hidden.instance_position {
                    let t = Point3::from_array(*pos);
                    for ready in [true, false] {
                        let label =
                            oracle_nav_label(scene, &rec.pose, &rec.ctx.candidates, t, ready, false);
                        if let GoldNav::Candidate { index, .. } = label {
                            if index == class {
                                ok = true;
                            }
                        }
                    }
                }
                ok
            };
            assert!(target, "nav label not reproducible by the oracle rule");
        }
    }

    #[test]
    fn beta_zero_executes_policy_while_labels_stay_oracle() {
        let (cfg, inputs) = tiny_inputs(13);
        let mut store = ParamStore::new();
        crate::model::register_model(&mut store, &cfg.model, 13);
        let (sample, hidden) =
            inputs.corpus.iter().find(|(s, _)| s.data_type == 6).unwrap().clone();
        let scene = &inputs.scenes[&sample.scene_id];
        let out = dagger_rollout(&store, &cfg.model, scene, &sample, &hidden, 0.0, 3, true).unwrap();
        // all records still carry oracle nav labels
        for rec in &out.records {
            assert!(rec
                .seq
                .targets
                .iter()
                .any(|t| matches!(t, PosTarget::Nav { .. })));
        }
    }

    #[test]
    fn training_smoke_and_determinism() {
        let (cfg, inputs) = tiny_inputs(17);
        let a = train(&cfg, &inputs, None).unwrap();
        let b = train(&cfg, &inputs, None).unwrap();
        assert_eq!(a.log.len(), b.log.len());
        for (x, y) in a.log.iter().zip(&b.log) {
            assert_eq!(x.loss, y.loss, "training must be bit-deterministic");
        }
        assert_eq!(a.store.payload_f32(), b.store.payload_f32());
        assert!(a.log.iter().all(|l| l.loss.is_finite()));
    }

    #[test]
    fn checkpoint_roundtrip_carries_config() {
        let (mut cfg, inputs) = tiny_inputs(19);
        cfg.steps = 1;
        let out = train(&cfg, &inputs, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        save_checkpoint(&out.store, &cfg, &path).unwrap();
        let (store2, cfg2) = load_checkpoint(&path).unwrap();
        assert_eq!(cfg2.model.width, cfg.model.width);
        assert_eq!(store2.param_count(), out.store.param_count());
    }
}
