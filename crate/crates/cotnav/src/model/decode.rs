//! Grammar-constrained greedy decoding of the chain-of-thought sequence.
//!
//! One producer drives both inference and training: each section is either
//! teacher-forced from its gold tokens (when annotated) or generated
//! greedily under the grammar, and per-position targets are emitted
//! alongside (`Masked` for generated positions). Decode-budget exhaustion
//! marks the sequence malformed and falls back to <navigation_stop>.

use crate::geom::Point3;
use crate::memory::MemTokenId;
use crate::model::context::ContextSequence;
use crate::model::cot::{CoTSequence, NavRef};
use crate::model::decoder::{
    argmax_ties_low, embed_context_plain, embed_resp_plain, head_scores_plain, lm_logits_plain,
    DecoderRun,
};
use crate::model::ModelConfig;
use crate::params::ParamStore;
use crate::vocab::{self, Vocabulary};

/// One response-stream token.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RespTok {
    Vocab(usize),
    /// Resolution input: a groundable context entry.
    Resolved3d(usize),
    ResolvedNone,
    /// Resolution input: a candidate index.
    ResolvedCand(usize),
    ResolvedStop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Comp {
    Plan,
    Ground,
    Nav,
    Answer,
}

/// Supervision target for one response position.
#[derive(Debug, Clone, PartialEq)]
pub enum PosTarget {
    Vocab { id: usize, comp: Comp },
    /// Multi-positive grounding label over (groundable tokens + none).
    Ground { positives: Vec<usize> },
    /// Single-positive navigation label over (candidates + stop).
    Nav { class: usize },
    Masked,
}

/// Gold tokens per annotated section.
#[derive(Debug, Clone, Default)]
pub struct GoldSections {
    pub plan: Option<Vec<usize>>,
    pub ground: Option<Vec<GoldSlot>>,
    pub nav: Option<GoldNav>,
    pub answer: Option<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct GoldSlot {
    /// Input token injected after <target> under teacher forcing.
    pub resolved: RespTok,
    /// Positive class indices (the none class is the last index).
    pub positives: Vec<usize>,
}

#[derive(Debug, Clone)]
pub enum GoldNav {
    Candidate { index: usize, reached: bool },
    Stop,
    TextAction { word: usize, reached: bool },
}

#[derive(Debug, Clone, Copy)]
enum CState {
    Start,
    Plan(usize),
    GroundTarget(usize),
    GroundResolve(usize),
    GroundMore(usize),
    NavKey,
    NavResolve,
    NavAfter,
    AnswerForce,
    Answer(usize),
    Done,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundResolution {
    /// Index into `ctx.groundable`, None when <grounding_none> was chosen.
    pub choice: Option<usize>,
    pub id: Option<MemTokenId>,
    pub position: Option<Point3>,
}

#[derive(Debug, Clone)]
pub struct Produced {
    pub seq: CoTSequence,
    pub resp: Vec<RespTok>,
    pub targets: Vec<PosTarget>,
    pub ground_res: Vec<GroundResolution>,
    /// Chosen candidate (index, position) when navigation picked a waypoint.
    pub nav_res: Option<(usize, Point3)>,
}

pub type DecodeOutcome = Produced;

/// Greedy inference: every section generated.
pub fn decode_cot(store: &ParamStore, cfg: &ModelConfig, ctx: &ContextSequence) -> DecodeOutcome {
    produce(store, cfg, ctx, &GoldSections::default())
}

/// Run the producer over a context: teacher-force annotated sections from
/// `gold`, generate the rest greedily.
pub fn produce(
    store: &ParamStore,
    cfg: &ModelConfig,
    ctx: &ContextSequence,
    gold: &GoldSections,
) -> Produced {
    let v = Vocabulary::shared();
    let embed = embed_context_plain(store, ctx);
    let mut run = DecoderRun::new(store, cfg);
    let mut h_last = Vec::new();
    for row in &embed.rows {
        h_last = run.push(row);
    }

    let mut state = CState::Start;
    let mut resp: Vec<RespTok> = Vec::new();
    let mut targets: Vec<PosTarget> = Vec::new();
    let mut plan_words = Vec::new();
    let mut answer_words = Vec::new();
    let mut grounded: Vec<Option<MemTokenId>> = Vec::new();
    let mut ground_res: Vec<GroundResolution> = Vec::new();
    let mut nav_ref: Option<NavRef> = None;
    let mut nav_res: Option<(usize, Point3)> = None;
    let mut reached = false;
    let mut malformed = false;
    let mut plan_cursor = 0usize;
    let mut answer_cursor = 0usize;
    let none_class = ctx.groundable.len();
    let stop_class = ctx.candidates.len();

    let action_words: Vec<usize> =
        ["forward", "left", "right", "halt"].iter().map(|w| v.id(w).unwrap()).collect();

    loop {
        if matches!(state, CState::Done) {
            break;
        }
        if resp.len() >= cfg.decode_cap {
            malformed = true;
            break;
        }
        match state {
            CState::Done => unreachable!(),
            CState::GroundResolve(k) => {
                // resolution step: no vocabulary token
                let (tok, target, res) = match &gold.ground {
                    Some(slots) => {
                        let slot = &slots[k - 1];
                        let res = resolution_of(ctx, &slot.resolved);
                        (slot.resolved, PosTarget::Ground { positives: slot.positives.clone() }, res)
                    }
                    None => {
                        let scores =
                            head_scores_plain(store, "ghead", &h_last, &embed.ground_classes);
                        let choice = argmax_ties_low(&scores);
                        if choice == none_class {
                            (
                                RespTok::ResolvedNone,
                                PosTarget::Masked,
                                GroundResolution { choice: None, id: None, position: None },
                            )
                        } else {
                            let g = &ctx.groundable[choice];
                            (
                                RespTok::Resolved3d(g.entry),
                                PosTarget::Masked,
                                GroundResolution {
                                    choice: Some(choice),
                                    id: Some(g.id),
                                    position: Some(g.position),
                                },
                            )
                        }
                    }
                };
                grounded.push(res.id);
                ground_res.push(res);
                resp.push(tok);
                targets.push(target);
                let row = embed_resp_plain(store, &embed, ctx, &tok);
                h_last = run.push(&row);
                state = CState::GroundMore(k);
                continue;
            }
            CState::NavResolve => {
                let (tok, target) = match &gold.nav {
                    Some(GoldNav::Candidate { index, .. }) => {
                        (RespTok::ResolvedCand(*index), PosTarget::Nav { class: *index })
                    }
                    Some(GoldNav::Stop) => (RespTok::ResolvedStop, PosTarget::Nav { class: stop_class }),
                    Some(GoldNav::TextAction { .. }) => unreachable!("text nav has no resolution"),
                    None => {
                        let scores = head_scores_plain(store, "nhead", &h_last, &embed.nav_classes);
                        let choice = argmax_ties_low(&scores);
                        if choice == stop_class {
                            (RespTok::ResolvedStop, PosTarget::Masked)
                        } else {
                            (RespTok::ResolvedCand(choice), PosTarget::Masked)
                        }
                    }
                };
                match tok {
                    RespTok::ResolvedCand(i) => {
                        nav_ref = Some(NavRef::Waypoint(i));
                        nav_res = Some((i, ctx.candidates[i].position));
                    }
                    RespTok::ResolvedStop => nav_ref = Some(NavRef::Stop),
                    _ => unreachable!(),
                }
                resp.push(tok);
                targets.push(target);
                let row = embed_resp_plain(store, &embed, ctx, &tok);
                h_last = run.push(&row);
                state = CState::NavAfter;
                continue;
            }
            _ => {}
        }

        // vocabulary step: pick the token from gold or the model
        let tok = next_vocab_token(
            state,
            cfg,
            gold,
            &mut plan_cursor,
            &mut answer_cursor,
            &action_words,
            v,
            store,
            &h_last,
        );
        let comp = comp_of(state, tok);
        let target = if supervised_with(gold, comp) {
            PosTarget::Vocab { id: tok, comp }
        } else {
            PosTarget::Masked
        };
        match (state, comp) {
            (CState::Plan(_) | CState::Start, Comp::Plan) if v.is_word(tok) => plan_words.push(tok),
            (CState::Answer(_), Comp::Answer) if v.is_word(tok) => answer_words.push(tok),
            _ => {}
        }
        if tok == vocab::REACHED_SUBGOAL {
            reached = true;
        }
        if let CState::NavKey = state {
            if cfg.text_actions && action_words.contains(&tok) {
                nav_ref = Some(NavRef::TextAction(tok));
            }
        }
        resp.push(RespTok::Vocab(tok));
        targets.push(target);
        let row = embed_resp_plain(store, &embed, ctx, &RespTok::Vocab(tok));
        h_last = run.push(&row);
        state = advance(state, tok, cfg, v);
    }

    let nav = if malformed { NavRef::Stop } else { nav_ref.unwrap_or(NavRef::Stop) };
    if malformed {
        nav_res = None;
    }
    Produced {
        seq: CoTSequence {
            plan_words,
            grounded,
            nav,
            reached_subgoal: reached,
            answer_words,
            malformed,
        },
        resp,
        targets,
        ground_res,
        nav_res,
    }
}

fn resolution_of(ctx: &ContextSequence, tok: &RespTok) -> GroundResolution {
    match tok {
        RespTok::ResolvedNone => GroundResolution { choice: None, id: None, position: None },
        RespTok::Resolved3d(entry) => {
            let choice = ctx.groundable.iter().position(|g| g.entry == *entry);
            let g = choice.map(|c| &ctx.groundable[c]);
            GroundResolution {
                choice,
                id: g.map(|g| g.id),
                position: g.map(|g| g.position),
            }
        }
        _ => unreachable!("ground slot resolution must be 3d or none"),
    }
}

fn supervised_with(gold: &GoldSections, comp: Comp) -> bool {
    match comp {
        Comp::Plan => gold.plan.is_some(),
        Comp::Ground => gold.ground.is_some(),
        Comp::Nav => gold.nav.is_some(),
        Comp::Answer => gold.answer.is_some(),
    }
}

/// Component a token belongs to, given the state it was produced in.
fn comp_of(state: CState, tok: usize) -> Comp {
    match state {
        CState::Start | CState::Plan(_) => {
            if tok == vocab::GROUND_SEC {
                Comp::Ground
            } else {
                Comp::Plan
            }
        }
        CState::GroundTarget(_) | CState::GroundResolve(_) => Comp::Ground,
        CState::GroundMore(_) => {
            if tok == vocab::NAV_SEC {
                Comp::Nav
            } else {
                Comp::Ground
            }
        }
        CState::NavKey | CState::NavResolve => Comp::Nav,
        CState::NavAfter => {
            if tok == vocab::ANSWER_SEC {
                Comp::Answer
            } else {
                Comp::Nav
            }
        }
        CState::AnswerForce | CState::Answer(_) | CState::Done => Comp::Answer,
    }
}

/// Choose the next vocabulary token in `state`: gold when the section is
/// annotated (forcing the section transition when its stream runs out),
/// otherwise greedy over the grammar's allowed set.
#[allow(clippy::too_many_arguments)]
fn next_vocab_token(
    state: CState,
    cfg: &ModelConfig,
    gold: &GoldSections,
    plan_cursor: &mut usize,
    answer_cursor: &mut usize,
    action_words: &[usize],
    v: &Vocabulary,
    store: &ParamStore,
    h_last: &[f64],
) -> usize {
    let comma = v.id(",").unwrap();
    match state {
        CState::Start => vocab::PLAN_SEC,
        CState::Plan(n) => match &gold.plan {
            Some(words) => {
                if *plan_cursor < words.len() {
                    let w = words[*plan_cursor];
                    *plan_cursor += 1;
                    w
                } else {
                    vocab::GROUND_SEC
                }
            }
            None => {
                if n >= cfg.plan_word_cap {
                    vocab::GROUND_SEC
                } else {
                    greedy(store, h_last, v, true, &[vocab::GROUND_SEC])
                }
            }
        },
        CState::GroundTarget(_) => vocab::TARGET,
        CState::GroundMore(k) => match &gold.ground {
            Some(slots) => {
                if k < slots.len() {
                    comma
                } else {
                    vocab::NAV_SEC
                }
            }
            None => {
                if k >= cfg.ground_slot_cap {
                    vocab::NAV_SEC
                } else {
                    greedy(store, h_last, v, false, &[comma, vocab::NAV_SEC])
                }
            }
        },
        CState::NavKey => {
            if cfg.text_actions {
                match &gold.nav {
                    Some(GoldNav::TextAction { word, .. }) => *word,
                    Some(GoldNav::Stop) => v.id("halt").unwrap(),
                    Some(GoldNav::Candidate { .. }) => v.id("forward").unwrap(),
                    None => greedy(store, h_last, v, false, action_words),
                }
            } else {
                vocab::WAYPOINT
            }
        }
        CState::NavAfter => {
            let wants_reached = match &gold.nav {
                Some(GoldNav::Candidate { reached, .. })
                | Some(GoldNav::TextAction { reached, .. }) => Some(*reached),
                Some(GoldNav::Stop) => Some(false),
                None => None,
            };
            match wants_reached {
                Some(true) => vocab::REACHED_SUBGOAL,
                Some(false) => vocab::ANSWER_SEC,
                None => greedy(store, h_last, v, false, &[vocab::REACHED_SUBGOAL, vocab::ANSWER_SEC]),
            }
        }
        CState::AnswerForce => vocab::ANSWER_SEC,
        CState::Answer(n) => match &gold.answer {
            Some(words) => {
                if *answer_cursor < words.len() {
                    let w = words[*answer_cursor];
                    *answer_cursor += 1;
                    w
                } else {
                    vocab::EOS
                }
            }
            None => {
                if n >= cfg.answer_word_cap {
                    vocab::EOS
                } else {
                    greedy(store, h_last, v, true, &[vocab::EOS])
                }
            }
        },
        CState::GroundResolve(_) | CState::NavResolve | CState::Done => unreachable!(),
    }
}

/// Greedy pick over (all words if `words`) plus `extra` token ids.
fn greedy(store: &ParamStore, h_last: &[f64], v: &Vocabulary, words: bool, extra: &[usize]) -> usize {
    let logits = lm_logits_plain(store, h_last);
    let mut best: Option<(f64, usize)> = None;
    let mut consider = |id: usize| {
        let s = logits[id];
        if best.map_or(true, |(b, bi)| s > b || (s == b && id < bi)) {
            best = Some((s, id));
        }
    };
    if words {
        for id in v.word_range() {
            consider(id);
        }
    }
    for &id in extra {
        consider(id);
    }
    best.expect("nonempty allowed set").1
}

fn advance(state: CState, tok: usize, cfg: &ModelConfig, v: &Vocabulary) -> CState {
    let comma = v.id(",").unwrap();
    match state {
        CState::Start => CState::Plan(0),
        CState::Plan(n) => {
            if tok == vocab::GROUND_SEC {
                CState::GroundTarget(0)
            } else {
                CState::Plan(n + 1)
            }
        }
        CState::GroundTarget(k) => CState::GroundResolve(k + 1),
        CState::GroundResolve(k) => CState::GroundMore(k),
        CState::GroundMore(k) => {
            if tok == comma {
                CState::GroundTarget(k)
            } else {
                CState::NavKey
            }
        }
        CState::NavKey => {
            if cfg.text_actions {
                CState::NavAfter
            } else {
                CState::NavResolve
            }
        }
        CState::NavResolve => CState::NavAfter,
        CState::NavAfter => {
            if tok == vocab::REACHED_SUBGOAL {
                CState::AnswerForce
            } else {
                CState::Answer(0)
            }
        }
        CState::AnswerForce => CState::Answer(0),
        CState::Answer(n) => {
            if tok == vocab::EOS {
                CState::Done
            } else {
                CState::Answer(n + 1)
            }
        }
        CState::Done => CState::Done,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cot_memory::CoTMemoryState;
    use crate::memory::MultiLevelMemory;
    use crate::model::{assemble_context, register_model};
    use crate::scene::{self, generate_scene, AgentPose, SceneConfig, CAMERA_HEIGHT};
    use crate::waypoint;

    fn fixture(cfg: &ModelConfig, seed: u64) -> (ParamStore, ContextSequence) {
        let mut store = ParamStore::new();
        register_model(&mut store, cfg, seed);
        let s = generate_scene(&SceneConfig::new(20, 20, 2, 5), seed).unwrap();
        let free = s.free_cells();
        let pose = AgentPose::new(s.cell_center(free[5], CAMERA_HEIGHT), -0.4);
        let mut m = MultiLevelMemory::new();
        m.update(&scene::observe_at(&s, &pose, 0));
        let pano = m.render_panorama(&pose);
        let cands = waypoint::predict_waypoints(&store, &pano, &pose);
        let v = Vocabulary::shared();
        let instr = v.tokenize("go to the lamp .");
        let ctx = assemble_context(cfg, v, &instr, &m, &pano, &pose, &CoTMemoryState::new(), &cands)
            .unwrap();
        (store, ctx)
    }

    #[test]
    fn decode_is_deterministic_and_grammatical() {
        let cfg = ModelConfig { layers: 2, width: 32, heads: 2, ff_mult: 2, ..ModelConfig::default() };
        let (store, ctx) = fixture(&cfg, 3);
        let a = decode_cot(&store, &cfg, &ctx);
        let b = decode_cot(&store, &cfg, &ctx);
        assert_eq!(a.resp, b.resp);
        assert_eq!(a.seq, b.seq);
        // surface text parses back identically
        let v = Vocabulary::shared();
        let text = a.seq.to_text(v);
        let parsed = CoTSequence::from_text(&text, v).unwrap();
        assert_eq!(parsed, a.seq);
        // pointer soundness: every resolution is a real back-reference
        for r in &a.ground_res {
            if let Some(c) = r.choice {
                assert!(c < ctx.groundable.len());
                assert_eq!(ctx.groundable[c].id, r.id.unwrap());
            }
        }
        if let Some((i, p)) = a.nav_res {
            assert!(i < ctx.candidates.len());
            assert_eq!(ctx.candidates[i].position, p);
        }
    }

    #[test]
    fn teacher_forcing_consumes_gold_exactly() {
        let cfg = ModelConfig { layers: 2, width: 32, heads: 2, ff_mult: 2, ..ModelConfig::default() };
        let (store, ctx) = fixture(&cfg, 5);
        let v = Vocabulary::shared();
        let plan = v.tokenize("1. go to the lamp .");
        let slot = GoldSlot {
            resolved: RespTok::Resolved3d(ctx.groundable[0].entry),
            positives: vec![0],
        };
        let nav = if ctx.candidates.is_empty() {
            GoldNav::Stop
        } else {
            GoldNav::Candidate { index: 0, reached: true }
        };
        let answer = v.tokenize("moving toward the lamp .");
        let gold = GoldSections {
            plan: Some(plan.clone()),
            ground: Some(vec![slot]),
            nav: Some(nav),
            answer: Some(answer.clone()),
        };
        let out = produce(&store, &cfg, &ctx, &gold);
        assert!(!out.seq.malformed);
        assert_eq!(out.seq.plan_words, plan);
        assert_eq!(out.seq.answer_words, answer);
        assert_eq!(out.seq.grounded.len(), 1);
        // all positions supervised on gold data
        assert!(out.targets.iter().all(|t| !matches!(t, PosTarget::Masked)));
        // resp and targets are aligned
        assert_eq!(out.resp.len(), out.targets.len());
    }

    #[test]
    fn nav_only_gold_masks_other_sections() {
        let cfg = ModelConfig { layers: 2, width: 32, heads: 2, ff_mult: 2, ..ModelConfig::default() };
        let (store, ctx) = fixture(&cfg, 7);
        let nav = if ctx.candidates.is_empty() {
            GoldNav::Stop
        } else {
            GoldNav::Candidate { index: ctx.candidates.len() - 1, reached: false }
        };
        let gold = GoldSections { nav: Some(nav), ..Default::default() };
        let out = produce(&store, &cfg, &ctx, &gold);
        let mut saw_nav_target = false;
        for (tok, target) in out.resp.iter().zip(&out.targets) {
            match target {
                PosTarget::Nav { .. } => saw_nav_target = true,
                PosTarget::Vocab { comp, .. } => {
                    assert_eq!(*comp, Comp::Nav, "only nav vocab positions supervised: {tok:?}")
                }
                PosTarget::Ground { .. } => panic!("ground supervised on nav-only gold"),
                PosTarget::Masked => {}
            }
        }
        assert!(saw_nav_target);
        // generated sections still produced (synergy pathway)
        assert!(out.resp.iter().any(|t| matches!(t, RespTok::Vocab(id) if *id == vocab::GROUND_SEC)));
    }
}
