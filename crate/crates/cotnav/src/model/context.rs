//! Multimodal context assembly: framing words, the three 3D token groups,
//! instruction, chain-of-thought history, and candidate waypoints, with
//! oldest-history-first truncation against the token cap.

use crate::cot_memory::{self, CoTMemoryState, HistTok};
use crate::error::{Error, Result};
use crate::geom::Point3;
use crate::memory::{MemTokenId, MultiLevelMemory, PanoToken, VoxelKey};
use crate::model::ModelConfig;
use crate::scene::AgentPose;
use crate::vocab::{self, Vocabulary};
use crate::waypoint::WaypointCandidate;

/// One context position with its back-reference.
#[derive(Debug, Clone)]
pub enum CtxTok {
    Word(usize),
    Pano { sector: usize, feature: Option<Vec<f64>>, position: Option<Point3>, rep: Option<VoxelKey> },
    Inst { token_id: usize, feature: Vec<f64>, position: Point3 },
    Zone { token_id: usize, feature: Vec<f64>, position: Point3 },
    Candidate { index: usize, position: Point3 },
    PrevWaypoint { position: Point3 },
    HistGround { position: Point3 },
}

impl CtxTok {
    pub fn position(&self) -> Option<Point3> {
        match self {
            CtxTok::Word(_) => None,
            CtxTok::Pano { position, .. } => *position,
            CtxTok::Inst { position, .. }
            | CtxTok::Zone { position, .. }
            | CtxTok::Candidate { position, .. }
            | CtxTok::PrevWaypoint { position }
            | CtxTok::HistGround { position } => Some(*position),
        }
    }
}

/// A context token the grounding head may select.
#[derive(Debug, Clone)]
pub struct GroundableRef {
    pub entry: usize,
    pub id: MemTokenId,
    pub position: Point3,
}

#[derive(Debug, Clone)]
pub struct ContextSequence {
    pub pose: AgentPose,
    pub entries: Vec<CtxTok>,
    pub groundable: Vec<GroundableRef>,
    pub candidates: Vec<WaypointCandidate>,
    /// Entry index of each candidate token, parallel to `candidates`.
    pub candidate_entries: Vec<usize>,
}

impl ContextSequence {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Build the model context for one step. History sections are truncated
/// oldest-plans-first, then oldest-waypoints, until the sequence fits.
pub fn assemble_context(
    cfg: &ModelConfig,
    vocabulary: &Vocabulary,
    instruction: &[usize],
    memory: &MultiLevelMemory,
    pano: &[PanoToken],
    pose: &AgentPose,
    state: &CoTMemoryState,
    candidates: &[WaypointCandidate],
) -> Result<ContextSequence> {
    let empty_state = CoTMemoryState::new();
    let state = if cfg.cot_memory_enabled { state } else { &empty_state };
    let n_plans = state.completed.len();
    let n_wayps = state.visited_waypoints.len();
    let mut skip_plans = 0;
    let mut skip_wayps = 0;
    loop {
        let ctx = build(cfg, vocabulary, instruction, memory, pano, pose, state, candidates, skip_plans, skip_wayps);
        if ctx.len() <= cfg.context_cap {
            return Ok(ctx);
        }
        if skip_plans < n_plans {
            skip_plans += 1;
        } else if skip_wayps < n_wayps {
            skip_wayps += 1;
        } else {
            return Err(Error::ContextOverflow { len: ctx.len(), cap: cfg.context_cap });
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn build(
    cfg: &ModelConfig,
    vocabulary: &Vocabulary,
    instruction: &[usize],
    memory: &MultiLevelMemory,
    pano: &[PanoToken],
    pose: &AgentPose,
    state: &CoTMemoryState,
    candidates: &[WaypointCandidate],
    skip_plans: usize,
    skip_wayps: usize,
) -> ContextSequence {
    let mut entries: Vec<CtxTok> = Vec::new();
    let mut groundable: Vec<GroundableRef> = Vec::new();

    entries.push(CtxTok::Word(vocab::SYS));
    for id in vocabulary.tokenize("you are a navigation assistant .") {
        entries.push(CtxTok::Word(id));
    }
    entries.push(CtxTok::Word(vocab::USR));

    entries.push(CtxTok::Word(vocab::PATCH_SEC));
    for t in pano {
        let entry = entries.len();
        if let (Some(p), Some(rep)) = (t.position, t.rep_voxel) {
            groundable.push(GroundableRef {
                entry,
                id: MemTokenId::Vox(rep.0, rep.1, rep.2),
                position: p,
            });
        }
        entries.push(CtxTok::Pano {
            sector: t.sector,
            feature: t.feature.clone(),
            position: t.position,
            rep: t.rep_voxel,
        });
    }

    entries.push(CtxTok::Word(vocab::INST_SEC));
    for inst in nearest_k(&memory.instances, pose, cfg.inst_cap, |i| i.center) {
        let entry = entries.len();
        groundable.push(GroundableRef {
            entry,
            id: MemTokenId::Inst(inst.token_id),
            position: inst.center,
        });
        entries.push(CtxTok::Inst {
            token_id: inst.token_id,
            feature: inst.feature.clone(),
            position: inst.center,
        });
    }

    entries.push(CtxTok::Word(vocab::ZONE_SEC));
    for zone in nearest_k(&memory.zones, pose, cfg.zone_cap, |z| z.center) {
        let entry = entries.len();
        groundable.push(GroundableRef {
            entry,
            id: MemTokenId::Zone(zone.token_id),
            position: zone.center,
        });
        entries.push(CtxTok::Zone {
            token_id: zone.token_id,
            feature: zone.feature.clone(),
            position: zone.center,
        });
    }

    entries.push(CtxTok::Word(vocab::INSTR_SEC));
    for &id in instruction {
        entries.push(CtxTok::Word(id));
    }

    entries.push(CtxTok::Word(vocab::HIST_SEC));
    let (hist, wayps) = cot_memory::serialize_for_context(state, vocabulary, skip_plans, skip_wayps);
    for h in hist {
        match h {
            HistTok::Word(id) => entries.push(CtxTok::Word(id)),
            HistTok::GroundRef(position) => entries.push(CtxTok::HistGround { position }),
        }
    }

    entries.push(CtxTok::Word(vocab::PREVWP_SEC));
    for position in wayps {
        entries.push(CtxTok::PrevWaypoint { position });
    }

    entries.push(CtxTok::Word(vocab::CAND_SEC));
    let mut candidate_entries = Vec::with_capacity(candidates.len());
    for c in candidates {
        candidate_entries.push(entries.len());
        entries.push(CtxTok::Candidate { index: c.sector, position: c.position });
    }

    entries.push(CtxTok::Word(vocab::CLOSING));

    ContextSequence {
        pose: *pose,
        entries,
        groundable,
        candidates: candidates.to_vec(),
        candidate_entries,
    }
}

/// The `cap` items nearest to the pose, in original order.
fn nearest_k<'a, I, F>(items: &'a [I], pose: &AgentPose, cap: usize, center: F) -> Vec<&'a I>
where
    F: Fn(&I) -> Point3,
{
    if items.len() <= cap {
        return items.iter().collect();
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| {
        let da = center(&items[a]).dist_xy(&pose.position);
        let db = center(&items[b]).dist_xy(&pose.position);
        da.partial_cmp(&db).unwrap().then(a.cmp(&b))
    });
    let mut keep: Vec<usize> = order.into_iter().take(cap).collect();
    keep.sort_unstable();
    keep.into_iter().map(|i| &items[i]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::MultiLevelMemory;
    use crate::scene::{self, generate_scene, SceneConfig, CAMERA_HEIGHT};

    fn setup() -> (MultiLevelMemory, AgentPose, Vec<PanoToken>) {
        let s = generate_scene(&SceneConfig::new(24, 24, 2, 6), 3).unwrap();
        let free = s.free_cells();
        let pose = AgentPose::new(s.cell_center(free[10], CAMERA_HEIGHT), 0.5);
        let mut m = MultiLevelMemory::new();
        m.update(&scene::observe_at(&s, &pose, 0));
        let pano = m.render_panorama(&pose);
        (m, pose, pano)
    }

    #[test]
    fn layout_section_order() {
        let cfg = ModelConfig::default();
        let v = Vocabulary::shared();
        let (m, pose, pano) = setup();
        let instr = v.tokenize("find the lamp in the bedroom .");
        let ctx = assemble_context(&cfg, v, &instr, &m, &pano, &pose, &CoTMemoryState::new(), &[])
            .unwrap();
        // section markers in order
        let marker_pos: Vec<usize> = [
            vocab::SYS,
            vocab::USR,
            vocab::PATCH_SEC,
            vocab::INST_SEC,
            vocab::ZONE_SEC,
            vocab::INSTR_SEC,
            vocab::HIST_SEC,
            vocab::PREVWP_SEC,
            vocab::CAND_SEC,
            vocab::CLOSING,
        ]
        .iter()
        .map(|want| {
            ctx.entries
                .iter()
                .position(|e| matches!(e, CtxTok::Word(id) if id == want))
                .unwrap_or_else(|| panic!("missing marker {want}"))
        })
        .collect();
        for w in marker_pos.windows(2) {
            assert!(w[0] < w[1]);
        }
        // exactly 12 pano entries right after the patch marker
        let patch_at = marker_pos[2];
        for k in 1..=12 {
            assert!(matches!(ctx.entries[patch_at + k], CtxTok::Pano { .. }));
        }
        // empty history sections still have their markers adjacent
        let hist_at = marker_pos[6];
        let prevwp_at = marker_pos[7];
        assert_eq!(hist_at + 1, prevwp_at);
    }

    #[test]
    fn truncation_drops_oldest_plans_first() {
        let mut cfg = ModelConfig::default();
        cfg.context_cap = 160;
        let v = Vocabulary::shared();
        let (m, pose, pano) = setup();
        let mut state = CoTMemoryState::new();
        for i in 0..30 {
            cot_memory::append(
                &mut state,
                &crate::cot_memory::ParsedStep {
                    completed_plan: Some(format!("{}. go to the lamp .", (i % 9) + 1)),
                    grounded: vec![(Some(MemTokenId::Inst(0)), pose.position)],
                    nav: crate::cot_memory::NavOutcome::MoveTo(pose.position),
                    reached_subgoal: true,
                },
            );
        }
        let instr = v.tokenize("find the lamp .");
        let ctx =
            assemble_context(&cfg, v, &instr, &m, &pano, &pose, &state, &[]).unwrap();
        assert!(ctx.len() <= 160);
        // waypoints survive plan truncation while any plans remain to drop
        let n_wayp = ctx
            .entries
            .iter()
            .filter(|e| matches!(e, CtxTok::PrevWaypoint { .. }))
            .count();
        assert!(n_wayp > 0, "plans are dropped before waypoints");
        // impossibly small cap: overflow error
        cfg.context_cap = 30;
        let err = assemble_context(&cfg, v, &instr, &m, &pano, &pose, &state, &[]);
        assert!(matches!(err, Err(Error::ContextOverflow { .. })));
    }

    #[test]
    fn groundable_backrefs_resolvable() {
        let cfg = ModelConfig::default();
        let v = Vocabulary::shared();
        let (m, pose, pano) = setup();
        let ctx = assemble_context(&cfg, v, &[], &m, &pano, &pose, &CoTMemoryState::new(), &[])
            .unwrap();
        assert!(!ctx.groundable.is_empty());
        for g in &ctx.groundable {
            match (&ctx.entries[g.entry], g.id) {
                (CtxTok::Pano { rep: Some(r), .. }, MemTokenId::Vox(x, y, z)) => {
                    assert_eq!((r.0, r.1, r.2), (x, y, z));
                    assert!(m.patch.contains_key(r));
                }
                (CtxTok::Inst { token_id, .. }, MemTokenId::Inst(i)) => assert_eq!(*token_id, i),
                (CtxTok::Zone { token_id, .. }, MemTokenId::Zone(i)) => assert_eq!(*token_id, i),
                other => panic!("mismatched groundable {other:?}"),
            }
        }
    }
}
