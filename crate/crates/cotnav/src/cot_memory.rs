//! Chain-of-thought memory: the parsed history of plans completed, targets
//! grounded, and waypoints visited, fed back into the model context each
//! step, plus the failure flags that trigger replanning.

use serde::{Deserialize, Serialize};

use crate::geom::Point3;
use crate::memory::MemTokenId;
use crate::model::cot::{CoTSequence, NavRef};
use crate::vocab::{self, Vocabulary};

/// Consecutive failed groundings of the same sub-instruction that raise
/// `TargetMissing`.
pub const STALL_THRESHOLD: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReplanFlag {
    Blocked,
    TargetMissing,
}

impl ReplanFlag {
    pub fn as_str(&self) -> &'static str {
        match self {
            ReplanFlag::Blocked => "blocked",
            ReplanFlag::TargetMissing => "target_missing",
        }
    }

    pub fn token(&self) -> usize {
        match self {
            ReplanFlag::Blocked => vocab::FLAG_BLOCKED,
            ReplanFlag::TargetMissing => vocab::FLAG_TARGET_MISSING,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum NavOutcome {
    MoveTo(Point3),
    Stop,
}

/// What one decoded step contributes to the memory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedStep {
    /// The sub-instruction completed this step, when "reached the subgoal"
    /// was decoded.
    pub completed_plan: Option<String>,
    /// Grounded references with their global positions; None means the
    /// grounding head chose <grounding_none>.
    pub grounded: Vec<(Option<MemTokenId>, Point3)>,
    pub nav: NavOutcome,
    pub reached_subgoal: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletedPlan {
    pub text: String,
    pub grounded: Option<(MemTokenId, Point3)>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CoTMemoryState {
    pub completed: Vec<CompletedPlan>,
    pub grounded_records: Vec<(Option<MemTokenId>, Point3)>,
    pub visited_waypoints: Vec<Point3>,
    pub flags: Vec<ReplanFlag>,
    pub step: usize,
    /// Record count at the last plan completion; grounding-miss streaks are
    /// counted from here.
    records_at_completion: usize,
    /// Streak length at which a TargetMissing flag was last raised.
    missing_flagged_at: Option<usize>,
}

impl CoTMemoryState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn completed_plans(&self) -> Vec<&str> {
        self.completed.iter().map(|c| c.text.as_str()).collect()
    }
}

/// Extract the memory contribution of a decoded sequence. The positions of
/// the grounded references and the executed waypoint come from the decode
/// resolutions against the live context.
pub fn parse(
    seq: &CoTSequence,
    vocabulary: &Vocabulary,
    ground_positions: &[Option<Point3>],
    nav_position: Option<Point3>,
) -> ParsedStep {
    debug_assert_eq!(ground_positions.len(), seq.grounded.len());
    let grounded = seq
        .grounded
        .iter()
        .zip(ground_positions)
        .map(|(id, pos)| (*id, pos.unwrap_or(Point3::new(0.0, 0.0, 0.0))))
        .collect();
    let nav = match seq.nav {
        NavRef::Stop => NavOutcome::Stop,
        NavRef::Waypoint(_) | NavRef::TextAction(_) => match nav_position {
            Some(p) => NavOutcome::MoveTo(p),
            None => NavOutcome::Stop,
        },
    };
    let completed_plan = if seq.reached_subgoal && !seq.plan_words.is_empty() {
        // the first plan line is the sub-instruction being executed
        Some(first_plan_line(seq, vocabulary))
    } else {
        None
    };
    ParsedStep { completed_plan, grounded, nav, reached_subgoal: seq.reached_subgoal }
}

fn first_plan_line(seq: &CoTSequence, v: &Vocabulary) -> String {
    // lines are delimited by the numeral tokens "1."... take words up to the
    // second numeral
    let mut line = Vec::new();
    let mut numerals = 0;
    for &w in &seq.plan_words {
        let s = v.surface(w);
        if s.len() == 2 && s.ends_with('.') && s.chars().next().unwrap().is_ascii_digit() {
            numerals += 1;
            if numerals == 2 {
                break;
            }
        }
        line.push(w);
    }
    v.detokenize(&line)
}

/// Append-only accumulation.
pub fn append(state: &mut CoTMemoryState, parsed: &ParsedStep) {
    for g in &parsed.grounded {
        state.grounded_records.push(*g);
    }
    if let NavOutcome::MoveTo(p) = parsed.nav {
        state.visited_waypoints.push(p);
    }
    if let Some(text) = &parsed.completed_plan {
        let grounded = parsed
            .grounded
            .iter()
            .find_map(|(id, pos)| id.map(|i| (i, *pos)));
        state.completed.push(CompletedPlan { text: text.clone(), grounded });
        state.records_at_completion = state.grounded_records.len();
        state.missing_flagged_at = None;
    }
    state.step += 1;
}

/// One serialized history token.
#[derive(Debug, Clone, PartialEq)]
pub enum HistTok {
    Word(usize),
    /// A grounded target rendered as a position-bearing token.
    GroundRef(Point3),
}

/// Deterministic serialization of the state into the two history sections:
/// completed plans (with grounded pointers and failure flags) and previously
/// visited waypoints. `skip_plans`/`skip_wayps` drop the oldest entries for
/// context truncation.
pub fn serialize_for_context(
    state: &CoTMemoryState,
    vocabulary: &Vocabulary,
    skip_plans: usize,
    skip_wayps: usize,
) -> (Vec<HistTok>, Vec<Point3>) {
    let mut hist = Vec::new();
    for c in state.completed.iter().skip(skip_plans) {
        for id in vocabulary.tokenize(&c.text) {
            hist.push(HistTok::Word(id));
        }
        if let Some((_, pos)) = c.grounded {
            hist.push(HistTok::GroundRef(pos));
        }
    }
    for f in &state.flags {
        hist.push(HistTok::Word(f.token()));
    }
    let wayps = state.visited_waypoints.iter().skip(skip_wayps).copied().collect();
    (hist, wayps)
}

/// Outcome bits of the executed step that the memory inspects for failure.
#[derive(Debug, Clone, Copy, Default)]
pub struct StepSignals {
    pub blocked: bool,
}

/// Raise "blocked" on a blocked move, and "target_missing" on the fifth
/// consecutive failed grounding of the same sub-instruction. The flag is
/// appended to the state and serialized into later contexts.
pub fn detect_replan_signal(state: &mut CoTMemoryState, signals: StepSignals) -> Option<ReplanFlag> {
    if signals.blocked {
        state.flags.push(ReplanFlag::Blocked);
        return Some(ReplanFlag::Blocked);
    }
    let tail = &state.grounded_records[state.records_at_completion..];
    let streak = tail.iter().rev().take_while(|(id, _)| id.is_none()).count();
    if streak >= STALL_THRESHOLD && state.missing_flagged_at != Some(streak) {
        if streak == STALL_THRESHOLD {
            state.flags.push(ReplanFlag::TargetMissing);
            state.missing_flagged_at = Some(streak);
            return Some(ReplanFlag::TargetMissing);
        }
        state.missing_flagged_at = Some(streak);
    }
    None
}

/// One line of the episode trace file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: usize,
    pub parsed: ParsedStep,
    pub flags: Vec<String>,
    /// x, y, z, heading after the step.
    pub pose: [f64; 4],
    /// Listing-style surface text of the decoded sequence.
    pub surface: String,
    /// (voxels, instance tokens, zone tokens) after the step.
    pub memory_counts: (usize, usize, usize),
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step(reached: bool, ground: Option<MemTokenId>, stop: bool) -> ParsedStep {
        ParsedStep {
            completed_plan: reached.then(|| "1. go to the lamp.".to_string()),
            grounded: vec![(ground, Point3::new(1.0, 2.0, 0.5))],
            nav: if stop { NavOutcome::Stop } else { NavOutcome::MoveTo(Point3::new(0.5, 0.5, 1.5)) },
            reached_subgoal: reached,
        }
    }

    #[test]
    fn append_counts() {
        let mut st = CoTMemoryState::new();
        append(&mut st, &step(false, Some(MemTokenId::Inst(0)), false));
        assert_eq!(st.visited_waypoints.len(), 1);
        assert_eq!(st.grounded_records.len(), 1);
        assert!(st.completed.is_empty());
        for _ in 0..4 {
            append(&mut st, &step(false, None, false));
        }
        assert_eq!(st.visited_waypoints.len(), 5);
        assert_eq!(st.step, 5);
    }

    #[test]
    fn replan_threshold_exact() {
        let mut st = CoTMemoryState::new();
        for i in 0..6 {
            append(&mut st, &step(false, None, false));
            let flag = detect_replan_signal(&mut st, StepSignals::default());
            if i < STALL_THRESHOLD - 1 {
                assert_eq!(flag, None, "no flag at streak {}", i + 1);
            } else if i == STALL_THRESHOLD - 1 {
                assert_eq!(flag, Some(ReplanFlag::TargetMissing));
            } else {
                assert_eq!(flag, None, "flag raised once");
            }
        }
        assert_eq!(st.flags, vec![ReplanFlag::TargetMissing]);
    }

    #[test]
    fn blocked_flag_immediate() {
        let mut st = CoTMemoryState::new();
        append(&mut st, &step(false, Some(MemTokenId::Zone(1)), false));
        let flag = detect_replan_signal(&mut st, StepSignals { blocked: true });
        assert_eq!(flag, Some(ReplanFlag::Blocked));
        assert_eq!(st.flags, vec![ReplanFlag::Blocked]);
    }

    #[test]
    fn completion_resets_streak() {
        let mut st = CoTMemoryState::new();
        for _ in 0..4 {
            append(&mut st, &step(false, None, false));
            detect_replan_signal(&mut st, StepSignals::default());
        }
        append(&mut st, &step(true, Some(MemTokenId::Inst(3)), false));
        detect_replan_signal(&mut st, StepSignals::default());
        for _ in 0..4 {
            append(&mut st, &step(false, None, false));
            assert_eq!(detect_replan_signal(&mut st, StepSignals::default()), None);
        }
        append(&mut st, &step(false, None, false));
        assert_eq!(
            detect_replan_signal(&mut st, StepSignals::default()),
            Some(ReplanFlag::TargetMissing)
        );
    }

    #[test]
    fn serialization_is_deterministic_and_append_only() {
        let v = Vocabulary::shared();
        let mut st = CoTMemoryState::new();
        append(&mut st, &step(true, Some(MemTokenId::Inst(0)), false));
        let (h1, w1) = serialize_for_context(&st, v, 0, 0);
        let (h2, w2) = serialize_for_context(&st, v, 0, 0);
        assert_eq!(h1, h2);
        assert_eq!(w1, w2);
        append(&mut st, &step(false, None, false));
        let (h3, w3) = serialize_for_context(&st, v, 0, 0);
        assert!(h3.len() >= h1.len());
        assert_eq!(w3.len(), w1.len() + 1);
        // truncation drops the oldest entries
        let (h4, _) = serialize_for_context(&st, v, 1, 0);
        assert!(h4.len() < h3.len());
    }

    #[test]
    fn parsed_step_json_roundtrip() {
        let p = step(true, Some(MemTokenId::Vox(3, -1, 2)), false);
        let text = serde_json::to_string(&p).unwrap();
        let back: ParsedStep = serde_json::from_str(&text).unwrap();
        assert_eq!(back, p);
    }
}
