//! The structured chain-of-thought sequence and its surface syntax.
//!
//! `to_text` / `from_text` are exact inverses on valid sequences; the same
//! syntax appears in episode traces and in `replay` output.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::MemTokenId;
use crate::vocab::Vocabulary;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NavRef {
    /// Index into the step's candidate list.
    Waypoint(usize),
    Stop,
    /// Text-actions ablation: a discrete action word.
    TextAction(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoTSequence {
    pub plan_words: Vec<usize>,
    /// One entry per <target> slot; None is <grounding_none>.
    pub grounded: Vec<Option<MemTokenId>>,
    pub nav: NavRef,
    pub reached_subgoal: bool,
    pub answer_words: Vec<usize>,
    /// Decode budget ran out; navigation fell back to stop.
    pub malformed: bool,
}

impl CoTSequence {
    /// Listing-style dump. Words are space-joined surfaces.
    pub fn to_text(&self, v: &Vocabulary) -> String {
        let mut out = String::new();
        out.push_str("The next plans: ");
        out.push_str(&join_words(v, &self.plan_words));
        out.push_str("\nThe grounded:");
        let slots: Vec<String> = self
            .grounded
            .iter()
            .map(|g| match g {
                Some(id) => format!("target{}", id.surface()),
                None => "target<grounding_none>".to_string(),
            })
            .collect();
        out.push_str(&slots.join(","));
        out.push_str("\nThe navigation action:");
        match self.nav {
            NavRef::Waypoint(i) => out.push_str(&format!("waypoint<waypoint_{i}>")),
            NavRef::Stop => out.push_str("waypoint<navigation_stop>"),
            NavRef::TextAction(w) => out.push_str(v.surface(w)),
        }
        if self.reached_subgoal {
            out.push_str("reached the subgoal");
        }
        out.push_str("\nThe answer: ");
        out.push_str(&join_words(v, &self.answer_words));
        out.push('\n');
        out
    }

    /// Parse the surface syntax back; section markers must appear in order.
    pub fn from_text(text: &str, v: &Vocabulary) -> Result<CoTSequence> {
        let plan_at = find_marker(text, "The next plans:", 0)?;
        let ground_at = find_marker(text, "\nThe grounded:", plan_at)?;
        let nav_at = find_marker(text, "\nThe navigation action:", ground_at)?;
        let answer_at = find_marker(text, "\nThe answer:", nav_at)?;

        let plan_str = &text[plan_at + "The next plans:".len()..ground_at];
        let ground_str = &text[ground_at + "\nThe grounded:".len()..nav_at];
        let nav_str = &text[nav_at + "\nThe navigation action:".len()..answer_at];
        let answer_str = &text[answer_at + "\nThe answer:".len()..];

        let plan_words = split_words(v, plan_str)?;
        let mut grounded = Vec::new();
        for part in ground_str.split(',').filter(|s| !s.trim().is_empty()) {
            let part = part.trim();
            let rest = part
                .strip_prefix("target")
                .ok_or_else(|| Error::MalformedSequence(format!("bad ground slot {part:?}")))?;
            if rest == "<grounding_none>" {
                grounded.push(None);
            } else {
                let id = MemTokenId::parse(rest)
                    .ok_or_else(|| Error::MalformedSequence(format!("bad reference {rest:?}")))?;
                grounded.push(Some(id));
            }
        }
        let nav_str = nav_str.trim_end_matches('\n');
        let (nav_core, reached_subgoal) = match nav_str.strip_suffix("reached the subgoal") {
            Some(head) => (head, true),
            None => (nav_str, false),
        };
        let nav = if let Some(rest) = nav_core.strip_prefix("waypoint") {
            if rest == "<navigation_stop>" {
                NavRef::Stop
            } else {
                let idx = rest
                    .strip_prefix("<waypoint_")
                    .and_then(|s| s.strip_suffix('>'))
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::MalformedSequence(format!("bad waypoint {rest:?}")))?;
                NavRef::Waypoint(idx)
            }
        } else {
            let w = nav_core.trim();
            let id = v
                .id(w)
                .ok_or_else(|| Error::MalformedSequence(format!("unknown action word {w:?}")))?;
            NavRef::TextAction(id)
        };
        let answer_words = split_words(v, answer_str)?;
        Ok(CoTSequence {
            plan_words,
            grounded,
            nav,
            reached_subgoal,
            answer_words,
            malformed: false,
        })
    }
}

fn join_words(v: &Vocabulary, ids: &[usize]) -> String {
    ids.iter().map(|&i| v.surface(i)).collect::<Vec<_>>().join(" ")
}

fn split_words(v: &Vocabulary, s: &str) -> Result<Vec<usize>> {
    s.split_whitespace()
        .map(|w| {
            v.id(w).ok_or_else(|| Error::MalformedSequence(format!("unknown word {w:?}")))
        })
        .collect()
}

fn find_marker(text: &str, marker: &str, from: usize) -> Result<usize> {
    text[from..]
        .find(marker)
        .map(|i| from + i)
        .ok_or_else(|| Error::MalformedSequence(format!("marker {marker:?} missing or out of order")))
}

/// Uniformly random valid sequence, for round-trip property tests.
pub fn random_valid_sequence(rng: &mut rand_chacha::ChaCha8Rng, v: &Vocabulary) -> CoTSequence {
    use rand::prelude::*;
    let words = |rng: &mut rand_chacha::ChaCha8Rng, n: usize| -> Vec<usize> {
        (0..n).map(|_| rng.random_range(v.word_range())).collect()
    };
    let n_slots = rng.random_range(1..=3);
    let grounded = (0..n_slots)
        .map(|_| match rng.random_range(0..4) {
            0 => None,
            1 => Some(MemTokenId::Vox(
                rng.random_range(-40..40),
                rng.random_range(-40..40),
                rng.random_range(0..8),
            )),
            2 => Some(MemTokenId::Inst(rng.random_range(0..64))),
            _ => Some(MemTokenId::Zone(rng.random_range(0..32))),
        })
        .collect();
    let nav = match rng.random_range(0..3) {
        0 => NavRef::Stop,
        _ => NavRef::Waypoint(rng.random_range(0..12)),
    };
    let n_plan = rng.random_range(0..20);
    let n_answer = rng.random_range(0..8);
    CoTSequence {
        plan_words: words(rng, n_plan),
        grounded,
        nav,
        reached_subgoal: rng.random_bool(0.4),
        answer_words: words(rng, n_answer),
        malformed: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn text_roundtrip_random() {
        let v = Vocabulary::shared();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        for _ in 0..500 {
            let seq = random_valid_sequence(&mut rng, v);
            let text = seq.to_text(v);
            let back = CoTSequence::from_text(&text, v).unwrap();
            assert_eq!(back, seq, "text was:\n{text}");
        }
    }

    #[test]
    fn listing_style_surface() {
        let v = Vocabulary::shared();
        let seq = CoTSequence {
            plan_words: v.tokenize("2. go to the cabinet ."),
            grounded: vec![Some(MemTokenId::Inst(1))],
            nav: NavRef::Waypoint(9),
            reached_subgoal: true,
            answer_words: v.tokenize("moving toward the cabinet ."),
            malformed: false,
        };
        let text = seq.to_text(v);
        assert!(text.contains("The next plans: 2. go to the cabinet ."));
        assert!(text.contains("The grounded:target<inst_1>"));
        assert!(text.contains("The navigation action:waypoint<waypoint_9>reached the subgoal"));
        assert!(text.contains("The answer: moving toward the cabinet ."));
    }

    #[test]
    fn out_of_order_markers_rejected() {
        let v = Vocabulary::shared();
        let bad = "The grounded:target<inst_0>\nThe next plans: go\nThe navigation action:waypoint<navigation_stop>\nThe answer: \n";
        assert!(matches!(
            CoTSequence::from_text(bad, v),
            Err(Error::MalformedSequence(_))
        ));
    }
}
