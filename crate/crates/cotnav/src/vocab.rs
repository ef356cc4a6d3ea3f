//! Fixed vocabulary: special tokens with their surface strings plus the
//! template word list. Ids are stable by construction (the list is code).

use std::collections::BTreeMap;
use std::sync::OnceLock;

use crate::features::{ADJECTIVES, CATEGORIES, ZONE_NAMES};

// special token ids
pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const MASK: usize = 3;
pub const UNK: usize = 4;
pub const SYS: usize = 5;
pub const USR: usize = 6;
pub const ASST: usize = 7;
pub const PATCH_SEC: usize = 8;
pub const INST_SEC: usize = 9;
pub const ZONE_SEC: usize = 10;
pub const INSTR_SEC: usize = 11;
pub const HIST_SEC: usize = 12;
pub const PREVWP_SEC: usize = 13;
pub const CAND_SEC: usize = 14;
pub const CLOSING: usize = 15;
pub const PLAN_SEC: usize = 16;
pub const GROUND_SEC: usize = 17;
pub const NAV_SEC: usize = 18;
pub const ANSWER_SEC: usize = 19;
pub const TARGET: usize = 20;
pub const WAYPOINT: usize = 21;
pub const GROUNDING_NONE: usize = 22;
pub const NAVIGATION_STOP: usize = 23;
pub const REACHED_SUBGOAL: usize = 24;
pub const FLAG_BLOCKED: usize = 25;
pub const FLAG_TARGET_MISSING: usize = 26;
pub const SPECIAL_COUNT: usize = 27;

const SPECIAL_SURFACES: [&str; SPECIAL_COUNT] = [
    "<pad>",
    "<bos>",
    "<eos>",
    "<mask>",
    "<unk>",
    "<|system|>",
    "<|user|>",
    "<|assistant|>",
    "<patch tokens>",
    "<instance tokens>",
    "<zone tokens>",
    "The instruction:",
    "The history plans:",
    "The previous waypoints:",
    "The candidate waypoints:",
    "Please give deep thinking plans.",
    "The next plans:",
    "The grounded:",
    "The navigation action:",
    "The answer:",
    "target",
    "waypoint",
    "<grounding_none>",
    "<navigation_stop>",
    "reached the subgoal",
    "[blocked]",
    "[target missing]",
];

const FUNCTION_WORDS: [&str; 122] = [
    "go", "walk", "to", "the", "a", "an", "in", "and", "then", "find", "take", "turn", "on",
    "off", "stop", "at", "of", "reach", "visit", "pick", "up", "place", "put", "look", "now",
    "next", "area", "room", "it", "is", "not", "visible", "with", "you", "are", "navigation",
    "assistant", "please", "step", "goal", "locate", "near", "beside", "behind", "across",
    "front", "back", "left", "right", "forward", "halt", "move", "moving", "toward", "towards",
    "complete", "task", "done", "searching", "for", "status", "revised", "skip", "missing",
    "blocked", "unreachable", "continue", "down", "hang", "bring", "check", "open", "close",
    "clean", "adjust", "water", "light", "door", "window", "wall", "floor", "corner", "center",
    "by", "from", "into", "out", "over", "under", "between", "along", "past", "around",
    "containing", "holding", "side", "this", "that", "there", "here", "first", "second",
    "third", "your", "its", "them", "spot", "point", "head", "enter", "leave", "cross",
    "follow", "stand", "wait", "grab", "carry", "set", "stay", "end", "begin", "start",
];

const PUNCT: [&str; 2] = [".", ","];
const NUMERALS: [&str; 9] = ["1.", "2.", "3.", "4.", "5.", "6.", "7.", "8.", "9."];

pub struct Vocabulary {
    surfaces: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocabulary {
    fn build() -> Vocabulary {
        let mut surfaces: Vec<String> =
            SPECIAL_SURFACES.iter().map(|s| s.to_string()).collect();
        let push = |surfaces: &mut Vec<String>, w: &str| {
            if !surfaces.iter().any(|s| s == w) {
                surfaces.push(w.to_string());
            }
        };
        for w in PUNCT.iter().chain(NUMERALS.iter()).chain(FUNCTION_WORDS.iter()) {
            push(&mut surfaces, w);
        }
        for w in CATEGORIES.iter().chain(ZONE_NAMES.iter()).chain(ADJECTIVES.iter()) {
            push(&mut surfaces, w);
        }
        // two-word categories never appear; guard anyway
        let index = surfaces.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        Vocabulary { surfaces, index }
    }

    pub fn shared() -> &'static Vocabulary {
        static V: OnceLock<Vocabulary> = OnceLock::new();
        V.get_or_init(Vocabulary::build)
    }

    pub fn size(&self) -> usize {
        self.surfaces.len()
    }

    pub fn surface(&self, id: usize) -> &str {
        &self.surfaces[id]
    }

    pub fn id(&self, surface: &str) -> Option<usize> {
        self.index.get(surface).copied()
    }

    pub fn is_word(&self, id: usize) -> bool {
        id >= SPECIAL_COUNT
    }

    /// First word id; word ids run from here to `size()`.
    pub fn word_range(&self) -> std::ops::Range<usize> {
        SPECIAL_COUNT..self.size()
    }

    /// Tokenize plain template text (instructions, plan lines, answers).
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        let mut out = Vec::new();
        for piece in text.split_whitespace() {
            let lower = piece.to_lowercase();
            if let Some(id) = self.id(&lower) {
                out.push(id);
                continue;
            }
            // split one trailing punctuation mark
            if lower.len() > 1 {
                let (head, tail) = lower.split_at(lower.len() - 1);
                if PUNCT.contains(&tail) {
                    out.push(self.id(head).unwrap_or(UNK));
                    out.push(self.id(tail).expect("punct in vocab"));
                    continue;
                }
            }
            out.push(UNK);
        }
        out
    }

    /// Join tokens into text; punctuation attaches to the previous token.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for &id in ids {
            let s = self.surface(id);
            if !out.is_empty() && !PUNCT.contains(&s) {
                out.push(' ');
            }
            out.push_str(s);
        }
        out
    }

    /// Stable content hash, stored in checkpoint manifests.
    pub fn hash(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for s in &self.surfaces {
            for b in s.bytes() {
                h = (h ^ b as u64).wrapping_mul(0x100000001b3);
            }
            h = (h ^ 0xFF).wrapping_mul(0x100000001b3);
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_stable_and_unique() {
        let v = Vocabulary::shared();
        assert_eq!(v.surface(EOS), "<eos>");
        assert_eq!(v.surface(PLAN_SEC), "The next plans:");
        assert_eq!(v.surface(REACHED_SUBGOAL), "reached the subgoal");
        let mut seen = std::collections::HashSet::new();
        for i in 0..v.size() {
            assert!(seen.insert(v.surface(i).to_string()), "dup {}", v.surface(i));
        }
        // every category, zone, adjective present as a word
        for w in CATEGORIES.iter().chain(ZONE_NAMES.iter()).chain(ADJECTIVES.iter()) {
            let id = v.id(w).unwrap();
            assert!(v.is_word(id));
        }
    }

    #[test]
    fn tokenize_detokenize() {
        let v = Vocabulary::shared();
        let ids = v.tokenize("1. Go to the shower.");
        assert_eq!(ids.len(), 6);
        assert_eq!(v.detokenize(&ids), "1. go to the shower.");
        assert!(!ids.contains(&UNK));
        let ids = v.tokenize("zorp the blivet");
        assert_eq!(ids[0], UNK);
        assert_eq!(ids[2], UNK);
    }

    #[test]
    fn word_target_maps_to_special() {
        let v = Vocabulary::shared();
        assert_eq!(v.id("target"), Some(TARGET));
        assert_eq!(v.id("waypoint"), Some(WAYPOINT));
    }
}
