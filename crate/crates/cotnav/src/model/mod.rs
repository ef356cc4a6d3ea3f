//! The unified autoregressive model: multimodal context assembly, a small
//! decoder-only transformer, and the pointer heads that resolve grounding and
//! navigation slots against the context.

pub mod context;
pub mod cot;
pub mod decode;
pub mod decoder;

pub use context::{assemble_context, ContextSequence, CtxTok, GroundableRef};
pub use cot::{CoTSequence, NavRef};
pub use decode::{decode_cot, produce, Comp, DecodeOutcome, GoldNav, GoldSections, GoldSlot,
    GroundResolution, PosTarget, Produced, RespTok};
pub use decoder::{embed_context_plain, forward_tape, head_logits_tape, DecoderRun, PlainCtxEmbed,
    TapeForward};

use serde::{Deserialize, Serialize};

use crate::features::FEATURE_DIM;
use crate::params::ParamStore;
use crate::spatial::{SpatialEncoder, D_SPAT};
use crate::vocab::Vocabulary;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub context_cap: usize,
    pub decode_cap: usize,
    pub plan_word_cap: usize,
    pub answer_word_cap: usize,
    pub ground_slot_cap: usize,
    pub inst_cap: usize,
    pub zone_cap: usize,
    /// Ablation: navigation decoded as discrete action words executed directly.
    pub text_actions: bool,
    /// Ablation: feed an empty chain-of-thought memory every step.
    pub cot_memory_enabled: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            width: 128,
            heads: 4,
            ff_mult: 4,
            context_cap: 1024,
            decode_cap: 256,
            plan_word_cap: 48,
            answer_word_cap: 12,
            ground_slot_cap: 4,
            inst_cap: 64,
            zone_cap: 32,
            text_actions: false,
            cot_memory_enabled: true,
        }
    }
}

impl ModelConfig {
    /// Tiny configuration for finite-difference checks.
    pub fn micro() -> Self {
        Self { layers: 2, width: 16, heads: 2, ff_mult: 2, ..Self::default() }
    }

    pub fn max_positions(&self) -> usize {
        self.context_cap + self.decode_cap
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }
}

/// Register every trainable block of the full agent.
pub fn register_model(store: &mut ParamStore, cfg: &ModelConfig, seed: u64) {
    let v = Vocabulary::shared().size();
    let d = cfg.width;
    SpatialEncoder::register(store, seed);
    store.init_gaussian("tok.emb", v, d, 0.02, seed);
    store.init_gaussian("pos.emb", cfg.max_positions(), d, 0.02, seed);
    store.init_gaussian("lm.w", v, d, 0.02, seed);
    store.init_gaussian("proj.w1", FEATURE_DIM + D_SPAT, d, 0.15, seed);
    store.init_const("proj.b1", 1, d, 0.0);
    store.init_gaussian("proj.w2", d, d, 0.1, seed);
    store.init_const("proj.b2", 1, d, 0.0);
    for l in 0..cfg.layers {
        store.init_const(&format!("dec.l{l}.attn.gain"), 1, d, 1.0);
        for m in ["wq", "wk", "wv"] {
            store.init_gaussian(&format!("dec.l{l}.{m}"), d, d, 0.02, seed);
        }
        store.init_gaussian(&format!("dec.l{l}.wo"), d, d, 0.02 / (2.0 * cfg.layers as f64), seed);
        store.init_const(&format!("dec.l{l}.mlp.gain"), 1, d, 1.0);
        store.init_gaussian(&format!("dec.l{l}.mlp.w1"), d, cfg.ff_mult * d, 0.02, seed);
        store.init_const(&format!("dec.l{l}.mlp.b1"), 1, cfg.ff_mult * d, 0.0);
        store.init_gaussian(
            &format!("dec.l{l}.mlp.w2"),
            cfg.ff_mult * d,
            d,
            0.02 / (2.0 * cfg.layers as f64),
            seed,
        );
        store.init_const(&format!("dec.l{l}.mlp.b2"), 1, d, 0.0);
    }
    store.init_const("dec.final.gain", 1, d, 1.0);
    for h in ["ghead", "nhead"] {
        store.init_gaussian(&format!("{h}.w1"), d, d, 0.1, seed);
        store.init_const(&format!("{h}.b1"), 1, d, 0.0);
        store.init_gaussian(&format!("{h}.w2"), d, d, 0.1, seed);
        store.init_const(&format!("{h}.b2"), 1, d, 0.0);
    }
    store.init_gaussian("ground.none", 1, d, 0.1, seed);
    store.init_gaussian("nav.stop", 1, d, 0.1, seed);
    store.init_gaussian("feat.wayp", 1, FEATURE_DIM, 0.1, seed);
    store.init_gaussian("feat.prev_wayp", 1, FEATURE_DIM, 0.1, seed);
    store.init_gaussian("feat.hist_ground", 1, FEATURE_DIM, 0.1, seed);
    store.init_gaussian("pano.placeholder", 1, FEATURE_DIM, 0.1, seed);
    crate::waypoint::register(store, seed);
}

// small plain-math helpers shared by the inference path

/// x [in] times w [in, out].
pub(crate) fn linear_plain(x: &[f64], w: &crate::params::Block) -> Vec<f64> {
    debug_assert_eq!(x.len(), w.rows);
    let mut out = vec![0.0; w.cols];
    for (k, &xv) in x.iter().enumerate() {
        if xv == 0.0 {
            continue;
        }
        let row = &w.values[k * w.cols..(k + 1) * w.cols];
        for j in 0..w.cols {
            out[j] += xv * row[j];
        }
    }
    out
}

pub(crate) fn add_bias(mut x: Vec<f64>, b: &crate::params::Block) -> Vec<f64> {
    for (v, bv) in x.iter_mut().zip(&b.values) {
        *v += bv;
    }
    x
}

pub(crate) fn mlp2_plain(
    store: &ParamStore,
    w1: &str,
    b1: &str,
    w2: &str,
    b2: &str,
    x: &[f64],
    act: crate::tape::Act,
) -> Vec<f64> {
    let mut h = add_bias(linear_plain(x, store.block(w1)), store.block(b1));
    for v in h.iter_mut() {
        *v = match act {
            crate::tape::Act::Gelu => crate::tape::gelu(*v),
            crate::tape::Act::Tanh => v.tanh(),
        };
    }
    add_bias(linear_plain(&h, store.block(w2)), store.block(b2))
}

/// Projector from (feature, spatial embedding) to model width.
pub fn project_token_plain(store: &ParamStore, feature: &[f64], spat: &[f64]) -> Vec<f64> {
    let mut x = Vec::with_capacity(feature.len() + spat.len());
    x.extend_from_slice(feature);
    x.extend_from_slice(spat);
    mlp2_plain(store, "proj.w1", "proj.b1", "proj.w2", "proj.b2", &x, crate::tape::Act::Gelu)
}
