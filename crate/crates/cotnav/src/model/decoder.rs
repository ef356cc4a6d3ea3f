//! Decoder-only transformer over the multimodal sequence, in two equivalent
//! forms: a differentiable full-sequence forward on the tape for training,
//! and an incremental KV-cached forward for greedy decoding.

use crate::model::context::{ContextSequence, CtxTok};
use crate::model::decode::RespTok;
use crate::model::{linear_plain, mlp2_plain, ModelConfig};
use crate::params::ParamStore;
use crate::spatial::{spatial_inputs, spatial_inputs_none, SpatialEncoder};
use crate::tape::{self, Act, Tape, T};
use crate::vocab;

/// Differentiable projector: (features ⊕ spatial embeddings) to model width.
pub fn project_tokens_tape(tape: &mut Tape, store: &ParamStore, feats: T, spat: T) -> T {
    let x = tape.cat_cols(&[feats, spat]);
    let w1 = tape.param(store, "proj.w1");
    let b1 = tape.param(store, "proj.b1");
    let w2 = tape.param(store, "proj.w2");
    let b2 = tape.param(store, "proj.b2");
    tape.mlp2(x, w1, b1, w2, b2, Act::Gelu)
}

pub struct TapeForward {
    /// Final-normed hidden states, `[ctx_len + resp_len, d]`.
    pub hidden: T,
    /// Ground classes `[n_groundable + 1, d]`, none-vector last.
    pub ground_classes: T,
    /// Nav classes `[n_candidates + 1, d]`, stop-vector last.
    pub nav_classes: T,
    /// Input embedding rows (pre positional), for gradient probes.
    pub input_rows: T,
    pub ctx_len: usize,
    pub resp_len: usize,
}

/// Full differentiable forward over context + response tokens.
pub fn forward_tape(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &ModelConfig,
    ctx: &ContextSequence,
    resp: &[RespTok],
) -> TapeForward {
    // positioned 3D tokens
    let feat_wayp = tape.param(store, "feat.wayp");
    let feat_prev = tape.param(store, "feat.prev_wayp");
    let feat_hist = tape.param(store, "feat.hist_ground");
    let placeholder = tape.param(store, "pano.placeholder");
    let mut feat_rows: Vec<T> = Vec::new();
    let mut spat_in: Vec<f64> = Vec::new();
    let mut proj_row_of_entry = vec![usize::MAX; ctx.entries.len()];
    for (i, e) in ctx.entries.iter().enumerate() {
        let feat = match e {
            CtxTok::Word(_) => continue,
            CtxTok::Pano { feature: Some(f), .. } => tape.leaf(1, f.len(), f.clone()),
            CtxTok::Pano { feature: None, .. } => placeholder,
            CtxTok::Inst { feature, .. } | CtxTok::Zone { feature, .. } => {
                tape.leaf(1, feature.len(), feature.clone())
            }
            CtxTok::Candidate { .. } => feat_wayp,
            CtxTok::PrevWaypoint { .. } => feat_prev,
            CtxTok::HistGround { .. } => feat_hist,
        };
        proj_row_of_entry[i] = feat_rows.len();
        feat_rows.push(feat);
        match e.position() {
            Some(p) => spat_in.extend(spatial_inputs(p, &ctx.pose)),
            None => spat_in.extend(spatial_inputs_none()),
        }
    }
    let proj3d = if feat_rows.is_empty() {
        None
    } else {
        let feats = tape.cat_rows(&feat_rows);
        let spat_x = tape.leaf(feat_rows.len(), 6, spat_in);
        let spat = SpatialEncoder::forward_tape(tape, store, spat_x);
        Some(project_tokens_tape(tape, store, feats, spat))
    };

    // word embeddings, one gather
    let mut word_ids: Vec<usize> = Vec::new();
    let mut word_idx_of_pos: Vec<Option<usize>> = Vec::new();
    for e in &ctx.entries {
        match e {
            CtxTok::Word(id) => {
                word_idx_of_pos.push(Some(word_ids.len()));
                word_ids.push(*id);
            }
            _ => word_idx_of_pos.push(None),
        }
    }
    for r in resp {
        match r {
            RespTok::Vocab(id) => {
                word_idx_of_pos.push(Some(word_ids.len()));
                word_ids.push(*id);
            }
            RespTok::ResolvedNone => {
                word_idx_of_pos.push(Some(word_ids.len()));
                word_ids.push(vocab::GROUNDING_NONE);
            }
            RespTok::ResolvedStop => {
                word_idx_of_pos.push(Some(word_ids.len()));
                word_ids.push(vocab::NAVIGATION_STOP);
            }
            _ => word_idx_of_pos.push(None),
        }
    }
    let tok_emb = tape.param(store, "tok.emb");
    let words = if word_ids.is_empty() { None } else { Some(tape.gather_rows(tok_emb, &word_ids)) };

    // assemble the input row per position
    let total = ctx.entries.len() + resp.len();
    let mut picks: Vec<(T, usize)> = Vec::with_capacity(total);
    for (pos, widx) in word_idx_of_pos.iter().enumerate() {
        if let Some(w) = widx {
            picks.push((words.expect("word tensor"), *w));
            continue;
        }
        let row = if pos < ctx.entries.len() {
            proj_row_of_entry[pos]
        } else {
            match &resp[pos - ctx.entries.len()] {
                RespTok::Resolved3d(entry) => proj_row_of_entry[*entry],
                RespTok::ResolvedCand(c) => proj_row_of_entry[ctx.candidate_entries[*c]],
                _ => unreachable!("word positions handled above"),
            }
        };
        picks.push((proj3d.expect("3d tokens present"), row));
    }
    let x0 = tape.assemble_rows(&picks);
    let pos_emb = tape.param(store, "pos.emb");
    let positions: Vec<usize> = (0..total).collect();
    let pe = tape.gather_rows(pos_emb, &positions);
    let mut x = tape.add(x0, pe);

    // transformer blocks
    let dh = cfg.head_dim();
    for l in 0..cfg.layers {
        let gain = tape.param(store, &format!("dec.l{l}.attn.gain"));
        let xn = tape.rms_norm(x);
        let xn = tape.mul_row(xn, gain);
        let wq = tape.param(store, &format!("dec.l{l}.wq"));
        let wk = tape.param(store, &format!("dec.l{l}.wk"));
        let wv = tape.param(store, &format!("dec.l{l}.wv"));
        let wo = tape.param(store, &format!("dec.l{l}.wo"));
        let q = tape.matmul(xn, wq);
        let k = tape.matmul(xn, wk);
        let v = tape.matmul(xn, wv);
        let mut heads = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let qh = tape.slice_cols(q, h * dh, (h + 1) * dh);
            let kh = tape.slice_cols(k, h * dh, (h + 1) * dh);
            let vh = tape.slice_cols(v, h * dh, (h + 1) * dh);
            let s = tape.matmul_tb(qh, kh);
            let s = tape.scale(s, 1.0 / (dh as f64).sqrt());
            let p = tape.softmax_causal(s, 0);
            heads.push(tape.matmul(p, vh));
        }
        let cat = tape.cat_cols(&heads);
        let attn = tape.matmul(cat, wo);
        x = tape.add(x, attn);
        let gain2 = tape.param(store, &format!("dec.l{l}.mlp.gain"));
        let xn = tape.rms_norm(x);
        let xn = tape.mul_row(xn, gain2);
        let w1 = tape.param(store, &format!("dec.l{l}.mlp.w1"));
        let b1 = tape.param(store, &format!("dec.l{l}.mlp.b1"));
        let w2 = tape.param(store, &format!("dec.l{l}.mlp.w2"));
        let b2 = tape.param(store, &format!("dec.l{l}.mlp.b2"));
        let m = tape.mlp2(xn, w1, b1, w2, b2, Act::Gelu);
        x = tape.add(x, m);
    }
    let fgain = tape.param(store, "dec.final.gain");
    let xn = tape.rms_norm(x);
    let hidden = tape.mul_row(xn, fgain);

    // pointer class matrices
    let none_row = tape.param(store, "ground.none");
    let ground_classes = if ctx.groundable.is_empty() {
        none_row
    } else {
        let g_picks: Vec<(T, usize)> = ctx
            .groundable
            .iter()
            .map(|g| (proj3d.expect("groundable implies 3d"), proj_row_of_entry[g.entry]))
            .collect();
        let rows = tape.assemble_rows(&g_picks);
        tape.cat_rows(&[rows, none_row])
    };
    let stop_row = tape.param(store, "nav.stop");
    let nav_classes = if ctx.candidates.is_empty() {
        stop_row
    } else {
        let c_picks: Vec<(T, usize)> = ctx
            .candidate_entries
            .iter()
            .map(|e| (proj3d.expect("candidates are 3d"), proj_row_of_entry[*e]))
            .collect();
        let rows = tape.assemble_rows(&c_picks);
        tape.cat_rows(&[rows, stop_row])
    };

    TapeForward {
        hidden,
        ground_classes,
        nav_classes,
        input_rows: x0,
        ctx_len: ctx.entries.len(),
        resp_len: resp.len(),
    }
}

/// Pointer-head logits over class rows for a batch of latents.
pub fn head_logits_tape(tape: &mut Tape, store: &ParamStore, head: &str, latents: T, classes: T) -> T {
    let w1 = tape.param(store, &format!("{head}.w1"));
    let b1 = tape.param(store, &format!("{head}.b1"));
    let w2 = tape.param(store, &format!("{head}.w2"));
    let b2 = tape.param(store, &format!("{head}.b2"));
    let q = tape.mlp2(latents, w1, b1, w2, b2, Act::Gelu);
    tape.matmul_tb(q, classes)
}

// ---------------------------------------------------------------------------
// plain inference path
// ---------------------------------------------------------------------------

/// Precomputed plain embeddings of a context.
pub struct PlainCtxEmbed {
    /// Per-entry input row (pre positional embedding).
    pub rows: Vec<Vec<f64>>,
    /// Ground class vectors, none last.
    pub ground_classes: Vec<Vec<f64>>,
    /// Nav class vectors, stop last.
    pub nav_classes: Vec<Vec<f64>>,
}

pub fn embed_context_plain(store: &ParamStore, ctx: &ContextSequence) -> PlainCtxEmbed {
    let tok_emb = store.block("tok.emb");
    let d = tok_emb.cols;
    let rows: Vec<Vec<f64>> = ctx
        .entries
        .iter()
        .map(|e| match e {
            CtxTok::Word(id) => tok_emb.values[id * d..(id + 1) * d].to_vec(),
            _ => project_entry_plain(store, e, ctx),
        })
        .collect();
    let mut ground_classes: Vec<Vec<f64>> =
        ctx.groundable.iter().map(|g| rows[g.entry].clone()).collect();
    ground_classes.push(store.block("ground.none").values.clone());
    let mut nav_classes: Vec<Vec<f64>> =
        ctx.candidate_entries.iter().map(|e| rows[*e].clone()).collect();
    nav_classes.push(store.block("nav.stop").values.clone());
    PlainCtxEmbed { rows, ground_classes, nav_classes }
}

fn project_entry_plain(store: &ParamStore, e: &CtxTok, ctx: &ContextSequence) -> Vec<f64> {
    let feat: Vec<f64> = match e {
        CtxTok::Pano { feature: Some(f), .. } => f.clone(),
        CtxTok::Pano { feature: None, .. } => store.block("pano.placeholder").values.clone(),
        CtxTok::Inst { feature, .. } | CtxTok::Zone { feature, .. } => feature.clone(),
        CtxTok::Candidate { .. } => store.block("feat.wayp").values.clone(),
        CtxTok::PrevWaypoint { .. } => store.block("feat.prev_wayp").values.clone(),
        CtxTok::HistGround { .. } => store.block("feat.hist_ground").values.clone(),
        CtxTok::Word(_) => unreachable!(),
    };
    let spat = match e.position() {
        Some(p) => SpatialEncoder::forward_plain(store, &spatial_inputs(p, &ctx.pose)),
        None => SpatialEncoder::forward_plain(store, &spatial_inputs_none()),
    };
    crate::model::project_token_plain(store, &feat, &spat)
}

/// The input row for one response token.
pub fn embed_resp_plain(store: &ParamStore, embed: &PlainCtxEmbed, ctx: &ContextSequence, tok: &RespTok) -> Vec<f64> {
    let tok_emb = store.block("tok.emb");
    let d = tok_emb.cols;
    match tok {
        RespTok::Vocab(id) => tok_emb.values[id * d..(id + 1) * d].to_vec(),
        RespTok::ResolvedNone => {
            tok_emb.values[vocab::GROUNDING_NONE * d..(vocab::GROUNDING_NONE + 1) * d].to_vec()
        }
        RespTok::ResolvedStop => {
            tok_emb.values[vocab::NAVIGATION_STOP * d..(vocab::NAVIGATION_STOP + 1) * d].to_vec()
        }
        RespTok::Resolved3d(entry) => embed.rows[*entry].clone(),
        RespTok::ResolvedCand(c) => embed.rows[ctx.candidate_entries[*c]].clone(),
    }
}

struct LayerKv {
    k: Vec<f64>,
    v: Vec<f64>,
}

/// Incremental forward with a KV cache; one token per `push`.
pub struct DecoderRun<'a> {
    store: &'a ParamStore,
    cfg: &'a ModelConfig,
    kv: Vec<LayerKv>,
    pos: usize,
}

impl<'a> DecoderRun<'a> {
    pub fn new(store: &'a ParamStore, cfg: &'a ModelConfig) -> Self {
        let kv = (0..cfg.layers).map(|_| LayerKv { k: Vec::new(), v: Vec::new() }).collect();
        Self { store, cfg, kv, pos: 0 }
    }

    pub fn pos(&self) -> usize {
        self.pos
    }

    /// Push one pre-positional input row; returns the final-normed hidden.
    pub fn push(&mut self, row: &[f64]) -> Vec<f64> {
        let d = self.cfg.width;
        let dh = self.cfg.head_dim();
        let pos_emb = self.store.block("pos.emb");
        assert!(self.pos < pos_emb.rows, "position overflow");
        let mut x: Vec<f64> = row
            .iter()
            .zip(&pos_emb.values[self.pos * d..(self.pos + 1) * d])
            .map(|(a, b)| a + b)
            .collect();
        for l in 0..self.cfg.layers {
            let xn = rms_gain(&x, self.store, &format!("dec.l{l}.attn.gain"));
            let q = linear_plain(&xn, self.store.block(&format!("dec.l{l}.wq")));
            let k = linear_plain(&xn, self.store.block(&format!("dec.l{l}.wk")));
            let v = linear_plain(&xn, self.store.block(&format!("dec.l{l}.wv")));
            let cache = &mut self.kv[l];
            cache.k.extend_from_slice(&k);
            cache.v.extend_from_slice(&v);
            let t_len = cache.k.len() / d;
            let mut ho = vec![0.0; d];
            let scale = 1.0 / (dh as f64).sqrt();
            for h in 0..self.cfg.heads {
                let qh = &q[h * dh..(h + 1) * dh];
                let mut logits = Vec::with_capacity(t_len);
                for t in 0..t_len {
                    let kh = &cache.k[t * d + h * dh..t * d + (h + 1) * dh];
                    logits.push(tape::dot(qh, kh) * scale);
                }
                tape::softmax_in_place(&mut logits);
                for (t, p) in logits.iter().enumerate() {
                    let vh = &cache.v[t * d + h * dh..t * d + (h + 1) * dh];
                    for i in 0..dh {
                        ho[h * dh + i] += p * vh[i];
                    }
                }
            }
            let attn = linear_plain(&ho, self.store.block(&format!("dec.l{l}.wo")));
            for (xv, a) in x.iter_mut().zip(&attn) {
                *xv += a;
            }
            let xn = rms_gain(&x, self.store, &format!("dec.l{l}.mlp.gain"));
            let m = mlp2_plain(
                self.store,
                &format!("dec.l{l}.mlp.w1"),
                &format!("dec.l{l}.mlp.b1"),
                &format!("dec.l{l}.mlp.w2"),
                &format!("dec.l{l}.mlp.b2"),
                &xn,
                Act::Gelu,
            );
            for (xv, mv) in x.iter_mut().zip(&m) {
                *xv += mv;
            }
        }
        self.pos += 1;
        rms_gain(&x, self.store, "dec.final.gain")
    }
}

fn rms_gain(x: &[f64], store: &ParamStore, gain: &str) -> Vec<f64> {
    let ri = tape::rms_inv(x);
    let g = &store.block(gain).values;
    x.iter().zip(g).map(|(v, gv)| v * ri * gv).collect()
}

/// Plain pointer-head scores of one latent against class rows.
pub fn head_scores_plain(
    store: &ParamStore,
    head: &str,
    latent: &[f64],
    classes: &[Vec<f64>],
) -> Vec<f64> {
    let q = mlp2_plain(
        store,
        &format!("{head}.w1"),
        &format!("{head}.b1"),
        &format!("{head}.w2"),
        &format!("{head}.b2"),
        latent,
        Act::Gelu,
    );
    classes.iter().map(|c| tape::dot(&q, c)).collect()
}

/// Argmax with ties broken toward the lowest index.
pub fn argmax_ties_low(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, s) in scores.iter().enumerate().skip(1) {
        if *s > scores[best] {
            best = i;
        }
    }
    best
}

/// Vocabulary logits of one latent.
pub fn lm_logits_plain(store: &ParamStore, latent: &[f64]) -> Vec<f64> {
    let lm = store.block("lm.w");
    (0..lm.rows).map(|r| tape::dot(latent, &lm.values[r * lm.cols..(r + 1) * lm.cols])).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cot_memory::CoTMemoryState;
    use crate::memory::MultiLevelMemory;
    use crate::model::{assemble_context, register_model};
    use crate::scene::{self, generate_scene, AgentPose, SceneConfig, CAMERA_HEIGHT};
    use crate::vocab::Vocabulary;
    use crate::waypoint;

    fn fixture(cfg: &ModelConfig) -> (ParamStore, ContextSequence) {
        let mut store = ParamStore::new();
        register_model(&mut store, cfg, 42);
        let s = generate_scene(&SceneConfig::new(20, 20, 2, 5), 7).unwrap();
        let free = s.free_cells();
        let pose = AgentPose::new(s.cell_center(free[8], CAMERA_HEIGHT), 0.4);
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
    fn tape_and_incremental_agree() {
        let cfg = ModelConfig { layers: 2, width: 32, heads: 2, ff_mult: 2, ..ModelConfig::default() };
        let (store, ctx) = fixture(&cfg);
        let resp = vec![
            RespTok::Vocab(vocab::PLAN_SEC),
            RespTok::Vocab(Vocabulary::shared().id("go").unwrap()),
            RespTok::Vocab(vocab::GROUND_SEC),
            RespTok::Vocab(vocab::TARGET),
            RespTok::Resolved3d(ctx.groundable[0].entry),
            RespTok::Vocab(vocab::NAV_SEC),
            RespTok::Vocab(vocab::WAYPOINT),
            if ctx.candidates.is_empty() { RespTok::ResolvedStop } else { RespTok::ResolvedCand(0) },
            RespTok::Vocab(vocab::EOS),
        ];
        let mut tape = Tape::new();
        let fwd = forward_tape(&mut tape, &store, &cfg, &ctx, &resp);
        let hv = tape.value(fwd.hidden).to_vec();
        // incremental
        let embed = embed_context_plain(&store, &ctx);
        let mut run = DecoderRun::new(&store, &cfg);
        let mut plain_rows: Vec<Vec<f64>> = Vec::new();
        for row in &embed.rows {
            plain_rows.push(run.push(row));
        }
        for t in &resp {
            let row = embed_resp_plain(&store, &embed, &ctx, t);
            plain_rows.push(run.push(&row));
        }
        let d = cfg.width;
        assert_eq!(plain_rows.len() * d, hv.len());
        for (i, row) in plain_rows.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                let tv = hv[i * d + j];
                assert!((tv - v).abs() < 1e-9, "pos {i} dim {j}: {tv} vs {v}");
            }
        }
        // class matrices agree too
        let gv = tape.value(fwd.ground_classes).to_vec();
        for (i, row) in embed.ground_classes.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                assert!((gv[i * d + j] - v).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn causal_masking_exact() {
        let cfg = ModelConfig { layers: 2, width: 32, heads: 2, ff_mult: 2, ..ModelConfig::default() };
        let (store, ctx) = fixture(&cfg);
        let resp_a = vec![RespTok::Vocab(vocab::PLAN_SEC), RespTok::Vocab(vocab::EOS)];
        let resp_b = vec![RespTok::Vocab(vocab::NAV_SEC), RespTok::Vocab(vocab::EOS)];
        let mut ta = Tape::new();
        let fa = forward_tape(&mut ta, &store, &cfg, &ctx, &resp_a);
        let mut tb = Tape::new();
        let fb = forward_tape(&mut tb, &store, &cfg, &ctx, &resp_b);
        let d = cfg.width;
        let s = ctx.entries.len();
        // hidden states over the shared prefix are bitwise identical
        let va = &ta.value(fa.hidden)[..s * d];
        let vb = &tb.value(fb.hidden)[..s * d];
        assert_eq!(va, vb, "perturbing later tokens changed earlier states");
    }

    #[test]
    fn argmax_tie_break() {
        assert_eq!(argmax_ties_low(&[0.5, 0.5, 0.2]), 0);
        assert_eq!(argmax_ties_low(&[0.1, 0.5, 0.5]), 1);
    }
}
