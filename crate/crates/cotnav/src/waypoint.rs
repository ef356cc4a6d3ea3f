//! Waypoint predictor: 12 learned queries cross-attend over the panoramic
//! patch tokens and emit, per 30-degree sector, a navigability logit and a
//! distance in (0, 3]. Trained against the simulator's `sector_waypoints`
//! ground truth jointly with the main model.

use serde::{Deserialize, Serialize};

use crate::features::FEATURE_DIM;
use crate::geom::Point3;
use crate::memory::PanoToken;
use crate::params::ParamStore;
use crate::scene::{AgentPose, SectorWaypoint, CAMERA_HEIGHT, MAX_STEP, SECTOR_COUNT};
use crate::spatial::{spatial_inputs, spatial_inputs_none, SpatialEncoder, D_SPAT};
use crate::tape::{self, Tape, T};

const W: usize = 64;
const LAYERS: usize = 2;
const IN_DIM: usize = FEATURE_DIM + D_SPAT;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaypointCandidate {
    pub sector: usize,
    pub position: Point3,
    pub confidence: f64,
    pub distance: f64,
}

pub fn register(store: &mut ParamStore, seed: u64) {
    store.init_gaussian("wp.queries", SECTOR_COUNT, W, 0.3, seed);
    store.init_gaussian("wp.in.w", IN_DIM, W, 0.15, seed);
    store.init_const("wp.in.b", 1, W, 0.0);
    store.init_gaussian("wp.sector.emb", SECTOR_COUNT, W, 0.1, seed);
    for l in 0..LAYERS {
        for m in ["wq", "wk", "wv", "wo"] {
            store.init_gaussian(&format!("wp.l{l}.{m}"), W, W, 0.15, seed);
        }
        store.init_gaussian(&format!("wp.l{l}.mlp.w1"), W, 2 * W, 0.15, seed);
        store.init_const(&format!("wp.l{l}.mlp.b1"), 1, 2 * W, 0.0);
        store.init_gaussian(&format!("wp.l{l}.mlp.w2"), 2 * W, W, 0.15, seed);
        store.init_const(&format!("wp.l{l}.mlp.b2"), 1, W, 0.0);
    }
    store.init_gaussian("wp.nav.w", W, 1, 0.2, seed);
    store.init_const("wp.nav.b", 1, 1, 0.0);
    store.init_gaussian("wp.dist.w", W, 1, 0.2, seed);
    store.init_const("wp.dist.b", 1, 1, 0.0);
}

/// Differentiable forward. Returns (nav logits [12,1], distances [12,1]).
pub fn forward_tape(
    tape: &mut Tape,
    store: &ParamStore,
    pano: &[PanoToken],
    pose: &AgentPose,
) -> (T, T) {
    // token embedding: features const, spatial embedding differentiable
    let placeholder = tape.param(store, "pano.placeholder");
    let mut feat_rows: Vec<T> = Vec::with_capacity(SECTOR_COUNT);
    let mut spat_in = Vec::with_capacity(SECTOR_COUNT * 6);
    for tok in pano {
        match (&tok.feature, tok.position) {
            (Some(f), Some(p)) => {
                let leaf = tape.leaf(1, FEATURE_DIM, f.clone());
                feat_rows.push(leaf);
                spat_in.extend(spatial_inputs(p, pose));
            }
            _ => {
                feat_rows.push(placeholder);
                spat_in.extend(spatial_inputs_none());
            }
        }
    }
    let feats = tape.cat_rows(&feat_rows);
    let spat_x = tape.leaf(SECTOR_COUNT, 6, spat_in);
    let spat = SpatialEncoder::forward_tape(tape, store, spat_x);
    let x = tape.cat_cols(&[feats, spat]);
    let win = tape.param(store, "wp.in.w");
    let bin = tape.param(store, "wp.in.b");
    let x = tape.matmul(x, win);
    let x = tape.add_row(x, bin);
    let sec = tape.param(store, "wp.sector.emb");
    let toks = tape.add(x, sec);
    let mut q = tape.param(store, "wp.queries");
    for l in 0..LAYERS {
        let wq = tape.param(store, &format!("wp.l{l}.wq"));
        let wk = tape.param(store, &format!("wp.l{l}.wk"));
        let wv = tape.param(store, &format!("wp.l{l}.wv"));
        let wo = tape.param(store, &format!("wp.l{l}.wo"));
        let qq = tape.matmul(q, wq);
        let kk = tape.matmul(toks, wk);
        let vv = tape.matmul(toks, wv);
        let scores = tape.matmul_tb(qq, kk);
        let scores = tape.scale(scores, 1.0 / (W as f64).sqrt());
        // full cross attention: offset beyond the last column
        let probs = tape.softmax_causal(scores, SECTOR_COUNT as i64);
        let ctx = tape.matmul(probs, vv);
        let ctx = tape.matmul(ctx, wo);
        q = tape.add(q, ctx);
        let w1 = tape.param(store, &format!("wp.l{l}.mlp.w1"));
        let b1 = tape.param(store, &format!("wp.l{l}.mlp.b1"));
        let w2 = tape.param(store, &format!("wp.l{l}.mlp.w2"));
        let b2 = tape.param(store, &format!("wp.l{l}.mlp.b2"));
        let m = tape.mlp2(q, w1, b1, w2, b2, tape::Act::Gelu);
        q = tape.add(q, m);
    }
    let nw = tape.param(store, "wp.nav.w");
    let nb = tape.param(store, "wp.nav.b");
    let logits = tape.matmul(q, nw);
    let logits = tape.add_row(logits, nb);
    let dw = tape.param(store, "wp.dist.w");
    let db = tape.param(store, "wp.dist.b");
    let draw = tape.matmul(q, dw);
    let draw = tape.add_row(draw, db);
    let dist = tape.sigmoid(draw);
    let dist = tape.scale(dist, MAX_STEP);
    (logits, dist)
}

/// Inference: candidates where sigmoid(logit) > 0.5, one per sector, on the
/// sector bisector at the predicted distance.
pub fn predict_waypoints(
    store: &ParamStore,
    pano: &[PanoToken],
    pose: &AgentPose,
) -> Vec<WaypointCandidate> {
    let mut tape = Tape::new();
    let (logits, dist) = forward_tape(&mut tape, store, pano, pose);
    let lv = tape.value(logits).to_vec();
    let dv = tape.value(dist).to_vec();
    let mut out = Vec::new();
    for sector in 0..SECTOR_COUNT {
        let confidence = tape::sigmoid(lv[sector]);
        if confidence <= 0.5 {
            continue;
        }
        let d = dv[sector];
        let a = pose.heading + sector as f64 * std::f64::consts::TAU / SECTOR_COUNT as f64;
        out.push(WaypointCandidate {
            sector,
            position: Point3::new(
                pose.position.x + d * a.cos(),
                pose.position.y + d * a.sin(),
                CAMERA_HEIGHT,
            ),
            confidence,
            distance: d,
        });
    }
    out
}

/// Per-sector ground truth distances from the simulator oracle.
pub fn gt_by_sector(gt: &[SectorWaypoint]) -> [Option<f64>; SECTOR_COUNT] {
    let mut out = [None; SECTOR_COUNT];
    for w in gt {
        out[w.sector] = Some(w.distance);
    }
    out
}

/// BCE on per-sector navigability plus squared error on distance where ground
/// truth exists, averaged over the 12 sectors.
pub fn waypoint_loss_tape(tape: &mut Tape, logits: T, dist: T, gt: &[Option<f64>; SECTOR_COUNT]) -> T {
    let n = SECTOR_COUNT as f64;
    let targets: Vec<f64> = gt.iter().map(|g| if g.is_some() { 1.0 } else { 0.0 }).collect();
    let bce = tape.bce_logits(logits, targets, vec![1.0 / n; SECTOR_COUNT]);
    let (dtargets, dweights): (Vec<f64>, Vec<f64>) = gt
        .iter()
        .map(|g| match g {
            Some(d) => (*d, 1.0 / n),
            None => (0.0, 0.0),
        })
        .unzip();
    let mse = tape.mse_weighted(dist, dtargets, dweights);
    tape.add_scaled(&[(bce, 1.0), (mse, 1.0)])
}

/// Independent scalar oracle for the loss, used by tests.
pub fn waypoint_loss_reference(
    logits: &[f64],
    dist: &[f64],
    gt: &[Option<f64>; SECTOR_COUNT],
) -> f64 {
    let n = SECTOR_COUNT as f64;
    let mut total = 0.0;
    for s in 0..SECTOR_COUNT {
        let t = if gt[s].is_some() { 1.0 } else { 0.0 };
        let p = tape::sigmoid(logits[s]);
        total += -(t * p.max(1e-300).ln() + (1.0 - t) * (1.0 - p).max(1e-300).ln()) / n;
        if let Some(d) = gt[s] {
            total += (dist[s] - d) * (dist[s] - d) / n;
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::MultiLevelMemory;
    use crate::scene::{self, generate_scene, SceneConfig};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn test_store(seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        SpatialEncoder::register(&mut store, seed);
        store.init_gaussian("pano.placeholder", 1, FEATURE_DIM, 0.1, seed);
        register(&mut store, seed);
        store
    }

    fn some_pano(seed: u64) -> (MultiLevelMemory, AgentPose) {
        let s = generate_scene(&SceneConfig::new(24, 24, 2, 8), seed).unwrap();
        let free = s.free_cells();
        let mut m = MultiLevelMemory::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pose = AgentPose::new(s.cell_center(free[0], CAMERA_HEIGHT), 0.0);
        for t in 0..4 {
            let c = free[rng.random_range(0..free.len())];
            pose = AgentPose::new(s.cell_center(c, CAMERA_HEIGHT), rng.random_range(-3.0..3.0));
            m.update(&scene::observe_at(&s, &pose, t));
        }
        (m, pose)
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let store = test_store(7);
        let (m, pose) = some_pano(3);
        let pano = m.render_panorama(&pose);
        let a = predict_waypoints(&store, &pano, &pose);
        let b = predict_waypoints(&store, &pano, &pose);
        assert_eq!(a, b);
        for c in &a {
            assert!(c.confidence > 0.5 && c.confidence <= 1.0);
            assert!(c.distance > 0.0 && c.distance <= MAX_STEP);
            // position on the sector bisector
            let ang = pose.heading
                + c.sector as f64 * std::f64::consts::TAU / SECTOR_COUNT as f64;
            let dx = c.position.x - pose.position.x;
            let dy = c.position.y - pose.position.y;
            assert!((dx - c.distance * ang.cos()).abs() < 1e-9);
            assert!((dy - c.distance * ang.sin()).abs() < 1e-9);
        }
    }

    #[test]
    fn loss_matches_reference_and_saturates() {
        let store = test_store(9);
        let (m, pose) = some_pano(5);
        let pano = m.render_panorama(&pose);
        let mut tape = Tape::new();
        let (logits, dist) = forward_tape(&mut tape, &store, &pano, &pose);
        let mut gt = [None; SECTOR_COUNT];
        gt[0] = Some(1.5);
        gt[4] = Some(2.75);
        let loss = waypoint_loss_tape(&mut tape, logits, dist, &gt);
        let expect = waypoint_loss_reference(tape.value(logits), tape.value(dist), &gt);
        assert!((tape.item(loss) - expect).abs() < 1e-9);
        // saturated all-wrong navigability is expensive
        let mut t2 = Tape::new();
        let big = t2.leaf(SECTOR_COUNT, 1, vec![30.0; SECTOR_COUNT]);
        let d2 = t2.leaf(SECTOR_COUNT, 1, vec![1.0; SECTOR_COUNT]);
        let gt_none = [None; SECTOR_COUNT];
        let l2 = waypoint_loss_tape(&mut t2, big, d2, &gt_none);
        assert!(t2.item(l2) >= 10.0, "loss {}", t2.item(l2));
        // perfect saturated prediction: loss ~ 0
        let mut t3 = Tape::new();
        let big = t3.leaf(SECTOR_COUNT, 1, vec![-30.0; SECTOR_COUNT]);
        let d3 = t3.leaf(SECTOR_COUNT, 1, vec![0.0; SECTOR_COUNT]);
        let l3 = waypoint_loss_tape(&mut t3, big, d3, &gt_none);
        assert!(t3.item(l3) < 1e-9);
    }

    #[test]
    fn gradient_check_full_predictor() {
        let store = test_store(11);
        let (m, pose) = some_pano(7);
        let pano = m.render_panorama(&pose);
        let mut gt = [None; SECTOR_COUNT];
        gt[2] = Some(2.0);
        gt[7] = Some(1.25);
        let run = |st: &ParamStore| {
            let mut tape = Tape::new();
            let (logits, dist) = forward_tape(&mut tape, st, pano.as_slice(), &pose);
            let loss = waypoint_loss_tape(&mut tape, logits, dist, &gt);
            (tape, loss)
        };
        let (mut tape, loss) = run(&store);
        tape.backward(loss);
        let mut store_g = store.clone();
        store_g.zero_grad();
        tape.harvest(&mut store_g);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let names: Vec<String> = store.names().cloned().collect();
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for name in names {
            let len = store.block(&name).values.len();
            for _ in 0..3.min(len) {
                let i = rng.random_range(0..len);
                let mut plus = store.clone();
                plus.block_mut(&name).values[i] += h;
                let mut minus = store.clone();
                minus.block_mut(&name).values[i] -= h;
                let (tp, lp) = run(&plus);
                let (tm, lm) = run(&minus);
                let num = (tp.item(lp) - tm.item(lm)) / (2.0 * h);
                let ana = store_g.block(&name).grad[i];
                let denom = ana.abs().max(num.abs()).max(1e-8);
                let rel = (ana - num).abs() / denom;
                worst = worst.max(rel);
                assert!(rel < 1e-4, "{name}[{i}]: analytic {ana} numeric {num} rel {rel}");
            }
        }
        assert!(worst < 1e-4);
    }
}
