//! Agent-frame transform and the unified spatial embedding.
//!
//! Every 3D token and every waypoint goes through the same encoder: transform
//! the global point into the agent frame, then feed (P, D, cos t, sin t) to a
//! two-layer perceptron. Joint rigid transforms of scene and pose leave the
//! inputs, and hence the embedding, unchanged.

use crate::geom::{wrap_angle, Point3};
use crate::params::ParamStore;
use crate::scene::AgentPose;
use crate::tape::{Act, Tape, T};

/// Output dimension of the spatial embedding.
pub const D_SPAT: usize = 32;
const HIDDEN: usize = 64;
/// Inputs per token: P (3), D, cos, sin.
pub const SPAT_IN: usize = 6;

/// Rotate/translate a global point into the agent frame; returns the
/// agent-frame point, the 3D distance, and the horizontal angle.
pub fn to_agent_frame(point: Point3, pose: &AgentPose) -> (Point3, f64, f64) {
    let dx = point.x - pose.position.x;
    let dy = point.y - pose.position.y;
    let dz = point.z - pose.position.z;
    let (s, c) = (-pose.heading).sin_cos();
    let p = Point3::new(c * dx - s * dy, s * dx + c * dy, dz);
    let d = (p.x * p.x + p.y * p.y + p.z * p.z).sqrt();
    let theta = if p.x == 0.0 && p.y == 0.0 { 0.0 } else { p.y.atan2(p.x) };
    (p, d, theta)
}

/// The 6 encoder inputs for a global point seen from a pose.
pub fn spatial_inputs(point: Point3, pose: &AgentPose) -> [f64; SPAT_IN] {
    let (p, d, theta) = to_agent_frame(point, pose);
    [p.x, p.y, p.z, d, theta.cos(), theta.sin()]
}

/// Inputs for a token that has no position (placeholder sectors).
pub fn spatial_inputs_none() -> [f64; SPAT_IN] {
    [0.0; SPAT_IN]
}

/// Relative sector of a point around a pose, 12 sectors of 30 degrees,
/// sector 0 centered on the heading, counterclockwise.
pub fn sector_of(point: Point3, pose: &AgentPose) -> usize {
    let dir = (point.y - pose.position.y).atan2(point.x - pose.position.x);
    let rel = wrap_angle(dir - pose.heading);
    let w = std::f64::consts::TAU / 12.0;
    (rel / w).round().rem_euclid(12.0) as usize % 12
}

pub struct SpatialEncoder;

impl SpatialEncoder {
    pub fn register(store: &mut ParamStore, seed: u64) {
        store.init_gaussian("spat.w1", SPAT_IN, HIDDEN, 0.3, seed);
        store.init_const("spat.b1", 1, HIDDEN, 0.0);
        store.init_gaussian("spat.w2", HIDDEN, D_SPAT, 0.15, seed);
        store.init_const("spat.b2", 1, D_SPAT, 0.0);
    }

    /// Differentiable forward over stacked input rows `[n, 6]`.
    pub fn forward_tape(tape: &mut Tape, store: &ParamStore, x: T) -> T {
        let w1 = tape.param(store, "spat.w1");
        let b1 = tape.param(store, "spat.b1");
        let w2 = tape.param(store, "spat.w2");
        let b2 = tape.param(store, "spat.b2");
        tape.mlp2(x, w1, b1, w2, b2, Act::Tanh)
    }

    /// Plain forward for the inference path; one row in, one row out.
    pub fn forward_plain(store: &ParamStore, x: &[f64; SPAT_IN]) -> Vec<f64> {
        let w1 = store.block("spat.w1");
        let b1 = store.block("spat.b1");
        let w2 = store.block("spat.w2");
        let b2 = store.block("spat.b2");
        let mut h = b1.values.clone();
        for (k, xv) in x.iter().enumerate() {
            for j in 0..HIDDEN {
                h[j] += xv * w1.values[k * HIDDEN + j];
            }
        }
        for v in h.iter_mut() {
            *v = v.tanh();
        }
        let mut out = b2.values.clone();
        for (k, hv) in h.iter().enumerate() {
            if *hv == 0.0 {
                continue;
            }
            for j in 0..D_SPAT {
                out[j] += hv * w2.values[k * D_SPAT + j];
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn pose(x: f64, y: f64, heading: f64) -> AgentPose {
        AgentPose::new(Point3::new(x, y, 0.0), heading)
    }

    #[test]
    fn agent_frame_basics() {
        // point == position
        let (p, d, t) = to_agent_frame(Point3::new(0.0, 0.0, 0.0), &pose(0.0, 0.0, 0.3));
        assert_eq!((p.x, p.y, p.z, d, t), (0.0, 0.0, 0.0, 0.0, 0.0));
        // heading 0, point one meter ahead
        let (p, d, t) = to_agent_frame(Point3::new(1.0, 0.0, 0.0), &pose(0.0, 0.0, 0.0));
        assert!((p.x - 1.0).abs() < 1e-12 && p.y.abs() < 1e-12);
        assert!((d - 1.0).abs() < 1e-12 && t.abs() < 1e-12);
        // heading pi/2, global point (0, 1): dead ahead
        let (p, d, t) =
            to_agent_frame(Point3::new(0.0, 1.0, 0.0), &pose(0.0, 0.0, std::f64::consts::FRAC_PI_2));
        assert!((p.x - 1.0).abs() < 1e-12 && p.y.abs() < 1e-12, "{p:?}");
        assert!((d - 1.0).abs() < 1e-12 && t.abs() < 1e-12);
    }

    #[test]
    fn embedding_invariant_under_rigid_transform() {
        let mut store = ParamStore::new();
        SpatialEncoder::register(&mut store, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let point = Point3::new(
                rng.random_range(-4.0..4.0),
                rng.random_range(-4.0..4.0),
                rng.random_range(0.0..2.0),
            );
            let base = pose(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-3.0..3.0));
            let e0 = SpatialEncoder::forward_plain(&store, &spatial_inputs(point, &base));
            // random planar rigid transform applied to both
            let ang: f64 = rng.random_range(-3.0..3.0);
            let (tx, ty) = (rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
            let rot = |p: Point3| {
                Point3::new(
                    ang.cos() * p.x - ang.sin() * p.y + tx,
                    ang.sin() * p.x + ang.cos() * p.y + ty,
                    p.z,
                )
            };
            let moved = AgentPose::new(rot(base.position), base.heading + ang);
            let e1 = SpatialEncoder::forward_plain(&store, &spatial_inputs(rot(point), &moved));
            for (a, b) in e0.iter().zip(&e1) {
                assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn tape_and_plain_agree() {
        let mut store = ParamStore::new();
        SpatialEncoder::register(&mut store, 5);
        let x = spatial_inputs(Point3::new(1.0, -0.5, 0.7), &pose(0.2, 0.1, 0.9));
        let plain = SpatialEncoder::forward_plain(&store, &x);
        let mut tape = Tape::new();
        let xi = tape.leaf(1, SPAT_IN, x.to_vec());
        let out = SpatialEncoder::forward_tape(&mut tape, &store, xi);
        for (a, b) in tape.value(out).iter().zip(&plain) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
