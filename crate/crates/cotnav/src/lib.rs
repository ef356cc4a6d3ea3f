//! A desk-scale embodied agent that plans, grounds targets in a 3D memory,
//! and navigates a procedurally generated gridworld through one autoregressive
//! chain-of-thought sequence, trained with a masked loss over fragmented
//! (partially annotated) supervision.
//!
//! Start with the runnable examples:
//!
//! ```bash
//! cargo run --release --example generate_world
//! cargo run --release --example observe_and_map
//! cargo run --release --example synthesize_dataset
//! cargo run --release --example train_overfit
//! cargo run --release --example rollout_episode
//! cargo run --release --example evaluate_suite
//! cargo run --release --example replan_demo
//! ```
//!
//! The `cotnav` binary exposes the same pipelines as subcommands
//! (`gen-scenes`, `gen-data`, `train`, `eval`, `rollout`, `replay`).

pub mod cot_memory;
pub mod data;
pub mod error;
pub mod evalh;
pub mod features;
pub mod geom;
pub mod memory;
pub mod model;
pub mod params;
pub mod scene;
pub mod spatial;
pub mod tape;
pub mod train;
pub mod vocab;
pub mod waypoint;

pub use error::{Error, Result};
