//! Run a small navigation benchmark: a briefly trained agent against the
//! uniform-random baseline, reporting NE / SR / OSR / SPL.

use std::collections::BTreeMap;

use cotnav::data;
use cotnav::evalh::{self, EvalConfig, Suite};
use cotnav::scene::{generate_scene, SceneConfig};
use cotnav::train::{self, TrainConfig, TrainInputs};

fn main() -> cotnav::Result<()> {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(250);
    // train on two scenes, evaluate on a third
    let mut scenes = BTreeMap::new();
    let mut corpus = Vec::new();
    for seed in [31, 32] {
        let s = generate_scene(&SceneConfig::new(24, 24, 2, 10), seed)?;
        let mix: BTreeMap<u8, usize> = [(1u8, 8usize), (4, 6), (6, 6)].into_iter().collect();
        corpus.extend(data::synthesize_samples(&s, &mix, seed)?);
        scenes.insert(s.scene_id.clone(), s);
    }
    let inputs = TrainInputs { scenes, corpus };
    let cfg = TrainConfig { seed: 5, steps, checkpoint_every: 0, ..Default::default() };
    println!("training {} steps on {} samples...", cfg.steps, inputs.corpus.len());
    let out = train::train(&cfg, &inputs, None)?;

    let held = generate_scene(&SceneConfig::new(24, 24, 2, 10), 99)?;
    let mix: BTreeMap<u8, usize> = [(4u8, 10usize)].into_iter().collect();
    let tasks = data::synthesize_samples_opts(
        &held,
        &mix,
        17,
        &data::SynthOptions { min_start_goal: 2.0, ..Default::default() },
    )?;
    let mut eval_scenes = BTreeMap::new();
    eval_scenes.insert(held.scene_id.clone(), held.clone());
    let bench = evalh::BenchmarkInputs { scenes: eval_scenes, tasks: tasks.clone() };
    let ecfg = EvalConfig::default();

    let report = evalh::run_benchmark(Suite::ObjectNav, &out.store, &cfg.model, &bench, &ecfg)?;
    println!("\nheld-out object-goal suite ({} episodes):", report.episodes.len());
    for k in ["ne", "sr", "osr", "spl"] {
        println!("  trained {k}: {:.3}", report.means[k]);
    }

    // random baseline on the same tasks
    let mut sr = 0.0;
    for (i, (sample, hidden)) in tasks.iter().enumerate() {
        let task = data::to_episode_task(&held, &format!("r#{i}"), sample, hidden)?;
        let r = evalh::run_random_baseline(&out.store, &held, &task, &ecfg, i as u64)?;
        let goal = task.step_targets.last().unwrap().1;
        sr += evalh::episode_metrics(&held, &r, goal, ecfg.success_radius)?.sr;
    }
    println!("  random  sr: {:.3}", sr / tasks.len() as f64);

    let dir = std::path::Path::new("target/example_report");
    evalh::write_report(&report, dir)?;
    println!("report written to {}", dir.display());
    Ok(())
}
