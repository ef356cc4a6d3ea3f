//! Dynamic replanning: remove the agent's target mid-episode and watch the
//! chain-of-thought memory raise target_missing, after which the agent
//! revises its plan. An agent with the memory feed disabled cannot.

use std::collections::BTreeMap;

use cotnav::data;
use cotnav::evalh::{self, EvalConfig};
use cotnav::scene::{self, generate_scene, SceneConfig, SceneEdit};
use cotnav::train::{self, TrainConfig, TrainInputs};

fn main() -> cotnav::Result<()> {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(400);
    let scene = generate_scene(&SceneConfig::new(16, 16, 1, 5), 13)?;
    let mix: BTreeMap<u8, usize> = [(1u8, 16usize)].into_iter().collect();
    // half the gold episodes script a mid-task removal with a revised plan
    let opts = data::SynthOptions { revision_fraction: 0.5, max_steps: 2, ..Default::default() };
    let corpus = data::synthesize_samples_opts(&scene, &mix, 3, &opts)?;
    let mut scenes = BTreeMap::new();
    scenes.insert(scene.scene_id.clone(), scene.clone());
    let inputs = TrainInputs { scenes, corpus };
    let cfg = TrainConfig { seed: 8, steps, checkpoint_every: 0, ..Default::default() };
    println!("training {} steps (revision episodes included)...", cfg.steps);
    let out = train::train(&cfg, &inputs, None)?;

    // a two-step task whose second target disappears immediately
    let (sample, hidden) = inputs
        .corpus
        .iter()
        .find(|(s, h)| s.data_type == 1 && h.revision.is_some())
        .expect("a revision episode exists");
    let removed = hidden.revision.as_ref().unwrap().remove_instance;
    let edited = scene::edit_scene(&scene, SceneEdit::RemoveInstance, removed, None)?;
    let task = data::to_episode_task(&scene, "replan#0", sample, hidden)?;

    for (name, cot_on) in [("with memory", true), ("memory ablated", false)] {
        let mut mcfg = cfg.model.clone();
        mcfg.cot_memory_enabled = cot_on;
        let rollout = evalh::run_episode(&out.store, &mcfg, &edited, &task, &EvalConfig::default())?;
        println!("\n=== {name} ===");
        let mut last_plan = String::new();
        for (t, plan) in rollout.trace.iter().zip(&rollout.plans) {
            let marker = if *plan != last_plan { " <- plan changed" } else { "" };
            println!("step {:2}: flags {:?} plan {:?}{marker}", t.step, t.flags, plan);
            last_plan = plan.clone();
        }
    }
    Ok(())
}
