//! Train briefly on a small world, then roll one episode and print the
//! chain-of-thought the agent emits at every step.

use std::collections::BTreeMap;

use cotnav::data;
use cotnav::evalh::{self, EvalConfig};
use cotnav::scene::{generate_scene, SceneConfig};
use cotnav::train::{self, TrainConfig, TrainInputs};

fn main() -> cotnav::Result<()> {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let scene = generate_scene(&SceneConfig::new(16, 16, 2, 6), 3)?;
    let mix: BTreeMap<u8, usize> = [(1u8, 12usize), (6, 6)].into_iter().collect();
    let corpus = data::synthesize_samples(&scene, &mix, 9)?;
    let mut scenes = BTreeMap::new();
    scenes.insert(scene.scene_id.clone(), scene.clone());
    let inputs = TrainInputs { scenes, corpus };

    let cfg = TrainConfig { seed: 2, steps, checkpoint_every: 0, ..Default::default() };
    println!("training {} steps...", cfg.steps);
    let out = train::train(&cfg, &inputs, None)?;

    let (sample, hidden) = &inputs.corpus[0];
    let task = data::to_episode_task(&scene, "demo#0", sample, hidden)?;
    println!("\ninstruction: {}", task.instruction);
    println!("gold plan: {:?}\n", task.plan_steps);
    let rollout = evalh::run_episode(&out.store, &cfg.model, &scene, &task, &EvalConfig::default())?;
    for t in &rollout.trace {
        println!("--- step {} at ({:.2}, {:.2}) ---", t.step, t.pose[0], t.pose[1]);
        print!("{}", t.surface);
        if !t.flags.is_empty() {
            println!("flags: {:?}", t.flags);
        }
    }
    println!(
        "\nstop at ({:.2}, {:.2}); {} of {} subgoals judged",
        rollout.result.stop_position.x,
        rollout.result.stop_position.y,
        rollout.result.per_step.len(),
        task.step_targets.len()
    );

    let trace_path = std::path::Path::new("target/example_trace.jsonl");
    evalh::write_trace(&rollout.trace, trace_path)?;
    println!("trace written to {} (replay with the cotnav binary)", trace_path.display());
    Ok(())
}
