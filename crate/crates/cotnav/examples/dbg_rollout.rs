use std::collections::BTreeMap;
use cotnav::data;
use cotnav::evalh::{self, EvalConfig};
use cotnav::scene::{generate_scene, SceneConfig};
use cotnav::train::{self, TrainConfig, TrainInputs};

fn main() -> cotnav::Result<()> {
    let scene = generate_scene(&SceneConfig::new(8, 8, 1, 3), 41)?;
    let mix: BTreeMap<u8, usize> = [(1u8, 20usize)].into_iter().collect();
    let opts = data::SynthOptions { min_start_goal: 0.5, max_steps: 2, ..Default::default() };
    let corpus = data::synthesize_samples_opts(&scene, &mix, 7, &opts)?;
    let mut scenes = BTreeMap::new();
    scenes.insert(scene.scene_id.clone(), scene.clone());
    let inputs = TrainInputs { scenes, corpus };
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let cfg = TrainConfig { seed: 1, steps, batch_size: 2, waypoint_warmup_steps: 40, checkpoint_every: 0, ..Default::default() };
    let out = train::train(&cfg, &inputs, None)?;
    for i in 0..3 {
        let (sample, hidden) = &inputs.corpus[i];
        let task = data::to_episode_task(&scene, &format!("t#{i}"), sample, hidden)?;
        println!("=== task {i}: {:?} plan={:?} targets={:?}", task.instruction, task.plan_steps, task.step_targets);
        println!("start {:?}", task.start_pose.position);
        let r = evalh::run_episode(&out.store, &cfg.model, &scene, &task, &EvalConfig::default())?;
        for t in &r.trace {
            println!("--- step {} pose ({:.2},{:.2})", t.step, t.pose[0], t.pose[1]);
            print!("{}", t.surface);
        }
        println!("judges: {:?}", r.result.per_step.iter().map(|s| (s.nav_success, s.ground_success)).collect::<Vec<_>>());
    }
    Ok(())
}
