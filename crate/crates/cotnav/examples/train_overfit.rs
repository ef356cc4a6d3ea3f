//! Overfit a tiny gold corpus in one small scene and evaluate on the same
//! episodes. A sanity check that the full pipeline learns.

use std::collections::BTreeMap;

use cotnav::data;
use cotnav::evalh::{self, EvalConfig, Suite};
use cotnav::scene::{generate_scene, SceneConfig};
use cotnav::train::{self, TrainConfig, TrainInputs};

fn main() -> cotnav::Result<()> {
    let t0 = std::time::Instant::now();
    let scene = generate_scene(&SceneConfig::new(8, 8, 1, 3), 41)?;
    let mix: BTreeMap<u8, usize> = [(1u8, 20usize)].into_iter().collect();
    let opts = data::SynthOptions { min_start_goal: 0.5, max_steps: 2, ..Default::default() };
    let corpus = data::synthesize_samples_opts(&scene, &mix, 7, &opts)?;
    let mut scenes = BTreeMap::new();
    scenes.insert(scene.scene_id.clone(), scene.clone());
    let inputs = TrainInputs { scenes, corpus };

    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let cfg = TrainConfig {
        seed: 1,
        steps,
        batch_size: 2,
        waypoint_warmup_steps: 40,
        checkpoint_every: 0,
        ..Default::default()
    };
    let out = train::train(&cfg, &inputs, None)?;
    for line in out.log.iter().step_by(20.max(steps / 15)) {
        println!(
            "step {:>4}  loss {:.4}  plan {:.3} ground {:.3} nav {:.3} wp {:.3}  beta {:.2}",
            line.step, line.loss, line.plan, line.ground, line.nav, line.waypoint, line.beta
        );
    }
    println!("trained in {:.1}s", t0.elapsed().as_secs_f64());

    // evaluate on the training episodes
    let bench = evalh::BenchmarkInputs {
        scenes: inputs.scenes.clone(),
        tasks: inputs.corpus.clone(),
    };
    let report = evalh::run_benchmark(
        Suite::SeqGround,
        &out.store,
        &cfg.model,
        &bench,
        &EvalConfig::default(),
    )?;
    println!(
        "train-set SR {:.2}  s-SR {:.2}  s-ACC {:.2}  t-ACC {:.2}  ({} episodes, {:.1}s total)",
        report.means["sr"],
        report.means["s_sr"],
        report.means["s_acc"],
        report.means["t_acc"],
        report.episodes.len(),
        t0.elapsed().as_secs_f64()
    );
    Ok(())
}
