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
    let chunk: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let chunks: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(6);
    let mut cfg = TrainConfig {
        seed: 1,
        steps: chunk,
        batch_size: 4,
        waypoint_warmup_steps: 300,
        checkpoint_every: 0,
        lr_floor_fraction: 1.0,
        ..Default::default()
    };
    cfg.weights.waypoint = 0.1;
    let mut store = None;
    let bench = evalh::BenchmarkInputs { scenes: inputs.scenes.clone(), tasks: inputs.corpus.clone() };
    for c in 0..chunks {
        let out = match store.take() {
            None => train::train(&cfg, &inputs, None)?,
            Some(s) => train::train_from(&cfg, &inputs, None, s)?,
        };
        cfg.waypoint_warmup_steps = 0;
        cfg.lr *= 0.65;
        let r = evalh::run_benchmark(Suite::SeqGround, &out.store, &cfg.model, &bench, &EvalConfig::default())?;
        println!(
            "after {:>4} steps ({:>5.0}s): loss {:.3}  SR {:.2} s-SR {:.2} s-ACC {:.2} t-ACC {:.2}",
            (c + 1) * chunk,
            t0.elapsed().as_secs_f64(),
            out.log.last().map(|l| l.loss).unwrap_or(f64::NAN),
            r.means["sr"], r.means["s_sr"], r.means["s_acc"], r.means["t_acc"],
        );
        store = Some(out.store);
    }
    Ok(())
}
