use std::collections::BTreeMap;
use cotnav::data;
use cotnav::memory::MultiLevelMemory;
use cotnav::scene::{self, generate_scene, SceneConfig};
use cotnav::train::{self, TrainConfig, TrainInputs};
use cotnav::waypoint;

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
    // compare predicted candidates vs gt at several poses
    for i in 0..4 {
        let (sample, _) = &inputs.corpus[i];
        let pose = sample.start_pose.unwrap();
        let mut m = MultiLevelMemory::new();
        m.update(&scene::observe_at(&scene, &pose, 0));
        let pano = m.render_panorama(&pose);
        let cands = waypoint::predict_waypoints(&out.store, &pano, &pose);
        let gt = scene::sector_waypoints(&scene, &pose);
        println!("pose ({:.2},{:.2},h{:.2}): {} candidates vs {} gt", pose.position.x, pose.position.y, pose.heading, cands.len(), gt.len());
        for c in &cands {
            println!("  pred s{} conf {:.2} dist {:.2}", c.sector, c.confidence, c.distance);
        }
        for g in &gt {
            println!("  gt   s{} dist {:.2}", g.sector, g.distance);
        }
    }
    Ok(())
}
