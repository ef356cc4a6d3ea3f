use std::collections::BTreeMap;
use cotnav::data;
use cotnav::evalh::{self, EvalConfig};
use cotnav::model::CtxTok;
use cotnav::scene::{generate_scene, SceneConfig};
use cotnav::train::{self, TrainConfig, TrainInputs};
use cotnav::vocab::Vocabulary;

fn main() -> cotnav::Result<()> {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(600);
    let scene = generate_scene(&SceneConfig::new(8, 8, 1, 3), 41)?;
    let mix: BTreeMap<u8, usize> = [(1u8, 20usize)].into_iter().collect();
    let opts = data::SynthOptions { min_start_goal: 0.5, max_steps: 2, ..Default::default() };
    let corpus = data::synthesize_samples_opts(&scene, &mix, 7, &opts)?;
    let mut scenes = BTreeMap::new();
    scenes.insert(scene.scene_id.clone(), scene.clone());
    let inputs = TrainInputs { scenes, corpus };
    let mut cfg = TrainConfig {
        seed: 1,
        steps,
        batch_size: 4,
        waypoint_warmup_steps: 300,
        checkpoint_every: 0,
        lr_floor_fraction: 0.2,
        lr: 6e-4,
        beta_floor: 1.0,
        ..Default::default()
    };
    cfg.weights.waypoint = 0.0;
    let ckpt = std::path::PathBuf::from(format!("/tmp/dbg_frozen_{steps}.bin"));
    let store = if ckpt.exists() {
        eprintln!("loading cached checkpoint");
        train::load_checkpoint(&ckpt)?.0
    } else {
        let out = train::train(&cfg, &inputs, None)?;
        train::save_checkpoint(&out.store, &cfg, &ckpt)?;
        out.store
    };
    let v = Vocabulary::shared();

    // A. compare training record contexts vs eval step contexts
    for i in 0..3 {
        let (sample, hidden) = &inputs.corpus[i];
        let rollout =
            train::dagger_rollout(&store, &cfg.model, &scene, sample, hidden, 1.0, 99, true)?;
        println!("\n==== task {i}: {:?} ({} train records)", sample.instruction, rollout.records.len());
        let task = data::to_episode_task(&scene, &format!("t#{i}"), sample, hidden)?;
        let er = evalh::run_episode(&store, &cfg.model, &scene, &task, &EvalConfig::default())?;
        println!("eval: {} steps, {} declared, judges {:?}", er.trace.len(),
                 er.result.per_step.len(),
                 er.result.per_step.iter().map(|s| (s.nav_success, s.ground_success)).collect::<Vec<_>>());
        for (t, rec) in er.trace.iter().zip(&rollout.records) {
            // compare the recorded training context at this step index
            println!("  step {}: train_ctx {} entries, eval surface:", t.step, rec.ctx.len());
            for line in t.surface.lines() {
                println!("    | {line}");
            }
            let gold_nav = rec.seq.targets.iter().find_map(|x| match x {
                cotnav::model::PosTarget::Nav { class } => Some(*class),
                _ => None,
            });
            println!("    gold nav class {:?} of {} cands", gold_nav, rec.ctx.candidates.len());
        }
        // ctx entry diff at step 0
        let t0 = &rollout.records[0];
        let mut memory = cotnav::memory::MultiLevelMemory::new();
        memory.update(&cotnav::scene::observe_at(&scene, &task.start_pose, 0));
        let pano = memory.render_panorama(&task.start_pose);
        let cands = cotnav::waypoint::predict_waypoints(&store, &pano, &task.start_pose);
        let instr = v.tokenize(&task.instruction);
        let eval_ctx = cotnav::model::assemble_context(
            &cfg.model, v, &instr, &memory, &pano, &task.start_pose,
            &cotnav::cot_memory::CoTMemoryState::new(), &cands)?;
        if t0.ctx.len() != eval_ctx.len() {
            println!("  !! step-0 ctx length differs: train {} vs eval {}", t0.ctx.len(), eval_ctx.len());
        } else {
            let mut diffs = 0;
            for (a, b) in t0.ctx.entries.iter().zip(&eval_ctx.entries) {
                let same = match (a, b) {
                    (CtxTok::Word(x), CtxTok::Word(y)) => x == y,
                    (CtxTok::Pano { sector: s1, .. }, CtxTok::Pano { sector: s2, .. }) => s1 == s2,
                    (CtxTok::Inst { token_id: a, .. }, CtxTok::Inst { token_id: b, .. }) => a == b,
                    (CtxTok::Zone { token_id: a, .. }, CtxTok::Zone { token_id: b, .. }) => a == b,
                    (CtxTok::Candidate { index: a, .. }, CtxTok::Candidate { index: b, .. }) => a == b,
                    _ => false,
                };
                if !same {
                    diffs += 1;
                }
            }
            println!("  step-0 ctx entry diffs: {diffs}");
        }
    }
    Ok(())
}
