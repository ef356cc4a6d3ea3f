use std::collections::BTreeMap;
use cotnav::cot_memory::CoTMemoryState;
use cotnav::data;
use cotnav::memory::MultiLevelMemory;
use cotnav::model::{assemble_context, decode_cot, produce, PosTarget, RespTok};
use cotnav::scene::{self, generate_scene, SceneConfig};
use cotnav::train::{self, SupervisionMask, TrainConfig, TrainInputs};
use cotnav::vocab::Vocabulary;
use cotnav::waypoint;

fn main() -> cotnav::Result<()> {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(250);
    let scene = generate_scene(&SceneConfig::new(8, 8, 1, 3), 41)?;
    let mix: BTreeMap<u8, usize> = [(1u8, 20usize)].into_iter().collect();
    let opts = data::SynthOptions { min_start_goal: 0.5, max_steps: 2, ..Default::default() };
    let corpus = data::synthesize_samples_opts(&scene, &mix, 7, &opts)?;
    let mut scenes = BTreeMap::new();
    scenes.insert(scene.scene_id.clone(), scene.clone());
    let inputs = TrainInputs { scenes, corpus };
    let ckpt = std::path::PathBuf::from(format!("/tmp/dbg_ckpt_{steps}.bin"));
    let mut cfg = TrainConfig {
        seed: 1,
        steps,
        batch_size: 4,
        waypoint_warmup_steps: 300,
        checkpoint_every: 0,
        lr_floor_fraction: 0.3,
        ..Default::default()
    };
    cfg.weights.waypoint = 0.1;
    let store = if ckpt.exists() {
        train::load_checkpoint(&ckpt)?.0
    } else {
        let out = train::train(&cfg, &inputs, None)?;
        train::save_checkpoint(&out.store, &cfg, &ckpt)?;
        out.store
    };
    let v = Vocabulary::shared();

    for i in 0..5 {
        let (sample, hidden) = &inputs.corpus[i];
        println!("\n==== task {i} type {}: {:?}", sample.data_type, sample.instruction);
        println!("  gold plan {:?}", hidden.planning);
        let pose = sample.start_pose.unwrap();
        let mut memory = MultiLevelMemory::new();
        memory.update(&scene::observe_at(&scene, &pose, 0));
        let pano = memory.render_panorama(&pose);
        let cands = waypoint::predict_waypoints(&store, &pano, &pose);
        let instr = v.tokenize(&sample.instruction);
        let ctx = assemble_context(
            &cfg.model,
            v,
            &instr,
            &memory,
            &pano,
            &pose,
            &CoTMemoryState::new(),
            &cands,
        )?;
        let mask = SupervisionMask::for_sample(sample);
        let (gold, _) = train::build_target_sequence(
            v,
            &ctx,
            &scene,
            &memory,
            sample,
            hidden,
            &hidden.planning,
            0,
            false,
            true,
            mask,
            false,
        )?;
        let tf = produce(&store, &cfg.model, &ctx, &gold);
        let mut tape = cotnav::tape::Tape::new();
        let seq = train::TargetSequence { resp: tf.resp.clone(), targets: tf.targets.clone(), mask };
        let (loss, _, bd) =
            train::step_loss_tape(&mut tape, &store, &cfg.model, &ctx, &seq, &Default::default());
        println!(
            "  TF loss at eval state: {:.4} (plan {:.3} ground {:.3} nav {:.3})",
            tape.item(loss),
            bd.plan,
            bd.ground,
            bd.nav
        );
        let dec = decode_cot(&store, &cfg.model, &ctx);
        println!("  gold  : {}", render(&tf.resp, v));
        println!("  decode: {}", render(&dec.resp, v));
        let div = tf.resp.iter().zip(&dec.resp).position(|(a, b)| a != b);
        println!("  first divergence at {:?} of {} / {}", div, tf.resp.len(), dec.resp.len());
        if let Some(gs) = gold.ground.as_ref().map(|g| &g[0]) {
            println!(
                "  gold ground positives (classes): {:?} / {} groundable",
                gs.positives,
                ctx.groundable.len()
            );
        }
        if let Some(r) = dec.ground_res.first() {
            println!("  decode ground choice: {:?} id {:?}", r.choice, r.id);
        }
        for t in &tf.targets {
            if let PosTarget::Nav { class } = t {
                println!("  gold nav class {} of {} cands", class, ctx.candidates.len());
            }
        }
        println!("  decode nav: {:?} reached={}", dec.seq.nav, dec.seq.reached_subgoal);
    }
    Ok(())
}

fn render(resp: &[RespTok], v: &Vocabulary) -> String {
    let mut out = String::new();
    for t in resp {
        match t {
            RespTok::Vocab(id) => {
                out.push_str(v.surface(*id));
                out.push(' ');
            }
            RespTok::Resolved3d(e) => out.push_str(&format!("[3d@{e}] ")),
            RespTok::ResolvedNone => out.push_str("[none] "),
            RespTok::ResolvedCand(c) => out.push_str(&format!("[cand{c}] ")),
            RespTok::ResolvedStop => out.push_str("[stop] "),
        }
    }
    out
}
