use std::collections::BTreeMap;
use cotnav::data;
use cotnav::model::{self, decode_cot, produce, GoldSections, ModelConfig};
use cotnav::params::ParamStore;
use cotnav::scene::{generate_scene, SceneConfig};
use cotnav::tape::Tape;
use cotnav::train::{self, LossWeights, StepRecord, SupervisionMask, TargetSequence};
use cotnav::vocab::Vocabulary;

fn main() -> cotnav::Result<()> {
    let mcfg = ModelConfig { layers: 2, width: 64, heads: 2, ff_mult: 2, ..ModelConfig::default() };
    let mut store = ParamStore::new();
    model::register_model(&mut store, &mcfg, 5);
    let scene = generate_scene(&SceneConfig::new(8, 8, 1, 3), 41)?;
    let mix: BTreeMap<u8, usize> = [(1u8, 1usize)].into_iter().collect();
    let opts = data::SynthOptions { min_start_goal: 0.5, max_steps: 1, ..Default::default() };
    let corpus = data::synthesize_samples_opts(&scene, &mix, 7, &opts)?;
    let (sample, hidden) = &corpus[0];

    // one fixed gold record at step 0 (fresh store each time for determinism of ctx)
    let rollout = train::dagger_rollout(&store, &mcfg, &scene, sample, hidden, 1.0, 3, true)?;
    let rec: &StepRecord = &rollout.records[0];
    println!("resp len {}, ctx len {}", rec.seq.resp.len(), rec.ctx.len());

    let weights = LossWeights::default();
    for step in 0..400 {
        store.zero_grad();
        let mut tape = Tape::new();
        let (loss, _, _) = train::step_loss_tape(&mut tape, &store, &mcfg, &rec.ctx, &rec.seq, &weights);
        tape.backward(loss);
        tape.harvest(&mut store);
        store.adam_step(1e-3, 1.0);
        if step % 100 == 0 {
            println!("step {step}: loss {:.6}", tape.item(loss));
        }
    }
    let mut tape = Tape::new();
    let (loss, _, _) = train::step_loss_tape(&mut tape, &store, &mcfg, &rec.ctx, &rec.seq, &weights);
    println!("final TF loss {:.6}", tape.item(loss));

    // greedy decode on the SAME context must reproduce the gold sequence
    let dec = decode_cot(&store, &mcfg, &rec.ctx);
    let v = Vocabulary::shared();
    println!("gold resp:    {:?}", &rec.seq.resp[..rec.seq.resp.len().min(24)]);
    println!("decoded resp: {:?}", &dec.resp[..dec.resp.len().min(24)]);
    println!("decoded text:\n{}", dec.seq.to_text(v));
    let tf = produce(&store, &mcfg, &rec.ctx, &GoldSections::default());
    assert_eq!(tf.resp, dec.resp);
    let matching = rec.seq.resp.iter().zip(&dec.resp).filter(|(a, b)| a == b).count();
    println!("token match: {}/{}", matching, rec.seq.resp.len());
    Ok(())
}
