//! Synthesize a small fragmented corpus over one scene and show the
//! annotation file format.

use std::collections::BTreeMap;

use cotnav::data;
use cotnav::scene::{generate_scene, SceneConfig};

fn main() -> cotnav::Result<()> {
    let scene = generate_scene(&SceneConfig::new(32, 32, 3, 16), 5)?;
    // one of each annotation type
    let mix: BTreeMap<u8, usize> = (1..=6).map(|t| (t, 2usize)).collect();
    let pairs = data::synthesize_samples(&scene, &mix, 11)?;

    for (sample, _) in &pairs {
        println!(
            "type {}: plan={} ground={} nav={}  {:?}",
            sample.data_type,
            sample.has_plan(),
            sample.has_ground(),
            sample.has_nav(),
            sample.instruction
        );
    }

    let dir = std::path::Path::new("target/example_data");
    std::fs::create_dir_all(dir)?;
    let samples: Vec<_> = pairs.iter().map(|(a, _)| a.clone()).collect();
    let hidden: Vec<_> = pairs.into_iter().map(|(_, h)| h).collect();
    let path = dir.join("annotations.json");
    data::save_annotations(&samples, &path)?;
    data::save_hidden(&hidden, &data::hidden_path(&path))?;
    println!("\nwrote {} samples to {}", samples.len(), path.display());

    // show one raw record
    let text = std::fs::read_to_string(&path)?;
    let v: serde_json::Value = serde_json::from_str(&text)?;
    println!("first record:\n{}", serde_json::to_string_pretty(&v[0])?);
    Ok(())
}
