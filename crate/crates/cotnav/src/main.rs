use std::collections::BTreeMap;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use cotnav::data;
use cotnav::error::Result;
use cotnav::evalh::{self, EvalConfig, Suite};
use cotnav::scene::{self, SceneConfig};
use cotnav::train::{self, TrainConfig, TrainInputs};
use cotnav::vocab::Vocabulary;

#[derive(Parser)]
#[command(name = "cotnav", about = "gridworld chain-of-thought navigation agent", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate procedural scenes.
    GenScenes {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Synthesize fragmented annotations over generated scenes.
    GenData {
        #[arg(long)]
        scenes: PathBuf,
        /// Per-type counts per scene, colon separated: t1:t2:t3:t4:t5:t6.
        #[arg(long)]
        mix: String,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Minimum start-to-goal geodesic distance, meters.
        #[arg(long, default_value_t = 1.0)]
        min_start_goal: f64,
        /// Fraction of gold samples carrying a scripted revision.
        #[arg(long, default_value_t = 0.0)]
        revision_fraction: f64,
    },
    /// Train from a config file over data and scene directories.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a task suite.
    Eval {
        #[arg(long)]
        suite: String,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Roll one task and write its episode trace.
    Rollout {
        #[arg(long)]
        task: String,
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        tasks: PathBuf,
    },
    /// Print the per-step chain-of-thought text of a trace.
    Replay {
        #[arg(long)]
        trace: PathBuf,
    },
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Cmd::GenScenes { config, count, seed, out } => {
            let cfg: SceneConfig = serde_json::from_str(&std::fs::read_to_string(config)?)?;
            std::fs::create_dir_all(&out)?;
            for i in 0..count {
                let s = scene::generate_scene(&cfg, seed + i as u64)?;
                let name = format!("scene_{:04}.json", i);
                s.save(&out.join(&name))?;
                println!("wrote {} ({})", name, s.scene_id);
            }
            Ok(())
        }
        Cmd::GenData { scenes, mix, seed, out, min_start_goal, revision_fraction } => {
            let scene_map = scene::load_scenes_dir(&scenes)?;
            let counts = parse_mix(&mix)?;
            std::fs::create_dir_all(&out)?;
            let opts = data::SynthOptions {
                min_start_goal,
                revision_fraction,
                ..Default::default()
            };
            for (i, (id, sc)) in scene_map.iter().enumerate() {
                let pairs =
                    data::synthesize_samples_opts(sc, &counts, seed + i as u64, &opts)?;
                let samples: Vec<_> = pairs.iter().map(|(a, _)| a.clone()).collect();
                let hidden: Vec<_> = pairs.into_iter().map(|(_, h)| h).collect();
                let path = out.join(format!("ann_{:04}.json", i));
                data::save_annotations(&samples, &path)?;
                data::save_hidden(&hidden, &data::hidden_path(&path))?;
                println!("wrote {} samples for {}", samples.len(), id);
            }
            Ok(())
        }
        Cmd::Train { config, data: data_dir, scenes, out, resume } => {
            let cfg: TrainConfig = serde_json::from_str(&std::fs::read_to_string(config)?)?;
            let inputs = TrainInputs {
                scenes: scene::load_scenes_dir(&scenes)?,
                corpus: data::load_corpus_dir(&data_dir)?,
            };
            println!(
                "training: {} samples over {} scenes, {} steps, vocab {}",
                inputs.corpus.len(),
                inputs.scenes.len(),
                cfg.steps,
                Vocabulary::shared().size()
            );
            let outcome = match resume {
                Some(ckpt) => {
                    let (store, _) = train::load_checkpoint(&ckpt)?;
                    train::train_from(&cfg, &inputs, Some(&out), store)?
                }
                None => train::train(&cfg, &inputs, Some(&out))?,
            };
            if let Some(last) = outcome.log.last() {
                println!("final loss {:.4} at step {}", last.loss, last.step);
            }
            println!("checkpoint: {}", out.join("ckpt_final.bin").display());
            Ok(())
        }
        Cmd::Eval { suite, ckpt, tasks, out, seed } => {
            let suite = Suite::parse(&suite)?;
            let (store, tcfg) = train::load_checkpoint(&ckpt)?;
            let inputs = evalh::BenchmarkInputs {
                scenes: scene::load_scenes_dir(&tasks.join("scenes"))?,
                tasks: data::load_corpus_dir(&tasks)?,
            };
            let ecfg = EvalConfig { seed, ..Default::default() };
            let report = evalh::run_benchmark(suite, &store, &tcfg.model, &inputs, &ecfg)?;
            evalh::write_report(&report, &out)?;
            for (k, v) in &report.means {
                println!("{}: {:.4}", k, v);
            }
            println!("report: {}", out.join("summary.csv").display());
            Ok(())
        }
        Cmd::Rollout { task, trace, ckpt, tasks } => {
            let (store, tcfg) = train::load_checkpoint(&ckpt)?;
            let scenes = scene::load_scenes_dir(&tasks.join("scenes"))?;
            let corpus = data::load_corpus_dir(&tasks)?;
            let idx: usize = task
                .rsplit('#')
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| cotnav::Error::MissingTasks(format!("bad task id {task:?}")))?;
            let (sample, hidden) = corpus
                .get(idx)
                .ok_or_else(|| cotnav::Error::MissingTasks(format!("task {task:?}")))?;
            let sc = scenes
                .get(&sample.scene_id)
                .ok_or_else(|| cotnav::Error::MissingTasks(sample.scene_id.clone()))?;
            let episode = data::to_episode_task(sc, &task, sample, hidden)?;
            let out = evalh::run_episode(&store, &tcfg.model, sc, &episode, &EvalConfig::default())?;
            evalh::write_trace(&out.trace, &trace)?;
            println!(
                "episode {}: {} steps, stop at ({:.2}, {:.2})",
                task,
                out.trace.len(),
                out.result.stop_position.x,
                out.result.stop_position.y
            );
            Ok(())
        }
        Cmd::Replay { trace } => {
            for step in evalh::read_trace(&trace)? {
                println!("--- step {} ---", step.step);
                println!(
                    "pose ({:.2}, {:.2}, heading {:.2}); memory: {} voxels, {} instances, {} zones",
                    step.pose[0],
                    step.pose[1],
                    step.pose[3],
                    step.memory_counts.0,
                    step.memory_counts.1,
                    step.memory_counts.2
                );
                if !step.flags.is_empty() {
                    println!("flags: {}", step.flags.join(", "));
                }
                print!("{}", step.surface);
            }
            Ok(())
        }
    }
}

fn parse_mix(s: &str) -> Result<BTreeMap<u8, usize>> {
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() != 6 {
        return Err(cotnav::Error::Schema {
            path: "--mix".into(),
            msg: "expected six colon-separated counts t1:t2:t3:t4:t5:t6".into(),
        });
    }
    let mut out = BTreeMap::new();
    for (i, p) in parts.iter().enumerate() {
        let n: usize = p.parse().map_err(|_| cotnav::Error::Schema {
            path: format!("--mix[{i}]"),
            msg: format!("bad count {p:?}"),
        })?;
        if n > 0 {
            out.insert(i as u8 + 1, n);
        }
    }
    Ok(out)
}
