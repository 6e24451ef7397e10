//! Trains Direct and Flipped models on synthetic keyword tasks and sweeps
//! the held-out label pairs on held-out tasks.
//!
//! `cargo run --release -p fliplearn-core --example label_generalization -- [seeds] [steps]`

use std::time::Instant;

use fliplearn_core::eval::{generate_synthetic, label_sweep_eval, mean, Metric, SyntheticTaskSpec};
use fliplearn_core::inference::ModelScorer;
use fliplearn_core::objectives::{train, TrainConfig};
use fliplearn_core::rendering::{corpus_words, RenderMode};
use fliplearn_core::seq_model::{Model, ModelConfig, Vocabulary};
use fliplearn_core::task_schema::Verbalizer;

fn env<T: std::str::FromStr>(key: &str, default: T) -> T {
    std::env::var(key)
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(default)
}

fn main() -> fliplearn_core::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let seeds: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(2);
    let steps: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(300);
    let spec = SyntheticTaskSpec {
        train_tasks: env("TRAIN_TASKS", 12),
        nonce_train_pairs: env("NONCE", 40),
        ..SyntheticTaskSpec::default()
    };
    let model_cfg = ModelConfig {
        d_model: env("D_MODEL", 32),
        d_ff: env("D_FF", 64),
        n_heads: env("N_HEADS", 2),
        encoder_layers: env("ENC", 1),
        decoder_layers: env("DEC", 1),
        tie_embeddings: env("TIE", true),
        ..ModelConfig::default()
    };
    let mut gaps = Vec::new();
    for seed in 0..seeds {
        let (train_tasks, eval_tasks) = generate_synthetic(&spec, seed)?;
        let labels = eval_tasks[0].labels.clone();
        let heldout: Vec<Verbalizer> = spec
            .heldout_variants
            .iter()
            .map(|v| v.to_verbalizer(&labels))
            .collect::<fliplearn_core::Result<_>>()?;
        let words = corpus_words(train_tasks.iter().chain(&eval_tasks), &heldout)?;
        let vocab = Vocabulary::new(words, 4);
        let mut results = Vec::new();
        for mode in [RenderMode::Direct, RenderMode::Flipped] {
            let start = Instant::now();
            let mut model = Model::new(model_cfg.clone(), vocab.clone(), seed)?;
            let mut cfg = TrainConfig {
                mode,
                steps,
                seed,
                batch_size: env("BATCH", 16),
                ul_enabled: env("UL", true),
                lambda: env("LAMBDA", 3.0),
                ..TrainConfig::default()
            };
            cfg.optimizer.learning_rate = env("LR", 3e-3);
            let log = train(&mut model, &train_tasks, &cfg)?;
            let first = &log.records[..10.min(log.records.len())];
            let last = &log.records[log.records.len().saturating_sub(20)..];
            let avg = |r: &[fliplearn_core::objectives::StepRecord]| {
                mean(&r.iter().map(|x| x.total).collect::<Vec<_>>())
            };
            let scorer = ModelScorer::new(&model);
            let mut per_task = Vec::new();
            let (mut seen, mut unseen) = (Vec::new(), Vec::new());
            for task in &eval_tasks {
                let r = label_sweep_eval(&scorer, task, mode, Metric::MacroF1, false, &heldout)?;
                per_task.push(r.mean);
                if task.task_id.ends_with("_fresh") {
                    seen.push(r.mean)
                } else {
                    unseen.push(r.mean)
                }
            }
            let m = mean(&per_task);
            println!(
                "seed {seed} {mode:8} loss {:.3}->{:.3} all {:.3} seen-tasks {:.3} unseen-tasks {:.3} ({:.1}s)",
                avg(first),
                avg(last),
                m,
                mean(&seen),
                mean(&unseen),
                start.elapsed().as_secs_f64()
            );
            results.push(m);
        }
        gaps.push(results[1] - results[0]);
    }
    println!("mean gap flipped - direct: {:.3}", mean(&gaps));
    Ok(())
}
