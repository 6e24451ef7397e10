//! Flipped training with and without unlikelihood on a two-option task
//! whose instructions do not mention the labels.

use std::time::Instant;

use fliplearn_core::eval::{generate_synthetic, mean, population_std, SyntheticTaskSpec};
use fliplearn_core::inference::score_flipped;
use fliplearn_core::objectives::{train, TrainConfig};
use fliplearn_core::rendering::{corpus_words, RenderMode};
use fliplearn_core::seq_model::{Model, ModelConfig, Vocabulary};
use fliplearn_core::task_schema::builtin_binary_variants;

fn env<T: std::str::FromStr>(key: &str, default: T) -> T {
    std::env::var(key)
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(default)
}

fn main() -> fliplearn_core::Result<()> {
    let spec = SyntheticTaskSpec {
        train_tasks: env("TASKS", 6),
        eval_tasks: 0,
        instances_per_task: 64,
        eval_instances_per_task: 40,
        train_variants: builtin_binary_variants()[..1].to_vec(),
        heldout_variants: Vec::new(),
        nonce_train_pairs: 0,
        eval_seen_tasks: true,
        name_labels: false,
        ..SyntheticTaskSpec::default()
    };
    let seed = env("SEED", 0u64);
    let (train_tasks, eval_tasks) = generate_synthetic(&spec, seed)?;
    let vocab = Vocabulary::new(corpus_words(&train_tasks, &[])?, 4);
    for ul in [false, true] {
        let start = Instant::now();
        let mut model = Model::new(ModelConfig::default(), vocab.clone(), seed)?;
        let mut cfg = TrainConfig {
            mode: RenderMode::Flipped,
            steps: env("STEPS", 500),
            ul_enabled: ul,
            seed,
            ..TrainConfig::default()
        };
        cfg.optimizer.learning_rate = env("LR", 3e-3);
        train(&mut model, &train_tasks, &cfg)?;
        let mut gaps = Vec::new();
        for task in &eval_tasks {
            for template in &task.templates {
                for inst in &task.instances {
                    let s = score_flipped(&model, template, inst, &task.verbalizers[0])?;
                    let c = inst.options.correct_index();
                    gaps.push(s.scores[c] - s.scores[1 - c]);
                }
            }
        }
        let m = mean(&gaps);
        let se = population_std(&gaps) / (gaps.len() as f64).sqrt();
        let wins = gaps.iter().filter(|g| **g > 0.0).count() as f64 / gaps.len() as f64;
        println!(
            "ul {ul}: mean gap {m:.4} se {se:.4} ratio {:.2} wins {wins:.3} n {} ({:.1}s)",
            m.abs() / se,
            gaps.len(),
            start.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
