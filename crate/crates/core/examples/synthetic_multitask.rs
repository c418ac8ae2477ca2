//! Single-task vs multitask on the synthetic imbalanced corpus.
//!
//! `cargo run --release --example synthetic_multitask -- [seeds]`

use discotask::augment::{expand_training_set, MockAugmenter};
use discotask::corpus::Corpus;
use discotask::eval::prediction_distribution_kl;
use discotask::exec::Execution;
use discotask::encoder::{EncoderConfig, ToyEmbedderConfig};
use discotask::synthetic::{multitask_corpus, SyntheticConfig, AUXILIARY, PRIMARY};
use discotask::trainer::{train, ModelConfig, TaskWeighting, TrainConfig};

fn model() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            embedder: ToyEmbedderConfig {
                dim: 16,
                buckets: 1024,
                blocks: 1,
                max_tokens: 32,
            },
            positional_dim: 8,
            hidden: 16,
            ..Default::default()
        },
        heads: Vec::new(),
    }
}

fn run(corpus: &Corpus, alpha: TaskWeighting, seed: u64, steps: usize) -> (Vec<f64>, f64, f64) {
    let mut cfg = TrainConfig::new(PRIMARY, seed);
    cfg.epochs = 8;
    cfg.optimizer.lr = 3e-3;
    cfg.optimizer.lr_embedder = 3e-3;
    cfg.steps_per_epoch = Some(steps);
    let out = train(corpus, &model(), &alpha, &cfg).unwrap();
    let r = out.record.primary_report().unwrap().clone();
    let gold: Vec<f64> = r.confusion.iter().map(|row| row.iter().sum::<usize>() as f64).collect();
    let pred: Vec<f64> = (0..gold.len()).map(|j| r.confusion.iter().map(|row| row[j]).sum::<usize>() as f64).collect();
    let kl = prediction_distribution_kl(&pred, &gold).unwrap().value;
    (r.per_class.iter().map(|c| c.f1).collect(), r.macro_f1, kl)
}

fn main() {
    let seeds: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(5);
    let config = SyntheticConfig::default();
    for seed in 0..seeds {
        let corpus = multitask_corpus(&config, seed).unwrap();
        let single = corpus.restrict_tasks(&[PRIMARY.to_string()]).unwrap();
        let t = std::time::Instant::now();
        let st = run(&single, TaskWeighting::one_hot(PRIMARY), seed, 200);
        let mt = run(&corpus, TaskWeighting::new([(PRIMARY, 0.7), (AUXILIARY, 0.3)]), seed, 200);
        let aug = expand_training_set(&single, &MockAugmenter::new(1.0, seed), 10, Execution::Parallel).unwrap();
        let tda = run(&aug, TaskWeighting::one_hot(PRIMARY), seed, 200);
        println!("seed {seed} ({:.1?})", t.elapsed());
        println!("  single    macro {:.3} kl {:.3} per-class {:.2?}", st.1, st.2, st.0);
        println!("  multitask macro {:.3} kl {:.3} per-class {:.2?}", mt.1, mt.2, mt.0);
        println!("  augmented macro {:.3} kl {:.3} per-class {:.2?}", tda.1, tda.2, tda.0);
    }
}
