#![allow(dead_code)]

use hap_core::datagen::{IoiTask, PromptPair, SplitCounts};
use hap_core::model::{Model, ModelConfig};

pub fn task() -> IoiTask {
    IoiTask::standard()
}

pub fn config(layers: usize, heads: usize, d: usize) -> ModelConfig {
    ModelConfig::new(layers, heads, d, task().tokenizer().vocab_size(), 24)
}

pub fn model(layers: usize, heads: usize, d: usize, seed: u64, std: f64) -> Model {
    Model::random(&config(layers, heads, d), seed, std).unwrap()
}

/// `n` prompt pairs from the standard task.
pub fn pairs(n: usize, seed: u64) -> Vec<PromptPair> {
    task()
        .generate(
            SplitCounts {
                train: n,
                validation: 0,
                test: 0,
            },
            seed,
        )
        .unwrap()
        .train
}

/// `n` pairs that all share one length.
pub fn same_length_pairs(n: usize, seed: u64) -> Vec<PromptPair> {
    let all = pairs(40 * n, seed);
    let len = all[0].len();
    let out: Vec<PromptPair> = all.into_iter().filter(|p| p.len() == len).take(n).collect();
    assert_eq!(out.len(), n);
    out
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
