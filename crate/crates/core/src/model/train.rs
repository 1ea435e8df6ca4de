use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::forward::{LogitScope, Routing, TokenBatch};
use super::weights::{ModelConfig, Weights};
use super::{length_groups, Model};
use crate::autodiff::Tape;
use crate::datagen::PromptPair;
use crate::error::{Error, Result};
use crate::optim::Adam;

/// Toy-training hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub init_std: f64,
    pub warmup_steps: usize,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub eval_every: usize,
    pub target_accuracy: f64,
    /// Stop once validation accuracy reaches this value at an evaluation.
    pub stop_at_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch_size: 32,
            learning_rate: 3e-3,
            seed: 0,
            init_std: 0.02,
            warmup_steps: 100,
            grad_clip: 1.0,
            eval_every: 250,
            target_accuracy: 0.9,
            stop_at_accuracy: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub weights: Weights,
    pub val_accuracy: f64,
    /// Mean answer cross-entropy on the validation split before training.
    pub initial_loss: f64,
    /// The same after training.
    pub final_loss: f64,
    pub steps_run: usize,
    pub loss_trace: Vec<f64>,
}

/// Fraction of pairs whose final-position IO logit beats the S logit.
pub fn answer_accuracy(model: &Model, pairs: &[PromptPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let seqs: Vec<&[u32]> = pairs.iter().map(|p| p.clean_ids.as_slice()).collect();
    let out = model.final_logits(&seqs)?;
    let hits = pairs
        .iter()
        .enumerate()
        .filter(|(i, p)| {
            let row = out.row(*i);
            row[p.io_id as usize] > row[p.s_id as usize]
        })
        .count();
    Ok(hits as f64 / pairs.len() as f64)
}

fn mean_answer_nll(model: &Model, pairs: &[PromptPair]) -> Result<f64> {
    let seqs: Vec<&[u32]> = pairs.iter().map(|p| p.clean_ids.as_slice()).collect();
    let out = model.final_logits(&seqs)?;
    let mut total = 0.0;
    for (i, p) in pairs.iter().enumerate() {
        let row = out.row(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[p.io_id as usize];
    }
    Ok(total / pairs.len().max(1) as f64)
}

/// Train, then fail with the achieved accuracy if it misses the target.
pub fn train_toy(
    config: &ModelConfig,
    train: &[PromptPair],
    val: &[PromptPair],
    hyper: &TrainConfig,
) -> Result<TrainOutcome> {
    let out = train_toy_unchecked(config, train, val, hyper)?;
    if out.val_accuracy < hyper.target_accuracy {
        return Err(Error::TrainingTargetMissed {
            accuracy: out.val_accuracy,
            target: hyper.target_accuracy,
        });
    }
    Ok(out)
}

/// Next-token cross-entropy on the answer position only, Adam with linear
/// warmup then cosine decay. Deterministic given `hyper.seed`.
pub fn train_toy_unchecked(
    config: &ModelConfig,
    train: &[PromptPair],
    val: &[PromptPair],
    hyper: &TrainConfig,
) -> Result<TrainOutcome> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Dataset(
            "training needs non-empty train and validation sets".into(),
        ));
    }
    if hyper.steps == 0 || hyper.batch_size == 0 {
        return Err(Error::Config("steps and batch_size must be at least 1".into()));
    }
    let mut model = Model::new(Weights::init(config, hyper.seed, hyper.init_std)?)?;
    let initial_loss = mean_answer_nll(&model, val)?;
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed ^ 0x7472_6169_6e00);
    let mut opt = Adam::new();
    let mut loss_trace = Vec::with_capacity(hyper.steps);
    let mut val_accuracy = f64::NAN;
    let mut steps_run = 0;

    for step in 0..hyper.steps {
        let batch: Vec<&PromptPair> = (0..hyper.batch_size)
            .map(|_| &train[rng.random_range(0..train.len())])
            .collect();
        let mut tape = Tape::new();
        let params = model.record_params(&mut tape, true)?;
        let mut total = None;
        for (_, idx) in length_groups(batch.iter().map(|p| p.len())) {
            let rows: Vec<&[u32]> = idx.iter().map(|&i| batch[i].clean_ids.as_slice()).collect();
            let answers: Vec<usize> = idx.iter().map(|&i| batch[i].io_id as usize).collect();
            let tokens = TokenBatch::new(&rows)?;
            let nodes = model.forward_graph(&mut tape, &params, &tokens, Routing::Plain, LogitScope::Final)?;
            let logp = tape.log_softmax(nodes.logits)?;
            let picked = tape.take_along_last(logp, &answers)?;
            let s = tape.sum(picked)?;
            total = Some(match total {
                Some(t) => tape.add(t, s)?,
                None => s,
            });
        }
        let total = total.expect("non-empty batch");
        let loss = tape.affine(total, -1.0 / hyper.batch_size as f64, 0.0)?;
        let loss_value = tape.value(loss).item();
        if !loss_value.is_finite() {
            return Err(Error::Diverged { step });
        }
        loss_trace.push(loss_value);
        let grads = model.backward(&tape, loss)?;
        let ids = params.values();
        let mut gs: Vec<_> = ids.iter().map(|&&id| grads.wrt(id)).collect();
        if hyper.grad_clip > 0.0 {
            let norm = gs.iter().map(|g| g.dot(g)).sum::<f64>().sqrt();
            if norm > hyper.grad_clip {
                let s = hyper.grad_clip / norm;
                for g in &mut gs {
                    for v in g.data_mut() {
                        *v *= s;
                    }
                }
            }
        }
        let lr = schedule(hyper, step);
        opt.begin_step();
        {
            let params_mut = model.weights.params.values_mut();
            for (slot, (p, g)) in params_mut.into_iter().zip(&gs).enumerate() {
                opt.update(slot, p.data_mut(), g.data(), lr, None);
            }
        }
        steps_run = step + 1;

        let last = step + 1 == hyper.steps;
        if (hyper.eval_every > 0 && (step + 1) % hyper.eval_every == 0) || last {
            val_accuracy = answer_accuracy(&model, val)?;
            info!(
                "train step {} loss {:.4} val_acc {:.3}",
                step + 1,
                loss_value,
                val_accuracy
            );
            if hyper.stop_at_accuracy.is_some_and(|t| val_accuracy >= t) {
                break;
            }
        } else {
            debug!("train step {} loss {:.4}", step + 1, loss_value);
        }
    }
    let final_loss = mean_answer_nll(&model, val)?;
    Ok(TrainOutcome {
        weights: model.into_weights(),
        val_accuracy,
        initial_loss,
        final_loss,
        steps_run,
        loss_trace,
    })
}

fn schedule(hyper: &TrainConfig, step: usize) -> f64 {
    let base = hyper.learning_rate;
    if step < hyper.warmup_steps {
        return base * (step + 1) as f64 / hyper.warmup_steps as f64;
    }
    let span = (hyper.steps - hyper.warmup_steps).max(1) as f64;
    let progress = (step - hyper.warmup_steps) as f64 / span;
    base * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}
