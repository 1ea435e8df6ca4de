//! GPT-2 style transformer whose residual stream is disentangled into
//! per-edge contributions.
//!
//! Every reader (each head's query, key and value input, each MLP input and
//! the final logits) receives its own sum over the writers that precede it.
//! In a masked run the sum mixes the in-run activation of each writer with
//! the cached activation from a corrupted run, gated per edge.

mod forward;
mod train;
mod weights;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::autodiff::{Array, Gradients, NodeId, Tape};
use crate::error::{Error, Result};
use crate::graph::GraphSchema;

pub use forward::{ActivationCache, ForwardNodes, GateSpec, LogitScope, MaskAssignment, Routing, TokenBatch};
pub use train::{answer_accuracy, train_toy, train_toy_unchecked, TrainConfig, TrainOutcome};
pub use weights::{param_shapes, LayerParams, ModelConfig, ParamSet, Weights};

/// Counts of model passes, for checking attribution's pass budget.
#[derive(Debug, Default)]
pub struct PassCounter {
    forward: AtomicUsize,
    backward: AtomicUsize,
}

impl PassCounter {
    pub fn forward(&self) -> usize {
        self.forward.load(Ordering::Relaxed)
    }

    pub fn backward(&self) -> usize {
        self.backward.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.forward.store(0, Ordering::Relaxed);
        self.backward.store(0, Ordering::Relaxed);
    }
}

/// Weights plus the edge schema derived from their config.
#[derive(Debug)]
pub struct Model {
    weights: Weights,
    schema: GraphSchema,
    passes: PassCounter,
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Self {
            weights: self.weights.clone(),
            schema: self.schema.clone(),
            passes: PassCounter::default(),
        }
    }
}

/// Final-position outputs for many prompts of possibly different lengths.
pub struct FinalLogits {
    /// `[n, vocab]`, rows in input order.
    pub logits: Array,
}

impl FinalLogits {
    pub fn row(&self, i: usize) -> &[f64] {
        let v = self.logits.last_dim();
        &self.logits.data()[i * v..(i + 1) * v]
    }

    pub fn len(&self) -> usize {
        self.logits.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Indices grouped by sequence length, groups in ascending length order.
pub fn length_groups<I: IntoIterator<Item = usize>>(lengths: I) -> Vec<(usize, Vec<usize>)> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, len) in lengths.into_iter().enumerate() {
        groups.entry(len).or_default().push(i);
    }
    groups.into_iter().collect()
}

impl Model {
    pub fn new(weights: Weights) -> Result<Self> {
        weights.validate()?;
        let c = &weights.config;
        let schema = GraphSchema::enumerate(c.layers, c.heads)?.with_model_dim(c.d_model);
        Ok(Self {
            weights,
            schema,
            passes: PassCounter::default(),
        })
    }

    /// Randomly initialized model, see [`Weights::init`].
    pub fn random(config: &ModelConfig, seed: u64, std: f64) -> Result<Self> {
        Self::new(Weights::init(config, seed, std)?)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.weights.config
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    pub fn into_weights(self) -> Weights {
        self.weights
    }

    pub fn schema(&self) -> &GraphSchema {
        &self.schema
    }

    pub fn passes(&self) -> &PassCounter {
        &self.passes
    }

    /// Put the parameters on `tape`.
    pub fn record_params(&self, tape: &mut Tape, trainable: bool) -> Result<ParamSet<NodeId>> {
        self.weights.params.try_map(|a| {
            if trainable {
                tape.param(a.clone())
            } else {
                tape.constant(a.clone())
            }
        })
    }

    /// One forward pass on `tape`.
    pub fn forward_graph(
        &self,
        tape: &mut Tape,
        params: &ParamSet<NodeId>,
        tokens: &TokenBatch,
        routing: Routing<'_>,
        scope: LogitScope,
    ) -> Result<ForwardNodes> {
        self.passes.forward.fetch_add(1, Ordering::Relaxed);
        forward::run_graph(tape, self.config(), &self.schema, params, tokens, routing, scope)
    }

    /// One backward pass.
    pub fn backward(&self, tape: &Tape, loss: NodeId) -> Result<Gradients> {
        self.passes.backward.fetch_add(1, Ordering::Relaxed);
        tape.backward(loss)
    }

    fn cache_of(tape: &Tape, nodes: &ForwardNodes, tokens: &TokenBatch) -> Result<ActivationCache> {
        ActivationCache::new(
            tokens.batch(),
            tokens.seq(),
            nodes.writers.iter().map(|&w| tape.value(w).clone()).collect(),
        )
    }

    /// Ordinary forward pass: logits `[batch, positions, vocab]` and every
    /// writer's residual contribution.
    pub fn forward_full(&self, tokens: &TokenBatch) -> Result<(Array, ActivationCache)> {
        let mut tape = Tape::new();
        let params = self.record_params(&mut tape, false)?;
        let nodes = self.forward_graph(&mut tape, &params, tokens, Routing::Plain, LogitScope::All)?;
        let cache = Self::cache_of(&tape, &nodes, tokens)?;
        Ok((tape.value(nodes.logits).clone(), cache))
    }

    /// Like [`Model::forward_full`] with only the final position unembedded.
    pub fn forward_final(&self, tokens: &TokenBatch) -> Result<(Array, ActivationCache)> {
        let mut tape = Tape::new();
        let params = self.record_params(&mut tape, false)?;
        let nodes = self.forward_graph(&mut tape, &params, tokens, Routing::Plain, LogitScope::Final)?;
        let cache = Self::cache_of(&tape, &nodes, tokens)?;
        Ok((tape.value(nodes.logits).clone(), cache))
    }

    /// Edge-gated forward pass on clean tokens against a corrupted cache;
    /// logits at every position.
    pub fn forward_masked(&self, clean: &TokenBatch, corrupt: &ActivationCache, z: &MaskAssignment) -> Result<Array> {
        self.forward_masked_scoped(clean, corrupt, z, LogitScope::All)
    }

    pub fn forward_masked_scoped(
        &self,
        clean: &TokenBatch,
        corrupt: &ActivationCache,
        z: &MaskAssignment,
        scope: LogitScope,
    ) -> Result<Array> {
        if z.len() != self.schema.num_edges() {
            return Err(Error::CacheMismatch(format!(
                "mask has {} entries, graph has {} edges",
                z.len(),
                self.schema.num_edges()
            )));
        }
        let mut tape = Tape::new();
        let params = self.record_params(&mut tape, false)?;
        let zid = tape.constant(Array::from_vec(z.values().to_vec()))?;
        let closed: Vec<bool> = z.values().iter().map(|&v| v == 0.0).collect();
        let gate = GateSpec {
            z: zid,
            corrupt,
            closed: Some(&closed),
        };
        let nodes = self.forward_graph(&mut tape, &params, clean, Routing::Gated(gate), scope)?;
        Ok(tape.value(nodes.logits).clone())
    }

    /// Final-position logits for prompts of mixed lengths.
    pub fn final_logits<S: AsRef<[u32]>>(&self, seqs: &[S]) -> Result<FinalLogits> {
        let v = self.config().vocab_size;
        let mut out = Array::zeros(&[seqs.len(), v]);
        for (_, idx) in length_groups(seqs.iter().map(|s| s.as_ref().len())) {
            let rows: Vec<&[u32]> = idx.iter().map(|&i| seqs[i].as_ref()).collect();
            let (logits, _) = self.forward_final(&TokenBatch::new(&rows)?)?;
            for (r, &i) in idx.iter().enumerate() {
                out.data_mut()[i * v..(i + 1) * v].copy_from_slice(&logits.data()[r * v..(r + 1) * v]);
            }
        }
        Ok(FinalLogits { logits: out })
    }

    /// Final-position logits of the gated model for clean/corrupt sequence pairs.
    pub fn final_logits_masked<S: AsRef<[u32]>>(
        &self,
        clean: &[S],
        corrupt: &[S],
        z: &MaskAssignment,
    ) -> Result<FinalLogits> {
        let v = self.config().vocab_size;
        let mut out = Array::zeros(&[clean.len(), v]);
        for (_, idx) in length_groups(clean.iter().map(|s| s.as_ref().len())) {
            let c_rows: Vec<&[u32]> = idx.iter().map(|&i| clean[i].as_ref()).collect();
            let x_rows: Vec<&[u32]> = idx.iter().map(|&i| corrupt[i].as_ref()).collect();
            let (_, cache) = self.forward_final(&TokenBatch::new(&x_rows)?)?;
            let logits = self.forward_masked_scoped(&TokenBatch::new(&c_rows)?, &cache, z, LogitScope::Final)?;
            for (r, &i) in idx.iter().enumerate() {
                out.data_mut()[i * v..(i + 1) * v].copy_from_slice(&logits.data()[r * v..(r + 1) * v]);
            }
        }
        Ok(FinalLogits { logits: out })
    }
}
