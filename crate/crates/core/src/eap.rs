//! Edge attribution patching: a first-order estimate of every edge's
//! interchange-ablation effect from one clean forward, one corrupted forward
//! and one backward pass per batch.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::datagen::PromptPair;
use crate::error::{Error, Result};
use crate::eval::{PairGroup, PreparedPairs};
use crate::model::{ActivationCache, LogitScope, Model, Routing, TokenBatch};

pub use crate::eval::Metric;

/// How the kept edge set is chosen from ranked scores.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Selection {
    TopK(usize),
    /// `ceil(fraction * N_edge)` edges, never fewer than one.
    TopFraction(f64),
    /// Every edge with `|score| >= threshold`.
    Threshold(f64),
}

impl Default for Selection {
    fn default() -> Self {
        Selection::TopFraction(0.2)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    #[default]
    Sum,
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EapConfig {
    pub metric: Metric,
    pub selection: Selection,
    pub aggregation: Aggregation,
    /// Maximum prompts per pass; `None` puts each length group in one pass.
    pub batch_size: Option<usize>,
}

impl Default for EapConfig {
    fn default() -> Self {
        Self {
            metric: Metric::LogitDiff,
            selection: Selection::default(),
            aggregation: Aggregation::Sum,
            batch_size: None,
        }
    }
}

impl EapConfig {
    pub fn validate(&self) -> Result<()> {
        match self.selection {
            Selection::TopFraction(f) if !(f > 0.0 && f <= 1.0) => Err(Error::Config(format!(
                "selection.top-fraction must be in (0, 1], got {f}"
            ))),
            Selection::Threshold(t) if !t.is_finite() || t < 0.0 => Err(Error::Config(format!(
                "selection.threshold must be finite and non-negative, got {t}"
            ))),
            Selection::TopK(0) => Err(Error::Config("selection.top-k must be at least 1".into())),
            _ => Ok(()),
        }
    }
}

/// Signed per-edge scores, indexed by edge ordinal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionScores {
    pub scores: Vec<f64>,
    pub metric: Metric,
    pub batches: usize,
}

impl AttributionScores {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Scores for every edge over `pairs`.
pub fn attribute(model: &Model, pairs: &[PromptPair], config: &EapConfig) -> Result<AttributionScores> {
    config.validate()?;
    if pairs.is_empty() {
        return Err(Error::Dataset("attribution needs at least one prompt pair".into()));
    }
    let mut scores = vec![0.0; model.schema().num_edges()];
    let mut batches = 0;
    let chunk = config.batch_size.unwrap_or(usize::MAX).max(1);
    for (_, idx) in crate::model::length_groups(pairs.iter().map(|p| p.len())) {
        for part in idx.chunks(chunk) {
            let clean_rows: Vec<&[u32]> = part.iter().map(|&i| pairs[i].clean_ids.as_slice()).collect();
            let corrupt_rows: Vec<&[u32]> = part.iter().map(|&i| pairs[i].corrupt_ids.as_slice()).collect();
            if clean_rows.iter().zip(&corrupt_rows).any(|(a, b)| a.len() != b.len()) {
                return Err(Error::Dataset("clean and corrupt prompts differ in length".into()));
            }
            let (_, corrupt) = model.forward_final(&TokenBatch::new(&corrupt_rows)?)?;
            let io: Vec<usize> = part.iter().map(|&i| pairs[i].io_id as usize).collect();
            let s: Vec<usize> = part.iter().map(|&i| pairs[i].s_id as usize).collect();
            accumulate(
                model,
                &TokenBatch::new(&clean_rows)?,
                &corrupt,
                &io,
                &s,
                config.metric,
                &mut scores,
            )?;
            batches += 1;
        }
    }
    finish(scores, pairs.len(), batches, config)
}

/// Scores against the corrupted caches already held in `data`, one forward
/// and one backward pass per group.
pub fn attribute_prepared(model: &Model, data: &PreparedPairs, config: &EapConfig) -> Result<AttributionScores> {
    config.validate()?;
    let mut scores = vec![0.0; model.schema().num_edges()];
    for g in data.groups() {
        let PairGroup {
            clean,
            corrupt_cache,
            io,
            s,
            ..
        } = g;
        accumulate(model, clean, corrupt_cache, io, s, config.metric, &mut scores)?;
    }
    finish(scores, data.len(), data.groups().len(), config)
}

fn finish(mut scores: Vec<f64>, n: usize, batches: usize, config: &EapConfig) -> Result<AttributionScores> {
    if config.aggregation == Aggregation::Mean {
        for v in &mut scores {
            *v /= n as f64;
        }
    }
    Ok(AttributionScores {
        scores,
        metric: config.metric,
        batches,
    })
}

fn accumulate(
    model: &Model,
    clean: &TokenBatch,
    corrupt: &ActivationCache,
    io: &[usize],
    s: &[usize],
    metric: Metric,
    scores: &mut [f64],
) -> Result<()> {
    let schema = model.schema();
    let mut tape = Tape::new();
    let mut params = model.record_params(&mut tape, false)?;
    // a differentiable embedding makes every residual sum, and so every
    // reader tap, carry an adjoint without computing weight gradients
    params.token_embed = tape.param(model.weights().params.token_embed.clone())?;
    let nodes = model.forward_graph(&mut tape, &params, clean, Routing::Tapped, LogitScope::Final)?;
    if corrupt.batch() != clean.batch() || corrupt.seq() != clean.seq() || corrupt.len() != nodes.writers.len() {
        return Err(Error::CacheMismatch(
            "corrupt cache does not match the clean batch".into(),
        ));
    }
    let loss = metric.record(&mut tape, nodes.logits, io, s)?;
    let grads = model.backward(&tape, loss)?;

    let deltas: Vec<Vec<f64>> = nodes
        .writers
        .iter()
        .enumerate()
        .map(|(w, &id)| {
            corrupt
                .writer(w)
                .data()
                .iter()
                .zip(tape.value(id).data())
                .map(|(c, a)| c - a)
                .collect()
        })
        .collect();
    for (ri, reader) in schema.readers().iter().enumerate() {
        let g = grads.wrt(nodes.reader_inputs[ri]);
        if !g.all_finite() {
            return Err(Error::NonFiniteGradient(reader.to_string()));
        }
        let off = schema.reader_offset(reader);
        for (w, delta) in deltas.iter().enumerate().take(schema.prefix_len(reader)) {
            scores[off + w] += delta.iter().zip(g.data()).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    Ok(())
}

/// Edge ordinals ordered by descending `|score|`, ties by ascending ordinal.
pub fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].abs().total_cmp(&scores[a].abs()).then(a.cmp(&b)));
    order
}

/// Kept edge ordinals, ascending.
pub fn rank_and_select(scores: &AttributionScores, selection: Selection) -> Result<Vec<usize>> {
    let n = scores.len();
    if let Some(i) = scores.scores.iter().position(|v| !v.is_finite()) {
        return Err(Error::Selection(format!("score of edge {i} is not finite")));
    }
    let order = ranking(&scores.scores);
    let mut kept: Vec<usize> = match selection {
        Selection::TopK(k) => {
            if k > n {
                return Err(Error::Selection(format!("top-k {k} exceeds {n} edges")));
            }
            if k == 0 {
                return Err(Error::Selection("top-k must be at least 1".into()));
            }
            order[..k].to_vec()
        }
        Selection::TopFraction(f) => {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::Selection(format!("top-fraction {f} outside (0, 1]")));
            }
            let k = ((f * n as f64).ceil() as usize).clamp(1, n);
            order[..k].to_vec()
        }
        Selection::Threshold(t) => order.into_iter().filter(|&e| scores.scores[e].abs() >= t).collect(),
    };
    kept.sort_unstable();
    Ok(kept)
}

/// Equal-width histogram over `[min, max]`: `bins + 1` edges and `bins` counts.
pub fn score_histogram(scores: &[f64], bins: usize) -> Result<(Vec<f64>, Vec<usize>)> {
    if bins == 0 {
        return Err(Error::Config("histogram needs at least one bin".into()));
    }
    let lo = scores.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if scores.is_empty() {
        return Ok((vec![0.0; bins + 1], vec![0; bins]));
    }
    let width = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins)
        .map(|i| if i == bins { hi } else { lo + width * i as f64 })
        .collect();
    let mut counts = vec![0; bins];
    for &v in scores {
        let b = if width > 0.0 {
            (((v - lo) / width) as usize).min(bins - 1)
        } else {
            0
        };
        counts[b] += 1;
    }
    Ok((edges, counts))
}

/// Sample skewness `g1`; zero for constant input.
pub fn skewness(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let m2 = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let m3 = values.iter().map(|v| (v - mean).powi(3)).sum::<f64>() / n;
    if m2 == 0.0 {
        0.0
    } else {
        m3 / m2.powf(1.5)
    }
}

/// `ordinal,writer,reader,score` rows.
pub fn write_scores_csv<W: Write>(
    mut out: W,
    schema: &crate::graph::GraphSchema,
    scores: &AttributionScores,
) -> Result<()> {
    writeln!(out, "ordinal,writer,reader,score")?;
    for (e, v) in schema.edges().iter().zip(&scores.scores) {
        writeln!(out, "{},{},{},{:e}", e.index, e.writer, e.reader, v)?;
    }
    Ok(())
}

/// `bin_lo,bin_hi,count` rows.
pub fn write_histogram_csv<W: Write>(mut out: W, edges: &[f64], counts: &[usize]) -> Result<()> {
    writeln!(out, "bin_lo,bin_hi,count")?;
    for (i, c) in counts.iter().enumerate() {
        writeln!(out, "{:e},{:e},{}", edges[i], edges[i + 1], c)?;
    }
    Ok(())
}
