//! The hybrid pipeline: attribution scores pick a candidate edge set and seed
//! the gate initialization, then pruning refines the candidates while every
//! other edge stays frozen shut.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::datagen::PromptPair;
use crate::eap::{attribute, rank_and_select, AttributionScores, EapConfig, Selection};
use crate::error::{Error, Result};
use crate::eval::{evaluate_circuit, Circuit, PreparedPairs, ReferenceCircuit, RunMetrics};
use crate::model::Model;
use crate::prune::{binarize, optimize, MaskParams, PruneConfig, TraceRow, DEFAULT_INIT_LOG_ALPHA};

/// Map from normalized scores to initial log_alpha of kept edges.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreMap {
    /// `lo + (hi - lo) * (s + 1) / 2`.
    Affine { lo: f64, hi: f64 },
    /// Same value for every kept edge.
    Constant(f64),
}

impl Default for ScoreMap {
    fn default() -> Self {
        ScoreMap::Affine { lo: 0.0, hi: 4.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HapConfig {
    pub eap: EapConfig,
    pub score_map: ScoreMap,
    pub frozen_log_alpha: f64,
    pub prune: PruneConfig,
}

impl Default for HapConfig {
    fn default() -> Self {
        Self {
            eap: EapConfig::default(),
            score_map: ScoreMap::default(),
            frozen_log_alpha: -10.0,
            prune: PruneConfig::default(),
        }
    }
}

impl HapConfig {
    pub fn validate(&self) -> Result<()> {
        self.eap.validate()?;
        self.prune.validate()?;
        match self.score_map {
            ScoreMap::Affine { lo, hi } if !(lo < hi) || !lo.is_finite() || !hi.is_finite() => Err(Error::Config(
                format!("score_map.affine needs finite lo < hi, got lo {lo} hi {hi}"),
            )),
            ScoreMap::Constant(c) if !c.is_finite() => Err(Error::Config("score_map.constant must be finite".into())),
            _ if !self.frozen_log_alpha.is_finite() => Err(Error::Config("frozen_log_alpha must be finite".into())),
            _ => Ok(()),
        }
    }
}

/// Scores divided by the largest magnitude; all zeros stay zero.
pub fn normalize_scores(scores: &AttributionScores) -> Vec<f64> {
    let m = scores.scores.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if m == 0.0 {
        return vec![0.0; scores.len()];
    }
    scores.scores.iter().map(|v| v / m).collect()
}

/// Gate initialization: kept edges from `map`, every other edge frozen at
/// `frozen_log_alpha`.
pub fn init_log_alpha(normalized: &[f64], kept: &[usize], map: ScoreMap, frozen_log_alpha: f64) -> Result<MaskParams> {
    if kept.is_empty() {
        return Err(Error::Selection("the kept edge set is empty".into()));
    }
    let n = normalized.len();
    let mut la = vec![frozen_log_alpha; n];
    let mut frozen = vec![true; n];
    for &e in kept {
        if e >= n {
            return Err(Error::Selection(format!("kept edge {e} out of range for {n} edges")));
        }
        la[e] = match map {
            ScoreMap::Affine { lo, hi } => lo + (hi - lo) * (normalized[e] + 1.0) / 2.0,
            ScoreMap::Constant(c) => c,
        };
        frozen[e] = false;
    }
    MaskParams::new(la, frozen)
}

/// Wall-clock of one pipeline stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct DiscoveryOutcome {
    pub circuit: Circuit,
    pub metrics: RunMetrics,
    pub trace: Vec<TraceRow>,
    pub stages: Vec<StageTiming>,
    pub params: Option<MaskParams>,
    pub scores: Option<AttributionScores>,
    pub kept: Option<Vec<usize>>,
    pub steps_to_threshold: Option<usize>,
    /// Seconds spent discovering the circuit, evaluation excluded.
    pub discovery_s: f64,
}

struct Stopwatch {
    stages: Vec<StageTiming>,
}

impl Stopwatch {
    fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let t = Instant::now();
        let out = f()?;
        self.stages.push(StageTiming {
            stage: stage.to_string(),
            seconds: t.elapsed().as_secs_f64(),
        });
        Ok(out)
    }

    fn discovery(&self) -> f64 {
        self.stages
            .iter()
            .filter(|s| s.stage != "evaluate")
            .map(|s| s.seconds)
            .sum()
    }
}

/// Discovery data: `train` drives attribution and optimization, `eval`
/// scores the result.
pub struct Splits<'a> {
    pub train: &'a [PromptPair],
    pub eval: &'a [PromptPair],
    pub reference: Option<&'a ReferenceCircuit>,
}

fn finish(
    model: &Model,
    splits: &Splits<'_>,
    mut watch: Stopwatch,
    circuit: Circuit,
    partial: (
        Vec<TraceRow>,
        Option<MaskParams>,
        Option<AttributionScores>,
        Option<Vec<usize>>,
        Option<usize>,
    ),
) -> Result<DiscoveryOutcome> {
    let discovery_s = watch.discovery();
    let metrics = watch.time("evaluate", || {
        let data = PreparedPairs::new(model, splits.eval, None)?;
        evaluate_circuit(model, &data, &circuit, splits.reference, discovery_s)
    })?;
    let (trace, params, scores, kept, steps_to_threshold) = partial;
    Ok(DiscoveryOutcome {
        circuit,
        metrics,
        trace,
        stages: watch.stages,
        params,
        scores,
        kept,
        steps_to_threshold,
        discovery_s,
    })
}

/// Attribute, select, normalize, initialize, optimize, binarize, evaluate.
pub fn run_hap(model: &Model, splits: &Splits<'_>, config: &HapConfig) -> Result<DiscoveryOutcome> {
    config.validate()?;
    let mut watch = Stopwatch { stages: Vec::new() };
    let scores = watch.time("attribute", || attribute(model, splits.train, &config.eap))?;
    let kept = watch.time("rank_and_select", || rank_and_select(&scores, config.eap.selection))?;
    let normalized = watch.time("normalize_scores", || Ok(normalize_scores(&scores)))?;
    let init = watch.time("init_log_alpha", || {
        init_log_alpha(&normalized, &kept, config.score_map, config.frozen_log_alpha)
    })?;
    let outcome = watch.time("optimize", || {
        let data = PreparedPairs::new(model, splits.train, Some(config.prune.batch_size))?;
        optimize(model, &data, &init, &config.prune)
    })?;
    let circuit = watch.time("binarize", || {
        binarize(
            model.schema(),
            &outcome.params,
            &config.prune.hard_concrete,
            config.prune.binarize,
        )
    })?;
    let reached = outcome.steps_to_threshold;
    finish(
        model,
        splits,
        watch,
        circuit,
        (outcome.trace, Some(outcome.params), Some(scores), Some(kept), reached),
    )
}

/// Plain edge pruning from a uniform initialization.
pub fn run_ep(
    model: &Model,
    splits: &Splits<'_>,
    config: &PruneConfig,
    init_log_alpha: Option<f64>,
) -> Result<DiscoveryOutcome> {
    config.validate()?;
    let mut watch = Stopwatch { stages: Vec::new() };
    let init = MaskParams::uniform(
        model.schema().num_edges(),
        init_log_alpha.unwrap_or(DEFAULT_INIT_LOG_ALPHA),
    );
    let outcome = watch.time("optimize", || {
        let data = PreparedPairs::new(model, splits.train, Some(config.batch_size))?;
        optimize(model, &data, &init, config)
    })?;
    let circuit = watch.time("binarize", || {
        binarize(model.schema(), &outcome.params, &config.hard_concrete, config.binarize)
    })?;
    let reached = outcome.steps_to_threshold;
    finish(
        model,
        splits,
        watch,
        circuit,
        (outcome.trace, Some(outcome.params), None, None, reached),
    )
}

/// Attribution alone: the selected edges are the circuit.
pub fn run_eap(model: &Model, splits: &Splits<'_>, config: &EapConfig) -> Result<DiscoveryOutcome> {
    config.validate()?;
    let mut watch = Stopwatch { stages: Vec::new() };
    let scores = watch.time("attribute", || attribute(model, splits.train, config))?;
    let kept = watch.time("rank_and_select", || rank_and_select(&scores, config.selection))?;
    let values = kept.iter().map(|&e| scores.scores[e]).collect();
    let circuit = Circuit::with_values(model.schema(), kept.clone(), values)?;
    finish(
        model,
        splits,
        watch,
        circuit,
        (Vec::new(), None, Some(scores), Some(kept), None),
    )
}

/// EAP circuit with exactly `k` edges, for comparisons at matched sparsity.
pub fn eap_top_k(model: &Model, scores: &AttributionScores, k: usize) -> Result<Circuit> {
    let kept = rank_and_select(scores, Selection::TopK(k))?;
    let values = kept.iter().map(|&e| scores.scores[e]).collect();
    Circuit::with_values(model.schema(), kept, values)
}
