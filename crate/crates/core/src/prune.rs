//! Edge pruning: hard-concrete gates over edges, optimized to keep the gated
//! model close to the full model under a sparsity constraint enforced by a
//! dual-ascent controller.

use std::io::Write;
use std::time::Instant;

use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Array, NodeId, Tape};
use crate::error::{Error, Result};
use crate::eval::{Circuit, Metric, PairGroup, PreparedPairs};
use crate::model::{GateSpec, LogitScope, MaskAssignment, Model, Routing};
use crate::optim::Adam;

/// Stretched, clipped sigmoid relaxation constants.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HardConcreteConfig {
    pub beta: f64,
    pub gamma: f64,
    pub zeta: f64,
    /// Uniform noise is drawn from `[eps_u, 1 - eps_u]`.
    pub eps_u: f64,
}

impl Default for HardConcreteConfig {
    fn default() -> Self {
        Self {
            beta: 2.0 / 3.0,
            gamma: -0.1,
            zeta: 1.1,
            eps_u: 1e-6,
        }
    }
}

impl HardConcreteConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma < 0.0 && self.zeta > 1.0) {
            return Err(Error::Config(format!(
                "hard_concrete needs gamma < 0 < 1 < zeta, got gamma {} zeta {}",
                self.gamma, self.zeta
            )));
        }
        if !(self.beta > 0.0) {
            return Err(Error::Config(format!(
                "hard_concrete.beta must be positive, got {}",
                self.beta
            )));
        }
        if !(self.eps_u > 0.0 && self.eps_u < 0.5) {
            return Err(Error::Config(format!(
                "hard_concrete.eps_u must be in (0, 0.5), got {}",
                self.eps_u
            )));
        }
        Ok(())
    }

    /// Offset so that `P(z > 0) = sigmoid(log_alpha - shift)`.
    fn open_shift(&self) -> f64 {
        self.beta * (-self.gamma / self.zeta).ln()
    }

    /// `s * (zeta - gamma) + gamma` clipped, in the form that keeps
    /// `s = 0.5` exact.
    fn stretch(&self, s: f64) -> f64 {
        (s * self.zeta + (1.0 - s) * self.gamma).clamp(0.0, 1.0)
    }

    /// Deterministic gate.
    pub fn gate(&self, log_alpha: f64) -> f64 {
        self.stretch(sigmoid(log_alpha))
    }

    /// Gate for uniform noise `u`.
    pub fn gate_noisy(&self, log_alpha: f64, u: f64) -> f64 {
        self.stretch(sigmoid(((u.ln() - (1.0 - u).ln()) + log_alpha) / self.beta))
    }

    /// `P(z > 0)`.
    pub fn p_open(&self, log_alpha: f64) -> f64 {
        sigmoid(log_alpha - self.open_shift())
    }
}

/// Per-edge gate parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskParams {
    pub log_alpha: Vec<f64>,
    /// Frozen edges are held at `z = 0` and never updated.
    pub frozen: Vec<bool>,
}

/// Default initial log_alpha: every gate starts open.
pub const DEFAULT_INIT_LOG_ALPHA: f64 = 2.0;

impl MaskParams {
    pub fn uniform(n: usize, log_alpha: f64) -> Self {
        Self {
            log_alpha: vec![log_alpha; n],
            frozen: vec![false; n],
        }
    }

    pub fn new(log_alpha: Vec<f64>, frozen: Vec<bool>) -> Result<Self> {
        let p = Self { log_alpha, frozen };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.log_alpha.len() != self.frozen.len() {
            return Err(Error::Config(format!(
                "{} log_alpha entries but {} frozen flags",
                self.log_alpha.len(),
                self.frozen.len()
            )));
        }
        if let Some(i) = self.log_alpha.iter().position(|v| !v.is_finite()) {
            return Err(Error::Config(format!("log_alpha[{i}] is not finite")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.log_alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_alpha.is_empty()
    }

    pub fn trainable_count(&self) -> usize {
        self.frozen.iter().filter(|f| !**f).count()
    }
}

/// Noise source for [`sample_masks`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMode {
    Deterministic,
    /// Noise from the stream keyed by `(seed, step)`; edge `e` takes the
    /// `e`-th draw.
    Stochastic {
        seed: u64,
        step: u64,
    },
}

fn noise(n: usize, seed: u64, step: u64, eps: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    (0..n).map(|_| eps + (1.0 - 2.0 * eps) * rng.random::<f64>()).collect()
}

pub fn sample_masks(params: &MaskParams, hc: &HardConcreteConfig, mode: SampleMode) -> MaskAssignment {
    let u = match mode {
        SampleMode::Deterministic => None,
        SampleMode::Stochastic { seed, step } => Some(noise(params.len(), seed, step, hc.eps_u)),
    };
    let z = params
        .log_alpha
        .iter()
        .zip(&params.frozen)
        .enumerate()
        .map(|(i, (&la, &frozen))| match (frozen, &u) {
            (true, _) => 0.0,
            (false, None) => hc.gate(la),
            (false, Some(u)) => hc.gate_noisy(la, u[i]),
        })
        .collect();
    MaskAssignment::new(z).expect("gates are clipped to [0, 1]")
}

/// Expected fraction of open gates over all edges; frozen edges count as closed.
pub fn expected_density(params: &MaskParams, hc: &HardConcreteConfig) -> f64 {
    let open: f64 = params
        .log_alpha
        .iter()
        .zip(&params.frozen)
        .filter(|(_, f)| !**f)
        .map(|(&la, _)| hc.p_open(la))
        .sum();
    open / params.len().max(1) as f64
}

/// Lagrangian sparsity pressure with a linearly ramped target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsityController {
    pub target: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub dual_step: f64,
    pub warmup_fraction: f64,
    pub total_steps: usize,
    /// Sparsity the ramp starts from.
    pub start: f64,
}

impl SparsityController {
    pub fn new(target: f64, dual_step: f64, warmup_fraction: f64, total_steps: usize) -> Self {
        Self {
            target,
            lambda1: 0.0,
            lambda2: 0.0,
            dual_step,
            warmup_fraction,
            total_steps,
            start: 0.0,
        }
    }

    /// Target sparsity at `step`, ramping from `start` to `target`.
    pub fn effective_target(&self, step: usize) -> f64 {
        let ramp = self.warmup_fraction * self.total_steps as f64;
        let progress = if ramp <= 0.0 {
            1.0
        } else {
            (step as f64 / ramp).min(1.0)
        };
        let start = self.start.min(self.target);
        start + (self.target - start) * progress
    }

    /// Amount by which `density` exceeds what the target at `step` allows.
    pub fn gap(&self, density: f64, step: usize) -> f64 {
        (density - (1.0 - self.effective_target(step))).max(0.0)
    }

    /// Penalty at `density` with the current duals, then one ascent step on
    /// the duals.
    pub fn sparsity_penalty(&mut self, density: f64, step: usize) -> f64 {
        let gap = self.gap(density, step);
        let penalty = self.lambda1 * gap + self.lambda2 * gap * gap;
        self.lambda1 = (self.lambda1 + self.dual_step * gap).max(0.0);
        self.lambda2 = (self.lambda2 + self.dual_step * gap * gap).max(0.0);
        penalty
    }
}

/// Divergence minimized between the full and gated model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    /// KL at the final position over the vocabulary.
    #[default]
    Kl,
    /// Squared error between gated and full logit differences.
    LogitDiffMatch,
}

/// How a circuit is read off the trained gates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BinarizeRule {
    /// Keep edges whose deterministic gate is strictly above the value.
    Threshold(f64),
    /// Keep the `k` non-frozen edges with the largest log_alpha, ties to the
    /// lower ordinal.
    TopK(usize),
}

impl Default for BinarizeRule {
    fn default() -> Self {
        BinarizeRule::Threshold(0.5)
    }
}

/// Stop once the run holds a circuit that meets both the final sparsity
/// target and a KL bound.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EarlyStop {
    /// Bound on the smoothed training KL.
    pub kl_threshold: f64,
    /// Allowed excess of expected density over `1 - target`.
    #[serde(default = "default_density_slack")]
    pub density_slack: f64,
}

fn default_density_slack() -> f64 {
    0.02
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruneConfig {
    pub steps: usize,
    /// Prompts per optimization step.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub target_sparsity: f64,
    pub dual_step: f64,
    pub warmup_fraction: f64,
    /// Ramp the target from the initial expected sparsity instead of zero.
    pub warmup_from_initial: bool,
    pub objective: Objective,
    pub hard_concrete: HardConcreteConfig,
    pub binarize: BinarizeRule,
    /// Smoothing factor of the KL average used for `steps_to_threshold`.
    pub kl_ema: f64,
    /// KL bound for `steps_to_threshold`; also used by `early_stop` when set.
    pub kl_threshold: f64,
    pub early_stop: Option<EarlyStop>,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 32,
            learning_rate: 0.05,
            seed: 0,
            target_sparsity: 0.9,
            dual_step: 1.0,
            warmup_fraction: 0.5,
            warmup_from_initial: true,
            objective: Objective::Kl,
            hard_concrete: HardConcreteConfig::default(),
            binarize: BinarizeRule::default(),
            kl_ema: 0.9,
            kl_threshold: 0.25,
            early_stop: None,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        self.hard_concrete.validate()?;
        if self.steps == 0 {
            return Err(Error::Config("prune.steps must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("prune.batch_size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.target_sparsity) {
            return Err(Error::Config(format!(
                "prune.target_sparsity must be in [0, 1], got {}",
                self.target_sparsity
            )));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(format!(
                "prune.warmup_fraction must be in [0, 1], got {}",
                self.warmup_fraction
            )));
        }
        if !(self.learning_rate > 0.0) || !(self.dual_step >= 0.0) {
            return Err(Error::Config(
                "prune.learning_rate must be positive and prune.dual_step non-negative".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.kl_ema) {
            return Err(Error::Config(format!(
                "prune.kl_ema must be in [0, 1), got {}",
                self.kl_ema
            )));
        }
        Ok(())
    }
}

/// One optimization step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    /// Divergence plus sparsity penalty.
    pub loss: f64,
    /// Divergence term alone (KL, or squared logit-diff error).
    pub kl: f64,
    pub density: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub target: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PruneOutcome {
    pub params: MaskParams,
    pub trace: Vec<TraceRow>,
    /// First step (1-based) at which the smoothed KL is within
    /// `kl_threshold` and the expected density meets the final target.
    pub steps_to_threshold: Option<usize>,
    pub stopped_early: bool,
    pub wall_clock_s: f64,
}

/// Step at which a run first satisfies the final target and the KL bound.
pub fn steps_to_threshold(
    trace: &[TraceRow],
    target: f64,
    kl_threshold: f64,
    density_slack: f64,
    ema: f64,
) -> Option<usize> {
    let mut avg: Option<f64> = None;
    for row in trace {
        let a = match avg {
            Some(a) => ema * a + (1.0 - ema) * row.kl,
            None => row.kl,
        };
        avg = Some(a);
        if row.density <= 1.0 - target + density_slack && a <= kl_threshold {
            return Some(row.step);
        }
    }
    None
}

struct StepTerms {
    divergence: NodeId,
}

/// Gates for `la` on `tape`, noisy when `u` is given, deterministic otherwise.
pub fn record_gate(tape: &mut Tape, la: NodeId, hc: &HardConcreteConfig, u: Option<&[f64]>) -> Result<NodeId> {
    let pre = match u {
        Some(u) => {
            let logit: Vec<f64> = u.iter().map(|&u| u.ln() - (1.0 - u).ln()).collect();
            let n = tape.constant(Array::from_vec(logit))?;
            let x = tape.add(la, n)?;
            tape.affine(x, 1.0 / hc.beta, 0.0)?
        }
        None => la,
    };
    let s = tape.sigmoid(pre)?;
    let stretched = tape.affine(s, hc.zeta - hc.gamma, hc.gamma)?;
    tape.clip(stretched, 0.0, 1.0)
}

fn record_divergence(
    model: &Model,
    tape: &mut Tape,
    params: &crate::model::ParamSet<NodeId>,
    z: NodeId,
    closed: &[bool],
    group: &PairGroup,
    objective: Objective,
    batch_total: usize,
) -> Result<StepTerms> {
    let gate = GateSpec {
        z,
        corrupt: &group.corrupt_cache,
        closed: Some(closed),
    };
    let nodes = model.forward_graph(tape, params, &group.clean, Routing::Gated(gate), LogitScope::Final)?;
    let scale = 1.0 / batch_total as f64;
    let divergence = match objective {
        Objective::Kl => {
            let v = group.clean_logits.last_dim();
            let mut p = group.clean_logits.clone();
            let mut plogp = 0.0;
            for row in p.data_mut().chunks_mut(v) {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
                for x in row.iter_mut() {
                    let lp = *x - lse;
                    *x = lp.exp();
                    if *x > 0.0 {
                        plogp += *x * lp;
                    }
                }
            }
            let pn = tape.constant(p)?;
            let logq = tape.log_softmax(nodes.logits)?;
            let cross = tape.mul(pn, logq)?;
            let total = tape.sum(cross)?;
            tape.affine(total, -scale, plogp * scale)?
        }
        Objective::LogitDiffMatch => {
            let full = Metric::LogitDiff.values(&group.clean_logits, &group.io, &group.s);
            let a = tape.take_along_last(nodes.logits, &group.io)?;
            let b = tape.take_along_last(nodes.logits, &group.s)?;
            let d = tape.sub(a, b)?;
            let f = tape.constant(Array::from_vec(full))?;
            let err = tape.sub(d, f)?;
            let sq = tape.mul(err, err)?;
            let total = tape.sum(sq)?;
            tape.affine(total, scale, 0.0)?
        }
    };
    Ok(StepTerms { divergence })
}

/// Optimize gate parameters on `data`, starting from `init`.
pub fn optimize(model: &Model, data: &PreparedPairs, init: &MaskParams, config: &PruneConfig) -> Result<PruneOutcome> {
    config.validate()?;
    init.validate()?;
    let n = model.schema().num_edges();
    if init.len() != n {
        return Err(Error::Config(format!(
            "init has {} gates, graph has {n} edges",
            init.len()
        )));
    }
    let started = Instant::now();
    let hc = config.hard_concrete;
    let mut params = init.clone();
    let trainable: Vec<bool> = params.frozen.iter().map(|f| !f).collect();
    let live: Array = Array::from_vec(trainable.iter().map(|&t| if t { 1.0 } else { 0.0 }).collect());
    let mut controller = SparsityController::new(
        config.target_sparsity,
        config.dual_step,
        config.warmup_fraction,
        config.steps,
    );
    if config.warmup_from_initial {
        controller.start = 1.0 - expected_density(&params, &hc);
    }

    let batches = batch_plan(data, config.batch_size);
    let mut order: Vec<usize> = (0..batches.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    shuffle_rng.set_stream(u64::MAX);
    let mut opt = Adam::new();
    let mut trace = Vec::with_capacity(config.steps);
    let mut smoothed: Option<f64> = None;
    let mut reached = None;
    let mut stopped_early = false;

    for step in 0..config.steps {
        if step % batches.len() == 0 {
            fisher_yates(&mut order, &mut shuffle_rng);
        }
        let batch = &batches[order[step % batches.len()]];
        let batch_total: usize = batch.iter().map(|&g| data.groups()[g].indices.len()).sum();

        let mut tape = Tape::new();
        let mparams = model.record_params(&mut tape, false)?;
        let la = tape.param(Array::from_vec(params.log_alpha.clone()))?;
        let u = noise(n, config.seed, step as u64, hc.eps_u);
        let z = record_gate(&mut tape, la, &hc, Some(&u))?;

        let mut divergence: Option<NodeId> = None;
        for &g in batch {
            let t = record_divergence(
                model,
                &mut tape,
                &mparams,
                z,
                &params.frozen,
                &data.groups()[g],
                config.objective,
                batch_total,
            )?;
            divergence = Some(match divergence {
                Some(d) => tape.add(d, t.divergence)?,
                None => t.divergence,
            });
        }
        let divergence = divergence.expect("batches are non-empty");

        let shifted = tape.affine(la, 1.0, -hc.open_shift())?;
        let p_open = tape.sigmoid(shifted)?;
        let live_n = tape.constant(live.clone())?;
        let masked = tape.mul(p_open, live_n)?;
        let total_open = tape.sum(masked)?;
        let density_node = tape.affine(total_open, 1.0 / n as f64, 0.0)?;
        let density = tape.value(density_node).item();

        let (l1, l2) = (controller.lambda1, controller.lambda2);
        let target = controller.effective_target(step);
        let gap_node = tape.affine(density_node, 1.0, -(1.0 - target))?;
        let gap_node = tape.clip(gap_node, 0.0, 1.0)?;
        let sq = tape.mul(gap_node, gap_node)?;
        let lin = tape.affine(gap_node, l1, 0.0)?;
        let quad = tape.affine(sq, l2, 0.0)?;
        let penalty = tape.add(lin, quad)?;
        let loss = tape.add(divergence, penalty)?;
        let loss_value = tape.value(loss).item();
        let div_value = tape.value(divergence).item();
        if !loss_value.is_finite() {
            return Err(Error::Diverged { step });
        }
        let grads = model.backward(&tape, loss)?;
        let g = grads.wrt(la);
        if !g.all_finite() {
            return Err(Error::Diverged { step });
        }
        opt.begin_step();
        opt.update(
            0,
            &mut params.log_alpha,
            g.data(),
            config.learning_rate,
            Some(&trainable),
        );
        controller.sparsity_penalty(density, step);

        trace.push(TraceRow {
            step: step + 1,
            loss: loss_value,
            kl: div_value,
            density,
            lambda1: l1,
            lambda2: l2,
            target,
        });
        let avg = match smoothed {
            Some(a) => config.kl_ema * a + (1.0 - config.kl_ema) * div_value,
            None => div_value,
        };
        smoothed = Some(avg);
        let slack = config.early_stop.map_or(default_density_slack(), |e| e.density_slack);
        let kl_bound = config.early_stop.map_or(config.kl_threshold, |e| e.kl_threshold);
        if reached.is_none() && density <= 1.0 - config.target_sparsity + slack && avg <= kl_bound {
            reached = Some(step + 1);
        }
        if (step + 1) % 100 == 0 {
            info!(
                "prune step {} kl {:.4} density {:.4} target {:.3} l1 {:.3} l2 {:.3}",
                step + 1,
                div_value,
                density,
                target,
                l1,
                l2
            );
        } else {
            debug!("prune step {} loss {:.5}", step + 1, loss_value);
        }
        if config.early_stop.is_some() && reached.is_some() {
            stopped_early = step + 1 < config.steps;
            break;
        }
    }
    Ok(PruneOutcome {
        params,
        trace,
        steps_to_threshold: reached,
        stopped_early,
        wall_clock_s: started.elapsed().as_secs_f64(),
    })
}

/// Groups of `data` visited together in one step, each at most `batch_size`
/// prompts where groups allow.
fn batch_plan(data: &PreparedPairs, batch_size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = Vec::new();
    let mut current = Vec::new();
    let mut count = 0;
    for (i, g) in data.groups().iter().enumerate() {
        if count > 0 && count + g.indices.len() > batch_size {
            out.push(std::mem::take(&mut current));
            count = 0;
        }
        current.push(i);
        count += g.indices.len();
    }
    if !current.is_empty() {
        out.push(current);
    }
    out
}

fn fisher_yates<R: Rng>(v: &mut [usize], rng: &mut R) {
    for i in (1..v.len()).rev() {
        let j = rng.random_range(0..=i);
        v.swap(i, j);
    }
}

/// Kept edges under `rule`; frozen edges are never kept.
pub fn binarize(
    model_edges: &crate::graph::GraphSchema,
    params: &MaskParams,
    hc: &HardConcreteConfig,
    rule: BinarizeRule,
) -> Result<Circuit> {
    let live = |i: usize| !params.frozen[i];
    let kept: Vec<usize> = match rule {
        BinarizeRule::Threshold(t) => (0..params.len())
            .filter(|&i| live(i) && hc.gate(params.log_alpha[i]) > t)
            .collect(),
        BinarizeRule::TopK(k) => {
            let mut order: Vec<usize> = (0..params.len()).filter(|&i| live(i)).collect();
            if k > order.len() {
                return Err(Error::Selection(format!(
                    "top-k {k} exceeds {} trainable edges",
                    order.len()
                )));
            }
            order.sort_by(|&a, &b| params.log_alpha[b].total_cmp(&params.log_alpha[a]).then(a.cmp(&b)));
            order.truncate(k);
            order
        }
    };
    let values = kept.iter().map(|&i| params.log_alpha[i]).collect();
    Circuit::with_values(model_edges, kept, values)
}

/// `step,loss,kl,density,lambda1,lambda2,target` rows.
pub fn write_trace_csv<W: Write>(mut out: W, trace: &[TraceRow]) -> Result<()> {
    writeln!(out, "step,loss,kl,density,lambda1,lambda2,target")?;
    for r in trace {
        writeln!(
            out,
            "{},{:e},{:e},{:e},{:e},{:e},{:e}",
            r.step, r.loss, r.kl, r.density, r.lambda1, r.lambda2, r.target
        )?;
    }
    Ok(())
}
