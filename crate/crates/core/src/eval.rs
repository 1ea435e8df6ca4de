//! Faithfulness metrics, circuits, the IOI reference circuit, and exhaustive
//! ablation oracles.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, NodeId, Tape};
use crate::datagen::PromptPair;
use crate::error::{shape_err, Error, Result};
use crate::graph::{GraphSchema, Writer};
use crate::model::{length_groups, ActivationCache, MaskAssignment, Model, TokenBatch};

/// Scalar task metric evaluated on final-position logits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    /// `logit[io] - logit[s]`.
    #[default]
    LogitDiff,
    /// `-log p(io)`.
    AnswerNll,
}

impl Metric {
    /// Per-example metric values for `logits` of shape `[n, vocab]`.
    pub fn values(&self, logits: &Array, io: &[usize], s: &[usize]) -> Vec<f64> {
        let v = logits.last_dim();
        logits
            .data()
            .chunks(v)
            .zip(io.iter().zip(s))
            .map(|(row, (&i, &j))| match self {
                Metric::LogitDiff => row[i] - row[j],
                Metric::AnswerNll => log_sum_exp(row) - row[i],
            })
            .collect()
    }

    /// Sum of the metric over the batch, recorded on `tape`.
    pub fn record(&self, tape: &mut Tape, logits: NodeId, io: &[usize], s: &[usize]) -> Result<NodeId> {
        match self {
            Metric::LogitDiff => {
                let a = tape.take_along_last(logits, io)?;
                let b = tape.take_along_last(logits, s)?;
                let d = tape.sub(a, b)?;
                tape.sum(d)
            }
            Metric::AnswerNll => {
                let lp = tape.log_softmax(logits)?;
                let a = tape.take_along_last(lp, io)?;
                let t = tape.sum(a)?;
                tape.affine(t, -1.0, 0.0)
            }
        }
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn rows_of(a: &Array) -> Result<(usize, usize)> {
    match a.shape() {
        [v] => Ok((1, *v)),
        [n, v] => Ok((*n, *v)),
        s => Err(shape_err("logits", &[s])),
    }
}

/// KL of `circuit` from `full` per row, each clamped at zero against rounding.
pub fn kl_per_example(full: &Array, circuit: &Array) -> Result<Vec<f64>> {
    let (n, v) = rows_of(full)?;
    if full.shape() != circuit.shape() {
        return Err(shape_err("kl_divergence", &[full.shape(), circuit.shape()]));
    }
    Ok((0..n)
        .map(|i| {
            let p = &full.data()[i * v..(i + 1) * v];
            let q = &circuit.data()[i * v..(i + 1) * v];
            let (lp, lq) = (log_sum_exp(p), log_sum_exp(q));
            let kl: f64 = p
                .iter()
                .zip(q)
                .map(|(a, b)| {
                    let log_p = a - lp;
                    log_p.exp() * (log_p - (b - lq))
                })
                .sum();
            kl.max(0.0)
        })
        .collect())
}

/// Mean over rows of `KL(softmax(full) || softmax(circuit))`. Accepts a single
/// `[vocab]` row or a `[n, vocab]` batch.
pub fn kl_divergence(full: &Array, circuit: &Array) -> Result<f64> {
    let per = kl_per_example(full, circuit)?;
    Ok(per.iter().sum::<f64>() / per.len().max(1) as f64)
}

/// Mean `logit[io] - logit[s]` over rows.
pub fn logit_diff(logits: &Array, io: &[usize], s: &[usize]) -> Result<f64> {
    let (n, v) = rows_of(logits)?;
    if io.len() != n || s.len() != n {
        return Err(shape_err("logit_diff", &[logits.shape(), &[io.len()], &[s.len()]]));
    }
    if let Some(&t) = io.iter().chain(s).find(|&&t| t >= v) {
        return Err(Error::TokenOutOfRange { id: t, vocab: v });
    }
    let vals = Metric::LogitDiff.values(logits, io, s);
    Ok(vals.iter().sum::<f64>() / n.max(1) as f64)
}

/// A set of kept edges.
#[derive(Clone, Debug, PartialEq)]
pub struct Circuit {
    fingerprint: String,
    num_edges: usize,
    edges: Vec<usize>,
    values: Option<Vec<f64>>,
}

impl Circuit {
    /// Rejects duplicates and out-of-range ordinals; stores edges ascending.
    pub fn new(schema: &GraphSchema, edges: Vec<usize>) -> Result<Self> {
        Self::build(schema.fingerprint(), schema.num_edges(), edges, None)
    }

    /// Like [`Circuit::new`] with one value (score or log_alpha) per kept edge.
    pub fn with_values(schema: &GraphSchema, edges: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        Self::build(schema.fingerprint(), schema.num_edges(), edges, Some(values))
    }

    pub(crate) fn build(
        fingerprint: String,
        num_edges: usize,
        edges: Vec<usize>,
        values: Option<Vec<f64>>,
    ) -> Result<Self> {
        if let Some(v) = &values {
            if v.len() != edges.len() {
                return Err(Error::Circuit(format!("{} values for {} edges", v.len(), edges.len())));
            }
        }
        let mut pairs: Vec<(usize, Option<f64>)> = edges
            .iter()
            .enumerate()
            .map(|(i, &e)| (e, values.as_ref().map(|v| v[i])))
            .collect();
        pairs.sort_by_key(|p| p.0);
        for w in pairs.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(Error::Circuit(format!("edge {} listed twice", w[0].0)));
            }
        }
        if let Some(&(e, _)) = pairs.iter().find(|p| p.0 >= num_edges) {
            return Err(Error::Circuit(format!("edge {e} out of range for {num_edges} edges")));
        }
        Ok(Self {
            fingerprint,
            num_edges,
            edges: pairs.iter().map(|p| p.0).collect(),
            values: values.map(|_| pairs.iter().map(|p| p.1.unwrap_or(0.0)).collect()),
        })
    }

    pub fn empty(schema: &GraphSchema) -> Self {
        Self::new(schema, Vec::new()).expect("empty circuit is valid")
    }

    pub fn full(schema: &GraphSchema) -> Self {
        Self::new(schema, (0..schema.num_edges()).collect()).expect("full circuit is valid")
    }

    pub fn edges(&self) -> &[usize] {
        &self.edges
    }

    pub fn values(&self) -> Option<&[f64]> {
        self.values.as_deref()
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn num_edges(&self) -> usize {
        self.num_edges
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn contains(&self, edge: usize) -> bool {
        self.edges.binary_search(&edge).is_ok()
    }

    /// Errors unless the circuit was built for `schema`.
    pub fn check_schema(&self, schema: &GraphSchema) -> Result<()> {
        if self.fingerprint != schema.fingerprint() {
            return Err(Error::Circuit(format!(
                "circuit is for {}, schema is {}",
                self.fingerprint,
                schema.fingerprint()
            )));
        }
        Ok(())
    }

    /// Binary mask: kept edges 1, others 0.
    pub fn mask(&self) -> MaskAssignment {
        MaskAssignment::binary(self.num_edges, &self.edges).expect("edges validated at construction")
    }
}

/// `1 - |kept| / N_edge`.
pub fn sparsity(circuit: &Circuit, schema: &GraphSchema) -> Result<f64> {
    circuit.check_schema(schema)?;
    Ok(1.0 - circuit.len() as f64 / schema.num_edges() as f64)
}

/// One labelled head of a reference circuit.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferenceHead {
    pub layer: usize,
    pub head: usize,
    pub role: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ReferenceFile {
    #[serde(default)]
    source: Option<String>,
    #[serde(default)]
    layers: Option<usize>,
    #[serde(default)]
    heads_per_layer: Option<usize>,
    heads: Vec<(usize, usize, String)>,
}

/// Hand-identified attention heads with their functional roles.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceCircuit {
    pub source: Option<String>,
    /// Model shape the reference was drawn from, when recorded.
    pub shape: Option<(usize, usize)>,
    pub heads: Vec<ReferenceHead>,
}

pub const S_INHIBITION: &str = "s-inhibition";

const BUNDLED_GPT2_SMALL: &str = include_str!("../data/ioi_reference_gpt2_small.json");

impl ReferenceCircuit {
    /// Parse `{"heads": [[layer, head, role], ...]}`.
    pub fn from_json(text: &str) -> Result<Self> {
        let f: ReferenceFile = serde_json::from_str(text)?;
        let mut seen = BTreeSet::new();
        for (l, h, _) in &f.heads {
            if !seen.insert((*l, *h)) {
                return Err(Error::Circuit(format!("reference lists head {l}.{h} twice")));
            }
        }
        Ok(Self {
            source: f.source,
            shape: f.layers.zip(f.heads_per_layer),
            heads: f
                .heads
                .into_iter()
                .map(|(layer, head, role)| ReferenceHead { layer, head, role })
                .collect(),
        })
    }

    /// The IOI circuit of GPT-2 Small (12 layers, 12 heads).
    pub fn gpt2_small_ioi() -> Self {
        Self::from_json(BUNDLED_GPT2_SMALL).expect("bundled reference parses")
    }

    pub fn from_heads<I: IntoIterator<Item = (usize, usize, String)>>(heads: I) -> Self {
        Self {
            source: None,
            shape: None,
            heads: heads
                .into_iter()
                .map(|(layer, head, role)| ReferenceHead { layer, head, role })
                .collect(),
        }
    }

    pub fn with_role(&self, role: &str) -> Vec<(usize, usize)> {
        self.heads
            .iter()
            .filter(|h| h.role == role)
            .map(|h| (h.layer, h.head))
            .collect()
    }

    pub fn role_of(&self, layer: usize, head: usize) -> Option<&str> {
        self.heads
            .iter()
            .find(|h| h.layer == layer && h.head == head)
            .map(|h| h.role.as_str())
    }

    pub fn check_schema(&self, schema: &GraphSchema) -> Result<()> {
        if let Some((l, h)) = self.shape {
            if (l, h) != (schema.layers(), schema.heads()) {
                return Err(Error::Circuit(format!(
                    "reference is for {l} layers x {h} heads, schema has {} x {}",
                    schema.layers(),
                    schema.heads()
                )));
            }
        }
        if let Some(h) = self
            .heads
            .iter()
            .find(|h| h.layer >= schema.layers() || h.head >= schema.heads())
        {
            return Err(Error::Circuit(format!(
                "reference head {}.{} outside a {}x{} schema",
                h.layer,
                h.head,
                schema.layers(),
                schema.heads()
            )));
        }
        Ok(())
    }
}

/// Heads touched by a circuit: any kept edge out of the head's writer or
/// into one of its query/key/value readers.
pub fn touched_heads(circuit: &Circuit, schema: &GraphSchema) -> BTreeSet<(usize, usize)> {
    let mut out = BTreeSet::new();
    for &e in circuit.edges() {
        let edge = schema.edge(e);
        if let Writer::Head { layer, head } = edge.writer {
            out.insert((layer, head));
        }
        if let Some(h) = edge.reader.head() {
            out.insert(h);
        }
    }
    out
}

/// Head-level confusion counts of a circuit against a reference.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadConfusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl HeadConfusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / self.total().max(1) as f64
    }

    /// `None` when nothing is predicted in.
    pub fn precision(&self) -> Option<f64> {
        let d = self.tp + self.fp;
        (d > 0).then(|| self.tp as f64 / d as f64)
    }

    /// `None` when the reference is empty.
    pub fn recall(&self) -> Option<f64> {
        let d = self.tp + self.fn_;
        (d > 0).then(|| self.tp as f64 / d as f64)
    }
}

pub fn head_confusion(circuit: &Circuit, reference: &ReferenceCircuit, schema: &GraphSchema) -> Result<HeadConfusion> {
    circuit.check_schema(schema)?;
    reference.check_schema(schema)?;
    let predicted = touched_heads(circuit, schema);
    let truth: BTreeSet<(usize, usize)> = reference.heads.iter().map(|h| (h.layer, h.head)).collect();
    let mut c = HeadConfusion::default();
    for l in 0..schema.layers() {
        for h in 0..schema.heads() {
            match (predicted.contains(&(l, h)), truth.contains(&(l, h))) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
    }
    Ok(c)
}

/// `(TP + TN) / (L * H)` over attention heads.
pub fn circuit_accuracy(circuit: &Circuit, reference: &ReferenceCircuit, schema: &GraphSchema) -> Result<f64> {
    Ok(head_confusion(circuit, reference, schema)?.accuracy())
}

/// Faithfulness and quality of one discovered circuit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunMetrics {
    /// Head-level agreement with a reference circuit, when one applies.
    pub accuracy: Option<f64>,
    /// Fraction of prompts where the circuit ranks IO above S.
    pub task_accuracy: f64,
    pub logit_diff: f64,
    pub kl: f64,
    pub sparsity: f64,
    pub runtime_s: f64,
    pub num_edges: usize,
    pub kept_edges: usize,
    #[serde(default)]
    pub head_precision: Option<f64>,
    #[serde(default)]
    pub head_recall: Option<f64>,
}

/// Clean/corrupt pairs of one sequence length, with cached forward results.
#[derive(Clone, Debug)]
pub struct PairGroup {
    /// Positions of these rows in the original pair list.
    pub indices: Vec<usize>,
    pub clean: TokenBatch,
    pub corrupt: TokenBatch,
    pub clean_cache: ActivationCache,
    pub corrupt_cache: ActivationCache,
    /// Full-model final-position logits on the clean prompts, `[b, vocab]`.
    pub clean_logits: Array,
    pub io: Vec<usize>,
    pub s: Vec<usize>,
}

/// A dataset ready for repeated masked evaluation.
#[derive(Clone, Debug)]
pub struct PreparedPairs {
    groups: Vec<PairGroup>,
    len: usize,
    vocab: usize,
}

impl PreparedPairs {
    /// Groups pairs by length, at most `chunk` rows per group (`None` for no
    /// limit), and runs the clean and corrupted forward passes once.
    pub fn new(model: &Model, pairs: &[PromptPair], chunk: Option<usize>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Dataset("no prompt pairs".into()));
        }
        if let Some((i, _)) = pairs
            .iter()
            .enumerate()
            .find(|(_, p)| p.clean_ids.len() != p.corrupt_ids.len())
        {
            return Err(Error::Dataset(format!("pair {i} has unequal clean/corrupt lengths")));
        }
        let chunk = chunk.unwrap_or(usize::MAX).max(1);
        let mut groups = Vec::new();
        for (_, idx) in length_groups(pairs.iter().map(|p| p.len())) {
            for part in idx.chunks(chunk) {
                let clean_rows: Vec<&[u32]> = part.iter().map(|&i| pairs[i].clean_ids.as_slice()).collect();
                let corrupt_rows: Vec<&[u32]> = part.iter().map(|&i| pairs[i].corrupt_ids.as_slice()).collect();
                let clean = TokenBatch::new(&clean_rows)?;
                let corrupt = TokenBatch::new(&corrupt_rows)?;
                let (clean_logits, clean_cache) = model.forward_final(&clean)?;
                let (_, corrupt_cache) = model.forward_final(&corrupt)?;
                groups.push(PairGroup {
                    indices: part.to_vec(),
                    clean,
                    corrupt,
                    clean_cache,
                    corrupt_cache,
                    clean_logits,
                    io: part.iter().map(|&i| pairs[i].io_id as usize).collect(),
                    s: part.iter().map(|&i| pairs[i].s_id as usize).collect(),
                });
            }
        }
        Ok(Self {
            groups,
            len: pairs.len(),
            vocab: model.config().vocab_size,
        })
    }

    pub fn groups(&self) -> &[PairGroup] {
        &self.groups
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Copy whose corrupted caches are moved to `clean + scale * (corrupt - clean)`.
    pub fn interpolated(&self, scale: f64) -> Result<Self> {
        let mut out = self.clone();
        for g in &mut out.groups {
            g.corrupt_cache = g.clean_cache.interpolate(&g.corrupt_cache, scale)?;
        }
        Ok(out)
    }

    fn scatter(&self, parts: impl Iterator<Item = (usize, Result<Array>)>) -> Result<Array> {
        let v = self.vocab;
        let mut out = Array::zeros(&[self.len, v]);
        for (gi, logits) in parts {
            let logits = logits?;
            for (r, &i) in self.groups[gi].indices.iter().enumerate() {
                out.data_mut()[i * v..(i + 1) * v].copy_from_slice(&logits.data()[r * v..(r + 1) * v]);
            }
        }
        Ok(out)
    }

    /// Full-model clean logits `[n, vocab]` in input order.
    pub fn clean_logits(&self) -> Array {
        self.scatter(
            self.groups
                .iter()
                .enumerate()
                .map(|(i, g)| (i, Ok(g.clean_logits.clone()))),
        )
        .expect("cached shapes agree")
    }

    /// Gated-model logits `[n, vocab]` in input order.
    pub fn masked_logits(&self, model: &Model, z: &MaskAssignment) -> Result<Array> {
        self.scatter(self.groups.iter().enumerate().map(|(i, g)| {
            (
                i,
                model.forward_masked_scoped(&g.clean, &g.corrupt_cache, z, crate::model::LogitScope::Final),
            )
        }))
    }

    pub fn io(&self) -> Vec<usize> {
        self.ordered(|g| &g.io)
    }

    pub fn s(&self) -> Vec<usize> {
        self.ordered(|g| &g.s)
    }

    fn ordered(&self, f: impl Fn(&PairGroup) -> &Vec<usize>) -> Vec<usize> {
        let mut out = vec![0; self.len];
        for g in &self.groups {
            for (r, &i) in g.indices.iter().enumerate() {
                out[i] = f(g)[r];
            }
        }
        out
    }

    /// KL of the gated model under `z` from the full model.
    pub fn kl(&self, model: &Model, z: &MaskAssignment) -> Result<f64> {
        kl_divergence(&self.clean_logits(), &self.masked_logits(model, z)?)
    }
}

/// Score `circuit` on `data`: KL from the full model, logit difference and
/// task accuracy of the circuit, sparsity, and head-level accuracy when a
/// reference is given.
pub fn evaluate_circuit(
    model: &Model,
    data: &PreparedPairs,
    circuit: &Circuit,
    reference: Option<&ReferenceCircuit>,
    runtime_s: f64,
) -> Result<RunMetrics> {
    let schema = model.schema();
    circuit.check_schema(schema)?;
    let logits = data.masked_logits(model, &circuit.mask())?;
    let (io, s) = (data.io(), data.s());
    let diffs = Metric::LogitDiff.values(&logits, &io, &s);
    let confusion = reference.map(|r| head_confusion(circuit, r, schema)).transpose()?;
    Ok(RunMetrics {
        accuracy: confusion.map(|c| c.accuracy()),
        task_accuracy: diffs.iter().filter(|&&d| d > 0.0).count() as f64 / diffs.len() as f64,
        logit_diff: diffs.iter().sum::<f64>() / diffs.len() as f64,
        kl: kl_divergence(&data.clean_logits(), &logits)?,
        sparsity: sparsity(circuit, schema)?,
        runtime_s,
        num_edges: schema.num_edges(),
        kept_edges: circuit.len(),
        head_precision: confusion.and_then(|c| c.precision()),
        head_recall: confusion.and_then(|c| c.recall()),
    })
}

fn metric_sum(metric: Metric, logits: &Array, io: &[usize], s: &[usize]) -> f64 {
    metric.values(logits, io, s).iter().sum()
}

/// Exact change of the batch-summed metric when only `edge` is ablated
/// (its gate set to 0, every other gate 1).
pub fn oracle_exact_ablation(model: &Model, data: &PreparedPairs, edge: usize, metric: Metric) -> Result<f64> {
    let n = model.schema().num_edges();
    if edge >= n {
        return Err(Error::Circuit(format!("edge {edge} out of range for {n} edges")));
    }
    let mut z = vec![1.0; n];
    z[edge] = 0.0;
    ablation_delta(model, data, &MaskAssignment::new(z)?, metric)
}

/// `metric(gated under z) - metric(full)`, summed over the batch.
pub fn ablation_delta(model: &Model, data: &PreparedPairs, z: &MaskAssignment, metric: Metric) -> Result<f64> {
    let (io, s) = (data.io(), data.s());
    let full = metric_sum(metric, &data.clean_logits(), &io, &s);
    let masked = metric_sum(metric, &data.masked_logits(model, z)?, &io, &s);
    Ok(masked - full)
}

/// Largest graph [`oracle_minimal_circuit`] accepts.
pub const ORACLE_MAX_EDGES: usize = 20;

/// Result of the exhaustive search.
#[derive(Clone, Debug)]
pub struct OracleCircuit {
    pub circuit: Circuit,
    pub kl: f64,
    /// Whether some subset met the tolerance; if not, the circuit is the full
    /// edge set.
    pub satisfied: bool,
    pub masks_evaluated: usize,
}

/// Smallest edge set whose KL from the full model is within `tolerance`,
/// ties broken by the lexicographically smallest ordinal list. Searches all
/// subsets in order of size. Falls back to the full set when no subset
/// qualifies.
pub fn oracle_minimal_circuit(model: &Model, data: &PreparedPairs, tolerance: f64) -> Result<OracleCircuit> {
    let schema = model.schema();
    let n = schema.num_edges();
    if n > ORACLE_MAX_EDGES {
        return Err(Error::Circuit(format!(
            "exhaustive search supports at most {ORACLE_MAX_EDGES} edges, graph has {n}"
        )));
    }
    let full = data.clean_logits();
    let mut evaluated = 0;
    for k in 0..=n {
        for subset in Combinations::new(n, k) {
            evaluated += 1;
            let z = MaskAssignment::binary(n, &subset)?;
            let kl = kl_divergence(&full, &data.masked_logits(model, &z)?)?;
            if kl <= tolerance {
                return Ok(OracleCircuit {
                    circuit: Circuit::new(schema, subset)?,
                    kl,
                    satisfied: true,
                    masks_evaluated: evaluated,
                });
            }
        }
    }
    let circuit = Circuit::full(schema);
    let kl = kl_divergence(&full, &data.masked_logits(model, &circuit.mask())?)?;
    Ok(OracleCircuit {
        circuit,
        kl,
        satisfied: false,
        masks_evaluated: evaluated,
    })
}

/// Lowest KL over all circuits with exactly `k` edges.
pub fn oracle_best_at_size(model: &Model, data: &PreparedPairs, k: usize) -> Result<OracleCircuit> {
    let schema = model.schema();
    let n = schema.num_edges();
    if n > ORACLE_MAX_EDGES || k > n {
        return Err(Error::Circuit(format!("cannot search size {k} over {n} edges")));
    }
    let full = data.clean_logits();
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut evaluated = 0;
    for subset in Combinations::new(n, k) {
        evaluated += 1;
        let kl = kl_divergence(&full, &data.masked_logits(model, &MaskAssignment::binary(n, &subset)?)?)?;
        if best.as_ref().is_none_or(|(b, _)| kl < *b) {
            best = Some((kl, subset));
        }
    }
    let (kl, subset) = best.expect("at least one subset");
    Ok(OracleCircuit {
        circuit: Circuit::new(schema, subset)?,
        kl,
        satisfied: true,
        masks_evaluated: evaluated,
    })
}

/// k-subsets of `0..n` in lexicographic order.
struct Combinations {
    n: usize,
    current: Option<Vec<usize>>,
}

impl Combinations {
    fn new(n: usize, k: usize) -> Self {
        Self {
            n,
            current: (k <= n).then(|| (0..k).collect()),
        }
    }
}

impl Iterator for Combinations {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        let cur = self.current.take()?;
        let out = cur.clone();
        let k = cur.len();
        let mut next = cur;
        let mut i = k;
        while i > 0 {
            i -= 1;
            if next[i] < self.n - k + i {
                next[i] += 1;
                for j in i + 1..k {
                    next[j] = next[j - 1] + 1;
                }
                self.current = Some(next);
                return Some(out);
            }
        }
        Some(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_token_kl() {
        let p = Array::from_vec(vec![0.5f64.ln(), 0.5f64.ln()]);
        let q = Array::from_vec(vec![0.25f64.ln(), 0.75f64.ln()]);
        let kl = kl_divergence(&p, &q).unwrap();
        assert!((kl - 0.143841).abs() < 1e-5, "{kl}");
    }

    #[test]
    fn identical_logits_have_zero_kl() {
        let a = Array::new(vec![2, 3], vec![0.1, -2.0, 3.0, 1.0, 1.0, 0.5]).unwrap();
        assert_eq!(kl_divergence(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn logit_diff_edge_cases() {
        let a = Array::new(vec![2, 3], vec![0.1, -2.0, 3.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(logit_diff(&a, &[1, 1], &[1, 1]).unwrap(), 0.0);
        let u = Array::full(&[2, 3], 0.7);
        assert_eq!(logit_diff(&u, &[0, 2], &[1, 0]).unwrap(), 0.0);
        assert!(logit_diff(&a, &[0, 7], &[1, 0]).is_err());
    }

    #[test]
    fn combinations_in_order() {
        let all: Vec<Vec<usize>> = Combinations::new(4, 2).collect();
        assert_eq!(
            all,
            vec![vec![0, 1], vec![0, 2], vec![0, 3], vec![1, 2], vec![1, 3], vec![2, 3]]
        );
        assert_eq!(Combinations::new(3, 0).count(), 1);
        assert_eq!(Combinations::new(3, 3).count(), 1);
        assert_eq!(Combinations::new(2, 3).count(), 0);
    }

    #[test]
    fn circuit_rejects_duplicates_and_range() {
        let s = GraphSchema::enumerate(1, 1).unwrap();
        assert!(Circuit::new(&s, vec![1, 1]).is_err());
        assert!(Circuit::new(&s, vec![8]).is_err());
        let c = Circuit::with_values(&s, vec![3, 1], vec![0.3, 0.1]).unwrap();
        assert_eq!(c.edges(), &[1, 3]);
        assert_eq!(c.values().unwrap(), &[0.1, 0.3]);
    }

    #[test]
    fn sparsity_extremes() {
        let s = GraphSchema::enumerate(2, 2).unwrap();
        assert_eq!(sparsity(&Circuit::full(&s), &s).unwrap(), 0.0);
        assert_eq!(sparsity(&Circuit::empty(&s), &s).unwrap(), 1.0);
    }

    #[test]
    fn bundled_reference_has_s_inhibition_heads() {
        let r = ReferenceCircuit::gpt2_small_ioi();
        let mut s = r.with_role(S_INHIBITION);
        s.sort();
        assert_eq!(s, vec![(7, 3), (7, 9), (8, 6), (8, 10)]);
        assert!(r.check_schema(&GraphSchema::enumerate(12, 12).unwrap()).is_ok());
        assert!(r.check_schema(&GraphSchema::enumerate(4, 4).unwrap()).is_err());
    }

    #[test]
    fn accuracy_extremes() {
        let s = GraphSchema::enumerate(12, 12).unwrap();
        let r = ReferenceCircuit::gpt2_small_ioi();
        let n = r.heads.len() as f64;
        let full = circuit_accuracy(&Circuit::full(&s), &r, &s).unwrap();
        assert!((full - n / 144.0).abs() < 1e-12);
        let empty = circuit_accuracy(&Circuit::empty(&s), &r, &s).unwrap();
        assert!((empty - (1.0 - n / 144.0)).abs() < 1e-12);
    }
}
