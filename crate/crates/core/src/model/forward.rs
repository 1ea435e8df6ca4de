use std::collections::HashMap;

use super::weights::{LayerParams, ModelConfig, ParamSet};
use crate::autodiff::{Array, NodeId, Tape};
use crate::error::{Error, Result};
use crate::graph::{GraphSchema, Reader};

/// Equal-length token sequences, `[batch, positions]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    ids: Vec<usize>,
    batch: usize,
    seq: usize,
}

impl TokenBatch {
    pub fn new<S: AsRef<[u32]>>(rows: &[S]) -> Result<Self> {
        let seq = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        if rows.is_empty() || seq == 0 {
            return Err(Error::Dataset("empty token batch".into()));
        }
        let mut ids = Vec::with_capacity(rows.len() * seq);
        for r in rows {
            let r = r.as_ref();
            if r.len() != seq {
                return Err(Error::Dataset(format!(
                    "ragged batch: lengths {seq} and {} (padding is not supported)",
                    r.len()
                )));
            }
            ids.extend(r.iter().map(|&t| t as usize));
        }
        Ok(Self {
            ids,
            batch: rows.len(),
            seq,
        })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn seq(&self) -> usize {
        self.seq
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }
}

/// Residual-stream contribution of every writer, each `[batch, positions, d]`,
/// indexed by writer order.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationCache {
    pub(crate) batch: usize,
    pub(crate) seq: usize,
    pub(crate) writers: Vec<Array>,
}

impl ActivationCache {
    pub fn new(batch: usize, seq: usize, writers: Vec<Array>) -> Result<Self> {
        let d = writers.first().map(|w| w.last_dim()).unwrap_or(0);
        if writers.iter().any(|w| w.shape() != [batch, seq, d]) {
            return Err(Error::CacheMismatch(format!(
                "every writer activation must be [{batch}, {seq}, {d}]"
            )));
        }
        Ok(Self { batch, seq, writers })
    }

    pub fn len(&self) -> usize {
        self.writers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.writers.is_empty()
    }

    pub fn writer(&self, index: usize) -> &Array {
        &self.writers[index]
    }

    pub fn writers(&self) -> &[Array] {
        &self.writers
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn seq(&self) -> usize {
        self.seq
    }

    fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.batch != other.batch || self.seq != other.seq || self.writers.len() != other.writers.len() {
            return Err(Error::CacheMismatch(format!(
                "caches [{}x{}; {} writers] and [{}x{}; {} writers]",
                self.batch,
                self.seq,
                self.writers.len(),
                other.batch,
                other.seq,
                other.writers.len()
            )));
        }
        Ok(())
    }

    /// `self + scale * (target - self)`, writer by writer.
    pub fn interpolate(&self, target: &Self, scale: f64) -> Result<Self> {
        self.check_same_shape(target)?;
        let writers = self
            .writers
            .iter()
            .zip(&target.writers)
            .map(|(a, b)| a.zip_map(b, |x, y| x + scale * (y - x)))
            .collect::<Result<_>>()?;
        Ok(Self {
            batch: self.batch,
            seq: self.seq,
            writers,
        })
    }
}

/// Per-edge gate values in `[0, 1]`, indexed by edge ordinal.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskAssignment(Vec<f64>);

impl MaskAssignment {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some((i, v)) = values.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Circuit(format!("gate {i} = {v} outside [0, 1]")));
        }
        Ok(Self(values))
    }

    pub fn ones(n: usize) -> Self {
        Self(vec![1.0; n])
    }

    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    /// 1 on `kept`, 0 elsewhere.
    pub fn binary(n: usize, kept: &[usize]) -> Result<Self> {
        let mut z = vec![0.0; n];
        for &e in kept {
            *z.get_mut(e)
                .ok_or_else(|| Error::Circuit(format!("edge {e} outside [0, {n})")))? = 1.0;
        }
        Ok(Self(z))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Which positions go through the unembedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LogitScope {
    /// `[batch, positions, vocab]`.
    All,
    /// Last position only, `[batch, vocab]`.
    Final,
}

/// Gating of reader inputs for a masked run.
#[derive(Clone, Copy)]
pub struct GateSpec<'a> {
    /// Rank-1 node of length `N_edge`.
    pub z: NodeId,
    pub corrupt: &'a ActivationCache,
    /// Edges known to be fixed at `z = 0`: they contribute only their
    /// corrupted activation and their gradient is not tracked.
    pub closed: Option<&'a [bool]>,
}

/// How each reader's input is formed from writer outputs.
#[derive(Clone, Copy)]
pub enum Routing<'a> {
    /// Ordinary residual stream; readers share the running sum.
    Plain,
    /// Ordinary residual stream, but every reader gets its own node so its
    /// input gradient can be read off separately.
    Tapped,
    /// `input_r = sum_u corrupt_u + z_(u,r) * (clean_u - corrupt_u)`.
    Gated(GateSpec<'a>),
}

/// Node handles produced by one forward pass.
pub struct ForwardNodes {
    pub logits: NodeId,
    /// Indexed by writer order.
    pub writers: Vec<NodeId>,
    /// Indexed by [`GraphSchema::reader_index`].
    pub reader_inputs: Vec<NodeId>,
}

struct Router<'a> {
    routing: Routing<'a>,
    schema: &'a GraphSchema,
    running: Vec<NodeId>,
    corrupt_prefix: Vec<Array>,
    base_nodes: HashMap<usize, NodeId>,
    corrupt_nodes: Vec<Option<NodeId>>,
    deltas: Vec<Option<NodeId>>,
    dead: Vec<bool>,
}

impl<'a> Router<'a> {
    fn new(routing: Routing<'a>, schema: &'a GraphSchema) -> Self {
        let n = schema.writer_count();
        let corrupt_prefix = match routing {
            Routing::Gated(g) => {
                let mut acc: Vec<Array> = Vec::with_capacity(n);
                for w in &g.corrupt.writers {
                    let next = match acc.last() {
                        Some(prev) => prev.zip_map(w, |a, b| a + b).expect("cache shapes checked"),
                        None => w.clone(),
                    };
                    acc.push(next);
                }
                acc
            }
            _ => Vec::new(),
        };
        Self {
            routing,
            schema,
            running: Vec::new(),
            corrupt_prefix,
            base_nodes: HashMap::new(),
            corrupt_nodes: vec![None; n],
            deltas: vec![None; n],
            dead: vec![false; n],
        }
    }

    fn running_sum(&mut self, tape: &mut Tape, writers: &[NodeId], n: usize) -> Result<NodeId> {
        while self.running.len() < n {
            let k = self.running.len();
            let next = match self.running.last() {
                Some(&prev) => tape.add(prev, writers[k])?,
                None => writers[0],
            };
            self.running.push(next);
        }
        Ok(self.running[n - 1])
    }

    fn edge_open(&self, gate: &GateSpec<'_>, ordinal: usize, writer: usize) -> bool {
        !self.dead[writer] && !gate.closed.is_some_and(|c| c[ordinal])
    }

    /// True when every edge into `reader` is closed, so its input equals the
    /// corrupted residual stream.
    fn fully_closed(&self, reader: &Reader) -> bool {
        match self.routing {
            Routing::Gated(g) if g.closed.is_some() => {
                let off = self.schema.reader_offset(reader);
                (0..self.schema.prefix_len(reader)).all(|w| !self.edge_open(&g, off + w, w))
            }
            _ => false,
        }
    }

    fn corrupt_node(&mut self, tape: &mut Tape, gate: &GateSpec<'_>, w: usize) -> Result<NodeId> {
        if let Some(id) = self.corrupt_nodes[w] {
            return Ok(id);
        }
        let id = tape.constant(gate.corrupt.writers[w].clone())?;
        self.corrupt_nodes[w] = Some(id);
        Ok(id)
    }

    fn input(&mut self, tape: &mut Tape, reader: &Reader, writers: &[NodeId]) -> Result<NodeId> {
        let n = self.schema.prefix_len(reader);
        match self.routing {
            Routing::Plain => self.running_sum(tape, writers, n),
            Routing::Tapped => {
                let sum = self.running_sum(tape, writers, n)?;
                tape.affine(sum, 1.0, 0.0)
            }
            Routing::Gated(gate) => {
                let base = match self.base_nodes.get(&n) {
                    Some(&id) => id,
                    None => {
                        let id = tape.constant(self.corrupt_prefix[n - 1].clone())?;
                        self.base_nodes.insert(n, id);
                        id
                    }
                };
                let off = self.schema.reader_offset(reader);
                let open: Vec<usize> = (0..n).filter(|&w| self.edge_open(&gate, off + w, w)).collect();
                if open.is_empty() {
                    return Ok(base);
                }
                let mut items = Vec::with_capacity(open.len());
                for &w in &open {
                    let d = match self.deltas[w] {
                        Some(d) => d,
                        None => {
                            let c = self.corrupt_node(tape, &gate, w)?;
                            let d = tape.sub(writers[w], c)?;
                            self.deltas[w] = Some(d);
                            d
                        }
                    };
                    items.push(d);
                }
                let ordinals: Vec<usize> = open.iter().map(|w| off + w).collect();
                let zs = tape.gather(gate.z, &ordinals)?;
                let mix = tape.weighted_sum(zs, &items)?;
                tape.add(base, mix)
            }
        }
    }
}

fn layer_norm_affine(tape: &mut Tape, config: &ModelConfig, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
    let shape = tape.value(x).shape().to_vec();
    let normed = if config.linearized {
        x
    } else {
        tape.layer_norm(x, config.ln_eps)?
    };
    let g = tape.broadcast(gain, &shape)?;
    let b = tape.broadcast(bias, &shape)?;
    let scaled = tape.mul(normed, g)?;
    tape.add(scaled, b)
}

fn causal_mask(config: &ModelConfig, batch: usize, seq: usize) -> Array {
    // linearized: multiplicative 0/1 mask; otherwise additive -1e9
    let mut m = Array::zeros(&[batch, seq, seq]);
    let data = m.data_mut();
    for b in 0..batch {
        for i in 0..seq {
            for j in 0..seq {
                let allowed = j <= i;
                data[(b * seq + i) * seq + j] = match (config.linearized, allowed) {
                    (true, true) => 1.0,
                    (true, false) => 0.0,
                    (false, true) => 0.0,
                    (false, false) => -1e9,
                };
            }
        }
    }
    m
}

/// Run the transformer on `tokens`, recording on `tape`.
pub(crate) fn run_graph(
    tape: &mut Tape,
    config: &ModelConfig,
    schema: &GraphSchema,
    params: &ParamSet<NodeId>,
    tokens: &TokenBatch,
    routing: Routing<'_>,
    scope: LogitScope,
) -> Result<ForwardNodes> {
    let (batch, seq) = (tokens.batch(), tokens.seq());
    if seq > config.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: seq,
            max: config.max_seq_len,
        });
    }
    if let Some(&id) = tokens.ids().iter().find(|&&t| t >= config.vocab_size) {
        return Err(Error::TokenOutOfRange {
            id,
            vocab: config.vocab_size,
        });
    }
    if let Routing::Gated(g) = routing {
        if g.corrupt.batch != batch || g.corrupt.seq != seq || g.corrupt.writers.len() != schema.writer_count() {
            return Err(Error::CacheMismatch(format!(
                "corrupt cache is [{}x{}; {} writers], clean tokens are [{batch}x{seq}] for {} writers",
                g.corrupt.batch,
                g.corrupt.seq,
                g.corrupt.writers.len(),
                schema.writer_count()
            )));
        }
        if g.corrupt.writers.iter().any(|w| w.last_dim() != config.d_model) {
            return Err(Error::CacheMismatch("corrupt cache width differs from d_model".into()));
        }
        let zlen = tape.value(g.z).len();
        if zlen != schema.num_edges() {
            return Err(Error::CacheMismatch(format!(
                "mask has {zlen} entries, graph has {} edges",
                schema.num_edges()
            )));
        }
    }

    let mut router = Router::new(routing, schema);
    let mut writers: Vec<NodeId> = Vec::with_capacity(schema.writer_count());
    let mut reader_inputs: Vec<Option<NodeId>> = vec![None; schema.readers().len()];

    let tok = tape.embedding(params.token_embed, tokens.ids(), &[batch, seq])?;
    let positions: Vec<usize> = (0..batch).flat_map(|_| 0..seq).collect();
    let pos = tape.embedding(params.pos_embed, &positions, &[batch, seq])?;
    writers.push(tape.add(tok, pos)?);

    let mask = tape.constant(causal_mask(config, batch, seq))?;
    let scale = 1.0 / (config.head_dim() as f64).sqrt();
    let (d, m) = (config.d_model, config.d_mlp);

    for (l, lp) in params.layers.iter().enumerate() {
        let lp: &LayerParams<NodeId> = lp;
        let mut ln_memo: HashMap<NodeId, NodeId> = HashMap::new();
        let mut head_outs = Vec::with_capacity(config.heads);
        for h in 0..config.heads {
            let rq = Reader::Q { layer: l, head: h };
            let rk = Reader::K { layer: l, head: h };
            let rv = Reader::V { layer: l, head: h };
            let w_index = schema.writer_index(&crate::graph::Writer::Head { layer: l, head: h });
            let mut ins = [NodeId(0); 3];
            for (slot, r) in [rq, rk, rv].iter().enumerate() {
                let id = router.input(tape, r, &writers)?;
                reader_inputs[schema.reader_index(r)] = Some(id);
                ins[slot] = id;
            }
            if [rq, rk, rv].iter().all(|r| router.fully_closed(r)) {
                let Routing::Gated(g) = routing else { unreachable!() };
                router.dead[w_index] = true;
                head_outs.push(router.corrupt_node(tape, &g, w_index)?);
                continue;
            }
            let mut normed = [NodeId(0); 3];
            for (slot, &x) in ins.iter().enumerate() {
                normed[slot] = match ln_memo.get(&x) {
                    Some(&y) => y,
                    None => {
                        let y = layer_norm_affine(tape, config, x, lp.ln1_gain, lp.ln1_bias)?;
                        ln_memo.insert(x, y);
                        y
                    }
                };
            }
            let q = tape.matmul(normed[0], lp.w_q[h])?;
            let k = tape.matmul(normed[1], lp.w_k[h])?;
            let v = tape.matmul(normed[2], lp.w_v[h])?;
            let kt = tape.transpose(k)?;
            let scores = tape.matmul(q, kt)?;
            let scores = tape.affine(scores, scale, 0.0)?;
            let pattern = if config.linearized {
                tape.mul(scores, mask)?
            } else {
                let masked = tape.add(scores, mask)?;
                tape.softmax(masked)?
            };
            let mixed = tape.matmul(pattern, v)?;
            head_outs.push(tape.matmul(mixed, lp.w_o[h])?);
        }
        writers.extend(head_outs);

        let rm = Reader::MlpIn { layer: l };
        let x = router.input(tape, &rm, &writers)?;
        reader_inputs[schema.reader_index(&rm)] = Some(x);
        let w_index = schema.writer_index(&crate::graph::Writer::Mlp { layer: l });
        if router.fully_closed(&rm) {
            let Routing::Gated(g) = routing else { unreachable!() };
            router.dead[w_index] = true;
            let c = router.corrupt_node(tape, &g, w_index)?;
            writers.push(c);
            continue;
        }
        let xn = layer_norm_affine(tape, config, x, lp.ln2_gain, lp.ln2_bias)?;
        let hidden = tape.matmul(xn, lp.mlp_in)?;
        let b_in = tape.broadcast(lp.mlp_in_bias, &[batch, seq, m])?;
        let hidden = tape.add(hidden, b_in)?;
        let act = if config.linearized { hidden } else { tape.gelu(hidden)? };
        let out = tape.matmul(act, lp.mlp_out)?;
        let b_out = tape.broadcast(lp.mlp_out_bias, &[batch, seq, d])?;
        writers.push(tape.add(out, b_out)?);
    }

    let final_in = router.input(tape, &Reader::Logits, &writers)?;
    reader_inputs[schema.reader_index(&Reader::Logits)] = Some(final_in);
    let x = match scope {
        LogitScope::All => final_in,
        LogitScope::Final => tape.select(final_in, 1, seq - 1)?,
    };
    let xn = layer_norm_affine(tape, config, x, params.lnf_gain, params.lnf_bias)?;
    let logits = tape.matmul(xn, params.unembed)?;

    Ok(ForwardNodes {
        logits,
        writers,
        reader_inputs: reader_inputs
            .into_iter()
            .map(|r| r.expect("every reader visited"))
            .collect(),
    })
}
