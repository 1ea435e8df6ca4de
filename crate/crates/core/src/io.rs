//! On-disk formats: the tensor checkpoint container, circuit JSON and DOT.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Array;
use crate::error::{Error, Result};
use crate::eval::{Circuit, ReferenceCircuit};
use crate::graph::{GraphSchema, Reader, Writer};
use crate::model::{ModelConfig, Weights};
use crate::prune::MaskParams;

pub const MAGIC: &[u8; 8] = b"HAPCKPT1";
const METADATA_KEY: &str = "__metadata__";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

/// Tensors read from a container, values widened back from f32.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: BTreeMap<String, Array>,
    pub metadata: serde_json::Value,
}

/// Serialize `tensors` (narrowed to f32) in the given order.
pub fn encode_checkpoint(tensors: &[(String, &Array)], metadata: &serde_json::Value) -> Result<Vec<u8>> {
    let mut manifest = serde_json::Map::new();
    let mut offset = 0u64;
    for (name, a) in tensors {
        if name == METADATA_KEY {
            return Err(Error::Checkpoint(format!("tensor name {METADATA_KEY} is reserved")));
        }
        let length = 4 * a.len() as u64;
        let entry = TensorEntry {
            dtype: "f32".into(),
            shape: a.shape().to_vec(),
            offset,
            length,
        };
        if manifest.insert(name.clone(), serde_json::to_value(entry)?).is_some() {
            return Err(Error::Checkpoint(format!("tensor {name} written twice")));
        }
        offset += length;
    }
    manifest.insert(METADATA_KEY.into(), metadata.clone());
    let header = serde_json::to_vec(&serde_json::Value::Object(manifest))?;
    let mut out = Vec::with_capacity(16 + header.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, a) in tensors {
        for &v in a.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Format("not a checkpoint: bad magic".into()));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let header_end = 16usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Format(format!("header length {header_len} exceeds file size {}", bytes.len())))?;
    let mut manifest: serde_json::Map<String, serde_json::Value> = serde_json::from_slice(&bytes[16..header_end])?;
    let metadata = manifest.remove(METADATA_KEY).unwrap_or(serde_json::Value::Null);
    let mut entries: Vec<(String, TensorEntry)> = manifest
        .into_iter()
        .map(|(k, v)| {
            serde_json::from_value::<TensorEntry>(v)
                .map(|e| (k.clone(), e))
                .map_err(|e| Error::Format(format!("manifest entry {k}: {e}")))
        })
        .collect::<Result<_>>()?;
    entries.sort_by_key(|(_, e)| e.offset);
    let payload = &bytes[header_end..];
    let mut expected = 0u64;
    let mut tensors = BTreeMap::new();
    for (name, e) in entries {
        if e.dtype != "f32" {
            return Err(Error::Format(format!("tensor {name}: unsupported dtype {}", e.dtype)));
        }
        let count: usize = e.shape.iter().product();
        if e.length != 4 * count as u64 {
            return Err(Error::Format(format!(
                "tensor {name}: length {} does not match shape {:?}",
                e.length, e.shape
            )));
        }
        if e.offset < expected {
            return Err(Error::Format(format!(
                "tensor {name}: offset {} overlaps the previous tensor",
                e.offset
            )));
        }
        if e.offset != expected {
            return Err(Error::Format(format!("tensor {name}: gap before offset {}", e.offset)));
        }
        let end = e.offset + e.length;
        if end > payload.len() as u64 {
            return Err(Error::Format(format!(
                "tensor {name}: payload truncated ({} of {} bytes present)",
                (payload.len() as u64).saturating_sub(e.offset),
                e.length
            )));
        }
        let data: Vec<f64> = payload[e.offset as usize..end as usize]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        tensors.insert(name, Array::new(e.shape, data)?);
        expected = end;
    }
    if expected != payload.len() as u64 {
        return Err(Error::Format(format!(
            "payload is {} bytes but tensors cover {expected}",
            payload.len()
        )));
    }
    Ok(Checkpoint { tensors, metadata })
}

pub fn encode_weights(weights: &Weights) -> Result<Vec<u8>> {
    let named: Vec<(String, &Array)> = weights.params.named();
    let meta = serde_json::json!({"kind": "weights", "config": weights.config});
    encode_checkpoint(&named, &meta)
}

pub fn decode_weights(bytes: &[u8]) -> Result<Weights> {
    let ck = decode_checkpoint(bytes)?;
    if ck.metadata.get("kind").and_then(|k| k.as_str()) != Some("weights") {
        return Err(Error::Checkpoint("container does not hold model weights".into()));
    }
    let config: ModelConfig = serde_json::from_value(
        ck.metadata
            .get("config")
            .cloned()
            .ok_or_else(|| Error::Checkpoint("weights container has no config".into()))?,
    )?;
    let map: HashMap<String, Array> = ck.tensors.into_iter().collect();
    Weights::from_named(&config, map)
}

pub fn save_weights(path: &Path, weights: &Weights) -> Result<()> {
    std::fs::write(path, encode_weights(weights)?)?;
    Ok(())
}

pub fn load_weights(path: &Path) -> Result<Weights> {
    decode_weights(&std::fs::read(path)?)
}

pub fn encode_mask_params(params: &MaskParams, schema: &GraphSchema) -> Result<Vec<u8>> {
    let la = Array::from_vec(params.log_alpha.clone());
    let fr = Array::from_vec(params.frozen.iter().map(|&f| if f { 1.0 } else { 0.0 }).collect());
    let meta = serde_json::json!({"kind": "mask", "fingerprint": schema.fingerprint()});
    encode_checkpoint(&[("log_alpha".into(), &la), ("frozen".into(), &fr)], &meta)
}

pub fn decode_mask_params(bytes: &[u8], schema: &GraphSchema) -> Result<MaskParams> {
    let mut ck = decode_checkpoint(bytes)?;
    if ck.metadata.get("kind").and_then(|k| k.as_str()) != Some("mask") {
        return Err(Error::Checkpoint("container does not hold mask parameters".into()));
    }
    let fp = ck
        .metadata
        .get("fingerprint")
        .and_then(|f| f.as_str())
        .unwrap_or_default();
    if fp != schema.fingerprint() {
        return Err(Error::Checkpoint(format!(
            "mask is for {fp}, schema is {}",
            schema.fingerprint()
        )));
    }
    let mut take = |name: &str| {
        ck.tensors
            .remove(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
    };
    let la = take("log_alpha")?.into_data();
    let frozen = take("frozen")?.data().iter().map(|&v| v != 0.0).collect();
    let p = MaskParams::new(la, frozen)?;
    if p.len() != schema.num_edges() {
        return Err(Error::Checkpoint(format!(
            "mask has {} gates, schema has {} edges",
            p.len(),
            schema.num_edges()
        )));
    }
    Ok(p)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CircuitEdgeJson {
    ordinal: usize,
    writer: String,
    reader: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    value: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CircuitJson {
    fingerprint: String,
    num_edges: usize,
    edges: Vec<CircuitEdgeJson>,
}

pub fn circuit_to_json(circuit: &Circuit, schema: &GraphSchema) -> Result<String> {
    circuit.check_schema(schema)?;
    let edges = circuit
        .edges()
        .iter()
        .enumerate()
        .map(|(i, &e)| {
            let edge = schema.edge(e);
            CircuitEdgeJson {
                ordinal: e,
                writer: edge.writer.to_string(),
                reader: edge.reader.to_string(),
                value: circuit.values().map(|v| v[i]),
            }
        })
        .collect();
    let doc = CircuitJson {
        fingerprint: schema.fingerprint(),
        num_edges: schema.num_edges(),
        edges,
    };
    Ok(serde_json::to_string_pretty(&doc)? + "\n")
}

/// Parse circuit JSON and check every edge against `schema`.
pub fn circuit_from_json(text: &str, schema: &GraphSchema) -> Result<Circuit> {
    let doc: CircuitJson = serde_json::from_str(text)?;
    if doc.fingerprint != schema.fingerprint() || doc.num_edges != schema.num_edges() {
        return Err(Error::Circuit(format!(
            "circuit is for {}, schema is {}",
            doc.fingerprint,
            schema.fingerprint()
        )));
    }
    let mut ordinals = Vec::with_capacity(doc.edges.len());
    let mut values = Vec::with_capacity(doc.edges.len());
    let with_values = doc.edges.first().is_some_and(|e| e.value.is_some());
    for e in &doc.edges {
        if e.ordinal >= schema.num_edges() {
            return Err(Error::Circuit(format!("edge {} out of range", e.ordinal)));
        }
        let expect = schema.edge(e.ordinal);
        let w: Writer = e.writer.parse()?;
        let r: Reader = e.reader.parse()?;
        if w != expect.writer || r != expect.reader {
            return Err(Error::Circuit(format!(
                "edge {} is {} -> {}, file says {} -> {}",
                e.ordinal, expect.writer, expect.reader, e.writer, e.reader
            )));
        }
        if e.value.is_some() != with_values {
            return Err(Error::Circuit("edge values must be given for all edges or none".into()));
        }
        ordinals.push(e.ordinal);
        values.push(e.value.unwrap_or(0.0));
    }
    if with_values {
        Circuit::with_values(schema, ordinals, values)
    } else {
        Circuit::new(schema, ordinals)
    }
}

/// Schema a circuit JSON document was written against, rebuilt from its
/// fingerprint.
pub fn circuit_schema(text: &str) -> Result<GraphSchema> {
    let doc: CircuitJson = serde_json::from_str(text)?;
    let bad = || Error::Circuit(format!("unrecognized schema fingerprint {:?}", doc.fingerprint));
    let rest = doc.fingerprint.strip_prefix("resid-edges-v1:L").ok_or_else(bad)?;
    let mut parts = rest.split(':');
    let layers: usize = parts.next().and_then(|p| p.parse().ok()).ok_or_else(bad)?;
    let heads: usize = parts
        .next()
        .and_then(|p| p.strip_prefix('H'))
        .and_then(|p| p.parse().ok())
        .ok_or_else(bad)?;
    let schema = GraphSchema::enumerate(layers, heads)?;
    if schema.fingerprint() != doc.fingerprint {
        return Err(bad());
    }
    Ok(schema)
}

/// Graph component a reader belongs to, as a node name.
fn reader_node(r: &Reader) -> String {
    match *r {
        Reader::Q { layer, head } | Reader::K { layer, head } | Reader::V { layer, head } => {
            Writer::Head { layer, head }.to_string()
        }
        Reader::MlpIn { layer } => Writer::Mlp { layer }.to_string(),
        Reader::Logits => "logits".into(),
    }
}

fn reader_port(r: &Reader) -> Option<&'static str> {
    match r {
        Reader::Q { .. } => Some("q"),
        Reader::K { .. } => Some("k"),
        Reader::V { .. } => Some("v"),
        _ => None,
    }
}

/// Model nodes touched by the circuit's edges.
pub fn circuit_nodes(circuit: &Circuit, schema: &GraphSchema) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    for &e in circuit.edges() {
        let edge = schema.edge(e);
        out.insert(edge.writer.to_string());
        out.insert(reader_node(&edge.reader));
    }
    out
}

fn head_of(name: &str) -> Option<(usize, usize)> {
    match name.parse::<Writer>().ok()? {
        Writer::Head { layer, head } => Some((layer, head)),
        _ => None,
    }
}

/// DOT digraph of the circuit; heads named in `reference` carry their role
/// as a `role` attribute and a highlight.
pub fn circuit_to_dot(circuit: &Circuit, schema: &GraphSchema, reference: Option<&ReferenceCircuit>) -> Result<String> {
    circuit.check_schema(schema)?;
    let mut s = String::from("digraph circuit {\n  rankdir=BT;\n  node [shape=box];\n");
    for node in circuit_nodes(circuit, schema) {
        let role = head_of(&node).and_then(|(l, h)| reference.and_then(|r| r.role_of(l, h)));
        match role {
            Some(role) => {
                let color = if role == crate::eval::S_INHIBITION {
                    "#f4a582"
                } else {
                    "#d1e5f0"
                };
                writeln!(
                    s,
                    "  \"{node}\" [label=\"{node}\\n{role}\", role=\"{role}\", style=filled, fillcolor=\"{color}\"];"
                )
                .expect("string write");
            }
            None => writeln!(s, "  \"{node}\";").expect("string write"),
        }
    }
    for &e in circuit.edges() {
        let edge = schema.edge(e);
        let to = reader_node(&edge.reader);
        match reader_port(&edge.reader) {
            Some(p) => writeln!(s, "  \"{}\" -> \"{to}\" [label=\"{p}\"];", edge.writer),
            None => writeln!(s, "  \"{}\" -> \"{to}\";", edge.writer),
        }
        .expect("string write");
    }
    s.push_str("}\n");
    Ok(s)
}
