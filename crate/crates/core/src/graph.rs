//! Writer and reader nodes of the disentangled residual stream and the
//! complete edge table between them.
//!
//! Writers are ordered `Embed, Head(0, 0..H), Mlp(0), Head(1, ..), ...`. Every
//! reader sees a prefix of that order, so an edge's ordinal is the reader's
//! offset plus the writer's index.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A component that adds its output to the residual stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Writer {
    Embed,
    Head { layer: usize, head: usize },
    Mlp { layer: usize },
}

/// A component that reads from the residual stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Reader {
    Q { layer: usize, head: usize },
    K { layer: usize, head: usize },
    V { layer: usize, head: usize },
    MlpIn { layer: usize },
    Logits,
}

/// Any node of the computational graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NodeId {
    Writer(Writer),
    Reader(Reader),
}

impl Reader {
    /// The attention head whose query/key/value this reader feeds.
    pub fn head(&self) -> Option<(usize, usize)> {
        match *self {
            Reader::Q { layer, head } | Reader::K { layer, head } | Reader::V { layer, head } => Some((layer, head)),
            _ => None,
        }
    }
}

impl Writer {
    pub fn head(&self) -> Option<(usize, usize)> {
        match *self {
            Writer::Head { layer, head } => Some((layer, head)),
            _ => None,
        }
    }
}

impl fmt::Display for Writer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Writer::Embed => write!(f, "embed"),
            Writer::Head { layer, head } => write!(f, "a{layer}.h{head}"),
            Writer::Mlp { layer } => write!(f, "m{layer}"),
        }
    }
}

impl fmt::Display for Reader {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Reader::Q { layer, head } => write!(f, "a{layer}.h{head}.q"),
            Reader::K { layer, head } => write!(f, "a{layer}.h{head}.k"),
            Reader::V { layer, head } => write!(f, "a{layer}.h{head}.v"),
            Reader::MlpIn { layer } => write!(f, "m{layer}.in"),
            Reader::Logits => write!(f, "logits"),
        }
    }
}

fn parse_head(s: &str) -> Option<(usize, usize)> {
    let (a, h) = s.split_once(".h")?;
    Some((a.strip_prefix('a')?.parse().ok()?, h.parse().ok()?))
}

impl FromStr for Writer {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Format(format!("bad writer name {s:?}"));
        if s == "embed" {
            return Ok(Writer::Embed);
        }
        if let Some(l) = s.strip_prefix('m') {
            return Ok(Writer::Mlp {
                layer: l.parse().map_err(|_| bad())?,
            });
        }
        let (layer, head) = parse_head(s).ok_or_else(bad)?;
        Ok(Writer::Head { layer, head })
    }
}

impl FromStr for Reader {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Format(format!("bad reader name {s:?}"));
        if s == "logits" {
            return Ok(Reader::Logits);
        }
        if let Some(l) = s.strip_prefix('m').and_then(|r| r.strip_suffix(".in")) {
            return Ok(Reader::MlpIn {
                layer: l.parse().map_err(|_| bad())?,
            });
        }
        let (base, chan) = s.rsplit_once('.').ok_or_else(bad)?;
        let (layer, head) = parse_head(base).ok_or_else(bad)?;
        match chan {
            "q" => Ok(Reader::Q { layer, head }),
            "k" => Ok(Reader::K { layer, head }),
            "v" => Ok(Reader::V { layer, head }),
            _ => Err(bad()),
        }
    }
}

/// One writer-to-reader connection with its dense ordinal.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct EdgeId {
    pub writer: Writer,
    pub reader: Reader,
    pub index: usize,
}

/// Immutable edge enumeration for a transformer with `layers` x `heads`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GraphSchema {
    layers: usize,
    heads: usize,
    model_dim: Option<usize>,
    edges: Vec<EdgeId>,
    readers: Vec<Reader>,
    reader_offsets: Vec<usize>,
}

/// Closed-form edge count.
pub fn edge_count(layers: usize, heads: usize) -> usize {
    let (l_total, h) = (layers, heads);
    let per_layer: usize = (0..l_total)
        .map(|l| 3 * h * (1 + l * (h + 1)) + (1 + (l + 1) * h + l))
        .sum();
    per_layer + 1 + l_total * h + l_total
}

impl GraphSchema {
    /// Enumerate every edge of an `layers` x `heads` model.
    pub fn enumerate(layers: usize, heads: usize) -> Result<Self> {
        if layers == 0 || heads == 0 {
            return Err(Error::Graph(format!(
                "need at least one layer and one head, got L={layers} H={heads}"
            )));
        }
        let mut schema = Self {
            layers,
            heads,
            model_dim: None,
            edges: Vec::with_capacity(edge_count(layers, heads)),
            readers: Vec::new(),
            reader_offsets: Vec::new(),
        };
        let writers: Vec<Writer> = (0..schema.writer_count()).map(|i| schema.writer_at(i)).collect();
        for l in 0..layers {
            for h in 0..heads {
                for r in [
                    Reader::Q { layer: l, head: h },
                    Reader::K { layer: l, head: h },
                    Reader::V { layer: l, head: h },
                ] {
                    schema.push_reader(r, &writers);
                }
            }
            schema.push_reader(Reader::MlpIn { layer: l }, &writers);
        }
        schema.push_reader(Reader::Logits, &writers);
        debug_assert_eq!(schema.edges.len(), edge_count(layers, heads));
        Ok(schema)
    }

    pub fn with_model_dim(mut self, d: usize) -> Self {
        self.model_dim = Some(d);
        self
    }

    fn push_reader(&mut self, reader: Reader, writers: &[Writer]) {
        self.readers.push(reader);
        self.reader_offsets.push(self.edges.len());
        let n = self.prefix_len(&reader);
        for (i, &writer) in writers[..n].iter().enumerate() {
            let index = self.edges.len();
            debug_assert_eq!(index, self.reader_offsets.last().unwrap() + i);
            self.edges.push(EdgeId { writer, reader, index });
        }
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn model_dim(&self) -> Option<usize> {
        self.model_dim
    }

    pub fn edges(&self) -> &[EdgeId] {
        &self.edges
    }

    pub fn edge(&self, index: usize) -> &EdgeId {
        &self.edges[index]
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    /// `1 + L*H + L`.
    pub fn writer_count(&self) -> usize {
        1 + self.layers * (self.heads + 1)
    }

    /// Readers in enumeration order.
    pub fn readers(&self) -> &[Reader] {
        &self.readers
    }

    pub fn writer_index(&self, w: &Writer) -> usize {
        match *w {
            Writer::Embed => 0,
            Writer::Head { layer, head } => 1 + layer * (self.heads + 1) + head,
            Writer::Mlp { layer } => 1 + layer * (self.heads + 1) + self.heads,
        }
    }

    pub fn writer_at(&self, index: usize) -> Writer {
        if index == 0 {
            return Writer::Embed;
        }
        let (layer, slot) = ((index - 1) / (self.heads + 1), (index - 1) % (self.heads + 1));
        if slot == self.heads {
            Writer::Mlp { layer }
        } else {
            Writer::Head { layer, head: slot }
        }
    }

    /// Index of `r` within [`GraphSchema::readers`].
    pub fn reader_index(&self, r: &Reader) -> usize {
        let per_layer = 3 * self.heads + 1;
        match *r {
            Reader::Q { layer, head } => layer * per_layer + 3 * head,
            Reader::K { layer, head } => layer * per_layer + 3 * head + 1,
            Reader::V { layer, head } => layer * per_layer + 3 * head + 2,
            Reader::MlpIn { layer } => layer * per_layer + 3 * self.heads,
            Reader::Logits => self.layers * per_layer,
        }
    }

    /// Number of writers visible to `r`; they are writers `0..prefix_len`.
    pub fn prefix_len(&self, r: &Reader) -> usize {
        match *r {
            Reader::Q { layer, .. } | Reader::K { layer, .. } | Reader::V { layer, .. } => 1 + layer * (self.heads + 1),
            Reader::MlpIn { layer } => 1 + layer * (self.heads + 1) + self.heads,
            Reader::Logits => self.writer_count(),
        }
    }

    /// Ordinal of the first edge into `r`; edges into `r` are contiguous.
    pub fn reader_offset(&self, r: &Reader) -> usize {
        self.reader_offsets[self.reader_index(r)]
    }

    fn check_writer(&self, w: &Writer) -> Result<()> {
        let ok = match *w {
            Writer::Embed => true,
            Writer::Head { layer, head } => layer < self.layers && head < self.heads,
            Writer::Mlp { layer } => layer < self.layers,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Graph(format!(
                "writer {w} outside L={} H={}",
                self.layers, self.heads
            )))
        }
    }

    fn check_reader(&self, r: &Reader) -> Result<()> {
        let ok = match *r {
            Reader::Q { layer, head } | Reader::K { layer, head } | Reader::V { layer, head } => {
                layer < self.layers && head < self.heads
            }
            Reader::MlpIn { layer } => layer < self.layers,
            Reader::Logits => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Graph(format!(
                "reader {r} outside L={} H={}",
                self.layers, self.heads
            )))
        }
    }

    /// Ordinal of the edge `writer -> reader`, `None` if the writer does not precede the reader.
    pub fn lookup(&self, writer: &Writer, reader: &Reader) -> Result<Option<usize>> {
        self.check_writer(writer)?;
        self.check_reader(reader)?;
        let w = self.writer_index(writer);
        Ok((w < self.prefix_len(reader)).then(|| self.reader_offset(reader) + w))
    }

    /// Stable identifier used to tie circuits and parameters to a schema.
    pub fn fingerprint(&self) -> String {
        format!("resid-edges-v1:L{}:H{}:E{}", self.layers, self.heads, self.edges.len())
    }

    /// Edge table as JSON rows `{ordinal, writer, reader}`.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::Value::Array(
            self.edges
                .iter()
                .map(|e| {
                    serde_json::json!({
                        "ordinal": e.index,
                        "writer": e.writer.to_string(),
                        "reader": e.reader.to_string(),
                    })
                })
                .collect(),
        )
    }
}
