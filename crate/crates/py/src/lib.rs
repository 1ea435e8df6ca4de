//! Python bindings: datasets, the toy model, edge schemas, attribution,
//! pruning, the hybrid pipeline, evaluation and circuit export.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyIndexError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use serde_json::Value;

use hap_core::autodiff::Array;
use hap_core::datagen::{read_jsonl, write_jsonl, IoiTask, PromptPair, SplitCounts};
use hap_core::eap::{attribute, EapConfig, Selection};
use hap_core::eval::{self as core_eval, Circuit, PreparedPairs, ReferenceCircuit};
use hap_core::graph;
use hap_core::hap::{self as core_hap, DiscoveryOutcome, HapConfig, Splits};
use hap_core::io;
use hap_core::model::{self as core_model, ModelConfig, TrainConfig};
use hap_core::prune::{HardConcreteConfig, PruneConfig};

fn err(e: hap_core::Error) -> PyErr {
    match e {
        hap_core::Error::Config(_) | hap_core::Error::Selection(_) | hap_core::Error::Circuit(_) => {
            PyValueError::new_err(e.to_string())
        }
        hap_core::Error::Io(_) => PyIOError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// JSON value as native Python objects.
fn to_py(py: Python<'_>, v: &Value) -> PyResult<Py<PyAny>> {
    Ok(match v {
        Value::Null => py.None(),
        Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any().unbind(),
        Value::Number(n) => match (n.as_i64(), n.as_f64()) {
            (Some(i), _) => i.into_pyobject(py)?.into_any().unbind(),
            (None, Some(f)) => f.into_pyobject(py)?.into_any().unbind(),
            _ => py.None(),
        },
        Value::String(s) => s.into_pyobject(py)?.into_any().unbind(),
        Value::Array(a) => {
            let items = a.iter().map(|x| to_py(py, x)).collect::<PyResult<Vec<_>>>()?;
            PyList::new(py, items)?.into_any().unbind()
        }
        Value::Object(o) => {
            let d = PyDict::new(py);
            for (k, x) in o {
                d.set_item(k, to_py(py, x)?)?;
            }
            d.into_any().unbind()
        }
    })
}

fn parse_config<T: serde::de::DeserializeOwned + Default>(config: Option<&str>) -> PyResult<T> {
    match config {
        Some(text) => serde_json::from_str(text).map_err(json_err),
        None => Ok(T::default()),
    }
}

/// Clean/corrupt IOI prompt pairs.
#[pyclass(module = "hap_circuits")]
struct Pairs {
    inner: Vec<PromptPair>,
}

#[pymethods]
impl Pairs {
    #[staticmethod]
    fn from_jsonl(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: read_jsonl(text.as_bytes()).map_err(err)?,
        })
    }

    fn to_jsonl(&self) -> PyResult<String> {
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &self.inner).map_err(err)?;
        String::from_utf8(buf).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// `(clean_text, corrupt_text)` of pair `i`.
    fn texts(&self, i: usize) -> PyResult<(String, String)> {
        let p = self.inner.get(i).ok_or_else(|| PyIndexError::new_err(i))?;
        Ok((p.clean_text.clone(), p.corrupt_text.clone()))
    }

    /// Token ids of pair `i`: `(clean, corrupt, io, s)`.
    fn ids(&self, i: usize) -> PyResult<(Vec<u32>, Vec<u32>, u32, u32)> {
        let p = self.inner.get(i).ok_or_else(|| PyIndexError::new_err(i))?;
        Ok((p.clean_ids.clone(), p.corrupt_ids.clone(), p.io_id, p.s_id))
    }

    fn __repr__(&self) -> String {
        format!("Pairs(len={})", self.inner.len())
    }
}

/// Generate `(train, validation, test)` splits of the standard IOI task.
#[pyfunction]
#[pyo3(signature = (train=200, validation=200, test=1000, seed=0))]
fn generate_ioi(train: usize, validation: usize, test: usize, seed: u64) -> PyResult<(Pairs, Pairs, Pairs)> {
    let s = IoiTask::standard()
        .generate(
            SplitCounts {
                train,
                validation,
                test,
            },
            seed,
        )
        .map_err(err)?;
    Ok((
        Pairs { inner: s.train },
        Pairs { inner: s.validation },
        Pairs { inner: s.test },
    ))
}

#[pyfunction]
fn vocab_size() -> usize {
    IoiTask::standard().tokenizer().vocab_size()
}

/// Immutable edge enumeration.
#[pyclass(module = "hap_circuits")]
struct GraphSchema {
    inner: graph::GraphSchema,
}

#[pymethods]
impl GraphSchema {
    #[new]
    fn new(layers: usize, heads: usize) -> PyResult<Self> {
        Ok(Self {
            inner: graph::GraphSchema::enumerate(layers, heads).map_err(err)?,
        })
    }

    #[getter]
    fn num_edges(&self) -> usize {
        self.inner.num_edges()
    }

    #[getter]
    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }

    /// `(writer, reader)` names of edge `i`.
    fn edge(&self, i: usize) -> PyResult<(String, String)> {
        if i >= self.inner.num_edges() {
            return Err(PyIndexError::new_err(i));
        }
        let e = self.inner.edge(i);
        Ok((e.writer.to_string(), e.reader.to_string()))
    }

    fn lookup(&self, writer: &str, reader: &str) -> PyResult<Option<usize>> {
        let w: graph::Writer = writer.parse().map_err(err)?;
        let r: graph::Reader = reader.parse().map_err(err)?;
        self.inner.lookup(&w, &r).map_err(err)
    }
}

#[pyfunction]
fn edge_count(layers: usize, heads: usize) -> usize {
    graph::edge_count(layers, heads)
}

/// The edge-gated toy transformer.
#[pyclass(module = "hap_circuits")]
struct Model {
    inner: core_model::Model,
}

#[pymethods]
impl Model {
    #[staticmethod]
    #[pyo3(signature = (layers, heads, d_model, seed=0, std=0.02, max_seq_len=32))]
    fn random(layers: usize, heads: usize, d_model: usize, seed: u64, std: f64, max_seq_len: usize) -> PyResult<Self> {
        let cfg = ModelConfig::new(layers, heads, d_model, vocab_size(), max_seq_len);
        Ok(Self {
            inner: core_model::Model::random(&cfg, seed, std).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let w = io::load_weights(&path).map_err(err)?;
        Ok(Self {
            inner: core_model::Model::new(w).map_err(err)?,
        })
    }

    /// Train on `train`, report accuracy on `validation`; `config` is
    /// training-hyperparameter JSON.
    #[staticmethod]
    #[pyo3(signature = (layers, heads, d_model, train, validation, config=None, max_seq_len=32))]
    fn train(
        layers: usize,
        heads: usize,
        d_model: usize,
        train: &Pairs,
        validation: &Pairs,
        config: Option<&str>,
        max_seq_len: usize,
    ) -> PyResult<(Self, f64)> {
        let hyper: TrainConfig = parse_config(config)?;
        let cfg = ModelConfig::new(layers, heads, d_model, vocab_size(), max_seq_len);
        let out = core_model::train_toy_unchecked(&cfg, &train.inner, &validation.inner, &hyper).map_err(err)?;
        let model = core_model::Model::new(out.weights).map_err(err)?;
        Ok((Self { inner: model }, out.val_accuracy))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        io::save_weights(&path, self.inner.weights()).map_err(err)
    }

    #[getter]
    fn num_edges(&self) -> usize {
        self.inner.schema().num_edges()
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.weights().num_params()
    }

    fn schema(&self) -> GraphSchema {
        GraphSchema {
            inner: self.inner.schema().clone(),
        }
    }

    fn config<'py>(&self, py: Python<'py>) -> PyResult<Py<PyAny>> {
        to_py(py, &serde_json::to_value(self.inner.config()).map_err(json_err)?)
    }

    /// Final-position logits of each sequence.
    fn final_logits(&self, seqs: Vec<Vec<u32>>) -> PyResult<Vec<Vec<f64>>> {
        let out = self.inner.final_logits(&seqs).map_err(err)?;
        Ok((0..out.len()).map(|i| out.row(i).to_vec()).collect())
    }

    /// Answer accuracy (IO logit above S) on `pairs`.
    fn accuracy(&self, pairs: &Pairs) -> PyResult<f64> {
        core_model::answer_accuracy(&self.inner, &pairs.inner).map_err(err)
    }
}

/// Signed per-edge attribution scores.
#[pyfunction]
#[pyo3(signature = (model, pairs, config=None))]
fn eap_scores(model: &Model, pairs: &Pairs, config: Option<&str>) -> PyResult<Vec<f64>> {
    let cfg: EapConfig = parse_config(config)?;
    Ok(attribute(&model.inner, &pairs.inner, &cfg).map_err(err)?.scores)
}

/// A discovered circuit with its evaluation.
#[pyclass(module = "hap_circuits")]
struct Discovery {
    outcome: DiscoveryOutcome,
    schema: graph::GraphSchema,
}

#[pymethods]
impl Discovery {
    #[getter]
    fn edges(&self) -> Vec<usize> {
        self.outcome.circuit.edges().to_vec()
    }

    fn metrics<'py>(&self, py: Python<'py>) -> PyResult<Py<PyAny>> {
        to_py(py, &serde_json::to_value(&self.outcome.metrics).map_err(json_err)?)
    }

    /// Per-step `(loss, kl, density)`.
    fn trace(&self) -> Vec<(f64, f64, f64)> {
        self.outcome.trace.iter().map(|r| (r.loss, r.kl, r.density)).collect()
    }

    #[getter]
    fn discovery_s(&self) -> f64 {
        self.outcome.discovery_s
    }

    #[getter]
    fn steps_to_threshold(&self) -> Option<usize> {
        self.outcome.steps_to_threshold
    }

    fn circuit_json(&self) -> PyResult<String> {
        io::circuit_to_json(&self.outcome.circuit, &self.schema).map_err(err)
    }
}

fn discovered(model: &Model, outcome: DiscoveryOutcome) -> Discovery {
    Discovery {
        outcome,
        schema: model.inner.schema().clone(),
    }
}

#[pyfunction]
#[pyo3(signature = (model, train, eval, top_k=None, top_fraction=None))]
fn run_eap(
    model: &Model,
    train: &Pairs,
    eval: &Pairs,
    top_k: Option<usize>,
    top_fraction: Option<f64>,
) -> PyResult<Discovery> {
    let selection = match (top_k, top_fraction) {
        (Some(k), None) => Selection::TopK(k),
        (None, Some(f)) => Selection::TopFraction(f),
        (None, None) => Selection::default(),
        _ => return Err(PyValueError::new_err("give top_k or top_fraction, not both")),
    };
    let cfg = EapConfig {
        selection,
        ..EapConfig::default()
    };
    let splits = Splits {
        train: &train.inner,
        eval: &eval.inner,
        reference: None,
    };
    Ok(discovered(
        model,
        core_hap::run_eap(&model.inner, &splits, &cfg).map_err(err)?,
    ))
}

/// Edge pruning; `config` is pruning-config JSON.
#[pyfunction]
#[pyo3(signature = (model, train, eval, config=None))]
fn run_ep(model: &Model, train: &Pairs, eval: &Pairs, config: Option<&str>) -> PyResult<Discovery> {
    let cfg: PruneConfig = parse_config(config)?;
    let splits = Splits {
        train: &train.inner,
        eval: &eval.inner,
        reference: None,
    };
    Ok(discovered(
        model,
        core_hap::run_ep(&model.inner, &splits, &cfg, None).map_err(err)?,
    ))
}

/// Attribution-seeded pruning; `config` is pipeline-config JSON.
#[pyfunction]
#[pyo3(signature = (model, train, eval, config=None))]
fn run_hap(model: &Model, train: &Pairs, eval: &Pairs, config: Option<&str>) -> PyResult<Discovery> {
    let cfg: HapConfig = parse_config(config)?;
    let splits = Splits {
        train: &train.inner,
        eval: &eval.inner,
        reference: None,
    };
    Ok(discovered(
        model,
        core_hap::run_hap(&model.inner, &splits, &cfg).map_err(err)?,
    ))
}

/// Metrics of the circuit made of `edges` on `pairs`.
#[pyfunction]
fn evaluate<'py>(py: Python<'py>, model: &Model, pairs: &Pairs, edges: Vec<usize>) -> PyResult<Py<PyAny>> {
    let circuit = Circuit::new(model.inner.schema(), edges).map_err(err)?;
    let data = PreparedPairs::new(&model.inner, &pairs.inner, None).map_err(err)?;
    let m = core_eval::evaluate_circuit(&model.inner, &data, &circuit, None, 0.0).map_err(err)?;
    to_py(py, &serde_json::to_value(m).map_err(json_err)?)
}

/// Smallest circuit within `tolerance` KL: `(edges, kl, satisfied)`.
#[pyfunction]
fn oracle_minimal_circuit(model: &Model, pairs: &Pairs, tolerance: f64) -> PyResult<(Vec<usize>, f64, bool)> {
    let data = PreparedPairs::new(&model.inner, &pairs.inner, None).map_err(err)?;
    let o = core_eval::oracle_minimal_circuit(&model.inner, &data, tolerance).map_err(err)?;
    Ok((o.circuit.edges().to_vec(), o.kl, o.satisfied))
}

/// Mean KL(full || circuit) between rows of final-position logits.
#[pyfunction]
fn kl_divergence(full: Vec<Vec<f64>>, circuit: Vec<Vec<f64>>) -> PyResult<f64> {
    let to_array = |rows: Vec<Vec<f64>>| -> PyResult<Array> {
        let v = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != v) {
            return Err(PyValueError::new_err("ragged logit rows"));
        }
        Array::new(vec![rows.len(), v], rows.concat()).map_err(err)
    };
    core_eval::kl_divergence(&to_array(full)?, &to_array(circuit)?).map_err(err)
}

/// Deterministic hard-concrete gate at `log_alpha`.
#[pyfunction]
fn gate(log_alpha: f64) -> f64 {
    HardConcreteConfig::default().gate(log_alpha)
}

/// Probability that a hard-concrete gate is non-zero.
#[pyfunction]
fn p_open(log_alpha: f64) -> f64 {
    HardConcreteConfig::default().p_open(log_alpha)
}

/// DOT text for a circuit JSON document; `reference` may be
/// "gpt2-small-ioi" or reference-circuit JSON.
#[pyfunction]
#[pyo3(signature = (circuit_json, reference=None))]
fn circuit_to_dot(circuit_json: &str, reference: Option<&str>) -> PyResult<String> {
    let schema = io::circuit_schema(circuit_json).map_err(err)?;
    let circuit = io::circuit_from_json(circuit_json, &schema).map_err(err)?;
    let reference = match reference {
        None => None,
        Some("gpt2-small-ioi") => Some(ReferenceCircuit::gpt2_small_ioi()),
        Some(text) => Some(ReferenceCircuit::from_json(text).map_err(err)?),
    };
    io::circuit_to_dot(&circuit, &schema, reference.as_ref()).map_err(err)
}

#[pymodule]
fn hap_circuits(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Pairs>()?;
    m.add_class::<GraphSchema>()?;
    m.add_class::<Model>()?;
    m.add_class::<Discovery>()?;
    m.add_function(wrap_pyfunction!(generate_ioi, m)?)?;
    m.add_function(wrap_pyfunction!(vocab_size, m)?)?;
    m.add_function(wrap_pyfunction!(edge_count, m)?)?;
    m.add_function(wrap_pyfunction!(eap_scores, m)?)?;
    m.add_function(wrap_pyfunction!(run_eap, m)?)?;
    m.add_function(wrap_pyfunction!(run_ep, m)?)?;
    m.add_function(wrap_pyfunction!(run_hap, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(oracle_minimal_circuit, m)?)?;
    m.add_function(wrap_pyfunction!(kl_divergence, m)?)?;
    m.add_function(wrap_pyfunction!(gate, m)?)?;
    m.add_function(wrap_pyfunction!(p_open, m)?)?;
    m.add_function(wrap_pyfunction!(circuit_to_dot, m)?)?;
    Ok(())
}
