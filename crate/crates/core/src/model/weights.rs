use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Array;
use crate::error::{Error, Result};

/// Shape of a pre-layernorm transformer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f64,
    /// Replace every nonlinearity by the identity: layernorms and GELU become
    /// pass-throughs and attention patterns are the raw causally-masked scores.
    #[serde(default)]
    pub linearized: bool,
}

fn default_ln_eps() -> f64 {
    1e-5
}

impl ModelConfig {
    /// Config with `d_mlp = 4 * d_model` and the default layernorm epsilon.
    pub fn new(layers: usize, heads: usize, d_model: usize, vocab_size: usize, max_seq_len: usize) -> Self {
        Self {
            layers,
            heads,
            d_model,
            d_mlp: 4 * d_model,
            vocab_size,
            max_seq_len,
            ln_eps: default_ln_eps(),
            linearized: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("layers", self.layers),
            ("heads", self.heads),
            ("d_model", self.d_model),
            ("d_mlp", self.d_mlp),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::Config("ln_eps must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

/// Per-layer parameters; attention projections are stored per head.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub ln1_gain: T,
    pub ln1_bias: T,
    pub w_q: Vec<T>,
    pub w_k: Vec<T>,
    pub w_v: Vec<T>,
    pub w_o: Vec<T>,
    pub ln2_gain: T,
    pub ln2_bias: T,
    pub mlp_in: T,
    pub mlp_in_bias: T,
    pub mlp_out: T,
    pub mlp_out_bias: T,
}

/// All model parameters, generic over the storage so the same layout holds
/// arrays or tape handles.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    pub token_embed: T,
    pub pos_embed: T,
    pub layers: Vec<LayerParams<T>>,
    pub lnf_gain: T,
    pub lnf_bias: T,
    pub unembed: T,
}

impl<T> ParamSet<T> {
    /// Named entries in a fixed order shared with [`ParamSet::try_map`].
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = vec![
            ("token_embed".to_string(), &self.token_embed),
            ("pos_embed".to_string(), &self.pos_embed),
        ];
        for (l, p) in self.layers.iter().enumerate() {
            out.push((format!("layers.{l}.ln1_gain"), &p.ln1_gain));
            out.push((format!("layers.{l}.ln1_bias"), &p.ln1_bias));
            for (name, group) in [("w_q", &p.w_q), ("w_k", &p.w_k), ("w_v", &p.w_v), ("w_o", &p.w_o)] {
                for (h, t) in group.iter().enumerate() {
                    out.push((format!("layers.{l}.{name}.{h}"), t));
                }
            }
            out.push((format!("layers.{l}.ln2_gain"), &p.ln2_gain));
            out.push((format!("layers.{l}.ln2_bias"), &p.ln2_bias));
            out.push((format!("layers.{l}.mlp_in"), &p.mlp_in));
            out.push((format!("layers.{l}.mlp_in_bias"), &p.mlp_in_bias));
            out.push((format!("layers.{l}.mlp_out"), &p.mlp_out));
            out.push((format!("layers.{l}.mlp_out_bias"), &p.mlp_out_bias));
        }
        out.push(("lnf_gain".to_string(), &self.lnf_gain));
        out.push(("lnf_bias".to_string(), &self.lnf_bias));
        out.push(("unembed".to_string(), &self.unembed));
        out
    }

    pub fn try_map<U, E>(
        &self,
        mut f: impl FnMut(&T) -> std::result::Result<U, E>,
    ) -> std::result::Result<ParamSet<U>, E> {
        let token_embed = f(&self.token_embed)?;
        let pos_embed = f(&self.pos_embed)?;
        let mut layers = Vec::with_capacity(self.layers.len());
        for p in &self.layers {
            let ln1_gain = f(&p.ln1_gain)?;
            let ln1_bias = f(&p.ln1_bias)?;
            let w_q = p.w_q.iter().map(&mut f).collect::<std::result::Result<_, _>>()?;
            let w_k = p.w_k.iter().map(&mut f).collect::<std::result::Result<_, _>>()?;
            let w_v = p.w_v.iter().map(&mut f).collect::<std::result::Result<_, _>>()?;
            let w_o = p.w_o.iter().map(&mut f).collect::<std::result::Result<_, _>>()?;
            layers.push(LayerParams {
                ln1_gain,
                ln1_bias,
                w_q,
                w_k,
                w_v,
                w_o,
                ln2_gain: f(&p.ln2_gain)?,
                ln2_bias: f(&p.ln2_bias)?,
                mlp_in: f(&p.mlp_in)?,
                mlp_in_bias: f(&p.mlp_in_bias)?,
                mlp_out: f(&p.mlp_out)?,
                mlp_out_bias: f(&p.mlp_out_bias)?,
            });
        }
        Ok(ParamSet {
            token_embed,
            pos_embed,
            layers,
            lnf_gain: f(&self.lnf_gain)?,
            lnf_bias: f(&self.lnf_bias)?,
            unembed: f(&self.unembed)?,
        })
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> ParamSet<U> {
        self.try_map(|t| Ok::<U, std::convert::Infallible>(f(t)))
            .unwrap_or_else(|e| match e {})
    }

    pub fn values(&self) -> Vec<&T> {
        self.named().into_iter().map(|(_, t)| t).collect()
    }

    /// Mutable entries in [`ParamSet::named`] order.
    pub fn values_mut(&mut self) -> Vec<&mut T> {
        let mut out = vec![&mut self.token_embed, &mut self.pos_embed];
        for l in &mut self.layers {
            out.push(&mut l.ln1_gain);
            out.push(&mut l.ln1_bias);
            out.extend(l.w_q.iter_mut());
            out.extend(l.w_k.iter_mut());
            out.extend(l.w_v.iter_mut());
            out.extend(l.w_o.iter_mut());
            out.push(&mut l.ln2_gain);
            out.push(&mut l.ln2_bias);
            out.push(&mut l.mlp_in);
            out.push(&mut l.mlp_in_bias);
            out.push(&mut l.mlp_out);
            out.push(&mut l.mlp_out_bias);
        }
        out.push(&mut self.lnf_gain);
        out.push(&mut self.lnf_bias);
        out.push(&mut self.unembed);
        out
    }
}

/// Expected shapes for every parameter of `config`, in [`ParamSet::named`] order.
pub fn param_shapes(config: &ModelConfig) -> ParamSet<Vec<usize>> {
    let (d, m, dh) = (config.d_model, config.d_mlp, config.head_dim());
    let per_head = |shape: Vec<usize>| vec![shape; config.heads];
    ParamSet {
        token_embed: vec![config.vocab_size, d],
        pos_embed: vec![config.max_seq_len, d],
        layers: (0..config.layers)
            .map(|_| LayerParams {
                ln1_gain: vec![d],
                ln1_bias: vec![d],
                w_q: per_head(vec![d, dh]),
                w_k: per_head(vec![d, dh]),
                w_v: per_head(vec![d, dh]),
                w_o: per_head(vec![dh, d]),
                ln2_gain: vec![d],
                ln2_bias: vec![d],
                mlp_in: vec![d, m],
                mlp_in_bias: vec![m],
                mlp_out: vec![m, d],
                mlp_out_bias: vec![d],
            })
            .collect(),
        lnf_gain: vec![d],
        lnf_bias: vec![d],
        unembed: vec![d, config.vocab_size],
    }
}

/// Concrete parameters with their config.
#[derive(Clone, Debug, PartialEq)]
pub struct Weights {
    pub config: ModelConfig,
    pub params: ParamSet<Array>,
}

impl Weights {
    /// GPT-2 style initialization: N(0, std) matrices, residual output
    /// projections scaled by `1/sqrt(2L)`, unit layernorm gains, zero biases.
    pub fn init(config: &ModelConfig, seed: u64, std: f64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let out_scale = 1.0 / ((2 * config.layers) as f64).sqrt();
        let shapes = param_shapes(config);
        let names = shapes.named();
        let mut i = 0;
        let params = shapes.try_map(|shape| -> Result<Array> {
            let name = &names[i].0;
            i += 1;
            let n: usize = shape.iter().product();
            let data = if name.ends_with("_gain") {
                vec![1.0; n]
            } else if name.ends_with("_bias") {
                vec![0.0; n]
            } else {
                let scale = if name.contains(".w_o.") || name.ends_with("mlp_out") {
                    out_scale
                } else {
                    1.0
                };
                (0..n).map(|_| scale * normal.sample(&mut rng)).collect()
            };
            Array::new(shape.clone(), data)
        })?;
        Ok(Self {
            config: config.clone(),
            params,
        })
    }

    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config: config.clone(),
            params: param_shapes(config).map(|s| Array::zeros(s)),
        })
    }

    /// Check every tensor's shape against the config and that all entries are finite.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let want = param_shapes(&self.config);
        for ((name, shape), arr) in want.named().into_iter().zip(self.params.values()) {
            if arr.shape() != shape.as_slice() {
                return Err(Error::Config(format!(
                    "{name} has shape {:?}, expected {shape:?}",
                    arr.shape()
                )));
            }
            if !arr.all_finite() {
                return Err(Error::Config(format!("{name} has non-finite entries")));
            }
        }
        Ok(())
    }

    /// Build from `(name, array)` pairs as produced by [`ParamSet::named`].
    pub fn from_named(config: &ModelConfig, mut tensors: std::collections::HashMap<String, Array>) -> Result<Self> {
        config.validate()?;
        let shapes = param_shapes(config);
        let names: Vec<String> = shapes.named().into_iter().map(|(n, _)| n).collect();
        let mut i = 0;
        let params = shapes.try_map(|_| -> Result<Array> {
            let name = &names[i];
            i += 1;
            tensors
                .remove(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
        })?;
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
        }
        let w = Self {
            config: config.clone(),
            params,
        };
        w.validate()?;
        Ok(w)
    }

    /// Every entry rounded through `f32`.
    pub fn narrowed_to_f32(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.map(|a| a.map(|v| v as f32 as f64)),
        }
    }

    pub fn num_params(&self) -> usize {
        self.params.values().iter().map(|a| a.len()).sum()
    }
}
