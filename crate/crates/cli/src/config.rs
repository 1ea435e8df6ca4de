//! Run configurations. Each subcommand reads an optional JSON file, applies
//! flag overrides on top, and only then deserializes with unknown keys
//! rejected.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use hap_core::datagen::SplitCounts;
use hap_core::eap::EapConfig;
use hap_core::eval::ReferenceCircuit;
use hap_core::hap::HapConfig;
use hap_core::model::TrainConfig;
use hap_core::prune::{PruneConfig, DEFAULT_INIT_LOG_ALPHA};

use crate::CliError;

/// Dotted key path and the JSON value to write there.
pub type Override = (String, Value);

/// Read `path` (if any) as a JSON object, apply `overrides`, deserialize.
pub fn load<T: DeserializeOwned>(path: Option<&Path>, overrides: &[Override]) -> Result<T, CliError> {
    let mut root = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => Value::Object(Map::new()),
    };
    for (key, value) in overrides {
        set_path(&mut root, key, value.clone())?;
    }
    serde_json::from_value(root).map_err(|e| CliError::Config(e.to_string()))
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<(), CliError> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| CliError::Config(format!("{key}: {} is not an object", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    unreachable!("split yields at least one part")
}

/// Parse `key=value` from `--set`; the value is JSON, or a bare string.
pub fn parse_set(raw: &str) -> Result<Override, CliError> {
    let (k, v) = raw
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("--set expects key=value, got {raw:?}")))?;
    if k.is_empty() {
        return Err(CliError::Config(format!("--set has an empty key in {raw:?}")));
    }
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.to_string(), value))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    #[default]
    Validation,
    Test,
}

impl Split {
    pub fn file_name(self) -> &'static str {
        match self {
            Split::Train => "train.jsonl",
            Split::Validation => "validation.jsonl",
            Split::Test => "test.jsonl",
        }
    }
}

/// Where a reference circuit comes from: the bundled one, or a JSON file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReferenceSource {
    Gpt2SmallIoi,
    File(PathBuf),
}

impl ReferenceSource {
    pub fn parse(raw: &str) -> Self {
        if raw == "gpt2-small-ioi" {
            ReferenceSource::Gpt2SmallIoi
        } else {
            ReferenceSource::File(PathBuf::from(raw))
        }
    }

    pub fn load(&self) -> Result<ReferenceCircuit, CliError> {
        match self {
            ReferenceSource::Gpt2SmallIoi => Ok(ReferenceCircuit::gpt2_small_ioi()),
            ReferenceSource::File(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                Ok(ReferenceCircuit::from_json(&text)?)
            }
        }
    }
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenIoiConfig {
    pub out_dir: PathBuf,
    pub seed: u64,
    pub counts: SplitCounts,
    pub balance_orders: bool,
}

impl Default for GenIoiConfig {
    fn default() -> Self {
        Self {
            out_dir: default_out(),
            seed: 0,
            counts: SplitCounts::default(),
            balance_orders: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainToyConfig {
    pub out_dir: PathBuf,
    /// Directory holding `train.jsonl` and `validation.jsonl`.
    pub data: Option<PathBuf>,
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub max_seq_len: usize,
    pub linearized: bool,
    /// Keep the checkpoint even when validation accuracy misses the target.
    pub allow_below_target: bool,
    pub train: TrainConfig,
}

impl Default for TrainToyConfig {
    fn default() -> Self {
        Self {
            out_dir: default_out(),
            data: None,
            layers: 4,
            heads: 4,
            d_model: 64,
            max_seq_len: 32,
            linearized: false,
            allow_below_target: false,
            train: TrainConfig::default(),
        }
    }
}

/// Model, dataset and evaluation split shared by the discovery commands.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Inputs {
    pub model: Option<PathBuf>,
    pub data: Option<PathBuf>,
    /// Split the circuit is discovered on.
    pub discover_split: Split,
    pub eval_split: Split,
    pub reference: Option<ReferenceSource>,
}

impl Default for Inputs {
    fn default() -> Self {
        Self {
            model: None,
            data: None,
            discover_split: Split::Train,
            eval_split: Split::Validation,
            reference: None,
        }
    }
}

impl Inputs {
    pub fn model(&self) -> Result<&Path, CliError> {
        self.model
            .as_deref()
            .ok_or_else(|| CliError::Config("model: a weights checkpoint is required".into()))
    }

    pub fn data(&self) -> Result<&Path, CliError> {
        self.data
            .as_deref()
            .ok_or_else(|| CliError::Config("data: a dataset directory is required".into()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunEapConfig {
    pub out_dir: PathBuf,
    pub inputs: Inputs,
    pub eap: EapConfig,
    pub histogram_bins: usize,
}

impl Default for RunEapConfig {
    fn default() -> Self {
        Self {
            out_dir: default_out(),
            inputs: Inputs::default(),
            eap: EapConfig::default(),
            histogram_bins: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunEpConfig {
    pub out_dir: PathBuf,
    pub inputs: Inputs,
    pub init_log_alpha: f64,
    pub prune: PruneConfig,
}

impl Default for RunEpConfig {
    fn default() -> Self {
        Self {
            out_dir: default_out(),
            inputs: Inputs::default(),
            init_log_alpha: DEFAULT_INIT_LOG_ALPHA,
            prune: PruneConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunHapConfig {
    pub out_dir: PathBuf,
    pub inputs: Inputs,
    pub hap: HapConfig,
}

impl Default for RunHapConfig {
    fn default() -> Self {
        Self {
            out_dir: default_out(),
            inputs: Inputs::default(),
            hap: HapConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateConfig {
    pub out_dir: PathBuf,
    pub inputs: Inputs,
    pub circuit: Option<PathBuf>,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            out_dir: default_out(),
            inputs: Inputs::default(),
            circuit: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    pub out_dir: PathBuf,
    pub inputs: Inputs,
    /// KL tolerance for the minimal circuit search.
    pub tolerance: Option<f64>,
    /// Search the best circuit of exactly this many edges instead.
    pub size: Option<usize>,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            out_dir: default_out(),
            inputs: Inputs::default(),
            tolerance: Some(0.05),
            size: None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GraphFormat {
    #[default]
    Dot,
    Json,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExportGraphConfig {
    pub out_dir: PathBuf,
    pub circuit: Option<PathBuf>,
    pub format: GraphFormat,
    pub reference: Option<ReferenceSource>,
}

impl Default for ExportGraphConfig {
    fn default() -> Self {
        Self {
            out_dir: default_out(),
            circuit: None,
            format: GraphFormat::Dot,
            reference: None,
        }
    }
}
