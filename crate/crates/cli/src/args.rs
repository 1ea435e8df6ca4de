use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use crate::config::{parse_set, Override, ReferenceSource};
use crate::CliError;

#[derive(Debug, Parser)]
#[command(name = "hap", version, about = "Circuit discovery on the toy IOI transformer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate clean/corrupt IOI prompt pairs as JSONL splits.
    GenIoi(GenIoiArgs),
    /// Train the toy transformer on a generated dataset.
    TrainToy(TrainToyArgs),
    /// Edge attribution patching with top-k/fraction/threshold selection.
    RunEap(RunEapArgs),
    /// Edge pruning from a uniform gate initialization.
    RunEp(RunEpArgs),
    /// Attribution-seeded edge pruning.
    RunHap(RunHapArgs),
    /// Score a saved circuit.
    Evaluate(EvaluateArgs),
    /// Exhaustive search over all circuits of a micro-model.
    Oracle(OracleArgs),
    /// Export a circuit as DOT or canonical JSON.
    ExportGraph(ExportGraphArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenIoi(_) => "gen-ioi",
            Command::TrainToy(_) => "train-toy",
            Command::RunEap(_) => "run-eap",
            Command::RunEp(_) => "run-ep",
            Command::RunHap(_) => "run-hap",
            Command::Evaluate(_) => "evaluate",
            Command::Oracle(_) => "oracle",
            Command::ExportGraph(_) => "export-graph",
        }
    }
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON config file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory every output is written under.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Override any config key, e.g. `--set prune.dual_step=0.5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

/// Accumulates overrides in order: named flags, then `--set`.
struct Overrides(Vec<Override>);

impl Overrides {
    fn new(common: &Common) -> Self {
        let mut o = Overrides(Vec::new());
        o.path("out_dir", &common.out_dir);
        o
    }

    fn put<T: serde::Serialize>(&mut self, key: &str, value: &Option<T>) {
        if let Some(v) = value {
            self.0.push((key.to_string(), json!(v)));
        }
    }

    fn path(&mut self, key: &str, value: &Option<PathBuf>) {
        if let Some(p) = value {
            self.0.push((key.to_string(), Value::String(p.display().to_string())));
        }
    }

    fn flag(&mut self, key: &str, on: bool) {
        if on {
            self.0.push((key.to_string(), Value::Bool(true)));
        }
    }

    fn finish(mut self, common: &Common) -> Result<Vec<Override>, CliError> {
        for s in &common.set {
            self.0.push(parse_set(s)?);
        }
        Ok(self.0)
    }
}

fn reference_value(raw: &str) -> Value {
    serde_json::to_value(ReferenceSource::parse(raw)).expect("reference source serializes")
}

#[derive(Debug, Args)]
pub struct InputArgs {
    /// Weights checkpoint written by `train-toy`.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Dataset directory written by `gen-ioi`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Split to discover on: train, validation or test.
    #[arg(long)]
    pub discover_split: Option<String>,
    /// Split to evaluate on.
    #[arg(long)]
    pub eval_split: Option<String>,
    /// `gpt2-small-ioi` or a reference circuit JSON file.
    #[arg(long)]
    pub reference: Option<String>,
}

impl InputArgs {
    fn apply(&self, o: &mut Overrides) {
        o.path("inputs.model", &self.model);
        o.path("inputs.data", &self.data);
        o.put("inputs.discover_split", &self.discover_split);
        o.put("inputs.eval_split", &self.eval_split);
        if let Some(r) = &self.reference {
            o.0.push(("inputs.reference".into(), reference_value(r)));
        }
    }
}

#[derive(Debug, Args)]
pub struct GenIoiArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub train: Option<usize>,
    #[arg(long)]
    pub val: Option<usize>,
    #[arg(long)]
    pub test: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Alternate BABA and ABBA templates.
    #[arg(long)]
    pub balance_orders: bool,
}

#[derive(Debug, Args)]
pub struct TrainToyArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub allow_below_target: bool,
}

#[derive(Debug, Args)]
pub struct RunEapArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub inputs: InputArgs,
    /// Keep exactly this many edges.
    #[arg(long, conflicts_with = "top_fraction")]
    pub top_k: Option<usize>,
    /// Keep this fraction of all edges.
    #[arg(long)]
    pub top_fraction: Option<f64>,
}

/// Optimizer flags shared by `run-ep` and `run-hap`.
#[derive(Debug, Args)]
pub struct PruneArgs {
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub target_sparsity: Option<f64>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

impl PruneArgs {
    fn apply(&self, o: &mut Overrides, prefix: &str) {
        o.put(&format!("{prefix}steps"), &self.steps);
        o.put(&format!("{prefix}seed"), &self.seed);
        o.put(&format!("{prefix}target_sparsity"), &self.target_sparsity);
        o.put(&format!("{prefix}learning_rate"), &self.learning_rate);
        o.put(&format!("{prefix}batch_size"), &self.batch_size);
    }
}

#[derive(Debug, Args)]
pub struct RunEpArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub inputs: InputArgs,
    #[command(flatten)]
    pub prune: PruneArgs,
}

#[derive(Debug, Args)]
pub struct RunHapArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub inputs: InputArgs,
    #[command(flatten)]
    pub prune: PruneArgs,
    /// Fraction of edges the attribution stage keeps trainable.
    #[arg(long)]
    pub keep_fraction: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub inputs: InputArgs,
    #[arg(long)]
    pub circuit: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub inputs: InputArgs,
    /// KL tolerance of the minimal circuit.
    #[arg(long, conflicts_with = "size")]
    pub tolerance: Option<f64>,
    /// Find the best circuit with exactly this many edges.
    #[arg(long)]
    pub size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ExportGraphArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub circuit: Option<PathBuf>,
    /// dot or json.
    #[arg(long)]
    pub format: Option<String>,
    /// `gpt2-small-ioi` or a reference circuit JSON file.
    #[arg(long)]
    pub reference: Option<String>,
}

impl GenIoiArgs {
    pub fn overrides(&self) -> Result<Vec<Override>, CliError> {
        let mut o = Overrides::new(&self.common);
        o.put("counts.train", &self.train);
        o.put("counts.validation", &self.val);
        o.put("counts.test", &self.test);
        o.put("seed", &self.seed);
        o.flag("balance_orders", self.balance_orders);
        o.finish(&self.common)
    }
}

impl TrainToyArgs {
    pub fn overrides(&self) -> Result<Vec<Override>, CliError> {
        let mut o = Overrides::new(&self.common);
        o.path("data", &self.data);
        o.put("layers", &self.layers);
        o.put("heads", &self.heads);
        o.put("d_model", &self.d_model);
        o.put("train.steps", &self.steps);
        o.put("train.seed", &self.seed);
        o.flag("allow_below_target", self.allow_below_target);
        o.finish(&self.common)
    }
}

impl RunEapArgs {
    pub fn overrides(&self) -> Result<Vec<Override>, CliError> {
        let mut o = Overrides::new(&self.common);
        self.inputs.apply(&mut o);
        if let Some(k) = self.top_k {
            o.0.push(("eap.selection".into(), json!({"top-k": k})));
        }
        if let Some(f) = self.top_fraction {
            o.0.push(("eap.selection".into(), json!({"top-fraction": f})));
        }
        o.finish(&self.common)
    }
}

impl RunEpArgs {
    pub fn overrides(&self) -> Result<Vec<Override>, CliError> {
        let mut o = Overrides::new(&self.common);
        self.inputs.apply(&mut o);
        self.prune.apply(&mut o, "prune.");
        o.finish(&self.common)
    }
}

impl RunHapArgs {
    pub fn overrides(&self) -> Result<Vec<Override>, CliError> {
        let mut o = Overrides::new(&self.common);
        self.inputs.apply(&mut o);
        self.prune.apply(&mut o, "hap.prune.");
        if let Some(f) = self.keep_fraction {
            o.0.push(("hap.eap.selection".into(), json!({"top-fraction": f})));
        }
        o.finish(&self.common)
    }
}

impl EvaluateArgs {
    pub fn overrides(&self) -> Result<Vec<Override>, CliError> {
        let mut o = Overrides::new(&self.common);
        self.inputs.apply(&mut o);
        o.path("circuit", &self.circuit);
        o.finish(&self.common)
    }
}

impl OracleArgs {
    pub fn overrides(&self) -> Result<Vec<Override>, CliError> {
        let mut o = Overrides::new(&self.common);
        self.inputs.apply(&mut o);
        if let Some(t) = self.tolerance {
            o.0.push(("tolerance".into(), json!(t)));
        }
        if let Some(k) = self.size {
            o.0.push(("size".into(), json!(k)));
            o.0.push(("tolerance".into(), Value::Null));
        }
        o.finish(&self.common)
    }
}

impl ExportGraphArgs {
    pub fn overrides(&self) -> Result<Vec<Override>, CliError> {
        let mut o = Overrides::new(&self.common);
        o.path("circuit", &self.circuit);
        o.put("format", &self.format);
        if let Some(r) = &self.reference {
            o.0.push(("reference".into(), reference_value(r)));
        }
        o.finish(&self.common)
    }
}
