use std::io::BufReader;
use std::path::Path;

use serde::Serialize;

use hap_core::datagen::{read_jsonl, write_jsonl, GenerationOptions, IoiTask, PromptPair};
use hap_core::eap::{score_histogram, write_histogram_csv, write_scores_csv};
use hap_core::eval::{
    evaluate_circuit, oracle_best_at_size, oracle_minimal_circuit, Circuit, PreparedPairs, ReferenceCircuit, RunMetrics,
};
use hap_core::hap::{run_eap, run_ep, run_hap, DiscoveryOutcome, Splits, StageTiming};
use hap_core::io::{
    circuit_from_json, circuit_schema, circuit_to_dot, circuit_to_json, decode_weights, encode_mask_params,
};
use hap_core::model::{train_toy, train_toy_unchecked, Model, ModelConfig};
use hap_core::prune::write_trace_csv;

use crate::args::{Cli, Command};
use crate::config::{
    load, EvaluateConfig, ExportGraphConfig, GenIoiConfig, GraphFormat, Inputs, OracleConfig, RunEapConfig,
    RunEpConfig, RunHapConfig, Split, TrainToyConfig,
};
use crate::manifest::RunDir;
use crate::CliError;

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let name = cli.command.name();
    match &cli.command {
        Command::GenIoi(a) => {
            let c: GenIoiConfig = load(a.common.config.as_deref(), &a.overrides()?)?;
            gen_ioi(name, &c)
        }
        Command::TrainToy(a) => {
            let c: TrainToyConfig = load(a.common.config.as_deref(), &a.overrides()?)?;
            train(name, &c)
        }
        Command::RunEap(a) => {
            let c: RunEapConfig = load(a.common.config.as_deref(), &a.overrides()?)?;
            eap(name, &c)
        }
        Command::RunEp(a) => {
            let c: RunEpConfig = load(a.common.config.as_deref(), &a.overrides()?)?;
            ep(name, &c)
        }
        Command::RunHap(a) => {
            let c: RunHapConfig = load(a.common.config.as_deref(), &a.overrides()?)?;
            hap(name, &c)
        }
        Command::Evaluate(a) => {
            let c: EvaluateConfig = load(a.common.config.as_deref(), &a.overrides()?)?;
            evaluate(name, &c)
        }
        Command::Oracle(a) => {
            let c: OracleConfig = load(a.common.config.as_deref(), &a.overrides()?)?;
            oracle(name, &c)
        }
        Command::ExportGraph(a) => {
            let c: ExportGraphConfig = load(a.common.config.as_deref(), &a.overrides()?)?;
            export_graph(name, &c)
        }
    }
}

fn read_pairs(path: &Path) -> Result<Vec<PromptPair>, CliError> {
    let f = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    Ok(read_jsonl(BufReader::new(f))?)
}

fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn to_bytes(f: impl FnOnce(&mut Vec<u8>) -> hap_core::Result<()>) -> Result<Vec<u8>, CliError> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

/// Everything a discovery command reads, loaded and checked up front.
struct Loaded {
    model: Model,
    discover: Vec<PromptPair>,
    eval: Vec<PromptPair>,
    reference: Option<ReferenceCircuit>,
}

impl Loaded {
    fn new(inputs: &Inputs) -> Result<Self, CliError> {
        let model_path = inputs.model()?;
        let data = inputs.data()?;
        let reference = inputs.reference.as_ref().map(|r| r.load()).transpose()?;
        let bytes = std::fs::read(model_path).map_err(|e| CliError::io(model_path, e))?;
        let model = Model::new(decode_weights(&bytes)?)?;
        let discover = read_pairs(&data.join(inputs.discover_split.file_name()))?;
        let eval = if inputs.eval_split == inputs.discover_split {
            discover.clone()
        } else {
            read_pairs(&data.join(inputs.eval_split.file_name()))?
        };
        Ok(Self {
            model,
            discover,
            eval,
            reference,
        })
    }

    fn splits(&self) -> Splits<'_> {
        Splits {
            train: &self.discover,
            eval: &self.eval,
            reference: self.reference.as_ref(),
        }
    }
}

#[derive(Serialize)]
struct DiscoveryReport<'a> {
    metrics: &'a RunMetrics,
    discovery_s: f64,
    steps_to_threshold: Option<usize>,
    stages: &'a [StageTiming],
    kept: Option<usize>,
}

fn write_outcome(run: &mut RunDir, model: &Model, out: &DiscoveryOutcome) -> Result<(), CliError> {
    let schema = model.schema();
    run.write("circuit.json", circuit_to_json(&out.circuit, schema)?)?;
    run.write_json(
        "metrics.json",
        &DiscoveryReport {
            metrics: &out.metrics,
            discovery_s: out.discovery_s,
            steps_to_threshold: out.steps_to_threshold,
            stages: &out.stages,
            kept: out.kept.as_ref().map(Vec::len),
        },
    )?;
    if let Some(scores) = &out.scores {
        run.write("scores.csv", to_bytes(|b| write_scores_csv(b, schema, scores))?)?;
    }
    if !out.trace.is_empty() {
        run.write("trace.csv", to_bytes(|b| write_trace_csv(b, &out.trace))?)?;
    }
    if let Some(p) = &out.params {
        run.write("mask.ckpt", encode_mask_params(p, schema)?)?;
    }
    Ok(())
}

fn summary(name: &str, m: &RunMetrics) {
    println!(
        "{name}: kept {}/{} edges, sparsity {:.4}, kl {:.4}, logit diff {:.4}, task accuracy {:.3}{}",
        m.kept_edges,
        m.num_edges,
        m.sparsity,
        m.kl,
        m.logit_diff,
        m.task_accuracy,
        m.accuracy
            .map(|a| format!(", head accuracy {a:.3}"))
            .unwrap_or_default()
    );
}

fn gen_ioi(name: &str, c: &GenIoiConfig) -> Result<(), CliError> {
    let mut run = RunDir::create(&c.out_dir, name, c)?;
    let task = IoiTask::standard();
    let splits = task.generate_with(
        c.counts,
        c.seed,
        GenerationOptions {
            balance_orders: c.balance_orders,
        },
    )?;
    for (split, pairs) in [
        (Split::Train, &splits.train),
        (Split::Validation, &splits.validation),
        (Split::Test, &splits.test),
    ] {
        run.write(split.file_name(), to_bytes(|b| write_jsonl(b, pairs))?)?;
    }
    run.finish()?;
    println!(
        "{name}: wrote {} train, {} validation, {} test pairs to {}",
        splits.train.len(),
        splits.validation.len(),
        splits.test.len(),
        c.out_dir.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct TrainReport {
    val_accuracy: f64,
    initial_loss: f64,
    final_loss: f64,
    steps_run: usize,
    num_params: usize,
    num_edges: usize,
}

fn train(name: &str, c: &TrainToyConfig) -> Result<(), CliError> {
    let data = c
        .data
        .as_deref()
        .ok_or_else(|| CliError::Config("data: a dataset directory is required".into()))?;
    let vocab = IoiTask::standard().tokenizer().vocab_size();
    let mut config = ModelConfig::new(c.layers, c.heads, c.d_model, vocab, c.max_seq_len);
    config.linearized = c.linearized;
    config.validate()?;
    let mut run = RunDir::create(&c.out_dir, name, c)?;
    let train_pairs = read_pairs(&data.join(Split::Train.file_name()))?;
    let val_pairs = read_pairs(&data.join(Split::Validation.file_name()))?;
    let out = if c.allow_below_target {
        train_toy_unchecked(&config, &train_pairs, &val_pairs, &c.train)?
    } else {
        train_toy(&config, &train_pairs, &val_pairs, &c.train)?
    };
    run.write("toy.ckpt", hap_core::io::encode_weights(&out.weights)?)?;
    let mut trace = String::from("step,loss\n");
    for (i, l) in out.loss_trace.iter().enumerate() {
        trace.push_str(&format!("{},{l:e}\n", i + 1));
    }
    run.write("loss.csv", trace)?;
    let model = Model::new(out.weights)?;
    run.write_json(
        "train_metrics.json",
        &TrainReport {
            val_accuracy: out.val_accuracy,
            initial_loss: out.initial_loss,
            final_loss: out.final_loss,
            steps_run: out.steps_run,
            num_params: model.weights().num_params(),
            num_edges: model.schema().num_edges(),
        },
    )?;
    run.finish()?;
    println!(
        "{name}: validation accuracy {:.3}, answer loss {:.4} -> {:.4} after {} steps",
        out.val_accuracy, out.initial_loss, out.final_loss, out.steps_run
    );
    Ok(())
}

fn eap(name: &str, c: &RunEapConfig) -> Result<(), CliError> {
    c.eap.validate()?;
    if c.histogram_bins == 0 {
        return Err(CliError::Config("histogram_bins must be at least 1".into()));
    }
    let inputs = Loaded::new(&c.inputs)?;
    let mut run = RunDir::create(&c.out_dir, name, c)?;
    let out = run_eap(&inputs.model, &inputs.splits(), &c.eap)?;
    write_outcome(&mut run, &inputs.model, &out)?;
    if let Some(scores) = &out.scores {
        let (edges, counts) = score_histogram(&scores.scores, c.histogram_bins)?;
        run.write("histogram.csv", to_bytes(|b| write_histogram_csv(b, &edges, &counts))?)?;
    }
    run.finish()?;
    summary(name, &out.metrics);
    Ok(())
}

fn ep(name: &str, c: &RunEpConfig) -> Result<(), CliError> {
    c.prune.validate()?;
    if !c.init_log_alpha.is_finite() {
        return Err(CliError::Config("init_log_alpha must be finite".into()));
    }
    let inputs = Loaded::new(&c.inputs)?;
    let mut run = RunDir::create(&c.out_dir, name, c)?;
    let out = run_ep(&inputs.model, &inputs.splits(), &c.prune, Some(c.init_log_alpha))?;
    write_outcome(&mut run, &inputs.model, &out)?;
    run.finish()?;
    summary(name, &out.metrics);
    Ok(())
}

fn hap(name: &str, c: &RunHapConfig) -> Result<(), CliError> {
    c.hap.validate()?;
    let inputs = Loaded::new(&c.inputs)?;
    let mut run = RunDir::create(&c.out_dir, name, c)?;
    let out = run_hap(&inputs.model, &inputs.splits(), &c.hap)?;
    write_outcome(&mut run, &inputs.model, &out)?;
    if let Some(kept) = &out.kept {
        run.write_json("kept.json", kept)?;
    }
    run.finish()?;
    summary(name, &out.metrics);
    Ok(())
}

fn evaluate(name: &str, c: &EvaluateConfig) -> Result<(), CliError> {
    let circuit_path = c
        .circuit
        .as_deref()
        .ok_or_else(|| CliError::Config("circuit: a circuit JSON file is required".into()))?;
    let inputs = Loaded::new(&c.inputs)?;
    let circuit = circuit_from_json(&read_text(circuit_path)?, inputs.model.schema())?;
    let mut run = RunDir::create(&c.out_dir, name, c)?;
    let data = PreparedPairs::new(&inputs.model, &inputs.eval, None)?;
    let metrics = evaluate_circuit(&inputs.model, &data, &circuit, inputs.reference.as_ref(), 0.0)?;
    run.write_json("metrics.json", &metrics)?;
    run.finish()?;
    summary(name, &metrics);
    Ok(())
}

#[derive(Serialize)]
struct OracleReport {
    kl: f64,
    satisfied: bool,
    masks_evaluated: usize,
    kept_edges: usize,
    num_edges: usize,
}

fn oracle(name: &str, c: &OracleConfig) -> Result<(), CliError> {
    match (c.tolerance, c.size) {
        (Some(t), None) if !t.is_nan() => {}
        (None, Some(_)) => {}
        _ => {
            return Err(CliError::Config(
                "oracle needs exactly one of tolerance (a number) or size".into(),
            ))
        }
    }
    let inputs = Loaded::new(&c.inputs)?;
    let mut run = RunDir::create(&c.out_dir, name, c)?;
    let data = PreparedPairs::new(&inputs.model, &inputs.discover, None)?;
    let found = match (c.tolerance, c.size) {
        (_, Some(k)) => oracle_best_at_size(&inputs.model, &data, k)?,
        (Some(t), _) => oracle_minimal_circuit(&inputs.model, &data, t)?,
        _ => unreachable!("checked above"),
    };
    run.write("circuit.json", circuit_to_json(&found.circuit, inputs.model.schema())?)?;
    let report = OracleReport {
        kl: found.kl,
        satisfied: found.satisfied,
        masks_evaluated: found.masks_evaluated,
        kept_edges: found.circuit.len(),
        num_edges: inputs.model.schema().num_edges(),
    };
    run.write_json("oracle.json", &report)?;
    run.finish()?;
    println!(
        "{name}: {} of {} edges, kl {:.6}, {} masks evaluated{}",
        report.kept_edges,
        report.num_edges,
        report.kl,
        report.masks_evaluated,
        if report.satisfied { "" } else { ", tolerance not met" }
    );
    Ok(())
}

fn export_graph(name: &str, c: &ExportGraphConfig) -> Result<(), CliError> {
    let circuit_path = c
        .circuit
        .as_deref()
        .ok_or_else(|| CliError::Config("circuit: a circuit JSON file is required".into()))?;
    let reference = c.reference.as_ref().map(|r| r.load()).transpose()?;
    let text = read_text(circuit_path)?;
    let schema = circuit_schema(&text)?;
    let circuit: Circuit = circuit_from_json(&text, &schema)?;
    let mut run = RunDir::create(&c.out_dir, name, c)?;
    let file = match c.format {
        GraphFormat::Dot => run.write("circuit.dot", circuit_to_dot(&circuit, &schema, reference.as_ref())?)?,
        GraphFormat::Json => run.write("graph.json", circuit_to_json(&circuit, &schema)?)?,
    };
    run.finish()?;
    println!("{name}: {} edges written to {}", circuit.len(), file.display());
    Ok(())
}
