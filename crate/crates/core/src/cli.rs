//! Command-line front end. `run` parses arguments, executes one command and
//! returns the process exit status.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::{Map, Value};

use crate::config::Config;
use crate::data::{parse_dataset, Conversation, Dataset, Triplet};
use crate::error::{Error, Result};
use crate::graph::HeteroGraph;
use crate::metrics::{triplet_f1, MetricsReport};
use crate::model::loss_grad_check;
use crate::synth::{generate_splits, SynthConfig};
use crate::trainer::{evaluate, train_with, Checkpoint, EpochLog};

#[derive(Debug, Parser)]
#[command(name = "m3hg", version, about = "Emotion-cause triplet extraction over multimodal conversation graphs")]
pub struct Cli {
    /// JSON config file with nested or flat dotted keys.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Override one setting, e.g. `--set model.k=2`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a seeded synthetic corpus as train/val/test JSON Lines files.
    GenSynth(GenSynthArgs),
    /// Train a model and write the best checkpoint plus a JSON Lines log.
    Train(TrainArgs),
    /// Score a checkpoint or a prediction file against gold labels.
    Eval(EvalArgs),
    /// Write predicted triplets as JSON Lines.
    Predict(PredictArgs),
    /// Dump the graph built for one conversation as JSON.
    Graph(GraphArgs),
    /// Compare analytic and finite-difference gradients of the training loss.
    Gradcheck(GradcheckArgs),
    /// Train and evaluate once per context window size K.
    SweepK(SweepKArgs),
    /// Show the effective configuration.
    Config(ConfigArgs),
}

#[derive(Debug, Args)]
pub struct GenSynthArgs {
    /// Output directory; receives train.jsonl, val.jsonl and test.jsonl.
    #[arg(long)]
    pub out: PathBuf,
    /// Conversations per split as TRAIN,VAL,TEST.
    #[arg(long, default_value = "600,100,100", value_delimiter = ',')]
    pub sizes: Vec<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Amplitude of the planted code vectors.
    #[arg(long)]
    pub signal: Option<f64>,
    /// Standard deviation of the feature noise.
    #[arg(long)]
    pub noise: Option<f64>,
    /// Probability that an utterance carries an emotion.
    #[arg(long)]
    pub emotion_rate: Option<f64>,
    /// JSON file with generator settings; flags take precedence.
    #[arg(long, value_name = "FILE")]
    pub synth_config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_name = "FILE")]
    pub train: PathBuf,
    /// Validation split used to select the best epoch.
    #[arg(long, value_name = "FILE")]
    pub val: PathBuf,
    /// Checkpoint directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Training log path (default: OUT/train_log.jsonl).
    #[arg(long, value_name = "FILE")]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Suppress per-epoch progress on stderr.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Gold dataset.
    #[arg(long, value_name = "FILE")]
    pub data: PathBuf,
    /// Checkpoint to run on the gold features.
    #[arg(long, value_name = "DIR", conflicts_with = "pred", required_unless_present = "pred")]
    pub checkpoint: Option<PathBuf>,
    /// Prediction file in the `predict` output format.
    #[arg(long, value_name = "FILE")]
    pub pred: Option<PathBuf>,
    /// Emit JSON instead of a table.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Checkpoint directory written by `train`.
    #[arg(long, value_name = "DIR")]
    pub checkpoint: PathBuf,
    /// Conversations to label; gold labels are ignored.
    #[arg(long, value_name = "FILE")]
    pub data: PathBuf,
    /// Output file (default: stdout).
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
    /// Include node- and path-level attention weights of every fusion layer.
    #[arg(long)]
    pub dump_attention: bool,
}

#[derive(Debug, Args)]
pub struct GraphArgs {
    #[arg(long, value_name = "FILE")]
    pub data: PathBuf,
    /// Conversation id.
    #[arg(long)]
    pub conv: String,
    /// Same-speaker predecessors per utterance.
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Random parameter coordinates per check.
    #[arg(long, default_value_t = 50)]
    pub coords: usize,
    /// Utterances in the probe conversation.
    #[arg(long, default_value_t = 4)]
    pub utterances: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub h: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
}

#[derive(Debug, Args)]
pub struct SweepKArgs {
    #[arg(long, value_name = "FILE")]
    pub train: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub val: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub test: PathBuf,
    #[arg(long, default_value = "1,2,3,4,5", value_delimiter = ',')]
    pub k_values: Vec<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Print every setting as flat dotted keys.
    #[arg(long)]
    pub dump: bool,
}

/// Parses `args` (program name first), runs the command and returns the
/// exit status. Normal output goes to `out`; diagnostics to stderr.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return e.exit_code();
    }
    match execute(&cli, out) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("M3HG_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| Error::Config(format!("M3HG_THREADS must be a positive integer, got `{raw}`")))?;
    // A pool may already exist when `run` is called twice in one process.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn context(what: impl std::fmt::Display) -> impl FnOnce(Error) -> Error {
    move |e| match e {
        Error::Config(m) => Error::Config(format!("{what}: {m}")),
        Error::Validation(m) => Error::Validation(format!("{what}: {m}")),
        Error::Input(m) => Error::Input(format!("{what}: {m}")),
        Error::Numeric(m) => Error::Numeric(format!("{what}: {m}")),
        other => other,
    }
}

/// Defaults, then the config file, then `--set` overrides.
fn load_config(cli: &Cli) -> Result<Config> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p).map_err(context(format!("config file {}", p.display())))?,
        None => Config::default(),
    };
    for o in &cli.overrides {
        cfg = cfg.apply_override(o)?;
    }
    Ok(cfg)
}

fn set(cfg: Config, key: &str, value: Option<Value>) -> Result<Config> {
    match value {
        None => Ok(cfg),
        Some(v) => {
            let mut m = Map::new();
            m.insert(key.into(), v);
            cfg.apply_flat(&m)
        }
    }
}

fn load_data(path: &Path, cfg: &Config) -> Result<Dataset> {
    parse_dataset(path, Some(&cfg.model.feature_dims())).map_err(context(format!("dataset {}", path.display())))
}

fn write_err(e: std::io::Error) -> Error {
    Error::io("<output>", e)
}

fn execute(cli: &Cli, out: &mut dyn Write) -> Result<i32> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::GenSynth(a) => gen_synth(a, &cfg, out),
        Command::Train(a) => train_cmd(a, cfg, out),
        Command::Eval(a) => eval_cmd(a, out),
        Command::Predict(a) => predict_cmd(a, out),
        Command::Graph(a) => graph_cmd(a, &cfg, out),
        Command::Gradcheck(a) => gradcheck_cmd(a, &cfg, out),
        Command::SweepK(a) => sweep_k(a, cfg, out),
        Command::Config(a) => {
            if a.dump {
                writeln!(out, "{}", serde_json::to_string_pretty(&Value::Object(cfg.to_flat()))?).map_err(write_err)?;
            } else {
                writeln!(out, "{}", serde_json::to_string_pretty(&cfg)?).map_err(write_err)?;
            }
            Ok(0)
        }
    }
}

fn gen_synth(a: &GenSynthArgs, cfg: &Config, out: &mut dyn Write) -> Result<i32> {
    let mut synth: SynthConfig = match &a.synth_config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("synthetic config {}: {e}", p.display())))?
        }
        None => SynthConfig {
            dims: cfg.model.feature_dims(),
            ..SynthConfig::default()
        },
    };
    if let Some(s) = a.seed {
        synth.seed = s;
    }
    if let Some(s) = a.signal {
        synth.signal_strength = s;
    }
    if let Some(s) = a.noise {
        synth.noise_std = s;
    }
    if let Some(r) = a.emotion_rate {
        synth.emotion_rate = r;
    }
    if a.sizes.len() != 3 {
        return Err(Error::Config(format!("--sizes needs three counts, got {}", a.sizes.len())));
    }
    let splits = generate_splits(&synth, &a.sizes)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    for (name, ds) in ["train", "val", "test"].iter().zip(&splits) {
        let path = a.out.join(format!("{name}.jsonl"));
        ds.write(&path)?;
        let triplets: usize = ds.conversations.iter().map(|c| c.gold_triplets().len()).sum();
        writeln!(out, "{}: {} conversations, {} triplets", path.display(), ds.len(), triplets).map_err(write_err)?;
    }
    let meta = a.out.join("synth.json");
    fs::write(&meta, serde_json::to_string_pretty(&synth)? + "\n").map_err(|e| Error::io(&meta, e))?;
    Ok(0)
}

fn train_cmd(a: &TrainArgs, cfg: Config, out: &mut dyn Write) -> Result<i32> {
    let cfg = set(cfg, "train.epochs", a.epochs.map(Value::from))?;
    let cfg = set(cfg, "train.seed", a.seed.map(Value::from))?;
    let cfg = set(cfg, "train.lr", a.lr.map(Value::from))?;
    let train_set = load_data(&a.train, &cfg)?;
    let val_set = load_data(&a.val, &cfg)?;
    let quiet = a.quiet;
    let outcome = train_with(&train_set, &val_set, &cfg, |l: &EpochLog| {
        if !quiet {
            eprintln!(
                "epoch {:>4}  loss {:.6}  val 6avg {:.4}  val 4avg {:.4}",
                l.epoch, l.train_loss, l.val_6avg, l.val_4avg
            );
        }
        Ok(())
    })?;
    outcome.best.save(&a.out)?;
    let log_path = a.log.clone().unwrap_or_else(|| a.out.join("train_log.jsonl"));
    crate::trainer::write_log(&log_path, &outcome.log)?;
    writeln!(
        out,
        "best epoch {} ({} = {:.4}); checkpoint {}; log {}",
        outcome.best.epoch,
        cfg.train.selection_metric,
        outcome.best.best_metric,
        a.out.display(),
        log_path.display()
    )
    .map_err(write_err)?;
    Ok(0)
}

/// Reads prediction lines and aligns them with the gold conversations.
fn read_predictions(path: &Path, gold: &Dataset) -> Result<Vec<Vec<Triplet>>> {
    #[derive(serde::Deserialize)]
    struct Line {
        conversation: String,
        triplets: Vec<Triplet>,
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut by_id = std::collections::HashMap::new();
    for (k, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let l: Line = serde_json::from_str(line).map_err(|e| Error::Input(format!("{} line {}: {e}", path.display(), k + 1)))?;
        if by_id.insert(l.conversation.clone(), l.triplets).is_some() {
            return Err(Error::Input(format!("{}: conversation {} predicted twice", path.display(), l.conversation)));
        }
    }
    let pred: Vec<Vec<Triplet>> = gold
        .conversations
        .iter()
        .map(|c| by_id.remove(&c.id).unwrap_or_default())
        .collect();
    if let Some(extra) = by_id.keys().next() {
        return Err(Error::Input(format!("{}: conversation {extra} is not in the gold data", path.display())));
    }
    Ok(pred)
}

fn eval_cmd(a: &EvalArgs, out: &mut dyn Write) -> Result<i32> {
    let report = match (&a.checkpoint, &a.pred) {
        (Some(dir), _) => {
            let ckpt = Checkpoint::load(dir)?;
            let gold = load_data(&a.data, &ckpt.config)?;
            evaluate(&ckpt.model()?, &gold)?
        }
        (None, Some(pred_path)) => {
            let gold = parse_dataset(&a.data, None).map_err(context(format!("dataset {}", a.data.display())))?;
            let pred = read_predictions(pred_path, &gold)?;
            let gold_t: Vec<_> = gold.conversations.iter().map(Conversation::gold_triplets).collect();
            MetricsReport {
                triplet: triplet_f1(&gold_t, &pred)?,
                subtasks: None,
            }
        }
        (None, None) => unreachable!("clap requires one of --checkpoint or --pred"),
    };
    if a.json {
        writeln!(out, "{}", serde_json::to_string_pretty(&report)?).map_err(write_err)?;
    } else {
        write!(out, "{}", report.to_table()).map_err(write_err)?;
    }
    Ok(0)
}

fn predict_cmd(a: &PredictArgs, out: &mut dyn Write) -> Result<i32> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let model = ckpt.model()?;
    let data = load_data(&a.data, &ckpt.config)?;
    let mut text = String::new();
    for c in &data.conversations {
        let p = model.predict(c, a.dump_attention)?;
        text.push_str(&serde_json::to_string(&p)?);
        text.push('\n');
    }
    match &a.out {
        Some(path) => fs::write(path, text).map_err(|e| Error::io(path, e))?,
        None => out.write_all(text.as_bytes()).map_err(write_err)?,
    }
    Ok(0)
}

fn graph_cmd(a: &GraphArgs, cfg: &Config, out: &mut dyn Write) -> Result<i32> {
    let data = parse_dataset(&a.data, None).map_err(context(format!("dataset {}", a.data.display())))?;
    let conv = data
        .get(&a.conv)
        .ok_or_else(|| Error::Input(format!("conversation `{}` not found in {}", a.conv, a.data.display())))?;
    let k = a.k.unwrap_or(cfg.model.k);
    let g = HeteroGraph::for_conversation(conv, k)?;
    writeln!(out, "{}", serde_json::to_string_pretty(&g.to_json())?).map_err(write_err)?;
    Ok(0)
}

fn gradcheck_cmd(a: &GradcheckArgs, cfg: &Config, out: &mut dyn Write) -> Result<i32> {
    let base = crate::config::ModelConfig {
        d_h: 8,
        d_s: 8,
        fusion_layers: 2,
        ..cfg.model.clone()
    };
    let mut variants = vec![("full model", base.clone())];
    let mut no_ctx = base.clone();
    no_ctx.ablation.use_context_nodes = false;
    variants.push(("no context nodes", no_ctx));
    let mut no_inter = base.clone();
    no_inter.ablation.use_inter = false;
    variants.push(("no inter fusion", no_inter));
    let mut text_only = base;
    text_only.modalities = crate::config::ModalitySet {
        audio: false,
        video: false,
    };
    variants.push(("text only", text_only));

    let mut ok = true;
    for (name, mc) in variants {
        let r = loss_grad_check(&mc, a.seed, a.utterances, a.coords, a.h, a.tol)?;
        ok &= r.passed;
        writeln!(
            out,
            "{name:<18} coords {:>3}  max rel error {:.3e}  max abs error {:.3e}  {}",
            r.coords_checked,
            r.max_rel_error,
            r.max_abs_error,
            if r.passed { "ok" } else { "FAIL" }
        )
        .map_err(write_err)?;
    }
    if !ok {
        eprintln!("error: gradient check exceeded tolerance {}", a.tol);
        return Ok(4);
    }
    Ok(0)
}

fn sweep_k(a: &SweepKArgs, cfg: Config, out: &mut dyn Write) -> Result<i32> {
    let cfg = set(cfg, "train.epochs", a.epochs.map(Value::from))?;
    let train_set = load_data(&a.train, &cfg)?;
    let val_set = load_data(&a.val, &cfg)?;
    let test_set = load_data(&a.test, &cfg)?;
    writeln!(out, "{:>3}  {:>7}  {:>7}  {:>5}", "K", "6 Avg", "4 Avg", "epoch").map_err(write_err)?;
    for &k in &a.k_values {
        let c = set(cfg.clone(), "model.k", Some(Value::from(k)))?;
        let outcome = train_with(&train_set, &val_set, &c, |_| Ok(()))?;
        let report = evaluate(&outcome.best_model()?, &test_set)?;
        writeln!(
            out,
            "{k:>3}  {:>7.4}  {:>7.4}  {:>5}",
            report.triplet.avg6, report.triplet.avg4, outcome.best.epoch
        )
        .map_err(write_err)?;
    }
    Ok(0)
}

pub fn main_with_env() -> i32 {
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    run(std::env::args_os(), &mut lock)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_capture(args: &[&str]) -> (i32, String) {
        let mut buf = Vec::new();
        let code = run(std::iter::once("m3hg").chain(args.iter().copied()), &mut buf);
        (code, String::from_utf8(buf).unwrap())
    }

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(run_capture(&["frobnicate"]).0, 2);
        assert_eq!(run_capture(&["graph", "--bogus"]).0, 2);
        assert_eq!(run_capture(&[]).0, 2);
    }

    #[test]
    fn help_exits_zero() {
        for sub in ["gen-synth", "train", "eval", "predict", "graph", "gradcheck", "sweep-k", "config"] {
            assert_eq!(run_capture(&[sub, "--help"]).0, 0, "{sub}");
        }
    }

    #[test]
    fn config_dump_lists_defaults_and_overrides() {
        let (code, text) = run_capture(&["config", "--dump", "--set", "model.k=2"]);
        assert_eq!(code, 0);
        let v: Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["model.k"], 2);
        assert_eq!(v["train.batch_size"], 8);
        assert_eq!(run_capture(&["config", "--dump", "--set", "model.k=0"]).0, 2);
    }

    #[test]
    fn missing_dataset_is_reported() {
        let (code, _) = run_capture(&["graph", "--data", "/nonexistent/x.jsonl", "--conv", "c"]);
        assert_ne!(code, 0);
    }
}
