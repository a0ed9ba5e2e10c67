//! Command surface: dataset build/annotate, train, probe, eval, report.
//! Every command honors --seed and --out-dir, writes a RunManifest, and
//! holds a lockfile so concurrent runs cannot share an out-dir.
//!
//! Exit codes: 0 success, 1 usage, 2 data error, 3 numeric divergence.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::annotate::{self, FixtureStore, JudgeClient, Transport};
use crate::corpus::{self, AnnotatedSummary, ByteTokenizer, DataSource, FilterOutcome, FilterRule};
use crate::cpo::{self, InstructionPair};
use crate::model::{Model, ModelConfig};
use crate::probe::{self, ProbeConfig, ProbeRecord, ProbeReport};
use crate::trainer::{self, TrainConfig, TrainError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;

#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(String),
    Divergence(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Divergence(_) => EXIT_DIVERGENCE,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Divergence(m) => m,
        }
    }
}

fn data_err<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Data(e.to_string())
}

/// Read an input file; a missing path is a usage error, other I/O
/// failures are data errors.
fn read_input(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            CliError::Usage(format!("input not found: {}", path.display()))
        } else {
            CliError::Data(format!("{}: {e}", path.display()))
        }
    })
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Diverged { .. } | TrainError::BadGradient { .. } => {
                CliError::Divergence(e.to_string())
            }
            TrainError::BadConfig(m) => CliError::Usage(m),
            other => CliError::Data(other.to_string()),
        }
    }
}

// ---------------------------------------------------------------------------
// Argument surface

#[derive(Debug, Parser)]
#[command(name = "cpolab", about = "Contrastive preference training laboratory")]
struct Cli {
    /// RNG seed shared by every command.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Directory all outputs are written into.
    #[arg(long, global = true, default_value = "runs/default")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Filter, segment, judge-annotate, and persist a training corpus.
    BuildData(BuildDataArgs),
    /// Judge-annotate raw records without filtering; emit verdict labels.
    Annotate(AnnotateArgs),
    /// Run the probing + selective-training loop.
    Train(TrainArgs),
    /// Probe a model snapshot per layer and per head.
    Probe(ProbeArgs),
    /// Score sentence-level predictions against gold labels.
    Eval(EvalArgs),
    /// Render CSV/SVG reports from a finished run directory.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct BuildDataArgs {
    /// Raw JSONL of {article_id, article, summary, source_model, data_source}.
    #[arg(long)]
    input: PathBuf,
    /// Fixture store with recorded judge responses.
    #[arg(long)]
    fixtures: Option<PathBuf>,
    /// Query live judge endpoints instead of fixtures.
    #[arg(long)]
    live: bool,
    /// Comma-separated judge names; both verdicts are union-merged.
    #[arg(long, default_value = "gpt-4,claude-2")]
    judges: String,
    /// `all`, `none`, or comma-separated rules from {fragment,language,symbols}.
    #[arg(long, default_value = "all")]
    filters: String,
    /// Drop summaries with fewer sentences than this.
    #[arg(long, default_value_t = 1)]
    min_sentences: usize,
    /// Base URL of the live judge endpoint (OpenAI-compatible).
    #[arg(long, default_value = "https://api.openai.com/v1")]
    endpoint: String,
    /// Environment variable holding the live judge API key.
    #[arg(long, default_value = "JUDGE_API_KEY")]
    auth_env: String,
}

#[derive(Debug, Args)]
struct AnnotateArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    fixtures: Option<PathBuf>,
    #[arg(long)]
    live: bool,
    #[arg(long, default_value = "gpt-4,claude-2")]
    judges: String,
    #[arg(long, default_value = "https://api.openai.com/v1")]
    endpoint: String,
    #[arg(long, default_value = "JUDGE_API_KEY")]
    auth_env: String,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Sentence-annotated training corpus (JSONL).
    #[arg(long)]
    dataset: PathBuf,
    /// Probing records (JSONL of {article, summary, y}).
    #[arg(long)]
    probe_set: PathBuf,
    /// JSON run config; missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Validate inputs and config, then exit without training.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Debug, Args)]
struct ProbeArgs {
    #[arg(long)]
    probe_set: PathBuf,
    /// Checkpoint to probe; a fresh seed-initialized model if omitted.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    k: usize,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// One 0/1 prediction per line.
    #[arg(long)]
    predictions: PathBuf,
    /// One 0/1 gold label per line, aligned with predictions.
    #[arg(long)]
    gold: PathBuf,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Finished run directory; defaults to --out-dir.
    #[arg(long)]
    run_dir: Option<PathBuf>,
}

// ---------------------------------------------------------------------------
// Run config and manifest

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig {
                n_layers: 2,
                d_model: 64,
                n_heads: 2,
                vocab_size: corpus::VOCAB_SIZE,
                max_seq_len: 512,
            },
            train: TrainConfig::default(),
            probe: ProbeConfig::default(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub input_hashes: BTreeMap<String, String>,
    pub output_paths: Vec<String>,
    pub seed: u64,
    pub started_at: u64,
    pub finished_at: u64,
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn file_sha(path: &Path) -> Result<String, CliError> {
    if !path.exists() {
        return Err(CliError::Usage(format!("input not found: {}", path.display())));
    }
    let bytes = fs::read(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

struct ManifestBuilder {
    command: String,
    config: serde_json::Value,
    input_hashes: BTreeMap<String, String>,
    outputs: Vec<String>,
    seed: u64,
    started_at: u64,
}

impl ManifestBuilder {
    fn new(command: &str, seed: u64) -> Self {
        ManifestBuilder {
            command: command.to_string(),
            config: serde_json::Value::Null,
            input_hashes: BTreeMap::new(),
            outputs: Vec::new(),
            seed,
            started_at: unix_now(),
        }
    }

    fn config<T: Serialize>(&mut self, config: &T) {
        self.config = serde_json::to_value(config).unwrap_or(serde_json::Value::Null);
    }

    fn input(&mut self, path: &Path) -> Result<(), CliError> {
        self.input_hashes
            .insert(path.display().to_string(), file_sha(path)?);
        Ok(())
    }

    fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    fn write(self, out_dir: &Path) -> Result<(), CliError> {
        let manifest = RunManifest {
            command: self.command,
            config: self.config,
            input_hashes: self.input_hashes,
            output_paths: self.outputs,
            seed: self.seed,
            started_at: self.started_at,
            finished_at: unix_now(),
        };
        let body = serde_json::to_string_pretty(&manifest).map_err(data_err)?;
        fs::write(out_dir.join("manifest.json"), body).map_err(data_err)?;
        Ok(())
    }
}

/// Exclusive lock on the out-dir, released on drop.
struct DirLock {
    path: PathBuf,
}

impl DirLock {
    fn acquire(out_dir: &Path) -> Result<DirLock, CliError> {
        fs::create_dir_all(out_dir).map_err(data_err)?;
        let path = out_dir.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(DirLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Usage(
                format!(
                    "out-dir {} is locked by another run (remove {} if stale)",
                    out_dir.display(),
                    path.display()
                ),
            )),
            Err(e) => Err(data_err(e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

// ---------------------------------------------------------------------------
// Entry points

pub fn run_from_env() -> i32 {
    run(std::env::args_os())
}

pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            eprintln!("{e}");
            return EXIT_USAGE;
        }
        Err(e) => {
            // --help / --version
            print!("{e}");
            return EXIT_OK;
        }
    };
    let lock = match DirLock::acquire(&cli.out_dir) {
        Ok(lock) => lock,
        Err(e) => {
            eprintln!("error: {}", e.message());
            return e.code();
        }
    };
    let result = dispatch(&cli);
    drop(lock);
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.code()
        }
    }
}

fn dispatch(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::BuildData(args) => cmd_build_data(cli, args),
        Command::Annotate(args) => cmd_annotate(cli, args),
        Command::Train(args) => cmd_train(cli, args),
        Command::Probe(args) => cmd_probe(cli, args),
        Command::Eval(args) => cmd_eval(cli, args),
        Command::Report(args) => cmd_report(cli, args),
    }
}

// ---------------------------------------------------------------------------
// build-data / annotate

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawRecord {
    pub article_id: String,
    pub article: String,
    pub summary: String,
    pub source_model: String,
    pub data_source: DataSource,
}

fn load_raw(path: &Path) -> Result<Vec<RawRecord>, CliError> {
    let body = read_input(path)?;
    body.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            serde_json::from_str(line)
                .map_err(|e| CliError::Data(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

fn parse_filters(spec: &str) -> Result<Vec<FilterRule>, CliError> {
    match spec {
        "all" => Ok(FilterRule::all()),
        "none" => Ok(vec![]),
        list => list
            .split(',')
            .map(|name| match name.trim() {
                "fragment" => Ok(FilterRule::Fragment),
                "language" => Ok(FilterRule::Language),
                "symbols" => Ok(FilterRule::Symbols),
                other => Err(CliError::Usage(format!("unknown filter rule: {other}"))),
            })
            .collect(),
    }
}

enum AnyTransport {
    Fixture(annotate::FixtureTransport),
    Http(annotate::HttpTransport),
}

impl Transport for AnyTransport {
    fn judge_name(&self) -> &str {
        match self {
            AnyTransport::Fixture(t) => t.judge_name(),
            AnyTransport::Http(t) => t.judge_name(),
        }
    }

    fn send(&mut self, prompt: &str) -> Result<String, annotate::AnnotateError> {
        match self {
            AnyTransport::Fixture(t) => t.send(prompt),
            AnyTransport::Http(t) => t.send(prompt),
        }
    }
}

fn make_judges(
    judges: &str,
    fixtures: &Option<PathBuf>,
    live: bool,
    endpoint: &str,
    auth_env: &str,
) -> Result<Vec<JudgeClient<AnyTransport>>, CliError> {
    let names: Vec<&str> = judges.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    if names.is_empty() {
        return Err(CliError::Usage("at least one judge is required".into()));
    }
    if live {
        return Ok(names
            .iter()
            .map(|name| {
                JudgeClient::new(
                    AnyTransport::Http(annotate::HttpTransport::new(annotate::EndpointConfig {
                        base_url: endpoint.to_string(),
                        model: name.to_string(),
                        auth_env_var: auth_env.to_string(),
                    })),
                    3,
                )
            })
            .collect());
    }
    let Some(path) = fixtures else {
        return Err(CliError::Usage(
            "either --fixtures <path> or --live is required".into(),
        ));
    };
    let store = FixtureStore::load(path).map_err(data_err)?;
    Ok(names
        .iter()
        .map(|name| JudgeClient::new(AnyTransport::Fixture(store.transport(name)), 3))
        .collect())
}

fn annotate_record(
    judges: &mut [JudgeClient<AnyTransport>],
    raw: &RawRecord,
    sentences: &[String],
) -> Result<Vec<u8>, CliError> {
    let verdicts = judges
        .iter_mut()
        .map(|j| {
            j.annotate(&raw.article, sentences)
                .map_err(|e| CliError::Data(format!("{}: {e}", raw.article_id)))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut labels = annotate::merge_union(&verdicts[0], &verdicts[0], sentences.len());
    for v in &verdicts[1..] {
        labels = labels
            .iter()
            .zip(annotate::merge_union(v, v, sentences.len()))
            .map(|(&a, b)| a & b)
            .collect();
    }
    Ok(labels)
}

fn cmd_build_data(cli: &Cli, args: &BuildDataArgs) -> Result<(), CliError> {
    let mut manifest = ManifestBuilder::new("build-data", cli.seed);
    manifest.input(&args.input)?;
    let raw = load_raw(&args.input)?;
    let rules = parse_filters(&args.filters)?;
    let mut judges = make_judges(&args.judges, &args.fixtures, args.live, &args.endpoint, &args.auth_env)?;
    if let Some(f) = &args.fixtures {
        manifest.input(f)?;
    }

    let mut records = Vec::new();
    let mut dropped = BTreeMap::new();
    for r in &raw {
        match corpus::filter_summary_with(&r.summary, &rules, &corpus::ScriptHeuristic) {
            FilterOutcome::Keep => {}
            FilterOutcome::Reject(rule) => {
                *dropped.entry(format!("{rule:?}")).or_insert(0usize) += 1;
                continue;
            }
        }
        let sentences = corpus::sentence_texts(&r.summary)
            .map_err(|e| CliError::Data(format!("{}: {e}", r.article_id)))?;
        if sentences.len() < args.min_sentences {
            *dropped.entry("MinSentences".into()).or_insert(0) += 1;
            continue;
        }
        let labels = annotate_record(&mut judges, r, &sentences)?;
        let record = AnnotatedSummary {
            article_id: r.article_id.clone(),
            article: r.article.clone(),
            summary: r.summary.clone(),
            sentences: sentences
                .into_iter()
                .zip(&labels)
                .map(|(text, &label)| corpus::LabeledSentence { text, label })
                .collect(),
            source_model: r.source_model.clone(),
            data_source: r.data_source,
        };
        record.validate().map_err(|e| CliError::Data(format!("{}: {e}", r.article_id)))?;
        records.push(record);
    }

    let out_jsonl = cli.out_dir.join("lesson.jsonl");
    corpus::save_jsonl(&out_jsonl, &records).map_err(data_err)?;
    let stats = corpus::compute_stats(&records).map_err(data_err)?;
    let stats_path = cli.out_dir.join("stats.json");
    let stats_body = serde_json::json!({
        "stats": stats,
        "dropped": dropped,
        "input_records": raw.len(),
    });
    fs::write(&stats_path, serde_json::to_string_pretty(&stats_body).map_err(data_err)?)
        .map_err(data_err)?;
    println!(
        "kept {} of {} records ({} positive, {} negative)",
        records.len(),
        raw.len(),
        stats.positive,
        stats.negative
    );
    manifest.config(&serde_json::json!({
        "filters": args.filters,
        "judges": args.judges,
        "min_sentences": args.min_sentences,
        "live": args.live,
    }));
    manifest.output(&out_jsonl);
    manifest.output(&stats_path);
    manifest.write(&cli.out_dir)
}

fn cmd_annotate(cli: &Cli, args: &AnnotateArgs) -> Result<(), CliError> {
    let mut manifest = ManifestBuilder::new("annotate", cli.seed);
    manifest.input(&args.input)?;
    let raw = load_raw(&args.input)?;
    let mut judges = make_judges(&args.judges, &args.fixtures, args.live, &args.endpoint, &args.auth_env)?;
    let out_path = cli.out_dir.join("annotated.jsonl");
    let mut lines = Vec::new();
    for r in &raw {
        let sentences = corpus::sentence_texts(&r.summary)
            .map_err(|e| CliError::Data(format!("{}: {e}", r.article_id)))?;
        let labels = annotate_record(&mut judges, r, &sentences)?;
        lines.push(
            serde_json::to_string(&serde_json::json!({
                "article_id": r.article_id,
                "labels": labels,
            }))
            .map_err(data_err)?,
        );
    }
    fs::write(&out_path, lines.join("\n") + "\n").map_err(data_err)?;
    println!("annotated {} records", raw.len());
    manifest.config(&serde_json::json!({"judges": args.judges, "live": args.live}));
    manifest.output(&out_path);
    manifest.write(&cli.out_dir)
}

// ---------------------------------------------------------------------------
// train / probe

fn load_run_config(path: &Option<PathBuf>) -> Result<RunConfig, CliError> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let body = read_input(p)?;
            serde_json::from_str(&body)
                .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", p.display())))
        }
    }
}

fn load_probe_records(path: &Path) -> Result<Vec<ProbeRecord>, CliError> {
    let body = read_input(path)?;
    body.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            serde_json::from_str(line)
                .map_err(|e| CliError::Data(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

fn cmd_train(cli: &Cli, args: &TrainArgs) -> Result<(), CliError> {
    let mut config = load_run_config(&args.config)?;
    if let Some(k) = args.k {
        config.train.k = k;
    }
    if let Some(e) = args.epochs {
        config.train.epochs = e;
    }
    if let Some(lr) = args.lr {
        config.train.lr = lr;
    }
    if let Some(a) = args.alpha {
        config.train.alpha = a;
    }
    if let Some(b) = args.batch_size {
        config.train.batch_size = b;
    }
    config.train.seed = cli.seed;
    config.train.probe = config.probe.clone();
    config.model.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    config.train.validate()?;

    let mut manifest = ManifestBuilder::new("train", cli.seed);
    manifest.config(&config);
    manifest.input(&args.dataset)?;
    manifest.input(&args.probe_set)?;

    let records = corpus::load_jsonl(&args.dataset).map_err(data_err)?;
    let probe_records = load_probe_records(&args.probe_set)?;
    if args.dry_run {
        println!("config valid; {} training records, {} probe records", records.len(), probe_records.len());
        return manifest.write(&cli.out_dir);
    }

    let pair = InstructionPair::default();
    let tokenizer = ByteTokenizer;
    let items = records
        .iter()
        .map(|r| cpo::prepare_item(r, &pair, &tokenizer))
        .collect::<Result<Vec<_>, _>>()
        .map_err(data_err)?;
    let mut model = Model::<f32>::init(config.model.clone(), cli.seed).map_err(data_err)?;
    let outcome = trainer::train(
        &mut model,
        &items,
        &probe_records,
        &pair,
        &tokenizer,
        &config.train,
        &cli.out_dir,
    )?;
    for rec in &outcome.epoch_records {
        manifest.output(&rec.checkpoint_path);
    }
    manifest.output(&cli.out_dir.join("metrics.csv"));
    println!(
        "trained {} epochs, {} optimizer steps",
        outcome.epoch_records.len(),
        outcome.metrics.len()
    );
    manifest.write(&cli.out_dir)
}

fn cmd_probe(cli: &Cli, args: &ProbeArgs) -> Result<(), CliError> {
    let config = load_run_config(&args.config)?;
    let mut manifest = ManifestBuilder::new("probe", cli.seed);
    manifest.config(&config);
    manifest.input(&args.probe_set)?;
    let records = load_probe_records(&args.probe_set)?;
    let mut model = Model::<f32>::init(config.model.clone(), cli.seed).map_err(data_err)?;
    if let Some(ckpt) = &args.checkpoint {
        manifest.input(ckpt)?;
        model.load_checkpoint(ckpt).map_err(data_err)?;
    }
    let pair = InstructionPair::default();
    let tokenizer = ByteTokenizer;
    let accuracies =
        probe::probe_layers(&model, &pair, &tokenizer, &records, &config.probe).map_err(data_err)?;
    let selected = probe::select_worst_layers(&accuracies, args.k).map_err(data_err)?;
    let report = ProbeReport {
        epoch: 0,
        layer_accuracy: accuracies,
        head_accuracy: None,
        selected,
    };
    let layers_path = cli.out_dir.join("probe.csv");
    fs::write(&layers_path, report.to_csv()).map_err(data_err)?;
    let heads = probe::head_probe_report(&model, &pair, &tokenizer, &records, &config.probe)
        .map_err(data_err)?;
    let heads_path = cli.out_dir.join("heads.csv");
    fs::write(&heads_path, heads.to_csv()).map_err(data_err)?;
    println!(
        "layer accuracies: {:?}; head mean {:.4} max {:.4} min {:.4}",
        report.layer_accuracy, heads.mean, heads.max, heads.min
    );
    manifest.output(&layers_path);
    manifest.output(&heads_path);
    manifest.write(&cli.out_dir)
}

// ---------------------------------------------------------------------------
// eval / report

fn load_labels(path: &Path) -> Result<Vec<u8>, CliError> {
    let body = read_input(path)?;
    body.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| match line.trim() {
            "0" => Ok(0),
            "1" => Ok(1),
            other => Err(CliError::Data(format!(
                "{}:{}: expected 0 or 1, got {other:?}",
                path.display(),
                i + 1
            ))),
        })
        .collect()
}

fn cmd_eval(cli: &Cli, args: &EvalArgs) -> Result<(), CliError> {
    let mut manifest = ManifestBuilder::new("eval", cli.seed);
    manifest.input(&args.predictions)?;
    manifest.input(&args.gold)?;
    let pred = load_labels(&args.predictions)?;
    let gold = load_labels(&args.gold)?;
    if pred.len() != gold.len() {
        return Err(CliError::Usage(format!(
            "prediction/gold length mismatch: {} vs {}",
            pred.len(),
            gold.len()
        )));
    }
    let counts = annotate::confusion(&pred, &gold).map_err(data_err)?;
    let ba = annotate::balanced_accuracy(&counts).map_err(data_err)?;
    println!(
        "TP {} FP {} TN {} FN {}",
        counts.tp, counts.fp, counts.tn, counts.fn_
    );
    println!("balanced accuracy: {ba:.6}");
    let out = cli.out_dir.join("eval.json");
    fs::write(
        &out,
        serde_json::to_string_pretty(&serde_json::json!({
            "confusion": counts,
            "balanced_accuracy": ba,
        }))
        .map_err(data_err)?,
    )
    .map_err(data_err)?;
    manifest.output(&out);
    manifest.write(&cli.out_dir)
}

/// White-to-dark-green scale; darker means higher accuracy.
fn heatmap_svg(rows: &[(usize, usize, f64)], n_layers: usize, n_heads: usize) -> String {
    const CELL: usize = 40;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\">\n",
        n_heads * CELL,
        n_layers * CELL
    );
    for &(layer, head, acc) in rows {
        let a = acc.clamp(0.0, 1.0);
        let r = (235.0 - 200.0 * a).round() as u8;
        let g = (245.0 - 140.0 * a).round() as u8;
        let b = (235.0 - 200.0 * a).round() as u8;
        svg.push_str(&format!(
            "<rect x=\"{}\" y=\"{}\" width=\"{CELL}\" height=\"{CELL}\" fill=\"rgb({r},{g},{b})\"><title>layer {layer} head {head}: {acc:.4}</title></rect>\n",
            head * CELL,
            layer * CELL,
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

fn cmd_report(cli: &Cli, args: &ReportArgs) -> Result<(), CliError> {
    let run_dir = args.run_dir.clone().unwrap_or_else(|| cli.out_dir.clone());
    let mut manifest = ManifestBuilder::new("report", cli.seed);

    // collect epoch records
    let mut epoch_records = Vec::new();
    let mut epoch = 0usize;
    loop {
        let path = run_dir.join(format!("epoch-{epoch}.record.json"));
        if !path.exists() {
            break;
        }
        let body = fs::read_to_string(&path).map_err(data_err)?;
        let record: trainer::EpochRecord = serde_json::from_str(&body)
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        epoch_records.push(record);
        epoch += 1;
    }
    let heads_path = run_dir.join("heads.csv");
    if epoch_records.is_empty() && !heads_path.exists() {
        return Err(CliError::Data(format!(
            "no report inputs in {}: expected epoch-0.record.json, ... or heads.csv",
            run_dir.display()
        )));
    }

    let report_dir = cli.out_dir.join("report");
    fs::create_dir_all(&report_dir).map_err(data_err)?;

    if !epoch_records.is_empty() {
        let mut csv = String::from("epoch,layer,accuracy,selected\n");
        for rec in &epoch_records {
            for (u, acc) in rec.probe_report.layer_accuracy.iter().enumerate() {
                let sel = u8::from(rec.updated_layers.contains(&u));
                csv.push_str(&format!("{},{u},{acc:.6},{sel}\n", rec.epoch));
            }
        }
        let path = report_dir.join("probe_accuracy.csv");
        fs::write(&path, csv).map_err(data_err)?;
        manifest.output(&path);
    }

    let metrics_path = run_dir.join("metrics.csv");
    if metrics_path.exists() {
        let body = fs::read_to_string(&metrics_path).map_err(data_err)?;
        let path = report_dir.join("loss_curve.csv");
        fs::write(&path, body).map_err(data_err)?;
        manifest.output(&path);
    }

    if heads_path.exists() {
        let body = fs::read_to_string(&heads_path).map_err(data_err)?;
        let mut rows = Vec::new();
        let mut n_layers = 0;
        let mut n_heads = 0;
        for line in body.lines().skip(1) {
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 3 {
                return Err(CliError::Data(format!("malformed heads.csv line: {line}")));
            }
            let layer: usize = parts[0].parse().map_err(data_err)?;
            let head: usize = parts[1].parse().map_err(data_err)?;
            let acc: f64 = parts[2].parse().map_err(data_err)?;
            n_layers = n_layers.max(layer + 1);
            n_heads = n_heads.max(head + 1);
            rows.push((layer, head, acc));
        }
        let path = report_dir.join("heatmap.svg");
        fs::write(&path, heatmap_svg(&rows, n_layers, n_heads)).map_err(data_err)?;
        manifest.output(&path);
    }

    println!("report written to {}", report_dir.display());
    manifest.write(&cli.out_dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn filter_spec_parsing() {
        assert_eq!(parse_filters("all").unwrap().len(), 3);
        assert!(parse_filters("none").unwrap().is_empty());
        assert_eq!(parse_filters("fragment,symbols").unwrap().len(), 2);
        assert!(matches!(parse_filters("bogus"), Err(CliError::Usage(_))));
    }

    #[test]
    fn heatmap_has_one_rect_per_cell() {
        let rows = vec![(0, 0, 0.5), (0, 1, 1.0), (1, 0, 0.0), (1, 1, 0.75)];
        let svg = heatmap_svg(&rows, 2, 2);
        assert_eq!(svg.matches("<rect").count(), 4);
        // darker green for higher accuracy
        assert!(svg.contains("rgb(35,105,35)")); // acc 1.0
        assert!(svg.contains("rgb(235,245,235)")); // acc 0.0
    }

    #[test]
    fn label_file_rejects_junk() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("labels.txt");
        fs::write(&p, "1\n0\nx\n").unwrap();
        assert!(matches!(load_labels(&p), Err(CliError::Data(_))));
        fs::write(&p, "1\n0\n1\n").unwrap();
        assert_eq!(load_labels(&p).unwrap(), vec![1, 0, 1]);
    }
}
