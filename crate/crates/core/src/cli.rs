//! Command-line entry point binding the toolkit into reproducible
//! pipelines.
//!
//! Every subcommand writes its primary outputs plus a `.manifest.json`
//! sidecar recording the arguments, seed, and content hashes of all inputs
//! and outputs. Exit codes: 0 success, 1 usage error, 2 data error, 3
//! backend error.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::aligner::{self, AlignerConfig, AlignmentModel};
use crate::bpe::{self, BpeModel};
use crate::dataset::{self, Corpus, IngestStrictness, Split};
use crate::eval::{self, FilterList, HarnessMode, HarnessOptions};
use crate::nn::{
    self, load_checkpoint, save_checkpoint, ParserConfig, ParserModel, UnfreezeSchedule,
};
use crate::projection;
use crate::synth;
use crate::translate::{self, CachedTranslator, TranslateError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_BACKEND: i32 = 3;

#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(String),
    Backend(String),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Backend(_) => EXIT_BACKEND,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Backend(m) => m,
        }
    }
}

impl From<dataset::DataError> for CliError {
    fn from(e: dataset::DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<bpe::BpeError> for CliError {
    fn from(e: bpe::BpeError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<aligner::AlignError> for CliError {
    fn from(e: aligner::AlignError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<nn::ParserError> for CliError {
    fn from(e: nn::ParserError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<TranslateError> for CliError {
    fn from(e: TranslateError) -> Self {
        match e {
            TranslateError::InvalidRequest(m) => CliError::Usage(m),
            TranslateError::Io { .. } => CliError::Data(e.to_string()),
            other => CliError::Backend(other.to_string()),
        }
    }
}

impl From<projection::ProjectionError> for CliError {
    fn from(e: projection::ProjectionError) -> Self {
        match e {
            projection::ProjectionError::Translate(t) => t.into(),
            projection::ProjectionError::Align(a) => a.into(),
        }
    }
}

impl From<eval::EvalError> for CliError {
    fn from(e: eval::EvalError) -> Self {
        match e {
            eval::EvalError::Translate(t) => t.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

#[derive(Parser)]
#[command(
    name = "semparse",
    version,
    about = "Multilingual semantic parsing toolkit: bootstrap corpora via translate-and-project, train and evaluate a pointer-augmented parser"
)]
struct Cli {
    /// Cap on worker threads for parallel stages.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest a TOP-format TSV file into the corpus format.
    IngestTop(IngestTopArgs),
    /// Run the full bootstrap (template, translate, align, project).
    Bootstrap(BootstrapArgs),
    /// Train a word aligner on parallel text and dump its ttable.
    AlignTrain(AlignTrainArgs),
    /// Viterbi-align parallel text with a trained ttable.
    Align(AlignArgs),
    /// Learn a BPE model from one or more corpora.
    BpeLearn(BpeLearnArgs),
    /// Masked-language-model pretraining of the encoder.
    PretrainMlm(PretrainMlmArgs),
    /// Train the parser.
    Train(TrainArgs),
    /// Decode a corpus with a trained parser.
    Predict(PredictArgs),
    /// Evaluate a checkpoint on a test corpus.
    Evaluate(EvaluateArgs),
    /// Pretty-print a report or history record.
    Report(ReportArgs),
    /// Generate toy corpora and lexicons.
    Synth(SynthArgs),
}

#[derive(Args)]
struct IngestTopArgs {
    /// TOP TSV file (raw utterance, tokenized utterance, annotation).
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, default_value = "train")]
    split: Split,
    #[arg(long, default_value = "en")]
    lang: String,
    #[arg(long)]
    out: PathBuf,
    /// Skip malformed rows (counted in the report) instead of aborting.
    #[arg(long)]
    lenient: bool,
    /// Report path; defaults to `<out>.report.json`.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct BootstrapArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// Source language (validated against the corpus).
    #[arg(long)]
    src: Option<String>,
    #[arg(long)]
    tgt: String,
    /// identity | dict | file | http
    #[arg(long)]
    backend: String,
    /// Lexicon TSV for the dict backend.
    #[arg(long)]
    lexicon: Option<PathBuf>,
    /// Translation table TSV for the file backend.
    #[arg(long)]
    table: Option<PathBuf>,
    /// Write-through translation cache.
    #[arg(long)]
    cache: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
    /// Aligner key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct AlignTrainArgs {
    /// Source sentences, one per line, whitespace tokenized.
    #[arg(long)]
    source: PathBuf,
    /// Target sentences, parallel to --source.
    #[arg(long)]
    target: PathBuf,
    /// Output ttable (`e f prob` lines).
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long = "p-null")]
    p_null: Option<f64>,
    #[arg(long = "alpha")]
    smoothing_alpha: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct AlignArgs {
    #[arg(long)]
    ttable: PathBuf,
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
    /// Output alignments in Pharaoh format (`j-i` pairs per line).
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long = "p-null")]
    p_null: Option<f64>,
}

#[derive(Args)]
struct BpeLearnArgs {
    /// Corpus files the vocabulary is learned from.
    #[arg(long = "in", num_args = 1.., required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long, default_value_t = bpe::DEFAULT_NUM_MERGES)]
    merges: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PretrainMlmArgs {
    /// Corpora providing unlabeled sentences (questions).
    #[arg(long = "corpus", num_args = 1.., required = true)]
    corpora: Vec<PathBuf>,
    #[arg(long)]
    bpe: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    /// Parser key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// History JSON path; defaults to `<out>.history.json`.
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    dev: PathBuf,
    /// BPE model (ignored with --init-encoder, which carries its own).
    #[arg(long)]
    bpe: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Continue from a pretrained checkpoint (e.g. pretrain-mlm output).
    #[arg(long = "init-encoder")]
    init_encoder: Option<PathBuf>,
    /// Fraction of encoder parameter groups eligible for updates.
    #[arg(long = "unfreeze-rate", default_value_t = 1.0)]
    unfreeze_rate: f64,
    /// Unfreeze one eligible group per epoch instead of all at once.
    #[arg(long)]
    gradual: bool,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "max-epochs")]
    max_epochs: Option<usize>,
    #[arg(long = "batch-size")]
    batch_size: Option<usize>,
    /// Disable the copy mechanism (ablation).
    #[arg(long = "no-copy")]
    no_copy: bool,
    /// History JSON path; defaults to `<out>.history.json`.
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    /// JSONL predictions: {id, lang, question, prediction}.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    beam: Option<usize>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    test: PathBuf,
    /// standard | zero-shot | translate-test
    #[arg(long, default_value = "standard")]
    mode: HarnessMode,
    /// Filter list: a language code with shipped defaults (it, ja) or a
    /// one-token-per-line file.
    #[arg(long)]
    filter: Option<String>,
    #[arg(long)]
    beam: Option<usize>,
    /// Report JSON output.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Translate-test: backend name (identity | dict | file | http).
    #[arg(long)]
    backend: Option<String>,
    #[arg(long)]
    lexicon: Option<PathBuf>,
    #[arg(long)]
    table: Option<PathBuf>,
    #[arg(long)]
    cache: Option<PathBuf>,
    /// Translate-test: gold corpus in the training language.
    #[arg(long)]
    gold: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long = "in")]
    input: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    /// grammar | lexicon
    #[arg(long, default_value = "grammar")]
    kind: String,
    #[arg(long, default_value = "train")]
    split: Split,
    #[arg(long, default_value = "aa")]
    lang: String,
    #[arg(long, default_value_t = 200)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Draw open-class slot fillers from a generated pool: train | dev.
    #[arg(long = "open-vocab")]
    open_vocab: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

/// Parses argv and runs one subcommand, returning the process exit code.
pub fn dispatch<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let argv: Vec<String> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            // clap handles --help/--version as "errors" with exit 0.
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    if let Some(threads) = cli.threads {
        // Only the first global-pool build wins; later calls are no-ops.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
    match run(cli.command, &argv) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}

fn run(command: Command, argv: &[String]) -> Result<(), CliError> {
    match command {
        Command::IngestTop(args) => ingest_top(args, argv),
        Command::Bootstrap(args) => bootstrap(args, argv),
        Command::AlignTrain(args) => align_train(args, argv),
        Command::Align(args) => align(args, argv),
        Command::BpeLearn(args) => bpe_learn(args, argv),
        Command::PretrainMlm(args) => pretrain_mlm(args, argv),
        Command::Train(args) => train(args, argv),
        Command::Predict(args) => predict(args, argv),
        Command::Evaluate(args) => evaluate(args, argv),
        Command::Report(args) => report(args),
        Command::Synth(args) => synth_cmd(args, argv),
    }
}

// --- manifest -------------------------------------------------------------

#[derive(Serialize)]
struct FileDigest {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    subcommand: String,
    args: &'a [String],
    seed: Option<u64>,
    inputs: Vec<FileDigest>,
    outputs: Vec<FileDigest>,
}

fn sha256_of(path: &Path) -> Result<String, CliError> {
    use sha2::{Digest, Sha256};
    let mut file = File::open(path)
        .map_err(|e| CliError::Data(format!("cannot hash {}: {e}", path.display())))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(format!("{:x}", hasher.finalize()))
}

fn digests(paths: &[&Path]) -> Result<Vec<FileDigest>, CliError> {
    paths
        .iter()
        .map(|p| {
            Ok(FileDigest { path: p.display().to_string(), sha256: sha256_of(p)? })
        })
        .collect()
}

/// Writes `<primary>.manifest.json` next to the primary output.
fn write_manifest(
    primary: &Path,
    argv: &[String],
    seed: Option<u64>,
    inputs: &[&Path],
    outputs: &[&Path],
) -> Result<(), CliError> {
    let subcommand = argv.get(1).cloned().unwrap_or_default();
    let manifest = Manifest {
        tool: "semparse",
        version: env!("CARGO_PKG_VERSION"),
        subcommand,
        args: argv.get(1..).unwrap_or(&[]),
        seed,
        inputs: digests(inputs)?,
        outputs: digests(outputs)?,
    };
    let path = manifest_path(primary);
    let file = File::create(&path)
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))?;
    serde_json::to_writer_pretty(BufWriter::new(file), &manifest)
        .map_err(|e| CliError::Data(e.to_string()))?;
    Ok(())
}

pub fn manifest_path(primary: &Path) -> PathBuf {
    let mut name = primary.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    primary.with_file_name(name)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let file = File::create(path)
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| CliError::Data(e.to_string()))?;
    w.write_all(b"\n")?;
    Ok(())
}

// --- key=value config files ------------------------------------------------

fn load_kv(path: &Path) -> Result<BTreeMap<String, String>, CliError> {
    let file = File::open(path)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    let mut kv = BTreeMap::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let Some((key, value)) = trimmed.split_once('=') else {
            return Err(CliError::Usage(format!(
                "{}:{}: expected key=value, got {trimmed:?}",
                path.display(),
                idx + 1
            )));
        };
        kv.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(kv)
}

fn kv_parse<T: std::str::FromStr>(
    kv: &BTreeMap<String, String>,
    key: &str,
    into: &mut T,
) -> Result<bool, CliError> {
    match kv.get(key) {
        None => Ok(false),
        Some(raw) => {
            *into = raw.parse().map_err(|_| {
                CliError::Usage(format!("config key {key}: cannot parse {raw:?}"))
            })?;
            Ok(true)
        }
    }
}

fn aligner_config(path: Option<&Path>) -> Result<AlignerConfig, CliError> {
    let mut config = AlignerConfig::default();
    let Some(path) = path else { return Ok(config) };
    let kv = load_kv(path)?;
    let mut known = 0;
    known += kv_parse(&kv, "iterations", &mut config.iterations)? as usize;
    known += kv_parse(&kv, "lambda", &mut config.lambda)? as usize;
    known += kv_parse(&kv, "p_null", &mut config.p_null)? as usize;
    known += kv_parse(&kv, "smoothing_alpha", &mut config.smoothing_alpha)? as usize;
    known += kv_parse(&kv, "seed", &mut config.seed)? as usize;
    if known != kv.len() {
        let unknown: Vec<&String> = kv
            .keys()
            .filter(|k| {
                !["iterations", "lambda", "p_null", "smoothing_alpha", "seed"]
                    .contains(&k.as_str())
            })
            .collect();
        return Err(CliError::Usage(format!("unknown aligner config keys: {unknown:?}")));
    }
    Ok(config)
}

fn parser_config(path: Option<&Path>) -> Result<ParserConfig, CliError> {
    let mut config = ParserConfig::default();
    let Some(path) = path else { return Ok(config) };
    let kv = load_kv(path)?;
    let keys = [
        "enc_layers", "dec_layers", "model_dim", "heads", "ffn_dim", "dropout",
        "max_decode_len", "beam_size", "learning_rate", "batch_size", "patience",
        "max_epochs", "use_copy", "seed",
    ];
    let mut known = 0;
    known += kv_parse(&kv, "enc_layers", &mut config.enc_layers)? as usize;
    known += kv_parse(&kv, "dec_layers", &mut config.dec_layers)? as usize;
    known += kv_parse(&kv, "model_dim", &mut config.model_dim)? as usize;
    known += kv_parse(&kv, "heads", &mut config.heads)? as usize;
    known += kv_parse(&kv, "ffn_dim", &mut config.ffn_dim)? as usize;
    known += kv_parse(&kv, "dropout", &mut config.dropout)? as usize;
    known += kv_parse(&kv, "max_decode_len", &mut config.max_decode_len)? as usize;
    known += kv_parse(&kv, "beam_size", &mut config.beam_size)? as usize;
    known += kv_parse(&kv, "learning_rate", &mut config.learning_rate)? as usize;
    known += kv_parse(&kv, "batch_size", &mut config.batch_size)? as usize;
    known += kv_parse(&kv, "patience", &mut config.patience)? as usize;
    known += kv_parse(&kv, "max_epochs", &mut config.max_epochs)? as usize;
    known += kv_parse(&kv, "use_copy", &mut config.use_copy)? as usize;
    known += kv_parse(&kv, "seed", &mut config.seed)? as usize;
    if known != kv.len() {
        let unknown: Vec<&String> =
            kv.keys().filter(|k| !keys.contains(&k.as_str())).collect();
        return Err(CliError::Usage(format!("unknown parser config keys: {unknown:?}")));
    }
    Ok(config)
}

// --- subcommands ------------------------------------------------------------

fn ingest_top(args: IngestTopArgs, argv: &[String]) -> Result<(), CliError> {
    let strictness = if args.lenient {
        IngestStrictness::Lenient
    } else {
        IngestStrictness::Strict
    };
    let (corpus, report) =
        dataset::ingest_top_tsv(&args.input, args.split, &args.lang, strictness)?;
    dataset::write_corpus(&args.out, &corpus)?;
    let report_path = args
        .report
        .unwrap_or_else(|| args.out.with_extension("report.json"));
    write_json(&report_path, &report)?;
    println!(
        "ingested {}: read {}, kept {}, dropped_unsupported {}, malformed {}",
        args.input.display(),
        report.read,
        report.kept,
        report.dropped_unsupported,
        report.malformed
    );
    write_manifest(
        &args.out,
        argv,
        None,
        &[&args.input],
        &[&args.out, &report_path],
    )
}

fn make_translator(
    backend: &str,
    lexicon: Option<&Path>,
    table: Option<&Path>,
    cache: Option<&Path>,
) -> Result<CachedTranslator, CliError> {
    let backend = translate::backend_from_name(backend, lexicon, table)?;
    Ok(CachedTranslator::new(backend, cache)?)
}

fn bootstrap(args: BootstrapArgs, argv: &[String]) -> Result<(), CliError> {
    let corpus = dataset::read_corpus(&args.input)?;
    if let Some(src) = &args.src {
        let langs = corpus.langs();
        if !langs.contains(src) {
            return Err(CliError::Usage(format!(
                "--src {src:?} not present in corpus (langs: {langs:?})"
            )));
        }
    }
    let mut aligner_cfg = aligner_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        aligner_cfg.seed = seed;
    }
    let translator = make_translator(
        &args.backend,
        args.lexicon.as_deref(),
        args.table.as_deref(),
        args.cache.as_deref(),
    )?;
    let (out_corpus, report) =
        projection::bootstrap_corpus(&corpus, &translator, &aligner_cfg, &args.tgt)?;
    dataset::write_corpus(&args.out, &out_corpus)?;
    let report_path = args
        .report
        .unwrap_or_else(|| args.out.with_extension("report.json"));
    write_json(&report_path, &report)?;
    println!(
        "bootstrap {} -> {}: attempted {}, succeeded {} (yield {:.4}), backend calls {}",
        args.input.display(),
        args.out.display(),
        report.attempted,
        report.succeeded,
        report.yield_fraction,
        translator.backend_calls()
    );
    let mut inputs: Vec<&Path> = vec![args.input.as_path()];
    if let Some(lex) = &args.lexicon {
        inputs.push(lex);
    }
    if let Some(table) = &args.table {
        inputs.push(table);
    }
    write_manifest(&args.out, argv, args.seed, &inputs, &[&args.out, &report_path])
}

fn read_token_lines(path: &Path) -> Result<Vec<Vec<String>>, CliError> {
    let file = File::open(path)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        out.push(line.split_whitespace().map(String::from).collect());
    }
    Ok(out)
}

fn read_bitext(source: &Path, target: &Path) -> Result<Vec<(Vec<String>, Vec<String>)>, CliError> {
    let src = read_token_lines(source)?;
    let tgt = read_token_lines(target)?;
    if src.len() != tgt.len() {
        return Err(CliError::Data(format!(
            "{} has {} lines but {} has {}",
            source.display(),
            src.len(),
            target.display(),
            tgt.len()
        )));
    }
    Ok(src.into_iter().zip(tgt).collect())
}

fn align_train(args: AlignTrainArgs, argv: &[String]) -> Result<(), CliError> {
    let mut config = aligner_config(args.config.as_deref())?;
    if let Some(v) = args.iterations {
        config.iterations = v;
    }
    if let Some(v) = args.lambda {
        config.lambda = v;
    }
    if let Some(v) = args.p_null {
        config.p_null = v;
    }
    if let Some(v) = args.smoothing_alpha {
        config.smoothing_alpha = v;
    }
    if let Some(v) = args.seed {
        config.seed = v;
    }
    let pairs = read_bitext(&args.source, &args.target)?;
    let model = aligner::train_aligner(&pairs, &config)?;
    let file = File::create(&args.out)
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", args.out.display())))?;
    let mut w = BufWriter::new(file);
    model.dump_ttable(&mut w)?;
    w.flush()?;
    println!("trained aligner on {} pairs -> {}", pairs.len(), args.out.display());
    write_manifest(
        &args.out,
        argv,
        Some(config.seed),
        &[&args.source, &args.target],
        &[&args.out],
    )
}

fn align(args: AlignArgs, argv: &[String]) -> Result<(), CliError> {
    let mut config = aligner_config(args.config.as_deref())?;
    if let Some(v) = args.lambda {
        config.lambda = v;
    }
    if let Some(v) = args.p_null {
        config.p_null = v;
    }
    let file = File::open(&args.ttable)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", args.ttable.display())))?;
    let model = AlignmentModel::load_ttable(&mut BufReader::new(file), config)?;
    let pairs = read_bitext(&args.source, &args.target)?;
    let out_file = File::create(&args.out)
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", args.out.display())))?;
    let mut w = BufWriter::new(out_file);
    for (idx, (src, tgt)) in pairs.iter().enumerate() {
        let alignment = model.viterbi_align(src, tgt).map_err(|e| {
            CliError::Data(format!("line {}: {e}", idx + 1))
        })?;
        writeln!(w, "{}", alignment.to_pharaoh())?;
    }
    w.flush()?;
    write_manifest(
        &args.out,
        argv,
        None,
        &[&args.ttable, &args.source, &args.target],
        &[&args.out],
    )
}

fn bpe_learn(args: BpeLearnArgs, argv: &[String]) -> Result<(), CliError> {
    let mut freqs: BTreeMap<String, u64> = BTreeMap::new();
    for path in &args.inputs {
        let corpus = dataset::read_corpus(path)?;
        for example in &corpus.examples {
            for token in &example.question_tokens {
                *freqs.entry(token.clone()).or_insert(0) += 1;
            }
            for token in example.mrl_string().split_whitespace() {
                *freqs.entry(token.to_string()).or_insert(0) += 1;
            }
        }
    }
    let model = bpe::learn_bpe(&freqs, args.merges)?;
    model.save(&args.out)?;
    println!(
        "learned {} merges over {} word types -> {}",
        model.merges().len(),
        freqs.len(),
        args.out.display()
    );
    let inputs: Vec<&Path> = args.inputs.iter().map(PathBuf::as_path).collect();
    write_manifest(&args.out, argv, None, &inputs, &[&args.out])
}

fn pretrain_mlm(args: PretrainMlmArgs, argv: &[String]) -> Result<(), CliError> {
    let mut config = parser_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let bpe_model = BpeModel::load(&args.bpe)?;
    let mut corpora = Vec::new();
    for path in &args.corpora {
        corpora.push(dataset::read_corpus(path)?);
    }
    let refs: Vec<&Corpus> = corpora.iter().collect();
    let vocab = nn::build_vocab(&refs, &bpe_model);
    let mut model = ParserModel::new(config, vocab, bpe_model)?;
    let sentences: Vec<Vec<String>> = corpora
        .iter()
        .flat_map(|c| c.examples.iter().map(|e| e.question_tokens.clone()))
        .collect();
    let history = nn::mlm_pretrain(&mut model, &sentences, args.epochs)?;
    save_checkpoint(&model, &args.out)?;
    let history_path = args
        .history
        .unwrap_or_else(|| args.out.with_extension("history.json"));
    write_json(&history_path, &history)?;
    if let Some(last) = history.epochs.last() {
        println!(
            "pretrained on {} sentences for {} epochs (final loss {:.4}) -> {}",
            sentences.len(),
            history.epochs.len(),
            last.loss,
            args.out.display()
        );
    }
    let mut inputs: Vec<&Path> = vec![args.bpe.as_path()];
    inputs.extend(args.corpora.iter().map(PathBuf::as_path));
    write_manifest(
        &args.out,
        argv,
        args.seed,
        &inputs,
        &[&args.out, &history_path],
    )
}

fn train(args: TrainArgs, argv: &[String]) -> Result<(), CliError> {
    let train_corpus = dataset::read_corpus(&args.train)?;
    let dev_corpus = dataset::read_corpus(&args.dev)?;

    let mut model = match &args.init_encoder {
        Some(ckpt) => load_checkpoint(ckpt)?,
        None => {
            let bpe_path = args.bpe.as_ref().ok_or_else(|| {
                CliError::Usage("--bpe is required unless --init-encoder is given".into())
            })?;
            let bpe_model = BpeModel::load(bpe_path)?;
            let mut config = parser_config(args.config.as_deref())?;
            if let Some(seed) = args.seed {
                config.seed = seed;
            }
            if let Some(v) = args.max_epochs {
                config.max_epochs = v;
            }
            if let Some(v) = args.batch_size {
                config.batch_size = v;
            }
            if args.no_copy {
                config.use_copy = false;
            }
            let vocab = nn::build_vocab(&[&train_corpus, &dev_corpus], &bpe_model);
            ParserModel::new(config, vocab, bpe_model)?
        }
    };
    if args.init_encoder.is_some() {
        // Layout-preserving overrides only.
        if let Some(v) = args.max_epochs {
            model.config.max_epochs = v;
        }
        if let Some(v) = args.batch_size {
            model.config.batch_size = v;
        }
        if args.no_copy {
            model.config.use_copy = false;
        }
        if let Some(seed) = args.seed {
            model.config.seed = seed;
        }
    }

    let schedule = UnfreezeSchedule { rate: args.unfreeze_rate, gradual: args.gradual };
    let history = nn::train_parser(&mut model, &train_corpus, &dev_corpus, &schedule)?;
    save_checkpoint(&model, &args.out)?;
    let history_path = args
        .history
        .unwrap_or_else(|| args.out.with_extension("history.json"));
    write_json(&history_path, &history)?;
    println!(
        "trained {} epochs (best {}), dev exact match {:.4} -> {}",
        history.epochs.len(),
        history.best_epoch,
        history.final_dev_exact_match.unwrap_or(f64::NAN),
        args.out.display()
    );
    let mut inputs: Vec<&Path> = vec![args.train.as_path(), args.dev.as_path()];
    if let Some(bpe_path) = &args.bpe {
        inputs.push(bpe_path);
    }
    if let Some(ckpt) = &args.init_encoder {
        inputs.push(ckpt);
    }
    write_manifest(
        &args.out,
        argv,
        args.seed,
        &inputs,
        &[&args.out, &history_path],
    )
}

#[derive(Serialize)]
struct PredictionRecord<'a> {
    id: &'a str,
    lang: &'a str,
    question: String,
    prediction: String,
}

fn predict(args: PredictArgs, argv: &[String]) -> Result<(), CliError> {
    let model = load_checkpoint(&args.model)?;
    let corpus = dataset::read_corpus(&args.input)?;
    let beam = args.beam.unwrap_or(model.config.beam_size);
    let file = File::create(&args.out)
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", args.out.display())))?;
    let mut w = BufWriter::new(file);
    for example in &corpus.examples {
        let decoded = model.decode_beam(
            &example.question_tokens,
            &nn::DecodeOptions { beam_size: beam, max_len: None },
        );
        let record = PredictionRecord {
            id: &example.id,
            lang: &example.lang,
            question: example.question(),
            prediction: decoded.mrl,
        };
        writeln!(w, "{}", serde_json::to_string(&record).expect("record serializes"))?;
    }
    w.flush()?;
    write_manifest(&args.out, argv, None, &[&args.model, &args.input], &[&args.out])
}

fn evaluate(args: EvaluateArgs, argv: &[String]) -> Result<(), CliError> {
    let model = load_checkpoint(&args.model)?;
    let test_corpus = dataset::read_corpus(&args.test)?;

    let filter = match &args.filter {
        None => None,
        Some(spec) => Some(match FilterList::shipped_default(spec) {
            Some(list) => list,
            None => FilterList::from_file(spec, Path::new(spec))?,
        }),
    };

    let translator = match args.mode {
        HarnessMode::TranslateTest => {
            let backend = args.backend.as_deref().ok_or_else(|| {
                CliError::Usage("translate-test mode requires --backend".into())
            })?;
            Some(make_translator(
                backend,
                args.lexicon.as_deref(),
                args.table.as_deref(),
                args.cache.as_deref(),
            )?)
        }
        _ => None,
    };
    let gold = match &args.gold {
        Some(path) => Some(dataset::read_corpus(path)?),
        None => None,
    };

    let options = HarnessOptions {
        filter,
        translator: translator.as_ref(),
        gold: gold.as_ref(),
        beam_size: args.beam,
    };
    let report = eval::run_harness(&model, &test_corpus, args.mode, &options)?;
    print!("{}", eval::render_report(&report));
    if let Some(path) = &args.report {
        write_json(path, &report)?;
        let mut inputs: Vec<&Path> = vec![args.model.as_path(), args.test.as_path()];
        if let Some(gold) = &args.gold {
            inputs.push(gold);
        }
        write_manifest(path, argv, None, &inputs, &[path])?;
    }
    Ok(())
}

fn report(args: ReportArgs) -> Result<(), CliError> {
    let mut text = String::new();
    File::open(&args.input)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", args.input.display())))?
        .read_to_string(&mut text)?;

    if let Ok(r) = serde_json::from_str::<eval::EvalReport>(&text) {
        print!("{}", eval::render_report(&r));
        return Ok(());
    }
    if let Ok(r) = serde_json::from_str::<projection::ProjectionReport>(&text) {
        println!(
            "bootstrap: attempted {}, succeeded {}, yield {:.4}",
            r.attempted, r.succeeded, r.yield_fraction
        );
        for (reason, count) in &r.failures {
            println!("  {reason:<24} {count}");
        }
        return Ok(());
    }
    if let Ok(r) = serde_json::from_str::<dataset::IngestReport>(&text) {
        println!(
            "ingestion: read {}, kept {}, dropped_unsupported {}, malformed {}",
            r.read, r.kept, r.dropped_unsupported, r.malformed
        );
        return Ok(());
    }
    if let Ok(h) = serde_json::from_str::<nn::TrainHistory>(&text) {
        println!("training history ({} epochs, best {}):", h.epochs.len(), h.best_epoch);
        for e in &h.epochs {
            println!(
                "  epoch {:>3}  train {:.4}  dev {:.4}  unfrozen {}",
                e.epoch, e.train_loss, e.dev_loss, e.unfrozen_groups
            );
        }
        if let Some(em) = h.final_dev_exact_match {
            println!("  final dev exact match {em:.4}");
        }
        return Ok(());
    }
    Err(CliError::Data(format!(
        "{} is not a recognized report format",
        args.input.display()
    )))
}

fn synth_cmd(args: SynthArgs, argv: &[String]) -> Result<(), CliError> {
    match args.kind.as_str() {
        "grammar" => {
            let fillers = match args.open_vocab.as_deref() {
                None => synth::SlotFillers::Closed,
                Some(which) => {
                    let (train_pool, dev_pool) = synth::open_pools(args.seed, 40);
                    match which {
                        "train" => synth::SlotFillers::Open(train_pool),
                        "dev" => synth::SlotFillers::Open(dev_pool),
                        other => {
                            return Err(CliError::Usage(format!(
                                "--open-vocab must be train or dev, got {other:?}"
                            )))
                        }
                    }
                }
            };
            let corpus =
                synth::generate_corpus(args.split, &args.lang, args.n, args.seed, &fillers);
            dataset::write_corpus(&args.out, &corpus)?;
            println!("wrote {} synthetic examples -> {}", corpus.len(), args.out.display());
        }
        "lexicon" => {
            let file = File::create(&args.out).map_err(|e| {
                CliError::Data(format!("cannot write {}: {e}", args.out.display()))
            })?;
            let mut w = BufWriter::new(file);
            for (src, tgt) in synth::bijective_lexicon() {
                writeln!(w, "{src}\t{tgt}")?;
            }
            w.flush()?;
            println!("wrote bijective lexicon -> {}", args.out.display());
        }
        other => {
            return Err(CliError::Usage(format!(
                "--kind must be grammar or lexicon, got {other:?}"
            )))
        }
    }
    write_manifest(&args.out, argv, Some(args.seed), &[], &[&args.out])
}
