//! `lrlm` command-line pipeline.
//!
//! Every subcommand writes its declared artifacts and returns a JSON summary,
//! which `main` prints on standard output. Logs go to standard error.

pub mod config;

use std::collections::BTreeSet;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use lrlm_core::annotation::{
    agreement_report, export_dataset, read_items, read_records, resolve_agreement, AnnotationTask,
    Campaign,
};
use lrlm_core::corpus::{
    ingest_source, merge_corpora, normalize_text, prepare_corpus, stats_by_source, stats_table,
    write_jsonl, CorpusStats, Document, IngestOptions, NormConfig, PreparedDocument, SourceFormat,
};
use lrlm_core::eval::{
    evaluate, ComparisonTable, MetricsReport, ReportEntry, ReportFormat, TaskScore,
};
use lrlm_core::heads::{
    attach_head, encode_dataset, finetune, random_search, read_labeled_jsonl, split_dataset,
    write_labeled_jsonl, LabeledExample, SearchSpace, Target, TaskKind, TaskModel, TaskSpec,
};
use lrlm_core::mlm::{apply_masking_traced, build_sequences, Corruption, InputSequence};
use lrlm_core::model::{pretrain, EncoderCheckpoint};
use lrlm_core::tokenizer::{count_words, train_wordpiece, SubwordVocabulary, UNK_ID};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub use config::PipelineConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] lrlm_core::Error),
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    Usage(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("annotation service: {0}")]
    Server(#[from] lrlm_annotate_server::ServerError),
}

impl CliError {
    /// Usage mistakes exit with 2, everything else with 1.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "lrlm",
    version,
    about = "Build, train and evaluate a compact monolingual language model"
)]
pub struct Cli {
    /// Run configuration (TOML or JSON); flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Global seed (overrides the config file).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Ingest, clean and describe text corpora.
    #[command(subcommand)]
    Corpus(CorpusCmd),
    /// Train or apply the WordPiece tokenizer.
    #[command(subcommand)]
    Tokenizer(TokenizerCmd),
    /// Inspect masked-language-model training data.
    #[command(subcommand)]
    Mlm(MlmCmd),
    /// Pretrain the encoder with the masked-language-model objective.
    Pretrain(PretrainArgs),
    /// Fine-tune a classification head on a pretrained encoder.
    Finetune(FinetuneArgs),
    /// Score a fine-tuned model on a labeled dataset.
    Evaluate(EvaluateArgs),
    /// Render a models-by-tasks accuracy table.
    Report(ReportArgs),
    /// Run and resolve two-annotator labeling campaigns.
    #[command(subcommand)]
    Annotate(AnnotateCmd),
}

#[derive(Debug, Subcommand)]
pub enum CorpusCmd {
    /// Merge sources, normalize, segment and deduplicate into one JSONL file.
    Ingest(IngestArgs),
    /// Item, sentence, token and vocabulary counts per source.
    Stats(StatsArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Source file as PATH or NAME=PATH (format from the extension).
    #[arg(long = "input", required = true)]
    pub inputs: Vec<String>,
    /// Output JSONL of cleaned documents with their sentences.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the statistics summary here.
    #[arg(long)]
    pub stats_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    /// Corpus file or directory of source files.
    #[arg(long)]
    pub input: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum TokenizerCmd {
    /// Train a WordPiece vocabulary on a cleaned corpus.
    Train(TokenizerTrainArgs),
    /// Encode text with a trained vocabulary.
    Encode(TokenizerEncodeArgs),
}

#[derive(Debug, Args)]
pub struct TokenizerTrainArgs {
    /// Cleaned corpus from `corpus ingest`.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub vocab_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TokenizerEncodeArgs {
    #[arg(long)]
    pub vocab: PathBuf,
    /// Text to encode (repeatable).
    #[arg(long = "text", required = true)]
    pub texts: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum MlmCmd {
    /// Mask a sample of corpus sequences and report corruption statistics.
    Sample(MlmSampleArgs),
}

#[derive(Debug, Args)]
pub struct MlmSampleArgs {
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Write the masked batch as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Number of sequences to sample (all when absent).
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Encoder checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long, value_enum)]
    pub preset: Option<config::Preset>,
    /// Also write the step log (JSONL) here.
    #[arg(long)]
    pub log_out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    Binary,
    Multiclass,
    Multilabel,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    /// Pretrained encoder checkpoint.
    #[arg(long)]
    pub encoder: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// Labeled JSONL; split into train/val/test unless --val is given.
    #[arg(long)]
    pub data: PathBuf,
    /// Validation JSONL; with it, --data is used whole for training.
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long)]
    pub task: String,
    #[arg(long, value_enum)]
    pub kind: KindArg,
    /// Label set in order (inferred and sorted when absent).
    #[arg(long, value_delimiter = ',')]
    pub labels: Option<Vec<String>>,
    /// Task model checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Directory for the split files (defaults to the output's directory).
    #[arg(long)]
    pub split_dir: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub search_trials: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Fine-tuned task model.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Write the metrics JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Row name for the evaluated model.
    #[arg(long)]
    pub model: Option<String>,
    /// Model size shown in the table.
    #[arg(long)]
    pub size: Option<String>,
    /// COLUMN=METRICS_JSON from `evaluate` (repeatable, in column order).
    #[arg(long = "metrics")]
    pub metrics: Vec<String>,
    /// JSON list of additional rows: [{"model", "size"?, "scores": [{"task", "accuracy"}]}].
    #[arg(long)]
    pub scores: Option<PathBuf>,
    /// Output file; `.csv` gives CSV, anything else markdown (repeatable).
    #[arg(long = "out", required = true)]
    pub outs: Vec<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum AnnotateCmd {
    /// Serve the labeling API for a campaign.
    Serve(ServeArgs),
    /// Apply the agreement rule to a label log.
    Resolve(ResolveArgs),
    /// Write fine-tuning datasets from a label log.
    Export(ExportArgs),
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub items: PathBuf,
    /// The two annotator ids, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub annotators: Vec<String>,
    /// Append-only label log (replayed on start).
    #[arg(long)]
    pub log: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
}

#[derive(Debug, Args)]
pub struct ResolveArgs {
    #[arg(long)]
    pub items: PathBuf,
    /// Label records (JSONL), e.g. the service's log.
    #[arg(long)]
    pub labels: PathBuf,
    /// Write the per-item resolution JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub items: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    /// fakenews or toxicity.
    #[arg(long)]
    pub task: String,
    #[arg(long)]
    pub out_dir: PathBuf,
}

/// Run one parsed command and return its JSON summary.
pub fn run(cli: Cli) -> Result<Value> {
    let mut cfg = PipelineConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    match cli.command {
        Command::Corpus(CorpusCmd::Ingest(a)) => corpus_ingest(&cfg, a),
        Command::Corpus(CorpusCmd::Stats(a)) => corpus_stats_cmd(&cfg, a),
        Command::Tokenizer(TokenizerCmd::Train(a)) => tokenizer_train(&cfg, a),
        Command::Tokenizer(TokenizerCmd::Encode(a)) => tokenizer_encode(&cfg, a),
        Command::Mlm(MlmCmd::Sample(a)) => mlm_sample(&cfg, a),
        Command::Pretrain(a) => pretrain_cmd(&cfg, a),
        Command::Finetune(a) => finetune_cmd(&cfg, a),
        Command::Evaluate(a) => evaluate_cmd(&cfg, a),
        Command::Report(a) => report_cmd(a),
        Command::Annotate(AnnotateCmd::Serve(a)) => annotate_serve(a),
        Command::Annotate(AnnotateCmd::Resolve(a)) => annotate_resolve(a),
        Command::Annotate(AnnotateCmd::Export(a)) => annotate_export(a),
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir).map_err(io_err(dir)),
        _ => Ok(()),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, text).map_err(io_err(path))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(lrlm_core::Error::from)?;
    text.push('\n');
    write_text(path, &text)
}

/// One line of the cleaned corpus file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusRecord {
    #[serde(flatten)]
    pub doc: Document,
    pub sentences: Vec<String>,
}

pub fn read_corpus(path: &Path) -> Result<Vec<CorpusRecord>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| {
                CliError::Core(lrlm_core::Error::Record {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: e.to_string(),
                })
            })
        })
        .collect()
}

fn corpus_sentences(path: &Path) -> Result<Vec<String>> {
    Ok(read_corpus(path)?
        .into_iter()
        .flat_map(|r| r.sentences)
        .collect())
}

fn parse_source(spec: &str) -> (String, PathBuf) {
    match spec.split_once('=') {
        Some((name, path)) if !name.is_empty() && !name.contains(['/', '\\']) => {
            (name.to_string(), PathBuf::from(path))
        }
        _ => {
            let path = PathBuf::from(spec);
            let name = path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("source")
                .to_string();
            (name, path)
        }
    }
}

fn ingest_all(
    cfg: &PipelineConfig,
    sources: &[(String, PathBuf)],
) -> Result<(Vec<Document>, usize)> {
    let opts = IngestOptions {
        plain_text: cfg.corpus.plain_text,
        ..IngestOptions::default()
    };
    let mut all = Vec::new();
    let mut skipped = 0;
    for (name, path) in sources {
        let ingested = ingest_source(path, SourceFormat::from_path(path), name, opts)?;
        for e in &ingested.errors {
            log::warn!("{}: skipped {e}", path.display());
        }
        skipped += ingested.errors.len();
        all.push(ingested.documents);
    }
    Ok((merge_corpora(all)?, skipped))
}

fn stats_json(rows: &[(String, CorpusStats)]) -> Value {
    let (total, per_source) = rows
        .split_last()
        .expect("stats always end with a total row");
    json!({
        "items": total.1.items,
        "sentences": total.1.sentences,
        "tokens": total.1.tokens,
        "unique_words": total.1.unique_words,
        "sources": per_source.iter().map(|(name, s)| json!({
            "source": name,
            "items": s.items,
            "sentences": s.sentences,
            "tokens": s.tokens,
            "unique_words": s.unique_words,
        })).collect::<Vec<_>>(),
    })
}

fn corpus_ingest(cfg: &PipelineConfig, a: IngestArgs) -> Result<Value> {
    cfg.norm.validate()?;
    let sources: Vec<(String, PathBuf)> = a.inputs.iter().map(|s| parse_source(s)).collect();
    let (docs, skipped) = ingest_all(cfg, &sources)?;
    let (prepared, report) = prepare_corpus(docs, &cfg.norm, cfg.corpus.dedup);
    ensure_parent(&a.out)?;
    write_jsonl(
        &a.out,
        prepared.iter().map(|p| CorpusRecord {
            doc: p.doc.clone(),
            sentences: p.sentences.clone(),
        }),
    )?;
    let rows = stats_by_source(&prepared);
    eprint!("{}", stats_table(&rows));
    let summary = json!({
        "out": a.out,
        "skipped_records": skipped,
        "cleaning": report,
        "stats": stats_json(&rows),
    });
    if let Some(path) = &a.stats_out {
        write_json(path, &summary["stats"])?;
    }
    Ok(summary)
}

fn corpus_stats_cmd(cfg: &PipelineConfig, a: StatsArgs) -> Result<Value> {
    let paths: Vec<PathBuf> = if a.input.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(&a.input)
            .map_err(io_err(&a.input))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        files
    } else {
        vec![a.input.clone()]
    };
    let sources: Vec<(String, PathBuf)> = paths
        .iter()
        .map(|p| parse_source(&p.to_string_lossy()))
        .collect();
    let (docs, _) = ingest_all(cfg, &sources)?;
    let (prepared, _) = prepare_corpus(docs, &cfg.norm, cfg.corpus.dedup);
    let rows = stats_by_source(&prepared);
    eprint!("{}", stats_table(&rows));
    Ok(stats_json(&rows))
}

fn tokenizer_train(cfg: &PipelineConfig, a: TokenizerTrainArgs) -> Result<Value> {
    let sentences = corpus_sentences(&a.corpus)?;
    let mut trainer = cfg.tokenizer.clone();
    if let Some(v) = a.vocab_size {
        trainer.vocab_size = v;
    }
    let vocab = train_wordpiece(&count_words(&sentences), &trainer)?;
    ensure_parent(&a.out)?;
    vocab.save(&a.out)?;
    let unk = sentences
        .iter()
        .flat_map(|s| vocab.encode(s))
        .filter(|&id| id == UNK_ID)
        .count();
    Ok(json!({
        "out": a.out,
        "vocab_size": vocab.len(),
        "requested_vocab_size": trainer.vocab_size,
        "fingerprint": vocab.fingerprint(),
        "sentences": sentences.len(),
        "unk_tokens": unk,
    }))
}

fn tokenizer_encode(cfg: &PipelineConfig, a: TokenizerEncodeArgs) -> Result<Value> {
    let vocab = SubwordVocabulary::load(&a.vocab)?;
    let encoded: Vec<Value> = a
        .texts
        .iter()
        .map(|t| {
            let norm = normalize_text(t, &cfg.norm);
            let ids = vocab.encode(&norm);
            let pieces: Vec<&str> = ids.iter().map(|&i| vocab.piece(i).unwrap_or("")).collect();
            Ok(json!({"text": t, "normalized": norm, "ids": ids, "pieces": pieces, "decoded": vocab.decode(&ids)?}))
        })
        .collect::<Result<_>>()?;
    Ok(json!({ "fingerprint": vocab.fingerprint(), "sequences": encoded }))
}

fn corpus_sequences(
    vocab: &SubwordVocabulary,
    corpus: &Path,
    max_len: usize,
) -> Result<Vec<InputSequence>> {
    let ids: Vec<Vec<u32>> = corpus_sentences(corpus)?
        .iter()
        .map(|s| vocab.encode(s))
        .collect();
    Ok(build_sequences(&ids, max_len)?)
}

fn mlm_sample(cfg: &PipelineConfig, a: MlmSampleArgs) -> Result<Value> {
    let vocab = SubwordVocabulary::load(&a.vocab)?;
    let mut seqs = corpus_sequences(&vocab, &a.corpus, a.max_len.unwrap_or(cfg.pretrain.max_len))?;
    if let Some(limit) = a.limit {
        seqs.truncate(limit);
    }
    let policy = lrlm_core::mlm::MaskingPolicy {
        seed: cfg.seed,
        ..cfg.masking.clone()
    };
    let (batch, trace) = apply_masking_traced(&seqs, &policy, vocab.len())?;
    let eligible: usize = seqs
        .iter()
        .map(|s| {
            s.ids
                .iter()
                .zip(&s.attention_mask)
                .filter(|&(&id, &m)| m == 1 && !lrlm_core::tokenizer::is_special(id))
                .count()
        })
        .sum();
    let count = |k: Corruption| trace.iter().flatten().filter(|(_, c)| *c == k).count();
    let selected: usize = trace.iter().map(Vec::len).sum();
    if let Some(out) = &a.out {
        write_text(out, &batch.to_json()?)?;
    }
    Ok(json!({
        "sequences": seqs.len(),
        "eligible_positions": eligible,
        "selected": selected,
        "selected_fraction": if eligible == 0 { 0.0 } else { selected as f64 / eligible as f64 },
        "mask": count(Corruption::Mask),
        "random": count(Corruption::Random),
        "keep": count(Corruption::Keep),
    }))
}

fn pretrain_cmd(cfg: &PipelineConfig, a: PretrainArgs) -> Result<Value> {
    let vocab = SubwordVocabulary::load(&a.vocab)?;
    let max_len = a.max_len.unwrap_or(cfg.pretrain.max_len);
    let seqs = corpus_sequences(&vocab, &a.corpus, max_len)?;
    let mut section = cfg.model.clone();
    if let Some(p) = a.preset {
        section.preset = p;
    }
    let model_cfg = section.resolve(vocab.len());
    let mut schedule = cfg.pretrain.schedule.clone();
    if let Some(steps) = a.steps {
        schedule.steps = steps;
    }
    let policy = lrlm_core::mlm::MaskingPolicy {
        seed: cfg.seed,
        ..cfg.masking.clone()
    };
    let out = pretrain(
        &seqs,
        &model_cfg,
        &policy,
        &schedule,
        cfg.seed,
        &vocab.fingerprint(),
    )?;
    ensure_parent(&a.out)?;
    out.checkpoint.save(&a.out)?;
    if let Some(path) = &a.log_out {
        ensure_parent(path)?;
        write_jsonl(path, &out.log)?;
    }
    let (first, last) = (out.initial_smoothed_loss(), out.final_smoothed_loss());
    Ok(json!({
        "out": a.out,
        "sequences": seqs.len(),
        "parameters": model_cfg.parameter_count(),
        "model": model_cfg,
        "steps": schedule.steps,
        "skipped_batches": out.skipped_batches,
        "initial_smoothed_loss": first,
        "final_smoothed_loss": last,
        "smoothed_loss_reduction": first.zip(last).map(|(f, l)| 1.0 - l / f),
        "log": out.log,
    }))
}

/// Normalize example texts the same way the tokenizer's corpus was.
fn normalized_examples(path: &Path, norm: &NormConfig) -> Result<Vec<LabeledExample>> {
    Ok(read_labeled_jsonl(path)?
        .into_iter()
        .map(|e| LabeledExample {
            text: normalize_text(&e.text, norm),
            ..e
        })
        .collect())
}

fn task_spec(
    name: &str,
    kind: KindArg,
    labels: Option<Vec<String>>,
    examples: &[LabeledExample],
) -> Result<TaskSpec> {
    let labels = labels.unwrap_or_else(|| {
        let set: BTreeSet<&str> = examples
            .iter()
            .flat_map(|e| match &e.target {
                Target::Label(l) => vec![l.as_str()],
                Target::Labels(ls) => ls.iter().map(String::as_str).collect(),
            })
            .collect();
        set.into_iter().map(str::to_string).collect()
    });
    let spec = match kind {
        KindArg::Binary => match labels.as_slice() {
            [a, b] => TaskSpec::binary(name, [a.as_str(), b.as_str()]),
            other => {
                return Err(CliError::Usage(format!(
                    "a binary task needs exactly two labels, found {}: {other:?}",
                    other.len()
                )))
            }
        },
        KindArg::Multiclass => TaskSpec::multiclass(name, &labels),
        KindArg::Multilabel => TaskSpec::multilabel(name, &labels),
    };
    spec.validate()?;
    Ok(spec)
}

fn finetune_cmd(cfg: &PipelineConfig, a: FinetuneArgs) -> Result<Value> {
    let vocab = SubwordVocabulary::load(&a.vocab)?;
    let encoder = EncoderCheckpoint::load_with_vocab(&a.encoder, &vocab)?;
    let examples = normalized_examples(&a.data, &cfg.norm)?;
    let spec = task_spec(&a.task, a.kind, a.labels.clone(), &examples)?;
    let [rt, rv, rs] = cfg.finetune.split;
    let (train, val, test) = match &a.val {
        Some(val) => (examples, normalized_examples(val, &cfg.norm)?, Vec::new()),
        None => {
            let split = split_dataset(&examples, &spec, (rt, rv, rs), cfg.seed, true)?;
            let dir = a
                .split_dir
                .clone()
                .or_else(|| a.out.parent().map(Path::to_path_buf))
                .unwrap_or_default();
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
            for (part, rows) in [
                ("train", &split.train),
                ("val", &split.val),
                ("test", &split.test),
            ] {
                write_labeled_jsonl(&dir.join(format!("{}.{part}.jsonl", a.task)), rows)?;
            }
            (split.train, split.val, split.test)
        }
    };
    let max_len = cfg.finetune.max_len;
    let train_data = encode_dataset(&spec, &vocab, &train, max_len)?;
    let val_data = encode_dataset(&spec, &vocab, &val, max_len)?;
    let mut base = cfg.finetune.train.clone();
    base.seed = cfg.seed;
    if let Some(e) = a.epochs {
        base.epochs = e;
    }
    if let Some(lr) = a.lr {
        base.lr = lr;
    }
    let model = attach_head(&encoder, &spec, cfg.seed)?;
    let trials = a.search_trials.unwrap_or(cfg.finetune.search_trials);
    let (tuned, history, search) = if trials > 0 {
        let out = random_search(
            &model,
            &train_data,
            &val_data,
            &SearchSpace::default(),
            &base,
            trials,
            cfg.seed,
        )?;
        let log = json!({"best_trial": out.best_trial, "best_config": out.best_config, "trials": out.trials});
        (out.model, out.history, Some(log))
    } else {
        let (m, h) = finetune(&model, &train_data, &val_data, &base)?;
        (m, h, None)
    };
    ensure_parent(&a.out)?;
    tuned.save(&a.out)?;
    Ok(json!({
        "out": a.out,
        "task": spec,
        "train_examples": train.len(),
        "val_examples": val.len(),
        "test_examples": test.len(),
        "config": base,
        "history": history,
        "search": search,
    }))
}

/// Metrics file written by `evaluate`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationRecord {
    pub task: String,
    pub kind: TaskKind,
    pub labels: Vec<String>,
    pub metrics: MetricsReport,
}

fn evaluate_cmd(cfg: &PipelineConfig, a: EvaluateArgs) -> Result<Value> {
    let vocab = SubwordVocabulary::load(&a.vocab)?;
    let model = TaskModel::load_with_vocab(&a.model, &vocab)?;
    let examples = normalized_examples(&a.data, &cfg.norm)?;
    let data = encode_dataset(
        &model.spec,
        &vocab,
        &examples,
        cfg.finetune.max_len.min(model.config.max_positions),
    )?;
    let record = EvaluationRecord {
        task: model.spec.name.clone(),
        kind: model.spec.kind,
        labels: model.spec.labels.clone(),
        metrics: evaluate(&model, &data)?,
    };
    if let Some(out) = &a.out {
        write_json(out, &record)?;
    }
    Ok(serde_json::to_value(&record).map_err(lrlm_core::Error::from)?)
}

fn percent(x: f64) -> f64 {
    (x * 10_000.0).round() / 100.0
}

fn report_cmd(a: ReportArgs) -> Result<Value> {
    let mut entries = Vec::new();
    let mut notes = Vec::new();
    if !a.metrics.is_empty() {
        let mut scores = Vec::new();
        for spec in &a.metrics {
            let (column, path) = spec.split_once('=').ok_or_else(|| {
                CliError::Usage(format!("--metrics expects COLUMN=PATH, got {spec:?}"))
            })?;
            let path = Path::new(path);
            let text = fs::read_to_string(path).map_err(io_err(path))?;
            let record: EvaluationRecord =
                serde_json::from_str(&text).map_err(lrlm_core::Error::from)?;
            if let Some(subset) = record.metrics.subset_accuracy {
                notes.push(format!(
                    "{column}: mean per-label accuracy; subset (exact-match) accuracy is {:.2}.",
                    percent(subset)
                ));
            }
            scores.push(TaskScore {
                task: column.to_string(),
                accuracy: percent(record.metrics.accuracy),
            });
        }
        entries.push(ReportEntry {
            model: a.model.clone().unwrap_or_else(|| "model".into()),
            size: a.size.clone(),
            scores,
        });
    }
    if let Some(path) = &a.scores {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let more: Vec<ReportEntry> = serde_json::from_str(&text).map_err(lrlm_core::Error::from)?;
        entries.extend(more);
    }
    if entries.is_empty() {
        return Err(CliError::Usage("report needs --metrics or --scores".into()));
    }
    let table = ComparisonTable::from_entries(&entries, notes)?;
    for out in &a.outs {
        let format = match out.extension().and_then(|e| e.to_str()) {
            Some("csv") => ReportFormat::Csv,
            _ => ReportFormat::Markdown,
        };
        write_text(out, &table.render(format)?)?;
    }
    Ok(json!({ "outs": a.outs, "table": table }))
}

fn annotate_serve(a: ServeArgs) -> Result<Value> {
    let campaign = Campaign::load(&a.items, &a.annotators, Some(&a.log))?;
    let progress = campaign.progress();
    let state = lrlm_annotate_server::AppState::new(campaign);
    let runtime = tokio::runtime::Runtime::new().map_err(io_err(Path::new("tokio runtime")))?;
    runtime.block_on(lrlm_annotate_server::serve(a.addr, state))?;
    Ok(json!({ "stopped": true, "progress_at_start": progress }))
}

fn annotate_resolve(a: ResolveArgs) -> Result<Value> {
    let items = read_items(&a.items)?;
    let records = read_records(&a.labels)?;
    let resolution = resolve_agreement(&items, &records);
    if let Some(out) = &a.out {
        write_json(out, &resolution)?;
    }
    Ok(json!({
        "summary": resolution.summary,
        "incomplete": resolution.incomplete,
        "agreement": agreement_report(&items, &records),
    }))
}

fn annotate_export(a: ExportArgs) -> Result<Value> {
    let task: AnnotationTask = a
        .task
        .parse()
        .map_err(|e: lrlm_core::Error| CliError::Usage(e.to_string()))?;
    let items = read_items(&a.items)?;
    let records = read_records(&a.labels)?;
    let resolution = resolve_agreement(&items, &records);
    let datasets = export_dataset(&items, &resolution, task);
    fs::create_dir_all(&a.out_dir).map_err(io_err(&a.out_dir))?;
    let mut files = Vec::new();
    let binary_name = match task {
        AnnotationTask::Fakenews => "fakenews.jsonl",
        AnnotationTask::Toxicity => "toxicity.binary.jsonl",
    };
    let path = a.out_dir.join(binary_name);
    write_labeled_jsonl(&path, &datasets.binary)?;
    files.push(json!({"path": path, "examples": datasets.binary.len()}));
    if let Some(multi) = &datasets.multilabel {
        let path = a.out_dir.join("toxicity.multilabel.jsonl");
        write_labeled_jsonl(&path, multi)?;
        files.push(json!({"path": path, "examples": multi.len()}));
    }
    Ok(json!({ "task": task, "summary": resolution.summary, "files": files }))
}

/// Statistics of a prepared corpus, for callers that already hold documents.
pub fn prepared_stats(docs: &[PreparedDocument]) -> Value {
    stats_json(&stats_by_source(docs))
}
