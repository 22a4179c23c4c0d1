//! The `revsum` command line: train, eval, predict, analyze, visualize,
//! gen-data, and gradcheck subcommands.
//!
//! Exit codes: 0 success, 1 runtime failure (diagnostic on stderr), 2 usage
//! error.

use std::ffi::OsString;
use std::io::Read;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use crate::analysis::{
    conflicting_set, export_heatmap, length_buckets, load_predictions, save_predictions,
};
use crate::checkpoint::{load_model, save_model};
use crate::data::{gen_synthetic, load_corpus, save_corpus, tokenize, Example, SyntheticSpec, Vocabulary};
use crate::error::{Error, Result};
use crate::gradcheck::{check_all_models, check_tensor_ops};
use crate::model::{build_model, ModelConfig, ModelVariant};
use crate::train::{evaluate, save_history, train, LossReduction, TrainConfig};

#[derive(Parser)]
#[command(name = "revsum", version, about = "Review + summary sentiment classification toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model variant on a corpus and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a corpus; optionally write prediction records.
    Eval(EvalArgs),
    /// Predict the rating of one JSON record read from standard input.
    Predict(PredictArgs),
    /// Conflicting-set decomposition and length-bucket accuracy.
    Analyze(AnalyzeArgs),
    /// Export an attention heatmap for one example.
    Visualize(VisualizeArgs),
    /// Generate a synthetic corpus from a spec file.
    GenData(GenDataArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Flat key-value config file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Training corpus (JSON lines).
    #[arg(long)]
    corpus: PathBuf,
    /// Development corpus for early stopping.
    #[arg(long)]
    dev: PathBuf,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    /// Optional pretrained embedding text file.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Optional training history output (JSON lines).
    #[arg(long)]
    history: Option<PathBuf>,
    /// Overrides the seed from the config file.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Prediction records output (JSON lines).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Review-only model predictions (JSON lines).
    #[arg(long)]
    preds_review: PathBuf,
    /// Summary-only model predictions (JSON lines).
    #[arg(long)]
    preds_summary: PathBuf,
    /// Additional models to score on the decomposed sets. Repeatable.
    #[arg(long = "preds")]
    preds_extra: Vec<PathBuf>,
    /// Corpus backing the prediction ids; enables length buckets.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Comma-separated bucket edges in review tokens.
    #[arg(long, value_delimiter = ',', default_value = "50,100,150,200,300")]
    buckets: Vec<usize>,
    /// Write the report here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VisualizeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Zero-based example index within the corpus.
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// HTML output path; the JSON sidecar lands next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenDataArgs {
    /// Synthetic corpus spec file (TOML).
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    count: usize,
    /// Overrides the seed from the spec file.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

/// Parse and dispatch; returns the process exit code.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // --help and --version are not usage errors.
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    let outcome = match cli.command {
        Command::Train(args) => run_train(args),
        Command::Eval(args) => run_eval(args),
        Command::Predict(args) => run_predict(args),
        Command::Analyze(args) => run_analyze(args),
        Command::Visualize(args) => run_visualize(args),
        Command::GenData(args) => run_gen_data(args),
        Command::Gradcheck(args) => run_gradcheck(args),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", e);
            1
        }
    }
}

// --- flat key-value config files -------------------------------------------

struct FlatConfig {
    table: toml::Table,
    path: String,
}

impl FlatConfig {
    fn load(path: &std::path::Path) -> Result<FlatConfig> {
        let text = std::fs::read_to_string(path)?;
        let table: toml::Table = text
            .parse()
            .map_err(|e| Error::Config(format!("{}: {}", path.display(), e)))?;
        for (key, value) in &table {
            if value.is_table() {
                return Err(Error::Config(format!(
                    "{}: key {:?} nests a table; config files are flat key-value",
                    path.display(),
                    key
                )));
            }
        }
        Ok(FlatConfig { table, path: path.display().to_string() })
    }

    fn bad(&self, key: &str, expected: &str) -> Error {
        Error::Config(format!("{}: key {:?} must be {}", self.path, key, expected))
    }

    fn string(&self, key: &str) -> Result<Option<String>> {
        match self.table.get(key) {
            None => Ok(None),
            Some(v) => v.as_str().map(|s| Some(s.to_string())).ok_or_else(|| self.bad(key, "a string")),
        }
    }

    fn integer(&self, key: &str) -> Result<Option<i64>> {
        match self.table.get(key) {
            None => Ok(None),
            Some(v) => v.as_integer().map(Some).ok_or_else(|| self.bad(key, "an integer")),
        }
    }

    fn unsigned(&self, key: &str) -> Result<Option<usize>> {
        match self.integer(key)? {
            None => Ok(None),
            Some(v) if v >= 0 => Ok(Some(v as usize)),
            Some(_) => Err(self.bad(key, "a non-negative integer")),
        }
    }

    fn float(&self, key: &str) -> Result<Option<f64>> {
        match self.table.get(key) {
            None => Ok(None),
            Some(v) => v
                .as_float()
                .or_else(|| v.as_integer().map(|i| i as f64))
                .map(Some)
                .ok_or_else(|| self.bad(key, "a number")),
        }
    }

    fn boolean(&self, key: &str) -> Result<Option<bool>> {
        match self.table.get(key) {
            None => Ok(None),
            Some(v) => v.as_bool().map(Some).ok_or_else(|| self.bad(key, "a boolean")),
        }
    }

    fn string_list(&self, key: &str) -> Result<Option<Vec<String>>> {
        match self.table.get(key) {
            None => Ok(None),
            Some(v) => v
                .as_array()
                .and_then(|a| a.iter().map(|x| x.as_str().map(|s| s.to_string())).collect::<Option<Vec<_>>>())
                .map(Some)
                .ok_or_else(|| self.bad(key, "an array of strings")),
        }
    }

    fn float_list(&self, key: &str) -> Result<Option<Vec<f64>>> {
        match self.table.get(key) {
            None => Ok(None),
            Some(v) => v
                .as_array()
                .and_then(|a| {
                    a.iter()
                        .map(|x| x.as_float().or_else(|| x.as_integer().map(|i| i as f64)))
                        .collect::<Option<Vec<_>>>()
                })
                .map(Some)
                .ok_or_else(|| self.bad(key, "an array of numbers")),
        }
    }

    fn unsigned_pair(&self, key: &str) -> Result<Option<(usize, usize)>> {
        match self.table.get(key) {
            None => Ok(None),
            Some(v) => {
                let arr = v.as_array().ok_or_else(|| self.bad(key, "a [lo, hi] pair"))?;
                if arr.len() != 2 {
                    return Err(self.bad(key, "a [lo, hi] pair"));
                }
                let lo = arr[0].as_integer().ok_or_else(|| self.bad(key, "a [lo, hi] pair"))?;
                let hi = arr[1].as_integer().ok_or_else(|| self.bad(key, "a [lo, hi] pair"))?;
                if lo < 0 || hi < 0 {
                    return Err(self.bad(key, "non-negative"));
                }
                Ok(Some((lo as usize, hi as usize)))
            }
        }
    }

    fn reject_unknown(&self, known: &[&str]) -> Result<()> {
        for key in self.table.keys() {
            if !known.contains(&key.as_str()) {
                return Err(Error::Config(format!("{}: unknown key {:?}", self.path, key)));
            }
        }
        Ok(())
    }
}

const TRAIN_CONFIG_KEYS: &[&str] = &[
    "variant", "embed_dim", "hidden_size", "heads", "layers", "dropout", "trainable_embeddings",
    "self_attention_hops", "self_attention_dim", "vocab_min_count", "epochs", "batch_size",
    "patience", "hard_attention_weight", "learning_rate", "clip_norm", "loss_reduction", "seed",
];

struct TrainFileConfig {
    model: ModelConfig,
    train: TrainConfig,
    vocab_min_count: usize,
}

fn parse_train_config(path: &std::path::Path) -> Result<TrainFileConfig> {
    let flat = FlatConfig::load(path)?;
    flat.reject_unknown(TRAIN_CONFIG_KEYS)?;
    let variant: ModelVariant = flat
        .string("variant")?
        .ok_or_else(|| Error::Config(format!("{}: missing required key \"variant\"", path.display())))?
        .parse()?;
    let mut model = ModelConfig::new(variant);
    if let Some(v) = flat.unsigned("embed_dim")? {
        model.embed_dim = v;
    }
    if let Some(v) = flat.unsigned("hidden_size")? {
        model.hidden_size = v;
    }
    if let Some(v) = flat.unsigned("heads")? {
        model.heads = v;
    }
    if let Some(v) = flat.unsigned("layers")? {
        model.layers = v;
    }
    if let Some(v) = flat.float("dropout")? {
        model.dropout = v;
    }
    if let Some(v) = flat.boolean("trainable_embeddings")? {
        model.trainable_embeddings = v;
    }
    if let Some(v) = flat.unsigned("self_attention_hops")? {
        model.self_attention_hops = v;
    }
    if let Some(v) = flat.unsigned("self_attention_dim")? {
        model.self_attention_dim = v;
    }

    let mut train = TrainConfig::default();
    if let Some(v) = flat.unsigned("epochs")? {
        train.epochs = v;
    }
    if let Some(v) = flat.unsigned("batch_size")? {
        train.batch_size = v;
    }
    if let Some(v) = flat.unsigned("patience")? {
        train.patience = v;
    }
    if let Some(v) = flat.float("hard_attention_weight")? {
        train.hard_attention_weight = v;
    }
    if let Some(v) = flat.float("learning_rate")? {
        train.learning_rate = v;
    }
    if let Some(v) = flat.float("clip_norm")? {
        train.clip_norm = if v > 0.0 { Some(v) } else { None };
    }
    if let Some(v) = flat.string("loss_reduction")? {
        train.loss_reduction = match v.as_str() {
            "sum" => LossReduction::Sum,
            "mean" => LossReduction::Mean,
            other => return Err(Error::Config(format!("unknown loss_reduction {:?}", other))),
        };
    }
    if let Some(v) = flat.unsigned("seed")? {
        train.seed = v as u64;
    }
    let vocab_min_count = flat.unsigned("vocab_min_count")?.unwrap_or(2);
    Ok(TrainFileConfig { model, train, vocab_min_count })
}

const SYNTH_SPEC_KEYS: &[&str] = &[
    "seed", "conflict_rate", "noise_rate", "review_len", "summary_len", "class_priors",
    "class_1", "class_2", "class_3", "class_4", "class_5", "neutral",
];

fn parse_synthetic_spec(path: &std::path::Path) -> Result<SyntheticSpec> {
    let flat = FlatConfig::load(path)?;
    flat.reject_unknown(SYNTH_SPEC_KEYS)?;
    let mut spec = SyntheticSpec::demo(0.3, 0);
    if let Some(v) = flat.unsigned("seed")? {
        spec.seed = v as u64;
    }
    if let Some(v) = flat.float("conflict_rate")? {
        spec.conflict_rate = v;
    }
    if let Some(v) = flat.float("noise_rate")? {
        spec.noise_rate = v;
    }
    if let Some(v) = flat.unsigned_pair("review_len")? {
        spec.review_len = v;
    }
    if let Some(v) = flat.unsigned_pair("summary_len")? {
        spec.summary_len = v;
    }
    if let Some(v) = flat.float_list("class_priors")? {
        spec.class_priors = v;
    }
    for (i, key) in ["class_1", "class_2", "class_3", "class_4", "class_5"].iter().enumerate() {
        if let Some(words) = flat.string_list(key)? {
            spec.class_lexicons[i] = words;
        }
    }
    if let Some(words) = flat.string_list("neutral")? {
        spec.neutral_lexicon = words;
    }
    spec.validate()?;
    Ok(spec)
}

// --- subcommands ------------------------------------------------------------

fn run_train(args: TrainArgs) -> Result<i32> {
    let mut file_config = parse_train_config(&args.config)?;
    if let Some(seed) = args.seed {
        file_config.train.seed = seed;
    }
    let corpus = load_corpus(&args.corpus)?;
    let dev = load_corpus(&args.dev)?;
    let vocab = Vocabulary::build(&corpus, file_config.vocab_min_count);
    println!("vocabulary: {} entries", vocab.size());

    let embed_dim = file_config.model.embed_dim;
    let mut model = build_model(file_config.model, vocab, file_config.train.seed)?;
    println!("model: {} ({} parameters)", model.config.variant, model.param_count());
    if let Some(embeddings) = &args.embeddings {
        let table = crate::data::load_embeddings(embeddings, &model.vocab, embed_dim, file_config.train.seed)?;
        println!(
            "embeddings: {} / {} vocabulary entries matched",
            table.matched,
            model.vocab.size()
        );
        model.load_embedding_table(&table)?;
    }

    let history = train(&mut model, &corpus, &dev, &file_config.train)?;
    for record in &history {
        println!(
            "epoch {:3}  train loss {:10.4}  dev accuracy {:.4}",
            record.epoch, record.train_loss, record.dev_accuracy
        );
    }
    save_model(&model, &args.out)?;
    println!("checkpoint written to {}", args.out.display());
    if let Some(history_path) = &args.history {
        save_history(history_path, &history)?;
    }
    Ok(0)
}

fn run_eval(args: EvalArgs) -> Result<i32> {
    let model = load_model(&args.checkpoint)?;
    let corpus = load_corpus(&args.corpus)?;
    let (accuracy, records) = evaluate(&model, &corpus)?;
    println!("model {}  examples {}  accuracy {:.4}", model.config.variant, corpus.len(), accuracy);
    if let Some(out) = &args.out {
        save_predictions(out, &records)?;
        println!("predictions written to {}", out.display());
    }
    Ok(0)
}

fn run_predict(args: PredictArgs) -> Result<i32> {
    let model = load_model(&args.checkpoint)?;
    let mut input = String::new();
    std::io::stdin().read_to_string(&mut input)?;
    let line = input.lines().find(|l| !l.trim().is_empty())
        .ok_or_else(|| Error::Data("no record on standard input".into()))?;
    #[derive(serde::Deserialize)]
    struct InputRecord {
        review: String,
        summary: String,
    }
    let record: InputRecord = serde_json::from_str(line).map_err(|e| Error::Data(e.to_string()))?;
    let example = Example {
        review: tokenize(&record.review),
        summary: tokenize(&record.summary),
        rating: 1, // placeholder; prediction ignores the gold label
    };
    let tape = crate::tape::Tape::inference();
    let pass = model.forward(&example, &tape, &mut crate::model::ForwardMode::Eval)?;
    let probabilities = pass.probabilities.values();
    let rating = crate::model::argmax_rating(&probabilities);
    let payload = serde_json::json!({
        "rating": rating,
        "probabilities": probabilities,
        "trace": pass.trace,
    });
    println!("{}", payload);
    Ok(0)
}

fn run_analyze(args: AnalyzeArgs) -> Result<i32> {
    let review_preds = load_predictions(&args.preds_review)?;
    let summary_preds = load_predictions(&args.preds_summary)?;
    let mut decomposition = conflicting_set(&review_preds, &summary_preds)?;
    for extra in &args.preds_extra {
        let records = load_predictions(extra)?;
        let row = decomposition.accuracy_for(&records);
        decomposition.accuracies.push(row);
    }

    let mut report = serde_json::json!({
        "total": decomposition.total(),
        "conflicting_count": decomposition.conflicting.len(),
        "conflicting_fraction": decomposition.conflicting_fraction(),
        "union_count": decomposition.union_set.len(),
        "decomposition": decomposition,
    });
    if let Some(corpus_path) = &args.corpus {
        let corpus = load_corpus(corpus_path)?;
        let buckets = length_buckets(&review_preds, &corpus, &args.buckets)?;
        report["length_buckets_review_model"] = serde_json::to_value(&buckets).map_err(|e| Error::Data(e.to_string()))?;
        let mut extra_buckets = serde_json::Map::new();
        for extra in &args.preds_extra {
            let records = load_predictions(extra)?;
            let model = records.first().map(|r| r.model.clone()).unwrap_or_default();
            let buckets = length_buckets(&records, &corpus, &args.buckets)?;
            extra_buckets.insert(model, serde_json::to_value(&buckets).map_err(|e| Error::Data(e.to_string()))?);
        }
        report["length_buckets"] = serde_json::Value::Object(extra_buckets);
    }
    let text = serde_json::to_string_pretty(&report).map_err(|e| Error::Data(e.to_string()))?;
    match &args.out {
        Some(path) => std::fs::write(path, text)?,
        None => println!("{}", text),
    }
    Ok(0)
}

fn run_visualize(args: VisualizeArgs) -> Result<i32> {
    let model = load_model(&args.checkpoint)?;
    let corpus = load_corpus(&args.corpus)?;
    let example = corpus
        .get(args.index)
        .ok_or_else(|| Error::Data(format!("index {} out of range for corpus of {}", args.index, corpus.len())))?;
    let tokens = model.trace_tokens(example)?;
    let tape = crate::tape::Tape::inference();
    let pass = model.forward(example, &tape, &mut crate::model::ForwardMode::Eval)?;
    export_heatmap(&pass.trace, &tokens, &args.out)?;
    println!(
        "heatmap written to {} (sidecar {})",
        args.out.display(),
        args.out.with_extension("json").display()
    );
    Ok(0)
}

fn run_gen_data(args: GenDataArgs) -> Result<i32> {
    let mut spec = parse_synthetic_spec(&args.spec)?;
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let corpus = gen_synthetic(&spec, args.count)?;
    save_corpus(&args.out, &corpus)?;
    println!("{} examples written to {}", corpus.len(), args.out.display());
    Ok(0)
}

fn run_gradcheck(args: GradcheckArgs) -> Result<i32> {
    let mut failed = false;
    println!("op-level checks (threshold 1e-4):");
    for report in check_tensor_ops(args.seed)? {
        let ok = report.passes(1e-4);
        failed |= !ok;
        println!(
            "  {:18} max rel err {:10.3e}  ({} comparisons)  {}",
            report.name,
            report.max_rel_error,
            report.comparisons,
            if ok { "ok" } else { "FAIL" }
        );
    }
    println!("whole-model spot checks (threshold 1e-3):");
    for report in check_all_models(args.seed)? {
        let ok = report.passes(1e-3);
        failed |= !ok;
        println!(
            "  {:22} max rel err {:10.3e}  ({} comparisons)  {}",
            report.name,
            report.max_rel_error,
            report.comparisons,
            if ok { "ok" } else { "FAIL" }
        );
    }
    Ok(if failed { 1 } else { 0 })
}
