//! Command-line front end.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numeric
//! failure.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::bench::{render_report, run_benchmark, ReportFormat, DEFAULT_WARMUP};
use crate::embed::{
    load_embedding_file, save_embedding_file, EmbeddingProvider, FrameEmbedding, SyntheticEmbedder,
    DEFAULT_EMBED_DIM, DEFAULT_EMBED_SEED,
};
use crate::error::{Error, Result};
use crate::ingest::{
    assemble_split, group_by_clip, parse_landmark_records, parse_landmark_stream, synth_streams,
    write_landmark_stream, DatasetSplit, LandmarkFrame, SplitAssignment,
};
use crate::model::{
    argmax, checkpoint_load, checkpoint_save, classification_metrics, clip_probabilities,
    gradient_check, predict_probs, train_inputs, ModelConfig, ModelInput, TrainOptions,
    GRADCHECK_STEP,
};
use crate::numkit::DenseMatrix;

pub const LANDMARKS_FILE: &str = "landmarks.jsonl";
pub const EMBEDDINGS_FILE: &str = "embeddings.jsonl";
pub const DATASET_FILE: &str = "dataset.json";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// Everything a run reads from a config file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainOptions,
    pub embedding: EmbeddingSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingKind {
    File,
    Synthetic,
    Constant,
}

/// Source of per-frame embeddings. `path` defaults to the data directory's
/// embedding file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbeddingSpec {
    pub kind: EmbeddingKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    pub seed: u64,
    pub value: f64,
}

impl Default for EmbeddingSpec {
    fn default() -> Self {
        Self {
            kind: EmbeddingKind::File,
            path: None,
            seed: DEFAULT_EMBED_SEED,
            value: 1.0,
        }
    }
}

impl EmbeddingSpec {
    pub fn provider(&self, data_dir: Option<&Path>, dim: usize) -> Result<EmbeddingProvider> {
        match self.kind {
            EmbeddingKind::File => {
                let path = match (&self.path, data_dir) {
                    (Some(p), _) => p.clone(),
                    (None, Some(dir)) => dir.join(EMBEDDINGS_FILE),
                    (None, None) => {
                        return Err(Error::Input(
                            "embedding.kind = \"file\" needs embedding.path".into(),
                        ))
                    }
                };
                let table = load_embedding_file(&path)?;
                if table.dim() != dim {
                    return Err(Error::shape(format!(
                        "{} holds {}-dimensional embeddings, model expects D = {dim}",
                        path.display(),
                        table.dim()
                    )));
                }
                Ok(EmbeddingProvider::File(table))
            }
            EmbeddingKind::Synthetic => Ok(EmbeddingProvider::Synthetic(SyntheticEmbedder::new(
                dim, self.seed,
            )?)),
            EmbeddingKind::Constant => Ok(EmbeddingProvider::Constant {
                dim,
                value: self.value,
            }),
        }
    }
}

/// A config plus the dotted keys the file set explicitly.
#[derive(Debug, Clone, Default)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub explicit: BTreeSet<String>,
}

pub fn load_run_config(path: Option<&Path>) -> Result<LoadedConfig> {
    let Some(path) = path else {
        return Ok(LoadedConfig::default());
    };
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_run_config(&text).map_err(|e| Error::Format(format!("config {}: {e}", path.display())))
}

pub fn parse_run_config(text: &str) -> Result<LoadedConfig> {
    let table: toml::Table = toml::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
    let mut explicit = BTreeSet::new();
    collect_keys(&table, "", &mut explicit);
    let config: RunConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Format(e.to_string()))?;
    Ok(LoadedConfig { config, explicit })
}

fn collect_keys(table: &toml::Table, prefix: &str, out: &mut BTreeSet<String>) {
    for (k, v) in table {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            toml::Value::Table(t) => collect_keys(t, &key, out),
            _ => {
                out.insert(key);
            }
        }
    }
}

/// Every config key with its default, one `key = value` line each.
pub fn default_config_listing() -> String {
    let value = toml::Value::try_from(RunConfig::default()).expect("default config serializes");
    let mut lines = Vec::new();
    flatten(&value, "", &mut lines);
    lines.join("\n")
}

fn flatten(v: &toml::Value, prefix: &str, out: &mut Vec<String>) {
    match v {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(v, &key, out);
            }
        }
        other => out.push(format!("  {prefix} = {other}")),
    }
}

/// Contents of `dataset.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub class_names: Vec<String>,
    pub split: SplitAssignment,
    pub embed_dim: usize,
    pub seed: u64,
    pub clips_per_class: usize,
}

/// A data directory read into memory.
#[derive(Debug, Clone)]
pub struct DatasetFiles {
    pub dir: PathBuf,
    pub frames: Vec<LandmarkFrame>,
    pub meta: DatasetMeta,
}

pub fn load_dataset_dir(dir: &Path) -> Result<DatasetFiles> {
    let landmarks = dir.join(LANDMARKS_FILE);
    let meta_path = dir.join(DATASET_FILE);
    let file = File::open(&landmarks).map_err(|e| Error::io(&landmarks, e))?;
    let frames = parse_landmark_stream(BufReader::new(file)).map_err(|e| match e {
        Error::LineFormat { line, reason } => {
            Error::Format(format!("{} line {line}: {reason}", landmarks.display()))
        }
        other => other,
    })?;
    if frames.is_empty() {
        return Err(Error::Input(format!(
            "{} contains no frames",
            landmarks.display()
        )));
    }
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: DatasetMeta = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", meta_path.display())))?;
    Ok(DatasetFiles {
        dir: dir.to_path_buf(),
        frames,
        meta,
    })
}

/// Key-frame samples for every split of a loaded data directory.
pub fn build_dataset(
    files: &DatasetFiles,
    cfg: &ModelConfig,
    provider: &EmbeddingProvider,
) -> Result<DatasetSplit> {
    let names = &files.meta.class_names;
    let clips = group_by_clip(&files.frames)
        .into_iter()
        .map(|frames| {
            let first = &frames[0];
            let name = first
                .label
                .as_deref()
                .ok_or_else(|| Error::Input(format!("clip '{}' has no label", first.clip_id)))?;
            let label = names.iter().position(|n| n == name).ok_or_else(|| {
                Error::Input(format!(
                    "clip '{}' has unknown label '{name}'",
                    first.clip_id
                ))
            })?;
            Ok((first.clip_id.clone(), label, frames))
        })
        .collect::<Result<Vec<_>>>()?;
    assemble_split(&clips, &files.meta.split, names.clone(), cfg.frames, |f| {
        provider.embed(f)
    })
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Numeric(_) => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "litefat",
    version,
    about = "Spatio-temporal graph classifier for facial-landmark streams"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a deterministic synthetic data directory.
    Synth(SynthArgs),
    /// Train a model on a data directory and write a checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on one split of a data directory.
    Eval(EvalArgs),
    /// Per-frame streaming predictions for a landmark stream.
    Predict(PredictArgs),
    /// Time forward and backward passes on a dummy batch.
    Bench(BenchArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Clips per class.
    #[arg(long, default_value_t = 10)]
    clips: usize,
    /// Number of classes (2 or 3).
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Embedding dimension written to the embedding file.
    #[arg(long, default_value_t = DEFAULT_EMBED_DIM)]
    embed_dim: usize,
}

const CONFIG_HELP: &str = "Config file keys (flat dotted TOML, e.g. model.D = 64) and defaults. \
model.M and model.D follow the data directory unless set.";

#[derive(Debug, Args)]
#[command(after_long_help = config_help())]
struct TrainArgs {
    /// Data directory written by `synth` or in the same layout.
    #[arg(long)]
    data: PathBuf,
    /// Config file; flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Maximum epochs [default: 100]
    #[arg(long)]
    epochs: Option<usize>,
    /// Epochs without improvement before stopping [default: 3]
    #[arg(long)]
    patience: Option<usize>,
    /// Adam learning rate [default: 0.0001]
    #[arg(long)]
    lr: Option<f64>,
    /// Samples per optimizer step [default: 1]
    #[arg(long)]
    batch_size: Option<usize>,
    /// Seed for initialisation and shuffling [default: 0]
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum SplitName {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint written by `train`.
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitName::Test)]
    split: SplitName,
    /// Embedding file [default: DATA/embeddings.jsonl]
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Print a JSON object instead of text.
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    /// Landmark stream, one JSON record per frame.
    #[arg(long)]
    input: PathBuf,
    /// Output file, one JSON record per input frame.
    #[arg(long)]
    out: PathBuf,
    /// Embedding file [default: synthetic provider with the default seed]
    #[arg(long)]
    embeddings: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(after_long_help = config_help())]
struct BenchArgs {
    /// Config file; only the model section is used.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    #[arg(long, default_value_t = 10)]
    iters: usize,
    #[arg(long, default_value_t = DEFAULT_WARMUP)]
    warmup: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Print the report as JSON instead of a table.
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// Largest accepted relative error per tensor.
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Finite-difference step.
    #[arg(long, default_value_t = GRADCHECK_STEP)]
    step: f64,
    /// Config file; defaults to the small gradient-check network.
    #[arg(long)]
    config: Option<PathBuf>,
}

fn config_help() -> String {
    format!("{CONFIG_HELP}\n{}", default_config_listing())
}

/// Parse `argv` (including the program name), run the subcommand and return
/// the process exit code.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Predict(a) => cmd_predict(&a),
        Command::Bench(a) => cmd_bench(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn stdout_line(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{text}").map_err(|e| Error::io("<stdout>", e))
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string(v).map_err(|e| Error::Format(e.to_string()))
}

fn cmd_synth(a: &SynthArgs) -> Result<i32> {
    let streams = synth_streams(a.seed, a.clips, a.classes)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;

    let landmarks = a.out.join(LANDMARKS_FILE);
    let file = File::create(&landmarks).map_err(|e| Error::io(&landmarks, e))?;
    let mut w = BufWriter::new(file);
    write_landmark_stream(&mut w, streams.frames())?;
    w.flush().map_err(|e| Error::io(&landmarks, e))?;

    let embedder = SyntheticEmbedder::new(a.embed_dim, DEFAULT_EMBED_SEED)?;
    let records: Vec<FrameEmbedding> = streams
        .frames()
        .map(|f| FrameEmbedding {
            clip: f.clip_id.clone(),
            frame: f.frame_index,
            vec: embedder.embed(&f.points),
        })
        .collect();
    save_embedding_file(&a.out.join(EMBEDDINGS_FILE), &records)?;

    let meta = DatasetMeta {
        class_names: streams.class_names.clone(),
        split: streams.split.clone(),
        embed_dim: a.embed_dim,
        seed: a.seed,
        clips_per_class: a.clips,
    };
    let meta_path = a.out.join(DATASET_FILE);
    let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(&meta_path, text + "\n").map_err(|e| Error::io(&meta_path, e))?;

    stdout_line(&to_json(&serde_json::json!({
        "out": a.out,
        "clips": streams.clips.len(),
        "frames": records.len(),
        "train": streams.split.train.len(),
        "validation": streams.split.validation.len(),
        "test": streams.split.test.len(),
    }))?)?;
    Ok(EXIT_OK)
}

/// Resolve the model config against a data directory: `M` and `D` follow
/// the data unless the config file set them.
fn resolve_model(loaded: &LoadedConfig, files: &DatasetFiles) -> Result<ModelConfig> {
    let mut cfg = loaded.config.model.clone();
    if !loaded.explicit.contains("model.M") {
        cfg.classes = files.meta.class_names.len();
    }
    if !loaded.explicit.contains("model.D") && loaded.config.embedding.kind == EmbeddingKind::File {
        cfg.embed_dim = files.meta.embed_dim;
    }
    if cfg.classes != files.meta.class_names.len() {
        return Err(Error::shape(format!(
            "model.M = {} but {} lists {} classes",
            cfg.classes,
            files.dir.join(DATASET_FILE).display(),
            files.meta.class_names.len()
        )));
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(a: &TrainArgs) -> Result<i32> {
    let loaded = load_run_config(a.config.as_deref())?;
    let mut opts = loaded.config.train.clone();
    if let Some(v) = a.epochs {
        opts.max_epochs = v;
    }
    if let Some(v) = a.patience {
        opts.patience = v;
    }
    if let Some(v) = a.lr {
        opts.learning_rate = v;
    }
    if let Some(v) = a.batch_size {
        opts.batch_size = v;
    }
    if let Some(v) = a.seed {
        opts.seed = v;
    }
    let files = load_dataset_dir(&a.data).map_err(|e| in_data_dir(&a.data, e))?;
    let cfg = resolve_model(&loaded, &files)?;
    let provider = loaded
        .config
        .embedding
        .provider(Some(&a.data), cfg.embed_dim)?;
    let data = build_dataset(&files, &cfg, &provider)?;
    if data.train.is_empty() {
        return Err(Error::Input(format!(
            "{}: training split is empty",
            a.data.display()
        )));
    }
    let inputs: Vec<(ModelInput, usize)> = data
        .train
        .iter()
        .map(|s| (ModelInput::from_sample(s), s.label))
        .collect();
    eprintln!(
        "{}",
        to_json(&serde_json::json!({
            "event": "start",
            "train_clips": inputs.len(),
            "parameters": crate::model::count_parameters(&cfg),
            "options": &opts,
        }))?
    );
    let (params, history) = train_inputs(&inputs, &cfg, &opts, |rec| {
        eprintln!(
            "{{\"event\":\"epoch\",\"epoch\":{},\"train_loss\":{}}}",
            rec.epoch, rec.train_loss
        );
    })?;
    checkpoint_save(&params, &cfg, &a.out)?;
    stdout_line(&to_json(&serde_json::json!({
        "checkpoint": a.out,
        "epochs": history.epochs.len(),
        "best_epoch": history.best_epoch,
        "best_loss": history.best_loss,
        "stopped_early": history.stopped_early,
    }))?)?;
    Ok(EXIT_OK)
}

fn in_data_dir(dir: &Path, e: Error) -> Error {
    match e {
        Error::Io { .. } => Error::Input(format!("data directory {}: {e}", dir.display())),
        other => other,
    }
}

fn cmd_eval(a: &EvalArgs) -> Result<i32> {
    let (params, cfg) = checkpoint_load(&a.model)?;
    let files = load_dataset_dir(&a.data).map_err(|e| in_data_dir(&a.data, e))?;
    let spec = EmbeddingSpec {
        path: a.embeddings.clone(),
        ..EmbeddingSpec::default()
    };
    let provider = spec.provider(Some(&a.data), cfg.embed_dim)?;
    let data = build_dataset(&files, &cfg, &provider)?;
    let samples = match a.split {
        SplitName::Train => &data.train,
        SplitName::Validation => &data.validation,
        SplitName::Test => &data.test,
    };
    let probs = clip_probabilities(samples, &params, &cfg)?;
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let m = classification_metrics(&probs, &labels, cfg.classes)?;
    if a.json {
        stdout_line(&to_json(&serde_json::json!({
            "split": format!("{:?}", a.split).to_lowercase(),
            "clips": samples.len(),
            "accuracy": m.accuracy,
            "precision": m.precision,
            "recall": m.recall,
            "f1": m.f1,
            "auc": m.auc,
        }))?)?;
    } else {
        let auc = m.auc.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
        stdout_line(&format!(
            "clips     {}\naccuracy  {:.4}\nprecision {:.4}\nrecall    {:.4}\nf1        {:.4}\nauc       {auc}",
            samples.len(),
            m.accuracy,
            m.precision,
            m.recall,
            m.f1
        ))?;
    }
    Ok(EXIT_OK)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictRecord {
    pub clip: String,
    pub frame: u64,
    pub class: usize,
    pub probs: Vec<f64>,
}

/// Rolling per-clip window of the latest `S` frames, left-padded with the
/// all-ones fallback frame until `S` frames have arrived.
#[derive(Debug, Default)]
pub struct StreamingPredictor {
    windows: std::collections::HashMap<String, std::collections::VecDeque<(DenseMatrix, Vec<f64>)>>,
}

impl StreamingPredictor {
    pub fn push(
        &mut self,
        frame: &LandmarkFrame,
        provider: &EmbeddingProvider,
        params: &crate::model::ModelParams,
        cfg: &ModelConfig,
    ) -> Result<PredictRecord> {
        let s = cfg.frames;
        let window = match self.windows.get_mut(&frame.clip_id) {
            Some(w) => w,
            None => {
                let pad = LandmarkFrame::new(
                    frame.clip_id.clone(),
                    0,
                    false,
                    LandmarkFrame::fallback_points(),
                    None,
                )?;
                let pad_embedding = provider.embed(&pad).or_else(|_| {
                    // file providers have no record for padding frames
                    SyntheticEmbedder::new(cfg.embed_dim, DEFAULT_EMBED_SEED)
                        .map(|e| e.embed(&pad.points))
                })?;
                let filler = (pad.points, pad_embedding);
                self.windows
                    .entry(frame.clip_id.clone())
                    .or_insert_with(|| std::iter::repeat_n(filler, s).collect())
            }
        };
        window.pop_front();
        window.push_back((frame.points.clone(), provider.embed(frame)?));
        let input = ModelInput {
            points: window.iter().map(|(p, _)| p.clone()).collect(),
            embeddings: window.iter().map(|(_, e)| e.clone()).collect(),
        };
        let probs = predict_probs(&input, params, cfg)?;
        let last = probs.row(s - 1).to_vec();
        Ok(PredictRecord {
            clip: frame.clip_id.clone(),
            frame: frame.frame_index,
            class: argmax(&last),
            probs: last,
        })
    }
}

fn cmd_predict(a: &PredictArgs) -> Result<i32> {
    let (params, cfg) = checkpoint_load(&a.model)?;
    let provider = match &a.embeddings {
        Some(path) => EmbeddingSpec {
            path: Some(path.clone()),
            ..EmbeddingSpec::default()
        }
        .provider(None, cfg.embed_dim)?,
        None => {
            EmbeddingProvider::Synthetic(SyntheticEmbedder::new(cfg.embed_dim, DEFAULT_EMBED_SEED)?)
        }
    };
    let file = File::open(&a.input).map_err(|e| Error::io(&a.input, e))?;
    let reader: Box<dyn BufRead> = Box::new(BufReader::new(file));
    let frames = parse_landmark_records(reader)?;
    let out_file = File::create(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let mut w = BufWriter::new(out_file);
    let mut predictor = StreamingPredictor::default();
    for frame in &frames {
        let rec = predictor.push(frame, &provider, &params, &cfg)?;
        writeln!(w, "{}", to_json(&rec)?).map_err(|e| Error::io(&a.out, e))?;
    }
    w.flush().map_err(|e| Error::io(&a.out, e))?;
    eprintln!("{{\"event\":\"predict\",\"frames\":{}}}", frames.len());
    Ok(EXIT_OK)
}

fn cmd_bench(a: &BenchArgs) -> Result<i32> {
    let loaded = load_run_config(a.config.as_deref())?;
    let report = run_benchmark(&loaded.config.model, a.batch, a.iters, a.warmup, a.seed)?;
    let format = if a.json {
        ReportFormat::Json
    } else {
        ReportFormat::Table
    };
    let text = render_report(&report, format)?;
    stdout_line(text.trim_end())?;
    Ok(EXIT_OK)
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<i32> {
    let cfg = match &a.config {
        Some(path) => load_run_config(Some(path))?.config.model,
        None => ModelConfig::tiny(),
    };
    let checks = gradient_check(&cfg, a.seed, a.step)?;
    let width = checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
    let mut worst: f64 = 0.0;
    for c in &checks {
        worst = worst.max(c.rel_error);
        let status = if c.rel_error < a.tol { "ok" } else { "FAIL" };
        stdout_line(&format!(
            "{:<width$}  {:>6}  {:.3e}  {status}",
            c.name, c.len, c.rel_error
        ))?;
    }
    let pass = checks.iter().all(|c| c.rel_error < a.tol);
    stdout_line(&format!(
        "max relative error {worst:.3e} (tol {:.1e}): {}",
        a.tol,
        if pass { "pass" } else { "fail" }
    ))?;
    Ok(if pass { EXIT_OK } else { EXIT_NUMERIC })
}
