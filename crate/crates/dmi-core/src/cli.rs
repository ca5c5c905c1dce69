//! Command wiring for the `dmi` binary.
//!
//! Every command validates its flags before touching the filesystem, pins
//! all randomness to `--seed`, and writes artifacts only under `--out`.
//! Errors leave on stderr as one machine-parsable line,
//! `error[<kind>]: <detail>`, and each error class maps to its own exit
//! code (success 0, flag parse 2, unknown command 3, module errors 10+).
//! `DMI_LOG_LEVEL` (error | info | debug) controls diagnostic verbosity;
//! log lines carry no timestamps so reruns stay byte-comparable.

use std::path::{Path, PathBuf};

use clap::error::ErrorKind as ClapErrorKind;
use clap::{Args, Parser, Subcommand};

use crate::corpus::{load_corpus, pool_frames, read_single_feature_file, write_corpus, Corpus, FrameFeatureSeq};
use crate::eval::{
    embed_corpus, evaluate_retrieval, export_projection, sweep_subfeature_count, write_report_json,
    write_sweep_csv, EmbeddingVariant,
};
use crate::heads::{encode, load_checkpoint, save_checkpoint, ModelConfig};
use crate::mat::Mat;
use crate::retrieval::{build_index, export_similarity_csv, export_similarity_pgm, query_topk, similarity_matrix};
use crate::synth::{generate_corpus, SynthSpec};
use crate::trainer::{load_config, run_ablation, train, AblationVariant, TrainConfig};
use crate::{DmiError, Result};

#[derive(Parser, Debug)]
#[command(
    name = "dmi",
    version,
    about = "Disentangled multi-head video embeddings: synthesis, training, retrieval, evaluation",
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic near-duplicate corpus on disk.
    Synth(SynthArgs),
    /// Train the multi-head encoder on a corpus.
    Train(TrainArgs),
    /// Encode one raw feature file with a trained checkpoint.
    Embed(EmbedArgs),
    /// Embed a corpus into a gallery file for later queries.
    Index(IndexArgs),
    /// Rank a gallery against one query feature file.
    Query(QueryArgs),
    /// Score retrieval quality of a checkpoint on a labeled corpus.
    Eval(EvalArgs),
    /// Train one component-removal variant and report its retrieval metrics.
    Ablate(AblateArgs),
    /// Train once per sub-feature count and tabulate both mAP metrics.
    Sweep(SweepArgs),
    /// Export the gallery self-similarity matrix as CSV and PGM.
    ExportSimmatrix(ExportSimmatrixArgs),
    /// Export per-sub-feature 2-D projection coordinates for plotting.
    ExportProjection(ExportProjectionArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Base (unlabeled) video count.
    #[arg(long, default_value_t = 300)]
    n_base: usize,
    /// Labeled similar pair count.
    #[arg(long, default_value_t = 60)]
    n_pairs: usize,
    /// Frame feature dimension.
    #[arg(long, default_value_t = 128)]
    dim: usize,
    /// Minimum frames per video.
    #[arg(long, default_value_t = 4)]
    frames_min: usize,
    /// Maximum frames per video.
    #[arg(long, default_value_t = 8)]
    frames_max: usize,
    /// Master seed for corpus generation.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory (manifest plus features/).
    #[arg(long)]
    out: PathBuf,
}

/// Training hyperparameter overrides shared by train, ablate, and sweep.
///
/// Precedence: command-line flag > config file > built-in default. The
/// flags are optional so an absent flag never shadows a config-file value.
#[derive(Args, Debug, Clone)]
struct TrainFlags {
    /// Flat key=value config file applied over built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Sub-feature count [default: 6]
    #[arg(long)]
    k: Option<usize>,
    /// Sub-feature dimension [default: 256]
    #[arg(long)]
    d_z: Option<usize>,
    /// Auxiliary feature dimension [default: 256]
    #[arg(long)]
    d_s: Option<usize>,
    /// Encoder hidden width [default: 512]
    #[arg(long)]
    hidden: Option<usize>,
    /// Contrastive temperature [default: 0.07]
    #[arg(long)]
    tau: Option<f64>,
    /// Contrastive MI temperature [default: 0.07]
    #[arg(long)]
    tau_mi: Option<f64>,
    /// KL term weight in the decoupling loss [default: 0.1]
    #[arg(long)]
    alpha: Option<f64>,
    /// Per-pair KL saturation cap [default: 10]
    #[arg(long)]
    kl_cap: Option<f64>,
    /// Training epochs [default: 300]
    #[arg(long)]
    epochs: Option<usize>,
    /// Anchor pairs per step [default: 64]
    #[arg(long)]
    batch_anchors: Option<usize>,
    /// Shared negative pool per step [default: 2048]
    #[arg(long)]
    negatives_per_step: Option<usize>,
    /// Adaptive-moment learning rate [default: 0.001]
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Critic updates per encoder update [default: 1]
    #[arg(long)]
    critic_steps_per_encoder_step: Option<usize>,
    /// Master seed for init and batch sampling [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Component removal: remove_disentangle_module, remove_aux_module,
    /// remove_disentangle_loss, remove_mi_loss, or none [default: none]
    #[arg(long)]
    ablation: Option<String>,
    /// Include the positive in the contrastive denominator [default: false]
    #[arg(long)]
    include_positive_in_denominator: Option<bool>,
}

impl TrainFlags {
    /// Resolves the final TrainConfig for a corpus with input dim `d`.
    fn build(&self, d: usize) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::new(ModelConfig::new(d));
        if let Some(path) = &self.config {
            cfg = load_config(path, cfg)?;
        }
        if let Some(v) = self.k {
            cfg.model.k = v;
        }
        if let Some(v) = self.d_z {
            cfg.model.d_z = v;
        }
        if let Some(v) = self.d_s {
            cfg.model.d_s = v;
        }
        if let Some(v) = self.hidden {
            cfg.model.hidden = v;
        }
        if let Some(v) = self.tau {
            cfg.model.tau = v;
        }
        if let Some(v) = self.tau_mi {
            cfg.model.tau_mi = v;
        }
        if let Some(v) = self.alpha {
            cfg.model.alpha = v;
        }
        if let Some(v) = self.kl_cap {
            cfg.model.kl_cap = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.batch_anchors {
            cfg.batch_anchors = v;
        }
        if let Some(v) = self.negatives_per_step {
            cfg.negatives_per_step = v;
        }
        if let Some(v) = self.learning_rate {
            cfg.learning_rate = v;
        }
        if let Some(v) = self.critic_steps_per_encoder_step {
            cfg.critic_steps_per_encoder_step = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(s) = &self.ablation {
            cfg.ablation = if s == "none" { None } else { Some(s.parse()?) };
        }
        if let Some(v) = self.include_positive_in_denominator {
            cfg.include_positive_in_denominator = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Corpus manifest file or directory containing manifest.jsonl.
    #[arg(long)]
    corpus: PathBuf,
    #[command(flatten)]
    flags: TrainFlags,
    /// Output directory (model.dmic, train_log.csv, config.json).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EmbedArgs {
    /// Trained checkpoint file.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Raw frame-feature file to encode (frames are mean-pooled).
    #[arg(long)]
    features: PathBuf,
    /// Embedding slice: global, v, z_s, or z_<i> [default: global]
    #[arg(long, default_value = "global")]
    variant: String,
    /// Output JSON file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct IndexArgs {
    /// Trained checkpoint file.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Corpus manifest file or directory.
    #[arg(long)]
    corpus: PathBuf,
    /// Embedding slice: global, v, z_s, or z_<i> [default: global]
    #[arg(long, default_value = "global")]
    variant: String,
    /// Gallery CSV to write (video_id followed by embedding columns).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct QueryArgs {
    /// Gallery CSV produced by the index command.
    #[arg(long)]
    gallery: PathBuf,
    /// Trained checkpoint file (must match the gallery's variant).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Raw frame-feature file holding the query video.
    #[arg(long)]
    features: PathBuf,
    /// Embedding slice: global, v, z_s, or z_<i> [default: global]
    #[arg(long, default_value = "global")]
    variant: String,
    /// Ranks to return.
    #[arg(long, default_value_t = 100)]
    k: usize,
    /// Output CSV (rank,video_id,score); stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Corpus manifest file or directory.
    #[arg(long)]
    corpus: PathBuf,
    /// Trained checkpoint file.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Embedding slice: global, v, z_s, or z_<i> [default: global]
    #[arg(long, default_value = "global")]
    variant: String,
    /// AP cutoff: a positive integer or "inf" [default: 100]
    #[arg(long, default_value = "100")]
    k: String,
    /// Output JSON file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    /// Corpus manifest file or directory.
    #[arg(long)]
    corpus: PathBuf,
    /// Variant to remove: remove_disentangle_module, remove_aux_module,
    /// remove_disentangle_loss, or remove_mi_loss.
    #[arg(long)]
    variant: String,
    #[command(flatten)]
    flags: TrainFlags,
    /// Output JSON file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// Corpus manifest file or directory.
    #[arg(long)]
    corpus: PathBuf,
    /// Comma-separated sub-feature counts [default: 2,4,6,8]
    #[arg(long, default_value = "2,4,6,8")]
    counts: String,
    #[command(flatten)]
    flags: TrainFlags,
    /// Sweep table CSV to write (k,top100_map,topinf_map).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ExportSimmatrixArgs {
    /// Trained checkpoint file.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Corpus manifest file or directory.
    #[arg(long)]
    corpus: PathBuf,
    /// Embedding slice: global, v, z_s, or z_<i> [default: global]
    #[arg(long, default_value = "global")]
    variant: String,
    /// Output path prefix; writes <prefix>.csv and <prefix>.pgm.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ExportProjectionArgs {
    /// Trained checkpoint file.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Corpus manifest file or directory.
    #[arg(long)]
    corpus: PathBuf,
    /// Output directory for subfeature_<i>.csv files.
    #[arg(long)]
    out: PathBuf,
}

/// Parses the CLI from process argv, runs one command, and returns the
/// process exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => return handle_clap_error(e),
    };
    if let Err(msg) = init_logging() {
        eprintln!("error[config]: {msg}");
        return exit_code_for(&DmiError::ConfigError(msg));
    }
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {e}", error_kind(&e));
            exit_code_for(&e)
        }
    }
}

/// Help/version print and exit 0; unknown subcommands exit 3; all other
/// parse failures exit 2. Parse errors stay on one stderr line.
fn handle_clap_error(e: clap::Error) -> i32 {
    match e.kind() {
        ClapErrorKind::DisplayHelp
        | ClapErrorKind::DisplayVersion
        | ClapErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
            print!("{e}");
            0
        }
        ClapErrorKind::InvalidSubcommand => {
            eprintln!("error[unknown_command]: {}", first_line(&e));
            3
        }
        _ => {
            eprintln!("error[flag_parse]: {}", first_line(&e));
            2
        }
    }
}

fn first_line(e: &clap::Error) -> String {
    let text = e.to_string();
    text.lines()
        .find(|l| !l.trim().is_empty())
        .unwrap_or("invalid arguments")
        .trim()
        .trim_start_matches("error: ")
        .to_string()
}

/// Reads DMI_LOG_LEVEL (error | info | debug, default error) and installs
/// a timestamp-free stderr logger.
fn init_logging() -> std::result::Result<(), String> {
    let level = match std::env::var("DMI_LOG_LEVEL") {
        Ok(v) => match v.as_str() {
            "error" => log::LevelFilter::Error,
            "info" => log::LevelFilter::Info,
            "debug" => log::LevelFilter::Debug,
            other => {
                return Err(format!(
                    "DMI_LOG_LEVEL must be error, info, or debug, got {other:?}"
                ))
            }
        },
        Err(_) => log::LevelFilter::Error,
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .format_target(false)
        .try_init();
    Ok(())
}

/// Stable machine-readable name of an error's class.
pub fn error_kind(e: &DmiError) -> &'static str {
    match e {
        DmiError::MissingFile(_) => "missing_file",
        DmiError::DimensionMismatch(_) => "dimension_mismatch",
        DmiError::DanglingPairId(_) => "dangling_pair_id",
        DmiError::MalformedRecord(_) => "malformed_record",
        DmiError::SpecInvalid(_) => "spec_invalid",
        DmiError::EmptyResult(_) => "empty_result",
        DmiError::VersionMismatch(_) => "version_mismatch",
        DmiError::CorruptCheckpoint(_) => "corrupt_checkpoint",
        DmiError::BatchTooSmall(_) => "batch_too_small",
        DmiError::LengthMismatch(_) => "length_mismatch",
        DmiError::CorrelationOutOfRange(_) => "correlation_out_of_range",
        DmiError::NonFiniteEvaluation(_) => "non_finite_evaluation",
        DmiError::DegenerateData(_) => "degenerate_data",
        DmiError::NoNegatives => "no_negatives",
        DmiError::EmptyInput(_) => "empty_input",
        DmiError::InsufficientPositives(_) => "insufficient_positives",
        DmiError::InsufficientNegatives(_) => "insufficient_negatives",
        DmiError::NonFiniteLoss(_) => "non_finite_loss",
        DmiError::UnknownVariant(_) => "unknown_variant",
        DmiError::DuplicateId(_) => "duplicate_id",
        DmiError::ZeroVector(_) => "zero_vector",
        DmiError::DuplicateRankedId(_) => "duplicate_ranked_id",
        DmiError::NoQueries(_) => "no_queries",
        DmiError::ConfigError(_) => "config",
        DmiError::Io(_) => "io",
        DmiError::Csv(_) => "csv",
    }
}

/// Distinct exit code per error class, starting at 10 so the parse-layer
/// codes (2, 3) stay reserved.
pub fn exit_code_for(e: &DmiError) -> i32 {
    match e {
        DmiError::MissingFile(_) => 10,
        DmiError::DimensionMismatch(_) => 11,
        DmiError::DanglingPairId(_) => 12,
        DmiError::MalformedRecord(_) => 13,
        DmiError::SpecInvalid(_) => 14,
        DmiError::EmptyResult(_) => 15,
        DmiError::VersionMismatch(_) => 16,
        DmiError::CorruptCheckpoint(_) => 17,
        DmiError::BatchTooSmall(_) => 18,
        DmiError::LengthMismatch(_) => 19,
        DmiError::CorrelationOutOfRange(_) => 20,
        DmiError::NonFiniteEvaluation(_) => 21,
        DmiError::DegenerateData(_) => 22,
        DmiError::NoNegatives => 23,
        DmiError::EmptyInput(_) => 24,
        DmiError::InsufficientPositives(_) => 25,
        DmiError::InsufficientNegatives(_) => 26,
        DmiError::NonFiniteLoss(_) => 27,
        DmiError::UnknownVariant(_) => 28,
        DmiError::DuplicateId(_) => 29,
        DmiError::ZeroVector(_) => 30,
        DmiError::DuplicateRankedId(_) => 31,
        DmiError::NoQueries(_) => 32,
        DmiError::ConfigError(_) => 33,
        DmiError::Io(_) => 34,
        DmiError::Csv(_) => 35,
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Embed(a) => cmd_embed(a),
        Command::Index(a) => cmd_index(a),
        Command::Query(a) => cmd_query(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::ExportSimmatrix(a) => cmd_export_simmatrix(a),
        Command::ExportProjection(a) => cmd_export_projection(a),
    }
}

/// Accepts either the manifest file itself or its parent directory.
fn resolve_manifest(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join("manifest.jsonl")
    } else {
        path.to_path_buf()
    }
}

fn load_corpus_arg(path: &Path) -> Result<Corpus> {
    let manifest = resolve_manifest(path);
    let corpus = load_corpus(&manifest)?;
    log::info!(
        "loaded corpus {}: {} videos, {} labeled pairs, dim {}",
        manifest.display(),
        corpus.videos.len(),
        corpus.labeled_pairs.len(),
        corpus.d
    );
    Ok(corpus)
}

fn parse_k_arg(s: &str) -> Result<Option<usize>> {
    if s == "inf" {
        return Ok(None);
    }
    match s.parse::<usize>() {
        Ok(k) if k >= 1 => Ok(Some(k)),
        _ => Err(DmiError::ConfigError(format!(
            "--k must be a positive integer or \"inf\", got {s:?}"
        ))),
    }
}

fn parse_counts(s: &str) -> Result<Vec<usize>> {
    let mut counts = Vec::new();
    for part in s.split(',') {
        let part = part.trim();
        let k: usize = part.parse().map_err(|_| {
            DmiError::ConfigError(format!("invalid sub-feature count {part:?} in --counts"))
        })?;
        if k == 0 {
            return Err(DmiError::ConfigError("sub-feature counts must be >= 1".into()));
        }
        counts.push(k);
    }
    if counts.is_empty() {
        return Err(DmiError::ConfigError("--counts must name at least one count".into()));
    }
    Ok(counts)
}

/// Mean-pools one raw feature file into a single vector.
fn pooled_feature(path: &Path) -> Result<Vec<f64>> {
    let frames = read_single_feature_file(path)?;
    let seq = FrameFeatureSeq { video_id: "<query>".into(), frames };
    Ok(pool_frames(&seq).values)
}

fn write_or_print(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => {
            std::fs::write(path, text)?;
            log::info!("wrote {}", path.display());
        }
        None => println!("{text}"),
    }
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        n_base: a.n_base,
        n_pairs: a.n_pairs,
        frames_per_video: (a.frames_min, a.frames_max),
        d: a.dim,
        transform_mix: SynthSpec::default_mix(),
        seed: a.seed,
    };
    let corpus = generate_corpus(&spec)?;
    let manifest = write_corpus(&corpus, &a.out)?;
    log::info!(
        "synthesized {} videos ({} pairs) into {}",
        corpus.videos.len(),
        corpus.labeled_pairs.len(),
        manifest.display()
    );
    println!("{}", manifest.display());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let corpus = load_corpus_arg(&a.corpus)?;
    let cfg = a.flags.build(corpus.d)?;
    std::fs::create_dir_all(&a.out)?;
    let (params, log) = train(&corpus, &cfg)?;
    let model_path = a.out.join("model.dmic");
    save_checkpoint(&params, &model_path)?;
    log.write_csv(&a.out.join("train_log.csv"))?;
    let cfg_json = serde_json::to_string_pretty(&cfg)
        .map_err(|e| DmiError::ConfigError(format!("config serialization failed: {e}")))?;
    std::fs::write(a.out.join("config.json"), cfg_json)?;
    log::info!(
        "trained {} steps; checkpoint at {}",
        log.rows.len(),
        model_path.display()
    );
    println!("{}", model_path.display());
    Ok(())
}

fn cmd_embed(a: EmbedArgs) -> Result<()> {
    let variant: EmbeddingVariant = a.variant.parse()?;
    let params = load_checkpoint(&a.checkpoint)?;
    let values = pooled_feature(&a.features)?;
    let es = encode(&params, &values)?;
    let emb = match variant {
        EmbeddingVariant::Global => es.global,
        EmbeddingVariant::V => es.v,
        EmbeddingVariant::Aux => es.aux,
        EmbeddingVariant::Sub(i) => {
            if i >= params.cfg.k {
                return Err(DmiError::ConfigError(format!(
                    "sub-feature index {i} out of range for k = {}",
                    params.cfg.k
                )));
            }
            es.sub.into_iter().nth(i).expect("index checked")
        }
    };
    let doc = serde_json::json!({
        "variant": variant.name(),
        "dim": emb.len(),
        "values": emb,
    });
    let text = serde_json::to_string(&doc)
        .map_err(|e| DmiError::ConfigError(format!("embedding serialization failed: {e}")))?;
    write_or_print(&text, a.out.as_deref())
}

/// Gallery CSV: header `video_id,e0,...`; one row per video.
fn write_gallery(ids: &[String], embeddings: &Mat, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["video_id".to_string()];
    header.extend((0..embeddings.cols).map(|c| format!("e{c}")));
    w.write_record(&header)?;
    for (id, row) in ids.iter().zip(embeddings.iter_rows()) {
        let mut rec = vec![id.clone()];
        rec.extend(row.iter().map(|v| format!("{v}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn read_gallery(path: &Path) -> Result<(Vec<String>, Mat)> {
    let mut r = csv::Reader::from_path(path)
        .map_err(|_| DmiError::MissingFile(path.display().to_string()))?;
    let mut ids = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for record in r.records() {
        let record = record?;
        let mut fields = record.iter();
        let id = fields
            .next()
            .ok_or_else(|| DmiError::MalformedRecord("gallery row without video_id".into()))?;
        let mut row = Vec::with_capacity(record.len().saturating_sub(1));
        for f in fields {
            row.push(f.parse::<f64>().map_err(|_| {
                DmiError::MalformedRecord(format!(
                    "gallery value {f:?} for video '{id}' is not a number"
                ))
            })?);
        }
        ids.push(id.to_string());
        rows.push(row);
    }
    if ids.is_empty() {
        return Err(DmiError::EmptyInput(format!(
            "gallery {} holds no rows",
            path.display()
        )));
    }
    Ok((ids, Mat::from_rows(&rows)))
}

fn cmd_index(a: IndexArgs) -> Result<()> {
    let variant: EmbeddingVariant = a.variant.parse()?;
    let params = load_checkpoint(&a.checkpoint)?;
    let corpus = load_corpus_arg(&a.corpus)?;
    let (ids, embeddings) = embed_corpus(&params, &corpus, variant)?;
    build_index(&ids, &embeddings)?; // validate before writing
    write_gallery(&ids, &embeddings, &a.out)?;
    log::info!("indexed {} videos into {}", ids.len(), a.out.display());
    Ok(())
}

fn cmd_query(a: QueryArgs) -> Result<()> {
    let variant: EmbeddingVariant = a.variant.parse()?;
    let params = load_checkpoint(&a.checkpoint)?;
    let (ids, embeddings) = read_gallery(&a.gallery)?;
    let index = build_index(&ids, &embeddings)?;
    let values = pooled_feature(&a.features)?;
    let es = encode(&params, &values)?;
    let q = match variant {
        EmbeddingVariant::Global => es.global,
        EmbeddingVariant::V => es.v,
        EmbeddingVariant::Aux => es.aux,
        EmbeddingVariant::Sub(i) => {
            if i >= params.cfg.k {
                return Err(DmiError::ConfigError(format!(
                    "sub-feature index {i} out of range for k = {}",
                    params.cfg.k
                )));
            }
            es.sub.into_iter().nth(i).expect("index checked")
        }
    };
    let ranked = query_topk(&index, &q, a.k)?;
    let mut lines = vec!["rank,video_id,score".to_string()];
    for (r, hit) in ranked.hits.iter().enumerate() {
        lines.push(format!("{},{},{}", r + 1, hit.video_id, hit.score));
    }
    write_or_print(&(lines.join("\n") + "\n"), a.out.as_deref())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let variant: EmbeddingVariant = a.variant.parse()?;
    let k = parse_k_arg(&a.k)?;
    let params = load_checkpoint(&a.checkpoint)?;
    let corpus = load_corpus_arg(&a.corpus)?;
    let report = evaluate_retrieval(&params, &corpus, variant, k)?;
    log::info!(
        "evaluated {} queries: top-100 mAP {:.4}, top-inf mAP {:.4}",
        report.per_query_ap.len(),
        report.top100_map,
        report.topinf_map
    );
    match &a.out {
        Some(path) => {
            write_report_json(&report, path)?;
            log::info!("wrote {}", path.display());
        }
        None => {
            let text = serde_json::to_string_pretty(&report).map_err(|e| {
                DmiError::ConfigError(format!("report serialization failed: {e}"))
            })?;
            println!("{text}");
        }
    }
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let variant: AblationVariant = a.variant.parse()?;
    let corpus = load_corpus_arg(&a.corpus)?;
    let cfg = a.flags.build(corpus.d)?;
    let metrics = run_ablation(&corpus, &cfg, variant)?;
    let text = serde_json::to_string_pretty(&metrics)
        .map_err(|e| DmiError::ConfigError(format!("metrics serialization failed: {e}")))?;
    write_or_print(&text, a.out.as_deref())
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let counts = parse_counts(&a.counts)?;
    let corpus = load_corpus_arg(&a.corpus)?;
    let cfg = a.flags.build(corpus.d)?;
    let rows = sweep_subfeature_count(&corpus, &cfg, &counts)?;
    write_sweep_csv(&rows, &a.out)?;
    log::info!("wrote {} sweep rows to {}", rows.len(), a.out.display());
    Ok(())
}

fn cmd_export_simmatrix(a: ExportSimmatrixArgs) -> Result<()> {
    let variant: EmbeddingVariant = a.variant.parse()?;
    let params = load_checkpoint(&a.checkpoint)?;
    let corpus = load_corpus_arg(&a.corpus)?;
    let (ids, embeddings) = embed_corpus(&params, &corpus, variant)?;
    let sim = similarity_matrix(&embeddings, &embeddings)?;
    let csv_path = a.out.with_extension("csv");
    let pgm_path = a.out.with_extension("pgm");
    export_similarity_csv(&sim, &ids, &ids, &csv_path)?;
    export_similarity_pgm(&sim, &pgm_path)?;
    log::info!("wrote {} and {}", csv_path.display(), pgm_path.display());
    Ok(())
}

fn cmd_export_projection(a: ExportProjectionArgs) -> Result<()> {
    let params = load_checkpoint(&a.checkpoint)?;
    let corpus = load_corpus_arg(&a.corpus)?;
    let mut subs = Vec::with_capacity(params.cfg.k);
    let mut ids = Vec::new();
    for i in 0..params.cfg.k {
        let (these_ids, m) = embed_corpus(&params, &corpus, EmbeddingVariant::Sub(i))?;
        ids = these_ids;
        subs.push(m);
    }
    let paths = export_projection(&ids, &subs, &a.out)?;
    for p in &paths {
        log::info!("wrote {}", p.display());
    }
    println!("{}", paths.len());
    Ok(())
}
