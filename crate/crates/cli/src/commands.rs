//! Subcommand implementations. Every command resolves and validates all of
//! its inputs before creating the output directory, so a failed invocation
//! leaves nothing behind.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Subcommand, ValueEnum};

use sscap_core::backend::{ToyBackend, ToyBackendSpec};
use sscap_core::captioner::MapperKind;
use sscap_core::checkpoint::config_digest;
use sscap_core::data::{
    build_embedding_cache, generate_toy_dataset, load_coco_manifest, split_labeled, BackendRef,
    DatasetManifest, SealedReferences, ToyDatasetSpec,
};
use sscap_core::error::{Error, Result};
use sscap_core::metrics::Smoothing;
use sscap_core::trainer::{
    read_reports_jsonl, write_reports_jsonl, DecodeMode, RunOptions, ScheduleData, SweepReport,
    Trainer,
};

use crate::config::{resolve, RunConfig};

/// Output placement shared by every subcommand: a base directory (flag,
/// then `SSCAP_OUT_DIR`, then the working directory) holding one run
/// directory per invocation.
#[derive(Debug, Args)]
pub struct OutArgs {
    /// Base output directory (defaults to $SSCAP_OUT_DIR, then `.`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Run directory name under the base (defaults to a timestamped name).
    #[arg(long)]
    pub run_name: Option<String>,
}

impl OutArgs {
    fn base(&self) -> PathBuf {
        self.out
            .clone()
            .or_else(|| std::env::var_os("SSCAP_OUT_DIR").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("."))
    }

    /// Compute the run directory without creating it; creation happens only
    /// after the command has validated its inputs.
    fn run_dir(&self, default_name: &str, timestamped: bool) -> PathBuf {
        let name = match &self.run_name {
            Some(name) => name.clone(),
            None if timestamped => {
                let secs = SystemTime::now()
                    .duration_since(UNIX_EPOCH)
                    .unwrap_or_default()
                    .as_secs();
                format!("{default_name}-{secs}")
            }
            None => default_name.to_string(),
        };
        self.base().join(name)
    }
}

fn create_run_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// prepare

#[derive(Debug, Args)]
pub struct PrepareArgs {
    #[command(subcommand)]
    pub source: PrepareSource,
}

#[derive(Debug, Subcommand)]
pub enum PrepareSource {
    /// Generate a synthetic token-bag dataset with its embedding cache.
    Toy(PrepareToyArgs),
    /// Split a COCO-style annotation file into labeled/unlabeled manifests.
    Coco(PrepareCocoArgs),
}

#[derive(Debug, Args)]
pub struct PrepareToyArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 200)]
    pub items: usize,
    #[arg(long, default_value_t = 16)]
    pub vocab: usize,
    #[arg(long, default_value_t = 4)]
    pub bag_min: usize,
    #[arg(long, default_value_t = 6)]
    pub bag_max: usize,
    #[arg(long, default_value_t = 4)]
    pub caption_min: usize,
    #[arg(long, default_value_t = 6)]
    pub caption_max: usize,
    /// Embedding dimension of the toy backend.
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    #[arg(long, default_value_t = 0.0)]
    pub noise_scale: f64,
    /// Labeled-split size (defaults to half of the captioned records).
    #[arg(long)]
    pub labeled: Option<usize>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct PrepareCocoArgs {
    /// COCO-style captions JSON (images + annotations).
    #[arg(long)]
    pub annotations: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Labeled-split size (defaults to half of the captioned records).
    #[arg(long)]
    pub labeled: Option<usize>,
    #[command(flatten)]
    pub out: OutArgs,
}

pub fn cmd_prepare(args: PrepareArgs) -> Result<()> {
    match args.source {
        PrepareSource::Toy(toy) => prepare_toy(toy),
        PrepareSource::Coco(coco) => prepare_coco(coco),
    }
}

fn prepare_toy(args: PrepareToyArgs) -> Result<()> {
    let spec = ToyDatasetSpec {
        seed: args.seed,
        vocabulary_size: args.vocab,
        item_count: args.items,
        bag_size: (args.bag_min, args.bag_max),
        caption_length: (args.caption_min, args.caption_max),
    };
    let (mut manifest, _) = generate_toy_dataset(&spec)?;
    // The generator fills in default backend settings; honour the dim and
    // noise flags by rewriting the reference before anything is split.
    let backend_spec = ToyBackendSpec {
        seed: args.seed,
        dim: args.dim,
        vocabulary_size: args.vocab,
        noise_scale: args.noise_scale,
    };
    manifest.backend = Some(BackendRef::Toy(backend_spec));
    let backend = ToyBackend::new(backend_spec)?;

    let captioned = manifest.labeled().count();
    let n_labeled = args.labeled.unwrap_or(captioned / 2);
    let split = split_labeled(&manifest, n_labeled, args.seed)?;

    let dir = args.out.run_dir("prepared", false);
    create_run_dir(&dir)?;
    manifest.to_json_file(&dir.join("manifest.json"))?;
    split.labeled.to_json_file(&dir.join("labeled.json"))?;
    split.unlabeled.to_json_file(&dir.join("unlabeled.json"))?;
    split.sealed.to_json_file(&dir.join("sealed.json"))?;
    let cache = build_embedding_cache(&manifest, &backend, &dir.join("embeddings.bin"))?;

    println!(
        "prepared {} records ({} labeled, {} unlabeled, {} sealed references)",
        manifest.records.len(),
        split.labeled.records.len(),
        split.unlabeled.records.len(),
        split.sealed.len()
    );
    println!(
        "embedding cache: {} embeddings, {} failures",
        cache.written,
        cache.failures.len()
    );
    for (id, reason) in &cache.failures {
        eprintln!("warning: could not embed `{id}`: {reason}");
    }
    println!("output directory: {}", dir.display());
    Ok(())
}

fn prepare_coco(args: PrepareCocoArgs) -> Result<()> {
    let manifest = load_coco_manifest(&args.annotations)?;
    let captioned = manifest.labeled().count();
    let n_labeled = args.labeled.unwrap_or(captioned / 2);
    let split = split_labeled(&manifest, n_labeled, args.seed)?;

    let dir = args.out.run_dir("prepared", false);
    create_run_dir(&dir)?;
    manifest.to_json_file(&dir.join("manifest.json"))?;
    split.labeled.to_json_file(&dir.join("labeled.json"))?;
    split.unlabeled.to_json_file(&dir.join("unlabeled.json"))?;
    split.sealed.to_json_file(&dir.join("sealed.json"))?;

    println!(
        "prepared {} records ({} labeled, {} unlabeled, {} sealed references)",
        manifest.records.len(),
        split.labeled.records.len(),
        split.unlabeled.records.len(),
        split.sealed.len()
    );
    println!("no embedding cache was built; supply one via the run config");
    println!("output directory: {}", dir.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// train

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MapperArg {
    Mlp,
    Transformer,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Run configuration (TOML). Data paths inside it are resolved relative
    /// to this file's directory.
    #[arg(long)]
    pub config: PathBuf,
    /// Override the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override the mapper architecture.
    #[arg(long, value_enum)]
    pub mapper: Option<MapperArg>,
    /// Override language-model finetuning (true/false).
    #[arg(long)]
    pub finetune_lm: Option<bool>,
    /// Override the evaluation cadence (epochs; 0 disables).
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Evaluation corpus cap (0 = unlimited).
    #[arg(long, default_value_t = 128)]
    pub eval_cap: usize,
    /// Resume from a stage-boundary checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Run a labeled-size sweep instead of a single schedule, e.g. "10,50,200".
    /// Requires `data.full` in the config.
    #[arg(long)]
    pub sweep_sizes: Option<String>,
    #[command(flatten)]
    pub out: OutArgs,
}

fn parse_sizes(text: &str) -> Result<Vec<usize>> {
    let mut sizes = Vec::new();
    for part in text.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        let size: usize = part
            .parse()
            .map_err(|_| Error::Parameter(format!("sweep size `{part}` is not an integer")))?;
        sizes.push(size);
    }
    if sizes.is_empty() {
        return Err(Error::Parameter("no sweep sizes given".into()));
    }
    Ok(sizes)
}

pub fn cmd_train(args: TrainArgs) -> Result<()> {
    let config_text = fs::read_to_string(&args.config)?;
    let mut cfg = RunConfig::from_toml(&config_text)?;
    let overridden = args.seed.is_some()
        || args.mapper.is_some()
        || args.finetune_lm.is_some()
        || args.eval_every.is_some();
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(mapper) = args.mapper {
        cfg.model.mapper.kind = match mapper {
            MapperArg::Mlp => MapperKind::Mlp,
            MapperArg::Transformer => MapperKind::Transformer,
        };
    }
    if let Some(finetune) = args.finetune_lm {
        cfg.model.finetune_lm = finetune;
    }
    if let Some(every) = args.eval_every {
        cfg.schedule.eval_every = every;
    }

    let base = args.config.parent().unwrap_or(Path::new(".")).to_path_buf();
    let backend = cfg.build_backend(&base)?;
    let model = cfg.build_model()?;
    let schedule = cfg.schedule();
    schedule.validate()?;
    let labeled = DatasetManifest::from_json_file(&resolve(&base, &cfg.data.labeled))?;
    let unlabeled = DatasetManifest::from_json_file(&resolve(&base, &cfg.data.unlabeled))?;
    let sealed = match &cfg.data.sealed {
        Some(path) => Some(SealedReferences::from_json_file(&resolve(&base, path))?),
        None => None,
    };

    let trainer = Trainer {
        model: &model,
        backend: backend.as_ref(),
        seed: cfg.seed,
    };
    // Surface checkpoint incompatibility before the run directory exists.
    if let Some(path) = &args.resume {
        trainer.restore_state(path, &schedule)?;
    }

    if let Some(sizes_text) = &args.sweep_sizes {
        if args.resume.is_some() {
            return Err(Error::Parameter(
                "--resume cannot be combined with --sweep-sizes".into(),
            ));
        }
        let sizes = parse_sizes(sizes_text)?;
        let full_path = cfg.data.full.as_ref().ok_or_else(|| {
            Error::Parameter("a labeled-size sweep requires `data.full` in the config".into())
        })?;
        let full = DatasetManifest::from_json_file(&resolve(&base, full_path))?;
        let opts = RunOptions {
            checkpoint_dir: None,
            resume_from: None,
            eval_cap: args.eval_cap,
            smoothing: Smoothing::Epsilon { eps: 0.1 },
        };
        let report = trainer.sweep_labeled_size(&sizes, &schedule, &full, &opts)?;

        let dir = args.out.run_dir("run", true);
        create_run_dir(&dir)?;
        fs::write(dir.join("config.toml"), &config_text)?;
        if overridden {
            fs::write(dir.join("config.effective.toml"), cfg.canonical())?;
        }
        let file = fs::File::create(dir.join("sweep.json"))?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), &report)?;
        for warning in &report.warnings {
            eprintln!("warning: {warning}");
        }
        for entry in &report.entries {
            println!(
                "sweep size {}: BLEU@4 {:.4}, S_CLIP {:.4}, mean cosine {:.4}",
                entry.size, entry.bleu4, entry.s_clip, entry.mean_cosine
            );
        }
        println!("output directory: {}", dir.display());
        return Ok(());
    }

    let dir = args.out.run_dir("run", true);
    create_run_dir(&dir)?;
    fs::write(dir.join("config.toml"), &config_text)?;
    if overridden {
        fs::write(dir.join("config.effective.toml"), cfg.canonical())?;
    }
    let checkpoint_dir = dir.join("checkpoints");
    fs::create_dir_all(&checkpoint_dir)?;

    let data = ScheduleData {
        labeled: &labeled,
        unlabeled: &unlabeled,
        sealed: sealed.as_ref(),
    };
    let opts = RunOptions {
        checkpoint_dir: Some(&checkpoint_dir),
        resume_from: args.resume.as_deref(),
        eval_cap: args.eval_cap,
        smoothing: Smoothing::Epsilon { eps: 0.1 },
    };
    let outcome = trainer.run_schedule(&schedule, &data, &opts)?;
    write_reports_jsonl(&dir.join("reports.jsonl"), &outcome.reports)?;

    println!("config digest {}", outcome.config_digest);
    if let Some(last) = outcome.reports.last() {
        println!(
            "finished stage {} epoch {} with loss {:.6}",
            last.stage, last.epoch, last.loss
        );
    }
    println!("output directory: {}", dir.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluate

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Run configuration the checkpoint was trained under.
    #[arg(long)]
    pub config: PathBuf,
    /// Stage-boundary checkpoint to evaluate.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Evaluation manifest; records without captions fall back to --sealed.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Sealed reference captions for records without their own.
    #[arg(long)]
    pub sealed: Option<PathBuf>,
    /// Beam width (omit for greedy decoding).
    #[arg(long)]
    pub beam: Option<usize>,
    /// Evaluation corpus cap (0 = unlimited).
    #[arg(long, default_value_t = 128)]
    pub cap: usize,
    /// Epsilon smoothing for BLEU@4 (0 disables smoothing).
    #[arg(long, default_value_t = 0.1)]
    pub smoothing_eps: f64,
    #[command(flatten)]
    pub out: OutArgs,
}

pub fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let config_text = fs::read_to_string(&args.config)?;
    let cfg = RunConfig::from_toml(&config_text)?;
    let base = args.config.parent().unwrap_or(Path::new(".")).to_path_buf();
    let backend = cfg.build_backend(&base)?;
    let model = cfg.build_model()?;
    let schedule = cfg.schedule();
    let trainer = Trainer {
        model: &model,
        backend: backend.as_ref(),
        seed: cfg.seed,
    };
    let state = trainer.restore_state(&args.checkpoint, &schedule)?;

    let manifest = DatasetManifest::from_json_file(&args.manifest)?;
    let sealed = match &args.sealed {
        Some(path) => Some(SealedReferences::from_json_file(path)?),
        None => None,
    };
    let corpus = trainer.build_eval_corpus(&manifest, sealed.as_ref(), args.cap)?;
    if corpus.is_empty() {
        return Err(Error::EmptyEvaluation(
            "no evaluation records carry reference captions".into(),
        ));
    }
    let decode = match args.beam {
        Some(0) => return Err(Error::Parameter("beam width must be >= 1".into())),
        Some(width) => DecodeMode::Beam(width),
        None => DecodeMode::Greedy,
    };
    if !args.smoothing_eps.is_finite() || args.smoothing_eps < 0.0 {
        return Err(Error::Parameter(
            "smoothing epsilon must be finite and non-negative".into(),
        ));
    }
    let smoothing = if args.smoothing_eps == 0.0 {
        Smoothing::None
    } else {
        Smoothing::Epsilon {
            eps: args.smoothing_eps,
        }
    };
    let report = trainer.evaluate(&state.params, &corpus, decode, smoothing)?;

    let dir = args.out.run_dir("eval", true);
    create_run_dir(&dir)?;
    report.write_json(&dir.join("score.json"))?;
    report.write_csv(&dir.join("per_image.csv"))?;

    let digest = config_digest(&(model.config(), &schedule));
    println!("config digest {digest}");
    println!(
        "S_CLIP {:.6}  BLEU@4 {:.6}  ({} images)",
        report.s_clip, report.bleu4, report.n
    );
    println!("output directory: {}", dir.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// report

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Stage-report JSON-lines files to tabulate.
    #[arg(long, num_args = 1..)]
    pub reports: Vec<PathBuf>,
    /// Sweep summary JSON to tabulate.
    #[arg(long)]
    pub sweep: Option<PathBuf>,
    #[command(flatten)]
    pub out: OutArgs,
}

fn csv_opt(value: Option<f64>) -> String {
    value.map(|v| v.to_string()).unwrap_or_default()
}

pub fn cmd_report(args: ReportArgs) -> Result<()> {
    if args.reports.is_empty() && args.sweep.is_none() {
        return Err(Error::Parameter(
            "nothing to report: pass --reports and/or --sweep".into(),
        ));
    }

    let mut epoch_rows = Vec::new();
    for path in &args.reports {
        let source = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        for report in read_reports_jsonl(path)? {
            epoch_rows.push(format!(
                "{source},{},{},{},{},{},{}",
                report.stage,
                report.epoch,
                report.loss,
                csv_opt(report.mean_cosine),
                csv_opt(report.bleu4),
                csv_opt(report.s_clip)
            ));
        }
    }
    let sweep = match &args.sweep {
        Some(path) => {
            let text = fs::read_to_string(path)?;
            Some(serde_json::from_str::<SweepReport>(&text)?)
        }
        None => None,
    };

    let dir = args.out.run_dir("report", false);
    create_run_dir(&dir)?;
    if !args.reports.is_empty() {
        let mut csv = String::from("source,stage,epoch,loss,mean_cosine,bleu4,s_clip\n");
        for row in &epoch_rows {
            csv.push_str(row);
            csv.push('\n');
        }
        fs::write(dir.join("epochs.csv"), csv)?;
        println!("epochs.csv: {} rows", epoch_rows.len());
    }
    if let Some(sweep) = sweep {
        let mut csv = String::from("size,bleu4,s_clip,mean_cosine\n");
        for entry in &sweep.entries {
            csv.push_str(&format!(
                "{},{},{},{}\n",
                entry.size, entry.bleu4, entry.s_clip, entry.mean_cosine
            ));
        }
        fs::write(dir.join("sizes.csv"), csv)?;
        println!("sizes.csv: {} rows", sweep.entries.len());
    }
    println!("output directory: {}", dir.display());
    Ok(())
}
