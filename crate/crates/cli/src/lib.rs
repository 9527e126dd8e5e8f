//! Command-line front end: `zsar ingest | mine | train | eval | project | synth`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use zsar_core::dataio::{load_checkpoint, load_manifest, save_checkpoint, Dataset};
use zsar_core::embedder::{Architecture, ModelParams};
use zsar_core::miner::{mine_manifest, read_triplets, write_triplets, MinerConfig};
use zsar_core::trainer::{from_checkpoint, to_checkpoint, train, TrainConfig};
use zsar_core::zsar::{
    class_prototypes, embed_videos, evaluate, make_splits, pca_project, synth_generate,
    write_projection, FusionWeights, ProjectionRow, SynthConfig,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "zsar",
    version,
    about = "Joint video/sentence embeddings and zero-shot action recognition"
)]
pub struct Cli {
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load and cross-check a dataset manifest.
    Ingest(IngestArgs),
    /// Mine hard-negative triplets.
    Mine(MineArgs),
    /// Train the joint embedder on mined triplets.
    Train(TrainArgs),
    /// Zero-shot evaluation over random class splits.
    Eval(EvalArgs),
    /// 2-D PCA projection of video and prototype embeddings.
    Project(ProjectArgs),
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    pub manifest: PathBuf,
    /// Check structure and file headers without reading feature payloads.
    #[arg(long)]
    pub validate_only: bool,
}

#[derive(Debug, Args)]
pub struct MineArgs {
    pub manifest: PathBuf,
    /// Triplet CSV to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Mining report JSON (default: `<out>.report.json`).
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long, default_value_t = 0.8)]
    pub tau: f64,
    /// Negatives per segment.
    #[arg(long, default_value_t = 10)]
    pub n: usize,
    /// Augmented windows per segment.
    #[arg(long, default_value_t = 3)]
    pub segments: usize,
    #[arg(long, default_value_t = 10.0)]
    pub max_window: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct ArchArgs {
    #[arg(long, default_value_t = 512)]
    pub d_model: usize,
    #[arg(long, default_value_t = 2)]
    pub heads: usize,
    #[arg(long, default_value_t = 1)]
    pub layers: usize,
    #[arg(long, default_value_t = 2048)]
    pub d_ff: usize,
    #[arg(long, default_value_t = 128)]
    pub d_emb: usize,
    /// Longest feature stack fed to the encoder; longer windows are cropped.
    #[arg(long, default_value_t = 480)]
    pub max_rows: usize,
    #[arg(long, default_value_t = 0.0)]
    pub dropout: f64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    pub manifest: PathBuf,
    pub triplets: PathBuf,
    #[arg(long)]
    pub out_ckpt: PathBuf,
    /// Loss trace CSV (default: `<out-ckpt>.trace.csv`).
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Start from this checkpoint instead of a fresh initialization.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Record wall-clock seconds in the trace (breaks byte reproducibility).
    #[arg(long)]
    pub timing: bool,
    #[command(flatten)]
    pub arch: ArchArgs,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub beta1: f64,
    #[arg(long, default_value_t = 0.99)]
    pub beta2: f64,
    #[arg(long, default_value_t = 1e-8)]
    pub adam_eps: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 128)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 25)]
    pub epochs: usize,
    #[arg(long, default_value_t = 10)]
    pub patience: usize,
    #[arg(long, default_value_t = 1.0)]
    pub margin: f64,
    #[arg(long, default_value_t = 0.1)]
    pub val_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    pub manifest: PathBuf,
    pub ckpt: PathBuf,
    /// Directory for report.json, confusion.csv and per_class.csv.
    #[arg(long)]
    pub out: PathBuf,
    /// Classes per run: a number or `all`.
    #[arg(long, default_value = "all")]
    pub classes: String,
    #[arg(long, default_value_t = 50)]
    pub runs: usize,
    #[arg(long, default_value_t = 0.8)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0.2)]
    pub beta: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Fail on videos without object sentences instead of falling back.
    #[arg(long)]
    pub strict: bool,
}

#[derive(Debug, Args)]
pub struct ProjectArgs {
    pub manifest: PathBuf,
    pub ckpt: PathBuf,
    /// Comma-separated class names.
    #[arg(long, value_delimiter = ',', required = true)]
    pub classes: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.8)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0.2)]
    pub beta: f64,
    /// Leave class prototypes out of the projection.
    #[arg(long)]
    pub no_prototypes: bool,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    #[arg(long, default_value_t = 30)]
    pub per_class: usize,
    #[arg(long, default_value_t = 64)]
    pub d_c: usize,
    #[arg(long, default_value_t = 32)]
    pub d_s: usize,
    #[arg(long, default_value_t = 0.05)]
    pub sigma_v: f64,
    #[arg(long, default_value_t = 0.05)]
    pub sigma_s: f64,
    /// Classes held out for zero-shot evaluation.
    #[arg(long, default_value_t = 3)]
    pub eval_classes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Everything that determines a command's output, echoed to stderr and into
/// its output files.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub miner: Option<MinerConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub architecture: Option<Architecture>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fusion: Option<FusionWeights>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthConfig>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub paths: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub options: BTreeMap<String, serde_json::Value>,
}

impl RunConfig {
    fn new(command: &str) -> Self {
        RunConfig {
            command: command.into(),
            ..Default::default()
        }
    }

    fn path(mut self, key: &str, p: &Path) -> Self {
        self.paths.insert(key.into(), p.display().to_string());
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    fn echo(&self) {
        eprintln!("{}", self.to_json());
    }
}

/// Parses arguments, runs the command and maps failures to exit codes.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &anyhow::Error) -> i32 {
    let numeric = e
        .chain()
        .filter_map(|c| c.downcast_ref::<zsar_core::Error>())
        .any(zsar_core::Error::is_numeric);
    if numeric {
        EXIT_NUMERIC
    } else {
        EXIT_USAGE
    }
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        // a pool may already exist when run in-process more than once
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            log::debug!("thread pool already configured: {e}");
        }
    }
    match cli.command {
        Command::Ingest(a) => cmd_ingest(a),
        Command::Mine(a) => cmd_mine(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Project(a) => cmd_project(a),
        Command::Synth(a) => cmd_synth(a),
    }
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn with_suffix(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn cmd_ingest(a: IngestArgs) -> anyhow::Result<()> {
    let cfg = RunConfig::new("ingest").path("manifest", &a.manifest);
    cfg.echo();
    let m = load_manifest(&a.manifest)?;
    let segments: usize = m.videos().iter().map(|v| v.segments.len()).sum();
    if !a.validate_only {
        Dataset::load(m.clone())?;
    }
    println!(
        "ok: {} videos, {} segments, {} sentences (d_s = {}), d_c = {}, {} class prototypes",
        m.videos().len(),
        segments,
        m.sentence_count,
        m.sentence_dim,
        m.feature_dim,
        m.manifest.class_prototypes.len()
    );
    Ok(())
}

fn cmd_mine(a: MineArgs) -> anyhow::Result<()> {
    let miner = MinerConfig {
        tau: a.tau,
        n_negatives: a.n,
        n_aug_segments: a.segments,
        max_window_s: a.max_window,
        seed: a.seed,
    };
    miner.validate()?;
    let report_path = a
        .report
        .clone()
        .unwrap_or_else(|| with_suffix(&a.out, ".report.json"));
    let cfg = RunConfig {
        seed: Some(a.seed),
        miner: Some(miner.clone()),
        ..RunConfig::new("mine")
    }
    .path("manifest", &a.manifest)
    .path("out", &a.out)
    .path("report", &report_path);
    cfg.echo();

    let m = load_manifest(&a.manifest)?;
    let (records, report) = mine_manifest(&m, &miner)?;
    write_triplets(&a.out, &records)?;
    let json = serde_json::json!({ "config": cfg, "report": report });
    write_text(&report_path, &(serde_json::to_string_pretty(&json)? + "\n"))?;
    println!(
        "{} triplets from {} segments ({} unmined, {} too short), mean pool {:.1}",
        records.len(),
        report.segments,
        report.unmined,
        report.skipped_short,
        report.mean_pool_size
    );
    Ok(())
}

/// The architecture stored in a checkpoint's config echo.
pub fn checkpoint_architecture(
    ckpt: &zsar_core::dataio::Checkpoint,
) -> anyhow::Result<Architecture> {
    let cfg: RunConfig = serde_json::from_str(&ckpt.config_echo)
        .context("checkpoint config is not a run configuration")?;
    cfg.architecture
        .context("checkpoint config has no architecture")
}

fn load_params(path: &Path) -> anyhow::Result<ModelParams<f32>> {
    let ckpt = load_checkpoint(path)?;
    let arch = checkpoint_architecture(&ckpt).with_context(|| path.display().to_string())?;
    Ok(from_checkpoint(&ckpt, &arch)?)
}

fn cmd_train(a: TrainArgs) -> anyhow::Result<()> {
    let ds = Dataset::open(&a.manifest)?;
    let arch = Architecture {
        d_c: ds.manifest.feature_dim,
        d_s: ds.sentences.cols(),
        d_model: a.arch.d_model,
        heads: a.arch.heads,
        layers: a.arch.layers,
        d_ff: a.arch.d_ff,
        d_emb: a.arch.d_emb,
        max_rows: a.arch.max_rows,
        dropout: a.arch.dropout,
    };
    arch.validate()?;
    let train_cfg = TrainConfig {
        lr: a.lr,
        beta1: a.beta1,
        beta2: a.beta2,
        adam_eps: a.adam_eps,
        weight_decay: a.weight_decay,
        batch_size: a.batch_size,
        epochs: a.epochs,
        early_stop_patience: a.patience,
        margin: a.margin,
        seed: a.seed,
        val_fraction: a.val_fraction,
    };
    train_cfg.validate()?;
    let trace_path = a
        .trace
        .clone()
        .unwrap_or_else(|| with_suffix(&a.out_ckpt, ".trace.csv"));
    let mut cfg = RunConfig {
        seed: Some(a.seed),
        train: Some(train_cfg.clone()),
        architecture: Some(arch.clone()),
        ..RunConfig::new("train")
    }
    .path("manifest", &a.manifest)
    .path("triplets", &a.triplets)
    .path("out_ckpt", &a.out_ckpt)
    .path("trace", &trace_path);
    if let Some(r) = &a.resume {
        cfg = cfg.path("resume", r);
    }
    cfg.echo();

    let init = match &a.resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            let stored = checkpoint_architecture(&ckpt)?;
            if stored != arch {
                return Err(zsar_core::Error::Config(format!(
                    "checkpoint {} has architecture {stored:?}, run expects {arch:?}",
                    path.display()
                ))
                .into());
            }
            Some(from_checkpoint(&ckpt, &arch)?)
        }
        None => None,
    };
    let triplets = read_triplets(&a.triplets)?;
    let outcome = train(&ds, &triplets, &arch, &train_cfg, init)?;
    save_checkpoint(&a.out_ckpt, &to_checkpoint(&outcome.params, cfg.to_json()))?;
    outcome.trace.write_csv(&trace_path, a.timing)?;
    let meta = serde_json::json!({
        "config": cfg,
        "best_epoch": outcome.trace.best_epoch,
        "epochs_run": outcome.trace.epochs.len(),
        "train_triplets": outcome.train_triplets,
        "val_triplets": outcome.val_triplets,
    });
    write_text(
        &with_suffix(&trace_path, ".meta.json"),
        &(serde_json::to_string_pretty(&meta)? + "\n"),
    )?;
    let best = &outcome.trace.epochs[outcome.trace.best_epoch];
    println!(
        "{} epochs, best epoch {} (train {:.6}, val {:.6})",
        outcome.trace.epochs.len(),
        best.epoch,
        best.train_loss,
        best.val_loss
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> anyhow::Result<()> {
    let fusion = FusionWeights {
        alpha: a.alpha,
        beta: a.beta,
    };
    fusion.validate()?;
    let mut cfg = RunConfig {
        seed: Some(a.seed),
        fusion: Some(fusion),
        ..RunConfig::new("eval")
    }
    .path("manifest", &a.manifest)
    .path("ckpt", &a.ckpt)
    .path("out", &a.out);
    cfg.options
        .insert("classes".into(), a.classes.clone().into());
    cfg.options.insert("runs".into(), a.runs.into());
    cfg.options.insert("strict".into(), a.strict.into());

    let params = load_params(&a.ckpt)?;
    cfg.architecture = Some(params.arch.clone());
    cfg.echo();
    let ds = Dataset::open(&a.manifest)?;
    let names: Vec<String> = ds
        .prototypes()
        .iter()
        .map(|p| p.class_name.clone())
        .collect();
    if names.is_empty() {
        bail!(zsar_core::Error::Invalid(
            "manifest has no class prototypes".into()
        ));
    }
    let k = match a.classes.as_str() {
        "all" => names.len(),
        s => s.parse().map_err(|_| {
            zsar_core::Error::Config(format!("--classes expects a number or 'all', got {s:?}"))
        })?,
    };
    let split = make_splits(&names, k, a.runs, a.seed)?;
    let protos = class_prototypes(&ds, &params)?;
    let videos = embed_videos(&ds, &fusion, &params, a.strict)?;
    let mut report = evaluate(&videos, &protos, &split)?;
    report.config = serde_json::to_value(&cfg)?;

    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    report.write_json(a.out.join("report.json"))?;
    write_text(&a.out.join("confusion.csv"), &report.confusion_csv())?;
    write_text(&a.out.join("per_class.csv"), &report.per_class_csv())?;
    println!(
        "accuracy {:.2}% ± {:.2} over {} run(s) of {} classes",
        100.0 * report.mean_accuracy,
        100.0 * report.std_accuracy,
        report.runs.len(),
        k
    );
    Ok(())
}

fn cmd_project(a: ProjectArgs) -> anyhow::Result<()> {
    let classes: Vec<String> = a
        .classes
        .iter()
        .map(|c| c.trim().to_string())
        .filter(|c| !c.is_empty())
        .collect();
    if classes.is_empty() {
        bail!(zsar_core::Error::Config("--classes is empty".into()));
    }
    let fusion = FusionWeights {
        alpha: a.alpha,
        beta: a.beta,
    };
    fusion.validate()?;
    let mut cfg = RunConfig {
        fusion: Some(fusion),
        ..RunConfig::new("project")
    }
    .path("manifest", &a.manifest)
    .path("ckpt", &a.ckpt)
    .path("out", &a.out);
    cfg.options
        .insert("classes".into(), serde_json::to_value(&classes)?);
    cfg.options
        .insert("prototypes".into(), (!a.no_prototypes).into());
    let params = load_params(&a.ckpt)?;
    cfg.architecture = Some(params.arch.clone());
    cfg.echo();

    let ds = Dataset::open(&a.manifest)?;
    let mut ids = Vec::new();
    let mut labels = Vec::new();
    let mut vectors = Vec::new();
    for v in embed_videos(&ds, &fusion, &params, false)? {
        if classes.contains(&v.class_name) {
            ids.push(v.video_id);
            labels.push(v.class_name);
            vectors.push(v.embedding);
        }
    }
    if !a.no_prototypes {
        for p in class_prototypes(&ds, &params)? {
            if classes.contains(&p.class_name) {
                ids.push(format!("prototype:{}", p.class_name));
                labels.push(p.class_name);
                vectors.push(p.embedding);
            }
        }
    }
    for c in &classes {
        if !labels.contains(c) {
            bail!(zsar_core::Error::Invalid(format!(
                "class {c:?} has no videos or prototype"
            )));
        }
    }
    let proj = pca_project(&vectors)?;
    let rows: Vec<ProjectionRow> = ids
        .into_iter()
        .zip(labels)
        .zip(&proj.coords)
        .map(|((id, label), c)| ProjectionRow {
            id,
            label,
            x: c[0],
            y: c[1],
        })
        .collect();
    write_projection(&a.out, &rows)?;
    let meta = serde_json::json!({ "config": cfg, "variances": proj.variances, "degenerate": proj.degenerate });
    write_text(
        &with_suffix(&a.out, ".meta.json"),
        &(serde_json::to_string_pretty(&meta)? + "\n"),
    )?;
    println!("{} points projected", rows.len());
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> anyhow::Result<()> {
    let synth = SynthConfig {
        classes: a.classes,
        per_class: a.per_class,
        d_c: a.d_c,
        d_s: a.d_s,
        sigma_v: a.sigma_v,
        sigma_s: a.sigma_s,
        eval_classes: a.eval_classes,
        seed: a.seed,
        ..SynthConfig::default()
    };
    let cfg = RunConfig {
        seed: Some(a.seed),
        synth: Some(synth.clone()),
        ..RunConfig::new("synth")
    }
    .path("out_dir", &a.out_dir);
    cfg.echo();
    let out = synth_generate(&synth, &a.out_dir)?;
    write_text(&a.out_dir.join("synth.json"), &(cfg.to_json() + "\n"))?;
    println!(
        "wrote {}, {} and {}; held-out classes: {}",
        out.train.display(),
        out.eval.display(),
        out.all.display(),
        out.eval_classes.join(", ")
    );
    Ok(())
}
