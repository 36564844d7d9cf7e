use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use person_search::data::{
    build_movienet_cs, build_protocol_with, load_cuhk_protocol, load_cuhk_sysu, load_prw, make_synthetic,
    read_manifest, write_manifest, DatasetIndex, GallerySize, ManifestMeta, MovieNetOptions, ProtocolOptions,
    SyntheticSpec,
};
use person_search::engine::{
    infer, net_from_checkpoint, plot_losses, plot_sweep, Checkpoint, StepLog, TrainConfig, Trainer,
};
use person_search::evaluation::{
    cross_dataset_eval, gallery_sweep, read_rows, write_rows, BoxMode, MatchOptions,
};
use person_search::Result;

const DATA_ENV: &str = "PERSON_SEARCH_DATA";

#[derive(Parser)]
#[command(name = "psearch", version, about = "Person search: data preparation, training, evaluation")]
struct Cli {
    /// Log more (repeat for trace output).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load a dataset and write train/test split manifests.
    PrepareData(PrepareArgs),
    /// Train a model on a prepared split.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a prepared test split.
    Eval(EvalArgs),
    /// Detect and embed persons in one image.
    Infer(InferArgs),
    /// Evaluate over several gallery sizes.
    Sweep(SweepArgs),
    /// Draw metric curves from sweep output, or a loss curve from a training log.
    Plot(PlotArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DatasetKind {
    CuhkSysu,
    Prw,
    MovienetCs,
    Synthetic,
}

impl DatasetKind {
    fn dir_name(self) -> &'static str {
        match self {
            DatasetKind::CuhkSysu => "cuhk-sysu",
            DatasetKind::Prw => "prw",
            DatasetKind::MovienetCs => "movienet",
            DatasetKind::Synthetic => "synthetic",
        }
    }
}

#[derive(Args)]
struct PrepareArgs {
    #[arg(long, value_enum)]
    dataset: DatasetKind,
    /// Dataset root; defaults to $PERSON_SEARCH_DATA/<dataset>.
    #[arg(long)]
    source: Option<PathBuf>,
    /// Root holding one directory per dataset.
    #[arg(long, env = DATA_ENV)]
    data_root: Option<PathBuf>,
    /// Output directory for train.jsonl and test.jsonl.
    #[arg(long)]
    out: PathBuf,
    /// MovieNet-CS instances per training identity (10, 30 or 70).
    #[arg(long, default_value_t = 10)]
    cap_n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Synthetic: number of identities.
    #[arg(long, default_value_t = 8)]
    identities: usize,
    /// Synthetic: appearances per identity and split.
    #[arg(long, default_value_t = 5)]
    instances: usize,
    /// Synthetic: image side in pixels.
    #[arg(long, default_value_t = 64)]
    image_size: usize,
    /// Synthetic: probability that the background follows the identity cluster.
    #[arg(long, default_value_t = 1.0)]
    scene_correlation: f64,
    /// Synthetic: identities in different clusters share appearance.
    #[arg(long)]
    lookalike: bool,
    /// Synthetic: images per split.
    #[arg(long)]
    images: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory with train.jsonl.
    #[arg(long)]
    data: PathBuf,
    /// TOML config; flags below override it.
    #[arg(long, conflicts_with = "profile")]
    config: Option<PathBuf>,
    /// Built-in profile: full or toy.
    #[arg(long)]
    profile: Option<String>,
    /// Output directory for the config, log and checkpoints.
    #[arg(long)]
    out: PathBuf,
    /// Continue from a checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    queue_size: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    no_gsc: bool,
    #[arg(long)]
    no_lgc: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Boxes {
    Det,
    Gt,
}

impl From<Boxes> for BoxMode {
    fn from(b: Boxes) -> Self {
        match b {
            Boxes::Det => BoxMode::Detected,
            Boxes::Gt => BoxMode::GroundTruth,
        }
    }
}

#[derive(Args)]
struct EvalCommon {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory with test.jsonl.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "det")]
    boxes: Boxes,
    /// Seed for protocol sampling.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Use the legacy size-adaptive IoU threshold for small boxes.
    #[arg(long)]
    size_adaptive: bool,
    /// Append metric rows (JSON lines) to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: EvalCommon,
    /// Gallery images per query, or "all". Defaults per dataset.
    #[arg(long)]
    gallery_size: Option<GallerySize>,
    /// Tag the report with the checkpoint's training dataset.
    #[arg(long)]
    cross_dataset: bool,
    /// Every labeled instance becomes a query (datasets without official queries).
    #[arg(long)]
    all_instances: bool,
    /// CUHK-SYSU root for the published query protocol; defaults to
    /// $PERSON_SEARCH_DATA/cuhk-sysu when present.
    #[arg(long, env = DATA_ENV)]
    data_root: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: EvalCommon,
    /// Comma-separated gallery sizes, e.g. 50,100,500,all.
    #[arg(long, value_delimiter = ',', required = true)]
    sizes: Vec<GallerySize>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Write detections as JSON here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PlotArgs {
    /// Metric rows written by eval or sweep.
    #[arg(long, required_unless_present = "log")]
    metrics: Option<PathBuf>,
    /// Training log written by train.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::PrepareData(a) => prepare(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Infer(a) => run_infer(a),
        Command::Sweep(a) => sweep(a),
        Command::Plot(a) => plot(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn prepare(a: PrepareArgs) -> Result<()> {
    std::fs::create_dir_all(&a.out)?;
    let source = || -> Result<PathBuf> {
        match (&a.source, &a.data_root) {
            (Some(s), _) => Ok(s.clone()),
            (None, Some(root)) => Ok(root.join(a.dataset.dir_name())),
            (None, None) => Err(person_search::Error::Config(format!(
                "no dataset location: pass --source or --data-root, or set {DATA_ENV}"
            ))),
        }
    };
    let mut meta = ManifestMeta::default();
    let (train, test) = match a.dataset {
        DatasetKind::CuhkSysu => load_cuhk_sysu(&source()?)?,
        DatasetKind::Prw => load_prw(&source()?)?,
        DatasetKind::MovienetCs => {
            let opts = MovieNetOptions { seed: a.seed, ..MovieNetOptions::default() };
            meta.seed = Some(a.seed);
            meta.cap_n = Some(a.cap_n);
            build_movienet_cs(&source()?, a.cap_n, &opts)?
        }
        DatasetKind::Synthetic => {
            meta.seed = Some(a.seed);
            make_synthetic(&SyntheticSpec {
                num_identities: a.identities,
                instances_per_identity: a.instances,
                image_size: a.image_size,
                scene_correlation: a.scene_correlation,
                lookalike: a.lookalike,
                images_per_split: a.images,
                seed: a.seed,
                ..SyntheticSpec::default()
            })?
        }
    };
    for (index, file) in [(&train, "train.jsonl"), (&test, "test.jsonl")] {
        let path = a.out.join(file);
        write_manifest(&path, index, &meta)?;
        println!(
            "{}: {} images, {} boxes, {} identities",
            path.display(),
            index.images().len(),
            index.num_boxes(),
            index.num_identities()
        );
    }
    Ok(())
}

fn load_split(dir: &Path, file: &str) -> Result<DatasetIndex> {
    Ok(read_manifest(&dir.join(file))?.0)
}

fn train(a: TrainArgs) -> Result<()> {
    let index = load_split(&a.data, "train.jsonl")?;
    std::fs::create_dir_all(&a.out)?;
    let mut trainer = match &a.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            info!("resuming from {} at step {}", path.display(), ckpt.step);
            Trainer::resume(&ckpt, &index)?
        }
        None => {
            let mut cfg = match (&a.config, &a.profile) {
                (Some(p), _) => TrainConfig::load(p)?,
                (None, Some(name)) => TrainConfig::profile(name)?,
                (None, None) => TrainConfig::default(),
            };
            apply_overrides(&mut cfg, &a);
            cfg.validate()?;
            Trainer::new(cfg, &index)?
        }
    };
    trainer.config.save(&a.out.join("config.toml"))?;
    let log_path = a.out.join("train_log.jsonl");
    let mut log = BufWriter::new(
        std::fs::OpenOptions::new()
            .create(true)
            .append(a.resume.is_some())
            .write(true)
            .truncate(a.resume.is_none())
            .open(&log_path)?,
    );
    let total = trainer.total_steps();
    let every = (total / 20).max(1);
    let result = trainer.run(Some(&mut log), Some(&a.out), |l| {
        if l.step % every == 0 || l.step == total {
            info!("step {}/{total} epoch {} lr {:.2e} loss {:.4}", l.step, l.epoch, l.lr, l.loss);
        }
    });
    log.flush()?;
    let logs = result?;
    println!("trained {} steps; checkpoints and log in {}", logs.len(), a.out.display());
    Ok(())
}

fn apply_overrides(cfg: &mut TrainConfig, a: &TrainArgs) {
    if let Some(v) = a.lr {
        cfg.base_lr = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.max_steps {
        cfg.max_steps = Some(v);
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.queue_size {
        cfg.queue_size = Some(v);
    }
    if let Some(v) = a.checkpoint_every {
        cfg.checkpoint_every = v;
    }
    if a.no_gsc {
        cfg.model.context.gsc = false;
    }
    if a.no_lgc {
        cfg.model.context.lgc = false;
    }
}

/// Protocol sizes used when none is given.
fn default_gallery_size(dataset: &str) -> GallerySize {
    match dataset {
        "cuhk-sysu" => GallerySize::Fixed(100),
        "movienet-cs" => GallerySize::Fixed(2000),
        _ => GallerySize::All,
    }
}

fn match_options(c: &EvalCommon) -> MatchOptions {
    MatchOptions {
        size_adaptive: c.size_adaptive,
        ..MatchOptions::default()
    }
}

fn eval(a: EvalArgs) -> Result<()> {
    let c = &a.common;
    let ckpt = Checkpoint::load(&c.checkpoint)?;
    let net = net_from_checkpoint(&ckpt)?;
    let index = load_split(&c.data, "test.jsonl")?;
    let size = a.gallery_size.unwrap_or_else(|| default_gallery_size(index.name()));
    let cuhk_root = a.data_root.as_ref().map(|r| r.join("cuhk-sysu")).filter(|r| r.exists());
    let protocol = match (index.name(), size, cuhk_root) {
        ("cuhk-sysu", GallerySize::Fixed(_), Some(root)) => load_cuhk_protocol(&root, &index, size)?,
        _ => build_protocol_with(
            &index,
            size,
            c.seed,
            &ProtocolOptions {
                all_instances: a.all_instances,
                ..ProtocolOptions::default()
            },
        )?,
    };
    if !a.cross_dataset && ckpt.dataset != index.name() {
        warn!(
            "checkpoint was trained on {} but evaluated on {}; pass --cross-dataset to tag the report",
            ckpt.dataset,
            index.name()
        );
    }
    let mut report = cross_dataset_eval(&net, &ckpt.dataset, &index, &protocol, c.boxes.into(), &match_options(c))?;
    if !a.cross_dataset {
        report.source_dataset = None;
    }
    print!("{report}");
    if let Some(out) = &c.out {
        write_rows(out, &[report])?;
    }
    Ok(())
}

fn sweep(a: SweepArgs) -> Result<()> {
    let c = &a.common;
    let ckpt = Checkpoint::load(&c.checkpoint)?;
    let net = net_from_checkpoint(&ckpt)?;
    let index = load_split(&c.data, "test.jsonl")?;
    let report = gallery_sweep(&net, &index, &a.sizes, c.seed, c.boxes.into(), &match_options(c))?;
    print!("{report}");
    if let Some(out) = &c.out {
        write_rows(out, &[report])?;
    }
    Ok(())
}

fn run_infer(a: InferArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    if !a.image.exists() {
        return Err(person_search::Error::MissingFile(a.image.clone()));
    }
    let image = image::open(&a.image)?.to_rgb8();
    let dets = infer(&image, &ckpt)?;
    let text = serde_json::to_string_pretty(&dets)?;
    match &a.out {
        Some(p) => std::fs::write(p, text + "\n")?,
        None => println!("{text}"),
    }
    eprintln!("{} detections", dets.len());
    Ok(())
}

fn plot(a: PlotArgs) -> Result<()> {
    std::fs::create_dir_all(&a.out)?;
    if let Some(m) = &a.metrics {
        for p in plot_sweep(&read_rows(m)?, &a.out)? {
            println!("{}", p.display());
        }
    }
    if let Some(l) = &a.log {
        if !l.exists() {
            return Err(person_search::Error::MissingFile(l.clone()));
        }
        let mut rows: Vec<StepLog> = Vec::new();
        for line in BufReader::new(File::open(l)?).lines() {
            let line = line?;
            if !line.trim().is_empty() {
                rows.push(serde_json::from_str(&line)?);
            }
        }
        let path = a.out.join("loss.svg");
        plot_losses(&rows, &path)?;
        println!("{}", path.display());
    }
    Ok(())
}
