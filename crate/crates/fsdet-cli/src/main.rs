use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use fsdet::benchmark::{
    aggregate_dir, run_benchmark, train_base_head, write_atomic, BenchmarkConfig, BenchmarkInputs,
    InitChoice,
};
use fsdet::evaluator::{evaluate, load_detections, save_detections, EvalConfig};
use fsdet::featurestore::synth_features;
use fsdet::head::{
    init_head, predict, train_head, HeadSpec, InitMode, PredictConfig, TrainConfig, DEFAULT_ALPHA,
};
use fsdet::sampler::{sample_kshot, ShotSet};
use fsdet::{ClassifierKind, Dataset, Error, FeatureSet, Heads, Result, SynthConfig};

#[derive(Parser)]
#[command(
    name = "fsdet",
    version,
    about = "Few-shot object detection by fine-tuning the last layers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic base/novel problem: annotations.json, train.feat, test.feat.
    Synth(SynthArgs),
    /// Draw a balanced K-shot set of annotations.
    SampleShots(SampleArgs),
    /// Train a base head, or fine-tune a base head on few shots.
    TrainHead(TrainHeadArgs),
    /// Score every proposal of a feature file and write detections.
    Predict(PredictArgs),
    /// COCO-style metrics of a detection file.
    Evaluate(EvaluateArgs),
    /// Repeated-run few-shot protocol over several shot counts.
    Benchmark(BenchmarkArgs),
    /// Recompute per-K aggregate CSVs from the run files of a benchmark directory.
    Aggregate(AggregateArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Total class count (base + novel).
    #[arg(long, default_value_t = 20)]
    classes: usize,
    #[arg(long, default_value_t = 5)]
    novel_classes: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    /// Object instances per class in each split.
    #[arg(long, default_value_t = 100)]
    per_class: usize,
    #[arg(long, default_value_t = 4.0)]
    separation: f64,
    /// Noise-to-signal ratio of the features.
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum ClassSelection {
    All,
    Base,
    Novel,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output shot-set JSON.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    annotations: PathBuf,
    /// Restrict the pool to the images of this feature file.
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long)]
    k: usize,
    #[arg(long, value_enum, default_value_t = ClassSelection::All)]
    classes: ClassSelection,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Stage {
    Base,
    Finetune,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Fc,
    Cosine,
}

impl From<Kind> for ClassifierKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::Fc => ClassifierKind::Fc,
            Kind::Cosine => ClassifierKind::Cosine,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Init {
    Random,
    Novel,
}

impl From<Init> for InitChoice {
    fn from(i: Init) -> Self {
        match i {
            Init::Random => InitChoice::Random,
            Init::Novel => InitChoice::Novel,
        }
    }
}

/// Head and optimizer settings; unset values take the stage's defaults.
#[derive(Args)]
struct TrainFlags {
    #[arg(long, value_enum, default_value_t = Kind::Cosine)]
    classifier: Kind,
    /// Cosine temperature.
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    alpha: f64,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    loc_weight: Option<f64>,
    /// Keep base-class columns fixed during fine-tuning.
    #[arg(long)]
    freeze_base: bool,
    /// Novel-class weight initialization.
    #[arg(long, value_enum, default_value_t = Init::Random)]
    init: Init,
}

impl TrainFlags {
    fn config(&self, defaults: TrainConfig, seed: u64) -> TrainConfig {
        TrainConfig {
            iters: self.iters.unwrap_or(defaults.iters),
            batch_size: self.batch_size.unwrap_or(defaults.batch_size),
            lr: self.lr.unwrap_or(defaults.lr),
            momentum: self.momentum.unwrap_or(defaults.momentum),
            weight_decay: self.weight_decay.unwrap_or(defaults.weight_decay),
            seed,
            freeze_base_classifier_columns: self.freeze_base,
            loc_weight: self.loc_weight.unwrap_or(defaults.loc_weight),
        }
    }
}

#[derive(Args)]
struct TrainHeadArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output head JSON.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    annotations: PathBuf,
    #[arg(long)]
    features: PathBuf,
    #[arg(long, value_enum, default_value_t = Stage::Base)]
    stage: Stage,
    /// Stage-1 head to start fine-tuning from.
    #[arg(long, required_if_eq("stage", "finetune"))]
    base_head: Option<PathBuf>,
    /// Fine-tune on the records of these annotations only (all records otherwise).
    #[arg(long)]
    shots: Option<PathBuf>,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args)]
struct PredictArgs {
    /// Output detections JSON.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    head: PathBuf,
    #[arg(long)]
    features: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    score_thresh: f64,
    #[arg(long, default_value_t = 0.5)]
    nms_iou: f64,
    #[arg(long, default_value_t = 100)]
    max_dets: usize,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Output metrics JSON; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    annotations: PathBuf,
    #[arg(long)]
    detections: PathBuf,
    /// Score only the images of this feature file.
    #[arg(long)]
    features: Option<PathBuf>,
}

#[derive(Args)]
struct BenchmarkArgs {
    /// Seed of the run schedule and of base training.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    annotations: PathBuf,
    /// Base-training features.
    #[arg(long)]
    features: PathBuf,
    /// Features the shots are drawn from; defaults to --features.
    #[arg(long)]
    pool_features: Option<PathBuf>,
    #[arg(long)]
    test_features: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [1, 2, 3, 5, 10])]
    k: Vec<usize>,
    #[arg(long, default_value_t = 30)]
    runs: usize,
    /// Stage-1 learning rate.
    #[arg(long)]
    base_lr: Option<f64>,
    /// Stage-1 iterations.
    #[arg(long)]
    base_iters: Option<usize>,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args)]
struct AggregateArgs {
    /// Benchmark output directory.
    #[arg(long)]
    out: PathBuf,
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|source| Error::Io {
        path: p.to_path_buf(),
        source,
    })
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    if a.novel_classes >= a.classes {
        return Err(Error::InvalidArgument(format!(
            "--novel-classes ({}) must be below --classes ({})",
            a.novel_classes, a.classes
        )));
    }
    let cfg = SynthConfig {
        n_classes_base: a.classes - a.novel_classes,
        n_classes_novel: a.novel_classes,
        dim: a.dim,
        per_class_count: a.per_class,
        class_separation: a.separation,
        noise_sigma: a.sigma,
        seed: a.seed,
    };
    let out = synth_features(&cfg)?;
    create_dir(&a.out)?;
    out.dataset.save(a.out.join("annotations.json"))?;
    out.train.save(a.out.join("train.feat"))?;
    out.test.save(a.out.join("test.feat"))?;
    info!(
        "wrote {} train and {} test records to {}",
        out.train.len(),
        out.test.len(),
        a.out.display()
    );
    Ok(())
}

fn cmd_sample(a: &SampleArgs) -> Result<()> {
    let mut d = Dataset::load(&a.annotations)?;
    if let Some(f) = &a.features {
        d = d.restrict_to_images(&FeatureSet::load(f)?.image_ids());
    }
    let cats = d.categories();
    let classes: BTreeSet<u32> = match a.classes {
        ClassSelection::All => cats.ids(),
        ClassSelection::Base => cats.base_ids(),
        ClassSelection::Novel => cats.novel_ids(),
    }
    .into_iter()
    .collect();
    let shots = sample_kshot(&d, &classes, a.k, a.seed)?;
    for (c, n) in shots.shortfalls.iter().filter(|(_, n)| **n > 0) {
        log::warn!("class {c}: {n} shots short");
    }
    shots.save(&a.out)
}

fn cmd_train(a: &TrainHeadArgs) -> Result<()> {
    let d = Dataset::load(&a.annotations)?;
    let feats = FeatureSet::load(&a.features)?;
    let kind = a.train.classifier.into();
    let heads = match a.stage {
        Stage::Base => {
            let cfg = a.train.config(TrainConfig::base_training(), a.seed);
            train_base_head(&d, &feats, kind, a.train.alpha, &cfg)?
        }
        Stage::Finetune => {
            let base_head = Heads::load(a.base_head.as_ref().expect("required by clap"))?;
            let subset = match &a.shots {
                Some(p) => feats.subset_for_annotations(&d, &ShotSet::load(p)?.annotation_ids()),
                None => feats,
            };
            let cats = d.categories();
            let spec = HeadSpec {
                kind,
                alpha: a.train.alpha,
                dim: subset.dim,
                base_classes: cats.base_ids(),
                novel_classes: cats.novel_ids(),
            };
            let cfg = a.train.config(TrainConfig::default(), a.seed);
            let mode = match a.train.init {
                Init::Random => InitMode::Random,
                Init::Novel => InitMode::NovelPretrained {
                    features: &subset,
                    train: &cfg,
                },
            };
            let mut heads = init_head(&spec, mode, Some(&base_head), a.seed)?;
            let base: BTreeSet<u32> = spec.base_classes.iter().copied().collect();
            train_head(&mut heads, &subset, &cfg, &base)?;
            heads
        }
    };
    heads.save(&a.out)
}

fn cmd_predict(a: &PredictArgs) -> Result<()> {
    let heads = Heads::load(&a.head)?;
    let feats = FeatureSet::load(&a.features)?;
    let cfg = PredictConfig {
        score_thresh: a.score_thresh,
        nms_iou: a.nms_iou,
        max_dets: a.max_dets,
    };
    save_detections(&predict(&heads, &feats, &cfg)?, &a.out)
}

fn cmd_evaluate(a: &EvaluateArgs) -> Result<()> {
    let mut d = Dataset::load(&a.annotations)?;
    if let Some(f) = &a.features {
        d = d.restrict_to_images(&FeatureSet::load(f)?.image_ids());
    }
    let report = evaluate(&load_detections(&a.detections)?, &d, &EvalConfig::default())?;
    match &a.out {
        Some(p) => report.save(p),
        None => {
            println!("{}", report.to_json_string()?);
            Ok(())
        }
    }
}

fn cmd_benchmark(a: &BenchmarkArgs) -> Result<()> {
    let dataset = Dataset::load(&a.annotations)?;
    let base_features = FeatureSet::load(&a.features)?;
    let pool_features = match &a.pool_features {
        Some(p) => FeatureSet::load(p)?,
        None => base_features.clone(),
    };
    let test_features = FeatureSet::load(&a.test_features)?;
    let base_defaults = TrainConfig::base_training();
    let cfg = BenchmarkConfig {
        k_values: a.k.clone(),
        n_runs: a.runs,
        base_seed: a.seed,
        classifier: a.train.classifier.into(),
        alpha: a.train.alpha,
        init: a.train.init.into(),
        base_train: TrainConfig {
            lr: a.base_lr.unwrap_or(base_defaults.lr),
            iters: a.base_iters.unwrap_or(base_defaults.iters),
            ..base_defaults
        },
        finetune: a.train.config(TrainConfig::default(), a.seed),
        ..BenchmarkConfig::default()
    };
    let inputs = BenchmarkInputs {
        dataset: &dataset,
        base_features: &base_features,
        pool_features: &pool_features,
        test_features: &test_features,
    };
    create_dir(&a.out)?;
    write_atomic(
        &a.out.join("config.json"),
        serde_json::to_string_pretty(&cfg)?.as_bytes(),
    )?;
    let result = run_benchmark(&inputs, &cfg, &a.out)?;
    print_summary(&result.aggregates);
    Ok(())
}

fn print_summary(aggregates: &std::collections::BTreeMap<usize, Vec<fsdet::stats::RunStatistics>>) {
    for (k, stats) in aggregates {
        let line: Vec<String> = ["AP50", "bAP50", "nAP50", "nAP"]
            .iter()
            .filter_map(|m| stats.iter().find(|s| s.metric_name == *m))
            .map(|s| match s.ci95 {
                Some(ci) => format!("{} {:.4} +/- {:.4}", s.metric_name, s.mean, ci),
                None => format!("{} {:.4}", s.metric_name, s.mean),
            })
            .collect();
        println!("k={k}: {}", line.join(", "));
    }
}

fn cmd_aggregate(a: &AggregateArgs) -> Result<()> {
    print_summary(&aggregate_dir(&a.out)?);
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::SampleShots(a) => cmd_sample(a),
        Command::TrainHead(a) => cmd_train(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Benchmark(a) => cmd_benchmark(a),
        Command::Aggregate(a) => cmd_aggregate(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let head: Vec<&str> = msg
                .lines()
                .take_while(|l| !l.starts_with("Usage:"))
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .collect();
            eprintln!("{}", head.join(" "));
            return ExitCode::from(1);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fsdet: {}", e.to_string().replace('\n', " "));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
