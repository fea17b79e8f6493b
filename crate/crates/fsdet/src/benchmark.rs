//! The repeated-run few-shot protocol.
//!
//! A base head is trained once on base-class records. Then, for every shot
//! count and every seed of the schedule, a balanced K-shot subset of all
//! classes is drawn, a head is initialized from the base head and fine-tuned
//! on that subset, and its predictions on the test split are evaluated.
//! Per-run metric files are written first; the per-K aggregates are computed
//! from those files afterwards, so `aggregate_dir` alone reproduces them.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::evaluator::{evaluate, EvalConfig, MetricsReport};
use crate::featurestore::FeatureSet;
use crate::head::{
    init_head, predict, train_head, ClassifierKind, HeadSpec, Heads, InitMode, PredictConfig,
    TrainConfig, DEFAULT_ALPHA,
};
use crate::sampler::{sample_kshot, seed_schedule};
use crate::stats::{
    summarize, write_aggregate_csv, write_cumulative_csv, RunSeries, RunStatistics,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitChoice {
    Random,
    Novel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub k_values: Vec<usize>,
    pub n_runs: usize,
    pub base_seed: u64,
    pub classifier: ClassifierKind,
    pub alpha: f64,
    pub init: InitChoice,
    /// Stage-1 training on base classes.
    pub base_train: TrainConfig,
    /// Stage-2 fine-tuning; its seed is replaced by each run's seed.
    pub finetune: TrainConfig,
    pub predict: PredictConfig,
    pub eval: EvalConfig,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            k_values: vec![1, 2, 3, 5, 10],
            n_runs: 30,
            base_seed: 0,
            classifier: ClassifierKind::Cosine,
            alpha: DEFAULT_ALPHA,
            init: InitChoice::Random,
            base_train: TrainConfig::base_training(),
            finetune: TrainConfig::default(),
            predict: PredictConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Inputs of a benchmark invocation. `dataset` must annotate the images of
/// both the pool and the test features.
#[derive(Debug, Clone, Copy)]
pub struct BenchmarkInputs<'a> {
    pub dataset: &'a Dataset,
    pub base_features: &'a FeatureSet,
    pub pool_features: &'a FeatureSet,
    pub test_features: &'a FeatureSet,
}

/// One `(k, run)` cell as written to disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub k: usize,
    pub run: usize,
    pub seed: u64,
    pub metrics: Option<MetricsReport>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkResult {
    pub base_head: Heads,
    /// Base head alone, evaluated on the test split.
    pub base_metrics: MetricsReport,
    pub runs: BTreeMap<usize, Vec<RunRecord>>,
    pub aggregates: BTreeMap<usize, Vec<RunStatistics>>,
}

impl BenchmarkResult {
    pub fn aggregate(&self, k: usize, metric: &str) -> Option<&RunStatistics> {
        self.aggregates
            .get(&k)?
            .iter()
            .find(|s| s.metric_name == metric)
    }
}

pub fn k_dir(out: &Path, k: usize) -> PathBuf {
    out.join(format!("k{k}"))
}

fn run_file(out: &Path, k: usize, run: usize) -> PathBuf {
    k_dir(out, k).join(format!("run_{run:03}.json"))
}

/// Writes via a temporary sibling and a rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Stage-1: a head over base classes, trained on base-class and background records.
pub fn train_base_head(
    dataset: &Dataset,
    features: &FeatureSet,
    kind: ClassifierKind,
    alpha: f64,
    cfg: &TrainConfig,
) -> Result<Heads> {
    let base: BTreeSet<u32> = dataset.categories().base_ids().into_iter().collect();
    let subset = features.filter_labels(&base, true);
    let mut heads = Heads::random(
        kind,
        alpha,
        features.dim,
        base.iter().copied().collect(),
        cfg.seed,
    )?;
    train_head(&mut heads, &subset, cfg, &base)?;
    Ok(heads)
}

/// Stage-2 for one run: sample, initialize from `base_head`, fine-tune.
pub fn finetune_run(
    inputs: &BenchmarkInputs<'_>,
    pool_dataset: &Dataset,
    base_head: &Heads,
    cfg: &BenchmarkConfig,
    k: usize,
    seed: u64,
) -> Result<Heads> {
    let cats = inputs.dataset.categories();
    let spec = HeadSpec {
        kind: cfg.classifier,
        alpha: cfg.alpha,
        dim: inputs.pool_features.dim,
        base_classes: cats.base_ids(),
        novel_classes: cats.novel_ids(),
    };
    let all: BTreeSet<u32> = cats.ids().into_iter().collect();
    let shots = sample_kshot(pool_dataset, &all, k, seed)?;
    let subset = inputs
        .pool_features
        .subset_for_annotations(pool_dataset, &shots.annotation_ids());
    let train = TrainConfig {
        seed,
        ..cfg.finetune.clone()
    };
    let mode = match cfg.init {
        InitChoice::Random => InitMode::Random,
        InitChoice::Novel => InitMode::NovelPretrained {
            features: &subset,
            train: &train,
        },
    };
    let mut heads = init_head(&spec, mode, Some(base_head), seed)?;
    let base: BTreeSet<u32> = spec.base_classes.iter().copied().collect();
    train_head(&mut heads, &subset, &train, &base)?;
    Ok(heads)
}

/// Runs the whole protocol, writing every artifact under `out`.
pub fn run_benchmark(
    inputs: &BenchmarkInputs<'_>,
    cfg: &BenchmarkConfig,
    out: &Path,
) -> Result<BenchmarkResult> {
    if cfg.k_values.is_empty() || cfg.k_values.contains(&0) {
        return Err(Error::InvalidArgument(
            "k values must be non-empty and >= 1".into(),
        ));
    }
    let schedule = seed_schedule(cfg.base_seed, cfg.n_runs)?;
    let pool_dataset = inputs
        .dataset
        .restrict_to_images(&inputs.pool_features.image_ids());
    let test_dataset = inputs
        .dataset
        .restrict_to_images(&inputs.test_features.image_ids());

    let base_cfg = TrainConfig {
        seed: cfg.base_seed,
        ..cfg.base_train.clone()
    };
    info!("training base head ({} iterations)", base_cfg.iters);
    let base_head = train_base_head(
        inputs.dataset,
        inputs.base_features,
        cfg.classifier,
        cfg.alpha,
        &base_cfg,
    )?;
    write_atomic(
        &out.join("base_head.json"),
        serde_json::to_string(&base_head.to_json_value())?.as_bytes(),
    )?;
    let base_dets = predict(&base_head, inputs.test_features, &cfg.predict)?;
    let base_metrics = evaluate(&base_dets, &test_dataset, &cfg.eval)?;
    write_atomic(
        &out.join("base_metrics.json"),
        base_metrics.to_json_string()?.as_bytes(),
    )?;

    let mut runs = BTreeMap::new();
    for &k in &cfg.k_values {
        let mut records = Vec::with_capacity(cfg.n_runs);
        for (run, &seed) in schedule.run_seeds.iter().enumerate() {
            let outcome = finetune_run(inputs, &pool_dataset, &base_head, cfg, k, seed)
                .and_then(|heads| predict(&heads, inputs.test_features, &cfg.predict))
                .and_then(|dets| evaluate(&dets, &test_dataset, &cfg.eval));
            let record = match outcome {
                Ok(m) => RunRecord {
                    k,
                    run,
                    seed,
                    metrics: Some(m),
                    error: None,
                },
                Err(e) => {
                    warn!("k={k} run={run} seed={seed} failed: {e}");
                    RunRecord {
                        k,
                        run,
                        seed,
                        metrics: None,
                        error: Some(e.to_string()),
                    }
                }
            };
            write_atomic(
                &run_file(out, k, run),
                serde_json::to_string_pretty(&record)?.as_bytes(),
            )?;
            records.push(record);
        }
        info!("k={k}: {} runs done", records.len());
        runs.insert(k, records);
    }

    let aggregates = aggregate_dir(out)?;
    Ok(BenchmarkResult {
        base_head,
        base_metrics,
        runs,
        aggregates,
    })
}

/// Reads the run records of one `k<K>` directory, in run order.
pub fn read_runs(dir: &Path) -> Result<Vec<RunRecord>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("run_") && n.ends_with(".json"))
        })
        .collect();
    files.sort();
    let mut records = files
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            Ok(serde_json::from_str::<RunRecord>(&text)?)
        })
        .collect::<Result<Vec<_>>>()?;
    records.sort_by_key(|r| r.run);
    Ok(records)
}

/// Summarizes every scalar metric over the runs; failed runs and absent
/// metrics are left out of that metric's series.
pub fn aggregate_runs(records: &[RunRecord]) -> Result<Vec<RunStatistics>> {
    let mut stats = Vec::new();
    for name in MetricsReport::METRIC_NAMES {
        let values: Vec<f64> = records
            .iter()
            .filter_map(|r| r.metrics.as_ref()?.get(name))
            .collect();
        if values.is_empty() {
            continue;
        }
        stats.push(summarize(&RunSeries::new(name, values))?);
    }
    Ok(stats)
}

/// Recomputes `aggregate.csv` and `cumulative.csv` in every `k<K>` directory of `out`.
pub fn aggregate_dir(out: &Path) -> Result<BTreeMap<usize, Vec<RunStatistics>>> {
    let mut result = BTreeMap::new();
    for entry in fs::read_dir(out).map_err(|e| Error::io(out, e))? {
        let path = entry.map_err(|e| Error::io(out, e))?.path();
        let Some(k) = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix('k'))
            .and_then(|n| n.parse::<usize>().ok())
        else {
            continue;
        };
        if !path.is_dir() {
            continue;
        }
        let records = read_runs(&path)?;
        for r in records.iter().filter(|r| r.metrics.is_none()) {
            warn!(
                "k={k} run={}: missing metrics ({})",
                r.run,
                r.error.as_deref().unwrap_or("no reason recorded")
            );
        }
        let stats = aggregate_runs(&records)?;
        let mut buf = Vec::new();
        write_aggregate_csv(&stats, &mut buf)?;
        write_atomic(&path.join("aggregate.csv"), &buf)?;
        let mut buf = Vec::new();
        write_cumulative_csv(&stats, &mut buf)?;
        write_atomic(&path.join("cumulative.csv"), &buf)?;
        result.insert(k, stats);
    }
    Ok(result)
}
