//! COCO-style average precision with base/novel, size and frequency breakdowns.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{Annotation, BBox, Dataset, Frequency, Split};
use crate::error::{Error, Result};

/// A scored, class-labelled box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub image_id: u64,
    pub category_id: u32,
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Serialize, Deserialize)]
struct DetectionEntry {
    image_id: u64,
    category_id: u32,
    bbox: [f64; 4],
    score: f64,
}

/// Writes detections in the COCO results convention.
pub fn detections_to_json(dets: &[Detection]) -> Result<String> {
    let entries: Vec<DetectionEntry> = dets
        .iter()
        .map(|d| DetectionEntry {
            image_id: d.image_id,
            category_id: d.category_id,
            bbox: d.bbox.to_array(),
            score: d.score,
        })
        .collect();
    Ok(serde_json::to_string(&entries)?)
}

pub fn detections_from_json(s: &str) -> Result<Vec<Detection>> {
    let entries: Vec<DetectionEntry> = serde_json::from_str(s)?;
    Ok(entries
        .into_iter()
        .map(|e| Detection {
            image_id: e.image_id,
            category_id: e.category_id,
            bbox: BBox::from(e.bbox),
            score: e.score,
        })
        .collect())
}

pub fn save_detections(dets: &[Detection], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, detections_to_json(dets)?).map_err(|e| Error::io(path, e))
}

pub fn load_detections(path: impl AsRef<Path>) -> Result<Vec<Detection>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    detections_from_json(&text)
}

/// Intersection over union; 0 for disjoint or degenerate boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let [ax1, ay1, ax2, ay2] = a.to_xyxy();
    let [bx1, by1, bx2, by2] = b.to_xyxy();
    let iw = ax2.min(bx2) - ax1.max(bx1);
    let ih = ay2.min(by2) - ay1.max(by1);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Greedy matching within one image and category.
///
/// Detections are visited by descending score (ties by input index); each
/// takes the unmatched ground truth of highest IoU, provided that IoU is at
/// least `iou_thresh`. Returns one entry per detection, in input order: the
/// index of the matched ground truth, or `None` for a false positive.
pub fn match_detections(
    dets: &[Detection],
    gts: &[Annotation],
    iou_thresh: f64,
) -> Vec<Option<usize>> {
    let boxes: Vec<BBox> = gts.iter().map(|g| g.bbox).collect();
    match_boxes(dets, &boxes, iou_thresh)
}

fn score_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| desc_score(dets[a].score, dets[b].score).then(a.cmp(&b)));
    order
}

fn desc_score(a: f64, b: f64) -> Ordering {
    b.partial_cmp(&a).unwrap_or(Ordering::Equal)
}

fn match_boxes(dets: &[Detection], gts: &[BBox], iou_thresh: f64) -> Vec<Option<usize>> {
    let mut taken = vec![false; gts.len()];
    let mut out = vec![None; dets.len()];
    for d in score_order(dets) {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if taken[g] {
                continue;
            }
            let o = iou(&dets[d].bbox, gt);
            if o >= iou_thresh && best.is_none_or(|(_, bo)| o > bo) {
                best = Some((g, o));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
            out[d] = Some(g);
        }
    }
    out
}

/// 101-point interpolated AP from `(score, is_tp)` pairs pooled over images.
///
/// Pairs are ranked by descending score, ties kept in slice order. Returns
/// `None` when there is no ground truth.
pub fn average_precision(flags: &[(f64, bool)], n_gt: usize, recall_points: &[f64]) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    if recall_points.is_empty() {
        return Some(0.0);
    }
    let mut order: Vec<usize> = (0..flags.len()).collect();
    order.sort_by(|&a, &b| desc_score(flags[a].0, flags[b].0).then(a.cmp(&b)));
    let mut recall = Vec::with_capacity(flags.len());
    let mut precision = Vec::with_capacity(flags.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for i in order {
        if flags[i].1 {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let total: f64 = recall_points
        .iter()
        .map(|&r| {
            let i = recall.partition_point(|&x| x < r);
            precision.get(i).copied().unwrap_or(0.0)
        })
        .sum();
    Some(total / recall_points.len() as f64)
}

/// Ground-truth area range, `[lo, hi)` in square pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AreaRange {
    pub name: String,
    pub lo: f64,
    pub hi: f64,
}

impl AreaRange {
    pub fn contains(&self, area: f64) -> bool {
        area >= self.lo && area < self.hi
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
    pub recall_points: Vec<f64>,
    pub max_dets_per_image: usize,
    /// Size buckets for APs, APm and APl, in that order.
    pub area_ranges: Vec<AreaRange>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_thresholds: (0..10).map(|i| 0.5 + 0.05 * i as f64).collect(),
            recall_points: (0..=100).map(|i| i as f64 / 100.0).collect(),
            max_dets_per_image: 100,
            area_ranges: vec![
                AreaRange {
                    name: "small".into(),
                    lo: 0.0,
                    hi: 32.0 * 32.0,
                },
                AreaRange {
                    name: "medium".into(),
                    lo: 32.0 * 32.0,
                    hi: 96.0 * 96.0,
                },
                AreaRange {
                    name: "large".into(),
                    lo: 96.0 * 96.0,
                    hi: f64::INFINITY,
                },
            ],
        }
    }
}

impl EvalConfig {
    pub fn with_thresholds(iou_thresholds: Vec<f64>) -> Self {
        EvalConfig {
            iou_thresholds,
            ..EvalConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iou_thresholds.is_empty() {
            return Err(Error::InvalidArgument("no IoU thresholds".into()));
        }
        if self.iou_thresholds.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
            return Err(Error::InvalidArgument(
                "IoU thresholds must lie in (0, 1]".into(),
            ));
        }
        if self.iou_thresholds.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument(
                "IoU thresholds must be strictly increasing".into(),
            ));
        }
        Ok(())
    }

    fn threshold_index(&self, t: f64) -> Option<usize> {
        self.iou_thresholds
            .iter()
            .position(|x| (x - t).abs() < 1e-9)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ClassAp {
    pub ap: Option<f64>,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
}

/// All reported metrics; `None` marks an aggregate with no contributing class.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(rename = "AP")]
    pub ap: Option<f64>,
    #[serde(rename = "AP50")]
    pub ap50: Option<f64>,
    #[serde(rename = "AP75")]
    pub ap75: Option<f64>,
    #[serde(rename = "bAP")]
    pub bap: Option<f64>,
    #[serde(rename = "bAP50")]
    pub bap50: Option<f64>,
    #[serde(rename = "bAP75")]
    pub bap75: Option<f64>,
    #[serde(rename = "nAP")]
    pub nap: Option<f64>,
    #[serde(rename = "nAP50")]
    pub nap50: Option<f64>,
    #[serde(rename = "nAP75")]
    pub nap75: Option<f64>,
    #[serde(rename = "APs")]
    pub aps: Option<f64>,
    #[serde(rename = "APm")]
    pub apm: Option<f64>,
    #[serde(rename = "APl")]
    pub apl: Option<f64>,
    #[serde(rename = "APr")]
    pub apr: Option<f64>,
    #[serde(rename = "APc")]
    pub apc: Option<f64>,
    #[serde(rename = "APf")]
    pub apf: Option<f64>,
    pub per_class: BTreeMap<u32, ClassAp>,
    /// AP of every class at every configured threshold (whole area range).
    #[serde(skip)]
    pub per_class_threshold: BTreeMap<u32, Vec<Option<f64>>>,
}

impl MetricsReport {
    pub const METRIC_NAMES: [&'static str; 15] = [
        "AP", "AP50", "AP75", "bAP", "bAP50", "bAP75", "nAP", "nAP50", "nAP75", "APs", "APm",
        "APl", "APr", "APc", "APf",
    ];

    /// Named scalar metrics, in [`Self::METRIC_NAMES`] order.
    pub fn metrics(&self) -> Vec<(&'static str, Option<f64>)> {
        let v = [
            self.ap, self.ap50, self.ap75, self.bap, self.bap50, self.bap75, self.nap, self.nap50,
            self.nap75, self.aps, self.apm, self.apl, self.apr, self.apc, self.apf,
        ];
        Self::METRIC_NAMES.iter().copied().zip(v).collect()
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics()
            .into_iter()
            .find(|(n, _)| *n == name)
            .and_then(|(_, v)| v)
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json_string()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn mean_present<I: IntoIterator<Item = Option<f64>>>(values: I) -> Option<f64> {
    let (sum, n) = values
        .into_iter()
        .flatten()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Scores `dets` against the ground truth of `d`.
///
/// Each image first keeps its `max_dets_per_image` best detections. Per class
/// and threshold, detections are matched image by image and ranked across all
/// images to build the precision/recall curve. For a size bucket only ground
/// truth inside the bucket counts, and an unmatched detection is a false
/// positive only if its own area falls in the bucket.
pub fn evaluate(dets: &[Detection], d: &Dataset, cfg: &EvalConfig) -> Result<MetricsReport> {
    cfg.validate()?;
    for (i, det) in dets.iter().enumerate() {
        if !d.categories().contains(det.category_id) {
            return Err(Error::Validation(format!(
                "detection {i}: unknown category_id {}",
                det.category_id
            )));
        }
        if !det.score.is_finite() || !det.bbox.has_positive_size() {
            return Err(Error::Validation(format!(
                "detection {i}: score must be finite and bbox non-degenerate"
            )));
        }
    }

    // Per-image truncation; surviving detections keep their global index.
    let mut by_image: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, det) in dets.iter().enumerate() {
        by_image.entry(det.image_id).or_default().push(i);
    }
    let mut cells: HashMap<(u64, u32), Vec<usize>> = HashMap::new();
    for idx in by_image.values_mut() {
        idx.sort_by(|&a, &b| desc_score(dets[a].score, dets[b].score).then(a.cmp(&b)));
        for &i in idx.iter().take(cfg.max_dets_per_image) {
            cells
                .entry((dets[i].image_id, dets[i].category_id))
                .or_default()
                .push(i);
        }
    }
    let mut gt_cells: HashMap<(u64, u32), Vec<&Annotation>> = HashMap::new();
    for a in d.annotations() {
        gt_cells
            .entry((a.image_id, a.category_id))
            .or_default()
            .push(a);
    }

    let all = AreaRange {
        name: "all".into(),
        lo: 0.0,
        hi: f64::INFINITY,
    };
    let class_ids = d.categories().ids();
    // keys of every (image, class) cell, grouped by class
    let mut images_of_class: BTreeMap<u32, Vec<u64>> = BTreeMap::new();
    for &(img, c) in cells.keys().chain(gt_cells.keys()) {
        images_of_class.entry(c).or_default().push(img);
    }
    for v in images_of_class.values_mut() {
        v.sort_unstable();
        v.dedup();
    }

    let class_threshold_ap = |c: u32, t: f64, range: &AreaRange| -> Option<f64> {
        let mut flags: Vec<(f64, usize, bool)> = Vec::new();
        let mut n_gt = 0;
        for &img in images_of_class.get(&c).map(Vec::as_slice).unwrap_or(&[]) {
            let gts: Vec<BBox> = gt_cells
                .get(&(img, c))
                .map(|v| {
                    v.iter()
                        .map(|a| a.bbox)
                        .filter(|b| range.contains(b.area()))
                        .collect()
                })
                .unwrap_or_default();
            n_gt += gts.len();
            let Some(idx) = cells.get(&(img, c)) else {
                continue;
            };
            let cell_dets: Vec<Detection> = idx.iter().map(|&i| dets[i]).collect();
            let matched = match_boxes(&cell_dets, &gts, t);
            for ((&gi, det), m) in idx.iter().zip(&cell_dets).zip(matched) {
                if m.is_some() {
                    flags.push((det.score, gi, true));
                } else if range.contains(det.bbox.area()) {
                    flags.push((det.score, gi, false));
                }
            }
        }
        // pool across images: global rank is (score desc, global index asc)
        flags.sort_by(|a, b| desc_score(a.0, b.0).then(a.1.cmp(&b.1)));
        let ranked: Vec<(f64, bool)> = flags.iter().map(|&(s, _, tp)| (s, tp)).collect();
        average_precision(&ranked, n_gt, &cfg.recall_points)
    };

    let mut report = MetricsReport::default();
    let i50 = cfg.threshold_index(0.5);
    let i75 = cfg.threshold_index(0.75);
    let mut class_ap: BTreeMap<u32, Option<f64>> = BTreeMap::new();
    for &c in &class_ids {
        let per_t: Vec<Option<f64>> = cfg
            .iou_thresholds
            .iter()
            .map(|&t| class_threshold_ap(c, t, &all))
            .collect();
        let ap = mean_present(per_t.iter().copied());
        class_ap.insert(c, ap);
        report.per_class.insert(
            c,
            ClassAp {
                ap,
                ap50: i50.and_then(|i| per_t[i]),
                ap75: i75.and_then(|i| per_t[i]),
            },
        );
        report.per_class_threshold.insert(c, per_t);
    }

    let split_of: HashMap<u32, Split> = d
        .categories()
        .entries()
        .iter()
        .map(|c| (c.id, c.split))
        .collect();
    let agg = |filter: &dyn Fn(u32) -> bool, pick: &dyn Fn(&ClassAp) -> Option<f64>| {
        mean_present(
            report
                .per_class
                .iter()
                .filter(|(c, _)| filter(**c))
                .map(|(_, v)| pick(v)),
        )
    };
    let any = |_: u32| true;
    let base = |c: u32| split_of[&c] == Split::Base;
    let novel = |c: u32| split_of[&c] == Split::Novel;
    let ap = |v: &ClassAp| v.ap;
    let ap50 = |v: &ClassAp| v.ap50;
    let ap75 = |v: &ClassAp| v.ap75;
    report.ap = agg(&any, &ap);
    report.ap50 = agg(&any, &ap50);
    report.ap75 = agg(&any, &ap75);
    report.bap = agg(&base, &ap);
    report.bap50 = agg(&base, &ap50);
    report.bap75 = agg(&base, &ap75);
    report.nap = agg(&novel, &ap);
    report.nap50 = agg(&novel, &ap50);
    report.nap75 = agg(&novel, &ap75);

    let size_aps: Vec<Option<f64>> = cfg
        .area_ranges
        .iter()
        .map(|range| {
            mean_present(class_ids.iter().map(|&c| {
                mean_present(
                    cfg.iou_thresholds
                        .iter()
                        .map(|&t| class_threshold_ap(c, t, range)),
                )
            }))
        })
        .collect();
    report.aps = size_aps.first().copied().flatten();
    report.apm = size_aps.get(1).copied().flatten();
    report.apl = size_aps.get(2).copied().flatten();

    let buckets = d.frequency_buckets();
    let by_bucket = |f: Frequency| {
        mean_present(
            class_ap
                .iter()
                .filter(|(c, _)| buckets[c] == f)
                .map(|(_, v)| *v),
        )
    };
    report.apr = by_bucket(Frequency::Rare);
    report.apc = by_bucket(Frequency::Common);
    report.apf = by_bucket(Frequency::Frequent);
    Ok(report)
}
