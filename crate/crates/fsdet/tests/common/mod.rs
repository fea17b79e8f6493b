//! Independent reference implementations shared by the integration tests.

#![allow(dead_code)]

use std::collections::BTreeMap;

use fsdet::dataset::{Category, Image};
use fsdet::evaluator::Detection;
use fsdet::featurestore::{FeatureRecord, FeatureSet, BACKGROUND};
use fsdet::ClassifierKind;
use fsdet::{Annotation, BBox, CategoryTable, Dataset, Heads, Split};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Random head with O(1) weights and a batch mixing all classes and background.
pub fn gradient_instance(
    rng: &mut ChaCha8Rng,
    kind: ClassifierKind,
) -> (Heads, Vec<FeatureRecord>, f64) {
    let dim = rng.random_range(1..=16);
    let c = rng.random_range(1..=5u32);
    let mut heads = Heads::random(
        kind,
        rng.random_range(1.0..30.0),
        dim,
        (1..=c).collect(),
        rng.random(),
    )
    .unwrap();
    for t in heads.tensors_mut() {
        t.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
    }
    let batch = (0..rng.random_range(1..=8))
        .map(|_| {
            let label = rng.random_range(0..=c) as i32;
            FeatureRecord {
                image_id: 1,
                proposal: BBox::new(0.0, 0.0, 10.0, 10.0),
                label: if label == 0 { BACKGROUND } else { label },
                reg_target: std::array::from_fn(|_| rng.random_range(-2.5f32..2.5)),
                feature: (0..dim)
                    .map(|_| rng.sample::<f32, _>(StandardNormal))
                    .collect(),
            }
        })
        .collect();
    (heads, batch, rng.random_range(0.0..2.0))
}

/// Central finite differences of `batch_loss` with respect to every head parameter.
pub fn numeric_grads(
    heads: &Heads,
    batch: &[FeatureRecord],
    loc_weight: f64,
    h: f64,
) -> Vec<Vec<f64>> {
    let loss = |hd: &Heads| fsdet::head::batch_loss(hd, batch, loc_weight).unwrap().0;
    let mut probe = heads.clone();
    let sizes: Vec<usize> = heads.tensors().iter().map(|t| t.len()).collect();
    let mut out = Vec::new();
    for (t, &n) in sizes.iter().enumerate() {
        let mut g = vec![0.0; n];
        for (i, gi) in g.iter_mut().enumerate() {
            let orig = probe.tensors()[t][i];
            probe.tensors_mut()[t][i] = orig + h;
            let up = loss(&probe);
            probe.tensors_mut()[t][i] = orig - h;
            let down = loss(&probe);
            probe.tensors_mut()[t][i] = orig;
            *gi = (up - down) / (2.0 * h);
        }
        out.push(g);
    }
    out
}

fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let ix = ((a.x + a.w).min(b.x + b.w) - a.x.max(b.x)).max(0.0);
    let iy = ((a.y + a.h).min(b.y + b.h) - a.y.max(b.y)).max(0.0);
    let inter = ix * iy;
    let union = a.w * a.h + b.w * b.h - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// True-positive count of the first `n` ranked detections, re-matched from scratch.
fn prefix_tp(ranked: &[&Detection], n: usize, gts: &[&Annotation], t: f64) -> usize {
    let mut used = vec![false; gts.len()];
    let mut tp = 0;
    for d in &ranked[..n] {
        let mut best: Option<usize> = None;
        let mut best_iou = -1.0;
        for (g, gt) in gts.iter().enumerate() {
            if used[g] || gt.image_id != d.image_id {
                continue;
            }
            let o = box_iou(&d.bbox, &gt.bbox);
            if o >= t && o > best_iou {
                best = Some(g);
                best_iou = o;
            }
        }
        if let Some(g) = best {
            used[g] = true;
            tp += 1;
        }
    }
    tp
}

/// Brute-force 101-point AP of one class at one IoU threshold.
///
/// Every prefix of the global ranking is matched again from scratch; the
/// interpolated precision at recall `r` is the best precision of any prefix
/// whose recall reaches `r`.
pub fn brute_force_ap(dets: &[Detection], d: &Dataset, class: u32, t: f64) -> Option<f64> {
    let gts: Vec<&Annotation> = d
        .annotations()
        .iter()
        .filter(|a| a.category_id == class)
        .collect();
    if gts.is_empty() {
        return None;
    }
    let mut ranked: Vec<(usize, &Detection)> = dets
        .iter()
        .enumerate()
        .filter(|(_, x)| x.category_id == class)
        .collect();
    ranked.sort_by(|a, b| {
        b.1.score
            .partial_cmp(&a.1.score)
            .unwrap()
            .then(a.0.cmp(&b.0))
    });
    let ranked: Vec<&Detection> = ranked.into_iter().map(|(_, x)| x).collect();
    let pr: Vec<(f64, f64)> = (1..=ranked.len())
        .map(|n| {
            let tp = prefix_tp(&ranked, n, &gts, t) as f64;
            (tp / n as f64, tp / gts.len() as f64)
        })
        .collect();
    let mut total = 0.0;
    for i in 0..=100 {
        let r = i as f64 / 100.0;
        total += pr
            .iter()
            .filter(|(_, rec)| *rec >= r - 1e-12)
            .map(|(p, _)| *p)
            .fold(0.0, f64::max);
    }
    Some(total / 101.0)
}

/// Mean of the present per-class brute-force APs.
pub fn brute_force_mean_ap(dets: &[Detection], d: &Dataset, t: f64) -> Option<f64> {
    let v: Vec<f64> = d
        .categories()
        .ids()
        .into_iter()
        .filter_map(|c| brute_force_ap(dets, d, c, t))
        .collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn random_box(rng: &mut ChaCha8Rng, size: f64) -> BBox {
    let w = rng.random_range(5.0..size / 2.0);
    let h = rng.random_range(5.0..size / 2.0);
    let x = rng.random_range(0.0..size - w);
    let y = rng.random_range(0.0..size - h);
    BBox::new(x, y, w, h)
}

fn jitter(rng: &mut ChaCha8Rng, b: &BBox, size: f64) -> BBox {
    let s = rng.random_range(0.0..0.4);
    let dx = rng.random_range(-s..=s) * b.w;
    let dy = rng.random_range(-s..=s) * b.h;
    let w = (b.w * rng.random_range(1.0 - s..=1.0 + s)).max(1.0);
    let h = (b.h * rng.random_range(1.0 - s..=1.0 + s)).max(1.0);
    let x = (b.x + dx).clamp(0.0, size - w);
    let y = (b.y + dy).clamp(0.0, size - h);
    BBox::new(x, y, w, h)
}

/// A small random evaluation problem: up to 5 images, 3 classes (the last
/// one novel) and 10 detections, with coarse scores so ties occur.
pub fn random_scenario(rng: &mut ChaCha8Rng) -> (Dataset, Vec<Detection>) {
    let size = 100.0;
    let n_img = rng.random_range(1..=5u64);
    let images: Vec<Image> = (1..=n_img)
        .map(|id| Image {
            id,
            width: 100,
            height: 100,
        })
        .collect();
    let cats = CategoryTable::new(
        (1..=3)
            .map(|id| Category {
                id,
                name: format!("c{id}"),
                split: if id == 3 { Split::Novel } else { Split::Base },
            })
            .collect(),
    )
    .unwrap();
    let mut anns = Vec::new();
    for img in 1..=n_img {
        for _ in 0..rng.random_range(0..=3) {
            anns.push(Annotation {
                id: anns.len() as u64 + 1,
                image_id: img,
                category_id: rng.random_range(1..=3),
                bbox: random_box(rng, size),
            });
        }
    }
    let n_det = rng.random_range(0..=10);
    let mut dets = Vec::with_capacity(n_det);
    for _ in 0..n_det {
        let score = rng.random_range(1..=8) as f64 / 8.0;
        let det = if !anns.is_empty() && rng.random_bool(0.7) {
            let a = anns[rng.random_range(0..anns.len())];
            let category_id = if rng.random_bool(0.85) {
                a.category_id
            } else {
                rng.random_range(1..=3)
            };
            Detection {
                image_id: a.image_id,
                category_id,
                bbox: jitter(rng, &a.bbox, size),
                score,
            }
        } else {
            Detection {
                image_id: rng.random_range(1..=n_img),
                category_id: rng.random_range(1..=3),
                bbox: random_box(rng, size),
                score,
            }
        };
        dets.push(det);
    }
    (Dataset::new(images, anns, cats).unwrap(), dets)
}

/// Nearest-class-mean label of every foreground record of `test`, with means
/// estimated from the foreground records of `train`.
pub fn nearest_class_mean_accuracy(train: &FeatureSet, test: &FeatureSet) -> f64 {
    let mut sums: BTreeMap<i32, (Vec<f64>, usize)> = BTreeMap::new();
    for r in train.records.iter().filter(|r| r.label != BACKGROUND) {
        let e = sums
            .entry(r.label)
            .or_insert_with(|| (vec![0.0; train.dim], 0));
        e.0.iter_mut()
            .zip(&r.feature)
            .for_each(|(s, v)| *s += f64::from(*v));
        e.1 += 1;
    }
    let means: Vec<(i32, Vec<f64>)> = sums
        .into_iter()
        .map(|(l, (s, n))| (l, s.into_iter().map(|v| v / n as f64).collect()))
        .collect();
    let fg: Vec<&FeatureRecord> = test
        .records
        .iter()
        .filter(|r| r.label != BACKGROUND)
        .collect();
    let correct = fg
        .iter()
        .filter(|r| {
            let dist = |m: &Vec<f64>| -> f64 {
                m.iter()
                    .zip(&r.feature)
                    .map(|(a, b)| (a - f64::from(*b)).powi(2))
                    .sum()
            };
            let best = means
                .iter()
                .min_by(|a, b| dist(&a.1).partial_cmp(&dist(&b.1)).unwrap())
                .unwrap();
            best.0 == r.label
        })
        .count();
    correct as f64 / fg.len() as f64
}

/// Share of foreground records whose highest-scoring column is their own class.
pub fn head_accuracy(heads: &Heads, test: &FeatureSet) -> f64 {
    let fg: Vec<&FeatureRecord> = test
        .records
        .iter()
        .filter(|r| r.label != BACKGROUND)
        .collect();
    let correct = fg
        .iter()
        .filter(|r| {
            let f: Vec<f64> = r.feature.iter().map(|&v| f64::from(v)).collect();
            let s = heads.forward_scores(&f).unwrap();
            let arg = (0..s.len())
                .max_by(|&a, &b| s[a].partial_cmp(&s[b]).unwrap())
                .unwrap();
            heads.class_ids.get(arg).map(|&c| c as i32) == Some(r.label)
        })
        .count();
    correct as f64 / fg.len() as f64
}

/// `k` foreground records per class (the first ones in file order) plus all background records of their images.
pub fn first_k_per_class(feats: &FeatureSet, k: usize) -> FeatureSet {
    let mut taken: BTreeMap<i32, usize> = BTreeMap::new();
    let mut images = std::collections::BTreeSet::new();
    let mut idx = Vec::new();
    for (i, r) in feats.records.iter().enumerate() {
        if r.label == BACKGROUND {
            continue;
        }
        let n = taken.entry(r.label).or_default();
        if *n < k {
            *n += 1;
            idx.push(i);
            images.insert(r.image_id);
        }
    }
    for (i, r) in feats.records.iter().enumerate() {
        if r.label == BACKGROUND && images.contains(&r.image_id) {
            idx.push(i);
        }
    }
    idx.sort_unstable();
    feats.select(&idx)
}
