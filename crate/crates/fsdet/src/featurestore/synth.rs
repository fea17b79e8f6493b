//! Desk-scale synthetic features standing in for a frozen detector backbone.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{encode_reg_target, FeatureRecord, FeatureSet, BACKGROUND};
use crate::dataset::{Annotation, BBox, Category, CategoryTable, Dataset, Image, Split};
use crate::error::{Error, Result};

const IMAGE_SIZE: u32 = 480;
const GRID: u32 = 3;
const CELL: u32 = IMAGE_SIZE / GRID;
const OBJECTS_PER_IMAGE: usize = 4;
const BACKGROUND_PER_IMAGE: usize = 2;
const MIN_SIDE: u32 = 24;
const MAX_SIDE: u32 = 150;
/// Proposal center offset, as a fraction of GT size.
const CENTER_JITTER: f64 = 0.08;
/// Proposal log-size jitter.
const SCALE_JITTER: f64 = 0.08;

const STREAM_MEANS: u64 = 0;
const STREAM_TRAIN: u64 = 1;
const STREAM_TEST: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_classes_base: usize,
    pub n_classes_novel: usize,
    pub dim: usize,
    /// Object instances per class, in each of the train and test splits.
    pub per_class_count: usize,
    pub class_separation: f64,
    /// Noise-to-signal ratio: the isotropic noise has per-coordinate standard
    /// deviation `noise_sigma * class_separation / sqrt(dim)`, so its expected
    /// squared norm is `noise_sigma^2` times that of a scaled class mean.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_classes_base: 15,
            n_classes_novel: 5,
            dim: 64,
            per_class_count: 100,
            class_separation: 4.0,
            noise_sigma: 1.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn n_classes(&self) -> usize {
        self.n_classes_base + self.n_classes_novel
    }

    /// Per-coordinate standard deviation of the feature noise.
    pub fn noise_std(&self) -> f64 {
        self.noise_sigma * self.class_separation / (self.dim as f64).sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes_base == 0
            || self.n_classes_novel == 0
            || self.dim == 0
            || self.per_class_count == 0
        {
            return Err(Error::InvalidArgument(
                "class counts, dim and per_class_count must all be at least 1".into(),
            ));
        }
        if !(self.class_separation > 0.0 && self.class_separation.is_finite()) {
            return Err(Error::InvalidArgument(
                "class_separation must be > 0".into(),
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidArgument("noise_sigma must be >= 0".into()));
        }
        if self.dim < self.n_classes() {
            return Err(Error::InvalidArgument(format!(
                "dim {} too small for {} mutually orthogonal class means",
                self.dim,
                self.n_classes()
            )));
        }
        Ok(())
    }
}

/// Ground truth for every synthesized image (train and test) plus the two feature splits.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    pub dataset: Dataset,
    pub train: FeatureSet,
    pub test: FeatureSet,
}

/// Synthesizes a base/novel detection problem in feature space.
///
/// Class means are orthonormal directions (random rotation of the standard
/// basis), so every pair of classes is 90 degrees apart before scaling by
/// `class_separation`. A foreground feature is `separation * (mean + sigma * z)`
/// with `z ~ N(0, I / dim)`; a background feature is `separation * sigma * z`. Each object
/// gets one proposal jittered around its box, and each image two background
/// proposals in otherwise empty grid cells. Categories `1..=n_base` are base,
/// the rest novel. Train images come first, then test images; all of them are
/// annotated in the returned dataset.
pub fn synth_features(cfg: &SynthConfig) -> Result<SynthOutput> {
    cfg.validate()?;
    let n_classes = cfg.n_classes();
    let means = orthonormal_means(cfg.seed, n_classes, cfg.dim);

    let categories = (0..n_classes)
        .map(|i| Category {
            id: i as u32 + 1,
            name: format!(
                "{}_{:02}",
                if i < cfg.n_classes_base {
                    "base"
                } else {
                    "novel"
                },
                i + 1
            ),
            split: if i < cfg.n_classes_base {
                Split::Base
            } else {
                Split::Novel
            },
        })
        .collect();

    let mut images = Vec::new();
    let mut annotations = Vec::new();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (stream, out) in [(STREAM_TRAIN, &mut train), (STREAM_TEST, &mut test)] {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(stream);
        let mut labels: Vec<u32> = (1..=n_classes as u32)
            .flat_map(|c| std::iter::repeat_n(c, cfg.per_class_count))
            .collect();
        labels.shuffle(&mut rng);
        for chunk in labels.chunks(OBJECTS_PER_IMAGE) {
            let image_id = images.len() as u64 + 1;
            images.push(Image {
                id: image_id,
                width: IMAGE_SIZE,
                height: IMAGE_SIZE,
            });
            let mut cells: Vec<u32> = (0..GRID * GRID).collect();
            cells.shuffle(&mut rng);
            let (object_cells, rest) = cells.split_at(chunk.len());
            for (&label, &cell) in chunk.iter().zip(object_cells) {
                let gt = gt_box_in_cell(&mut rng, cell);
                annotations.push(Annotation {
                    id: annotations.len() as u64 + 1,
                    image_id,
                    category_id: label,
                    bbox: gt,
                });
                let proposal = jitter(&mut rng, &gt);
                let reg = encode_reg_target(&proposal, &gt)?;
                let mean = &means[label as usize - 1];
                out.push(FeatureRecord {
                    image_id,
                    proposal,
                    label: label as i32,
                    reg_target: reg.map(|v| v as f32),
                    feature: draw_feature(&mut rng, Some(mean), cfg),
                });
            }
            for &cell in rest.iter().take(BACKGROUND_PER_IMAGE) {
                let proposal = gt_box_in_cell(&mut rng, cell);
                out.push(FeatureRecord {
                    image_id,
                    proposal,
                    label: BACKGROUND,
                    reg_target: [0.0; 4],
                    feature: draw_feature(&mut rng, None, cfg),
                });
            }
        }
    }

    let dataset = Dataset::new(images, annotations, CategoryTable::new(categories)?)?;
    Ok(SynthOutput {
        dataset,
        train: FeatureSet::new(cfg.dim, train)?,
        test: FeatureSet::new(cfg.dim, test)?,
    })
}

/// `n` orthonormal vectors in `dim` dimensions via Gram-Schmidt on Gaussian draws.
fn orthonormal_means(seed: u64, n: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STREAM_MEANS);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n);
    while basis.len() < n {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        // Two passes for numerical orthogonality.
        for _ in 0..2 {
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    basis
}

fn draw_feature(rng: &mut ChaCha8Rng, mean: Option<&Vec<f64>>, cfg: &SynthConfig) -> Vec<f32> {
    let std = cfg.noise_std();
    (0..cfg.dim)
        .map(|i| {
            let z: f64 = rng.sample(StandardNormal);
            let center = mean.map_or(0.0, |m| cfg.class_separation * m[i]);
            (center + std * z) as f32
        })
        .collect()
}

/// Integer-aligned box inside grid cell `cell`.
fn gt_box_in_cell(rng: &mut ChaCha8Rng, cell: u32) -> BBox {
    let (cx, cy) = ((cell % GRID) * CELL, (cell / GRID) * CELL);
    let w = rng.random_range(MIN_SIDE..=MAX_SIDE);
    let h = rng.random_range(MIN_SIDE..=MAX_SIDE);
    let x = cx + rng.random_range(0..=CELL - w);
    let y = cy + rng.random_range(0..=CELL - h);
    BBox::new(x as f64, y as f64, w as f64, h as f64)
}

/// Proposal around `gt`, snapped to the f32 grid so it survives the feature file exactly.
fn jitter(rng: &mut ChaCha8Rng, gt: &BBox) -> BBox {
    let (gcx, gcy) = gt.center();
    let cx = gcx + CENTER_JITTER * gt.w * rng.random_range(-1.0..=1.0);
    let cy = gcy + CENTER_JITTER * gt.h * rng.random_range(-1.0..=1.0);
    let w = gt.w * (SCALE_JITTER * rng.random_range(-1.0..=1.0)).exp();
    let h = gt.h * (SCALE_JITTER * rng.random_range(-1.0..=1.0)).exp();
    let snap = |v: f64| v as f32 as f64;
    BBox::from_xyxy(
        snap(cx - 0.5 * w),
        snap(cy - 0.5 * h),
        snap(cx + 0.5 * w),
        snap(cy + 0.5 * h),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluator::iou;

    fn small() -> SynthConfig {
        SynthConfig {
            n_classes_base: 3,
            n_classes_novel: 2,
            dim: 8,
            per_class_count: 7,
            seed: 11,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn deterministic_and_byte_identical() {
        let a = synth_features(&small()).unwrap();
        let b = synth_features(&small()).unwrap();
        assert_eq!(a, b);
        let (mut x, mut y) = (Vec::new(), Vec::new());
        a.train.write_to(&mut x).unwrap();
        b.train.write_to(&mut y).unwrap();
        assert_eq!(x, y);
        assert_eq!(
            a.dataset.to_json_string().unwrap(),
            b.dataset.to_json_string().unwrap()
        );
    }

    #[test]
    fn label_balance_matches_config() {
        let out = synth_features(&small()).unwrap();
        for fs in [&out.train, &out.test] {
            for c in 1..=5 {
                assert_eq!(fs.records.iter().filter(|r| r.label == c).count(), 7);
            }
            assert!(fs.records.iter().any(|r| r.is_background()));
        }
        assert_eq!(out.dataset.annotations().len(), 2 * 5 * 7);
        assert_eq!(out.dataset.categories().base_ids(), vec![1, 2, 3]);
    }

    #[test]
    fn zero_noise_gives_identical_class_features() {
        let cfg = SynthConfig {
            noise_sigma: 0.0,
            ..small()
        };
        let out = synth_features(&cfg).unwrap();
        let of_class: Vec<_> = out.train.records.iter().filter(|r| r.label == 2).collect();
        assert!(of_class.windows(2).all(|w| w[0].feature == w[1].feature));
    }

    #[test]
    fn background_has_zero_targets_and_foreground_nonzero() {
        let out = synth_features(&small()).unwrap();
        for r in &out.train.records {
            if r.is_background() {
                assert_eq!(r.reg_target, [0.0; 4]);
            }
        }
        assert!(out
            .train
            .records
            .iter()
            .filter(|r| !r.is_background())
            .any(|r| r.reg_target != [0.0; 4]));
    }

    #[test]
    fn proposals_overlap_their_objects() {
        let out = synth_features(&small()).unwrap();
        let assigned = out.test.assign_annotations(&out.dataset);
        for (r, a) in out.test.records.iter().zip(assigned) {
            if r.is_background() {
                assert!(a.is_none());
                continue;
            }
            let gt = out.dataset.annotation(a.unwrap()).unwrap();
            assert!(iou(&r.proposal, &gt.bbox) > 0.6);
        }
    }

    #[test]
    fn means_are_orthonormal() {
        let m = orthonormal_means(3, 20, 64);
        for i in 0..20 {
            for j in 0..20 {
                let d: f64 = m[i].iter().zip(&m[j]).map(|(a, b)| a * b).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((d - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn infeasible_dimension_rejected() {
        let cfg = SynthConfig {
            dim: 2,
            n_classes_base: 45,
            n_classes_novel: 5,
            ..SynthConfig::default()
        };
        assert!(matches!(
            synth_features(&cfg),
            Err(Error::InvalidArgument(_))
        ));
    }
}
