use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::loss::softmax_into;
use super::{ClassifierKind, Heads};
use crate::error::{Error, Result};
use crate::evaluator::{iou, Detection};
use crate::featurestore::{decode_reg_target, FeatureSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictConfig {
    pub score_thresh: f64,
    pub nms_iou: f64,
    pub max_dets: usize,
}

impl Default for PredictConfig {
    fn default() -> Self {
        PredictConfig {
            score_thresh: 0.05,
            nms_iou: 0.5,
            max_dets: 100,
        }
    }
}

/// Descending score, then ascending position.
fn by_score(dets: &[Detection]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    |&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    }
}

/// Greedy NMS: indices of kept detections, best first. A detection is
/// dropped when its IoU with an already kept one exceeds `iou_thresh`.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(by_score(dets));
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep
            .iter()
            .all(|&k| iou(&dets[k].bbox, &dets[i].bbox) <= iou_thresh)
        {
            keep.push(i);
        }
    }
    keep
}

/// Turns head outputs into scored, class-labelled boxes.
///
/// For every proposal and every foreground class whose softmax probability
/// reaches `score_thresh`, that class's deltas are decoded against the
/// proposal. NMS runs per image and class, then each image keeps its
/// `max_dets` best detections. Output is sorted by image id, then score.
pub fn predict(heads: &Heads, feats: &FeatureSet, cfg: &PredictConfig) -> Result<Vec<Detection>> {
    if feats.dim != heads.dim() {
        return Err(Error::InvalidArgument(format!(
            "feature dim {} != head dim {}",
            feats.dim,
            heads.dim()
        )));
    }
    let cols = heads.cls.cols();
    let col_norms = match heads.kind() {
        ClassifierKind::Cosine => Some(heads.cls.nonzero_column_norms()?),
        ClassifierKind::Fc => None,
    };
    let mut scores = vec![0.0; cols];
    let mut probs = vec![0.0; cols];
    let mut f = vec![0.0; heads.dim()];

    // (image, class) -> candidates, in record order
    let mut groups: BTreeMap<(u64, u32), Vec<Detection>> = BTreeMap::new();
    for r in &feats.records {
        f.iter_mut()
            .zip(&r.feature)
            .for_each(|(d, s)| *d = f64::from(*s));
        heads
            .cls
            .scores_into(&f, col_norms.as_deref(), &mut scores)?;
        softmax_into(&scores, &mut probs);
        for (j, &p) in probs[..heads.num_classes()].iter().enumerate() {
            if p < cfg.score_thresh {
                continue;
            }
            let bbox = decode_reg_target(&heads.reg.deltas(&f, j), &r.proposal);
            let category_id = heads.class_ids[j];
            groups
                .entry((r.image_id, category_id))
                .or_default()
                .push(Detection {
                    image_id: r.image_id,
                    category_id,
                    bbox,
                    score: p,
                });
        }
    }

    let mut per_image: BTreeMap<u64, Vec<Detection>> = BTreeMap::new();
    for ((image_id, _), dets) in groups {
        let kept = nms(&dets, cfg.nms_iou);
        per_image
            .entry(image_id)
            .or_default()
            .extend(kept.into_iter().map(|i| dets[i]));
    }
    let mut out = Vec::new();
    for (_, dets) in per_image {
        let mut order: Vec<usize> = (0..dets.len()).collect();
        order.sort_by(by_score(&dets));
        out.extend(order.into_iter().take(cfg.max_dets).map(|i| dets[i]));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::BBox;
    use crate::featurestore::FeatureRecord;
    use approx::assert_abs_diff_eq;

    fn det(score: f64, bbox: BBox) -> Detection {
        Detection {
            image_id: 1,
            category_id: 1,
            bbox,
            score,
        }
    }

    #[test]
    fn nms_keeps_best_of_duplicates() {
        let b = BBox::new(0.0, 0.0, 10.0, 10.0);
        let dets = [
            det(0.8, b),
            det(0.9, b),
            det(0.7, BBox::new(50.0, 50.0, 5.0, 5.0)),
        ];
        assert_eq!(nms(&dets, 0.5), vec![1, 2]);
    }

    /// Head with one class whose probability on feature (1, 0) is exactly 0.9.
    fn single_class_head() -> Heads {
        let mut h = Heads::random(ClassifierKind::Fc, 20.0, 2, vec![3], 0).unwrap();
        h.cls.weight = vec![0.0; 4];
        h.cls.bias = vec![(9.0f64).ln(), 0.0];
        h.reg.weight = vec![0.0; 8];
        h.reg.bias = vec![0.0; 4];
        h
    }

    fn feats() -> FeatureSet {
        FeatureSet::new(
            2,
            vec![FeatureRecord {
                image_id: 5,
                proposal: BBox::new(10.0, 20.0, 30.0, 40.0),
                label: -1,
                reg_target: [0.0; 4],
                feature: vec![1.0, 0.0],
            }],
        )
        .unwrap()
    }

    #[test]
    fn identity_decode_single_detection() {
        let out = predict(&single_class_head(), &feats(), &PredictConfig::default()).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].image_id, 5);
        assert_eq!(out[0].category_id, 3);
        assert_eq!(out[0].bbox, BBox::new(10.0, 20.0, 30.0, 40.0));
        assert_abs_diff_eq!(out[0].score, 0.9, epsilon = 1e-12);
    }

    #[test]
    fn threshold_above_one_yields_nothing() {
        let cfg = PredictConfig {
            score_thresh: 1.1,
            ..PredictConfig::default()
        };
        assert!(predict(&single_class_head(), &feats(), &cfg)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn max_dets_truncates_per_image() {
        let mut fs = feats();
        for k in 1..6 {
            let mut r = fs.records[0].clone();
            r.proposal = BBox::new(100.0 * k as f64, 0.0, 30.0, 40.0);
            fs.records.push(r);
        }
        let cfg = PredictConfig {
            max_dets: 3,
            ..PredictConfig::default()
        };
        assert_eq!(predict(&single_class_head(), &fs, &cfg).unwrap().len(), 3);
    }
}
