use std::cmp::Ordering;
use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{loss_and_grad, Example};
use super::optim::{sgd_step, OptimState};
use super::{Heads, ParamTensors};
use crate::error::{Error, Result};
use crate::featurestore::{FeatureRecord, FeatureSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iters: usize,
    /// Proposals per mini-batch; capped at the training set size.
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub freeze_base_classifier_columns: bool,
    pub loc_weight: f64,
}

impl Default for TrainConfig {
    /// Few-shot fine-tuning settings.
    fn default() -> Self {
        TrainConfig {
            iters: 2000,
            batch_size: 128,
            lr: 0.001,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
            freeze_base_classifier_columns: false,
            loc_weight: 1.0,
        }
    }
}

impl TrainConfig {
    /// Base-class training settings: same as fine-tuning but with a 20x larger learning rate.
    pub fn base_training() -> Self {
        TrainConfig {
            lr: 0.02,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iters == 0 {
            return Err(Error::InvalidArgument("iters must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "batch_size must be at least 1".into(),
            ));
        }
        if !(self.loc_weight >= 0.0 && self.loc_weight.is_finite()) {
            return Err(Error::InvalidArgument("loc_weight must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    /// Mini-batch loss before each update.
    pub loss_trace: Vec<f64>,
}

/// Total order on record contents, so shuffling does not depend on input order.
fn record_order(a: &FeatureRecord, b: &FeatureRecord) -> Ordering {
    let key = |r: &FeatureRecord| {
        (
            r.image_id,
            r.label,
            r.proposal.to_xyxy().map(f64::to_bits),
            r.reg_target.map(f32::to_bits),
        )
    };
    key(a).cmp(&key(b)).then_with(|| r_bits(a).cmp(r_bits(b)))
}

fn r_bits(r: &FeatureRecord) -> impl Iterator<Item = u32> + '_ {
    r.feature.iter().map(|v| v.to_bits())
}

/// Mini-batch SGD on `feats` for `cfg.iters` steps.
///
/// Records are put in a canonical order, then batches are read off a seeded
/// permutation that is redrawn at each epoch boundary. With
/// `freeze_base_classifier_columns`, classifier columns and regressor blocks
/// of `base_classes` are excluded from every update.
pub fn train_head(
    heads: &mut Heads,
    feats: &FeatureSet,
    cfg: &TrainConfig,
    base_classes: &BTreeSet<u32>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if feats.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot train on an empty feature set".into(),
        ));
    }
    if feats.dim != heads.dim() {
        return Err(Error::InvalidArgument(format!(
            "feature dim {} != head dim {}",
            feats.dim,
            heads.dim()
        )));
    }

    let mut order: Vec<usize> = (0..feats.len()).collect();
    order.sort_by(|&a, &b| record_order(&feats.records[a], &feats.records[b]));
    let features: Vec<Vec<f64>> = order
        .iter()
        .map(|&i| {
            feats.records[i]
                .feature
                .iter()
                .map(|&v| f64::from(v))
                .collect()
        })
        .collect();
    let examples = order
        .iter()
        .zip(&features)
        .map(|(&i, f)| {
            let r = &feats.records[i];
            Ok(Example {
                feature: f,
                column: heads.target_column(r)?,
                reg_target: r.reg_target_f64(),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mask = cfg
        .freeze_base_classifier_columns
        .then(|| trainable_mask(heads, base_classes));

    let mut opt = OptimState::new(heads, cfg.lr, cfg.momentum, cfg.weight_decay)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = examples.len();
    let batch_size = cfg.batch_size.min(n);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    let mut cursor = 0;
    let mut grads = ParamTensors::zeros_like(heads);
    let mut batch: Vec<Example<'_>> = Vec::with_capacity(batch_size);
    let mut report = TrainReport {
        loss_trace: Vec::with_capacity(cfg.iters),
    };

    for _ in 0..cfg.iters {
        batch.clear();
        while batch.len() < batch_size {
            if cursor == n {
                perm.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(examples[perm[cursor]]);
            cursor += 1;
        }
        let loss = loss_and_grad(heads, &batch, cfg.loc_weight, &mut grads)?;
        report.loss_trace.push(loss);
        sgd_step(heads, &grads, &mut opt, mask.as_ref());
    }
    Ok(report)
}

/// False for classifier columns and regressor blocks of frozen classes.
pub(crate) fn trainable_mask(heads: &Heads, frozen: &BTreeSet<u32>) -> ParamTensors<bool> {
    let mut mask = ParamTensors::filled_like(heads, true);
    let cols = heads.cls.cols();
    let outs = heads.reg.outputs();
    for (j, c) in heads.class_ids.iter().enumerate() {
        if !frozen.contains(c) {
            continue;
        }
        for row in mask.weight.chunks_exact_mut(cols) {
            row[j] = false;
        }
        if let Some(b) = mask.bias.get_mut(j) {
            *b = false;
        }
        for row in mask.reg_weight.chunks_exact_mut(outs) {
            row[4 * j..4 * j + 4].fill(false);
        }
        mask.reg_bias[4 * j..4 * j + 4].fill(false);
    }
    mask
}
