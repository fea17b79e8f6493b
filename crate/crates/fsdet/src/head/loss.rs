use super::{ClassifierKind, Heads, ParamTensors};
use crate::error::{Error, Result};
use crate::featurestore::FeatureRecord;

/// `-log softmax(scores)[label]`, with max-subtraction.
pub fn cross_entropy(scores: &[f64], label: usize) -> Result<f64> {
    if label >= scores.len() {
        return Err(Error::InvalidArgument(format!(
            "label {label} out of range for {} scores",
            scores.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric("non-finite classification score".into()));
    }
    let (lse, _) = log_sum_exp(scores);
    Ok(lse - scores[label])
}

/// Returns `(log sum exp, max)`.
fn log_sum_exp(scores: &[f64]) -> (f64, f64) {
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = scores.iter().map(|v| (v - m).exp()).sum();
    (m + s.ln(), m)
}

pub(crate) fn softmax_into(scores: &[f64], out: &mut [f64]) {
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, s) in out.iter_mut().zip(scores) {
        *o = (s - m).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}

fn smooth_l1_term(e: f64) -> f64 {
    if e.abs() < 1.0 {
        0.5 * e * e
    } else {
        e.abs() - 0.5
    }
}

fn smooth_l1_grad(e: f64) -> f64 {
    if e.abs() < 1.0 {
        e
    } else {
        e.signum()
    }
}

/// Sum over the four deltas of the smooth L1 penalty (quadratic below 1, linear above).
pub fn smooth_l1(pred: &[f64; 4], target: &[f64; 4]) -> f64 {
    pred.iter()
        .zip(target)
        .map(|(p, t)| smooth_l1_term(p - t))
        .sum()
}

/// One record prepared for the numeric kernels.
#[derive(Clone, Copy)]
pub(crate) struct Example<'a> {
    pub feature: &'a [f64],
    pub column: usize,
    pub reg_target: [f64; 4],
}

/// Mean cross-entropy over the batch plus `loc_weight` times mean smooth L1
/// over its foreground records, together with the exact gradient.
pub fn batch_loss(
    heads: &Heads,
    batch: &[FeatureRecord],
    loc_weight: f64,
) -> Result<(f64, ParamTensors)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let feats: Vec<Vec<f64>> = batch
        .iter()
        .map(|r| r.feature.iter().map(|&v| f64::from(v)).collect())
        .collect();
    let examples = batch
        .iter()
        .zip(&feats)
        .map(|(r, f)| {
            if f.len() != heads.dim() {
                return Err(Error::InvalidArgument(format!(
                    "feature length {} != head dim {}",
                    f.len(),
                    heads.dim()
                )));
            }
            Ok(Example {
                feature: f,
                column: heads.target_column(r)?,
                reg_target: r.reg_target_f64(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut grads = ParamTensors::zeros_like(heads);
    let loss = loss_and_grad(heads, &examples, loc_weight, &mut grads)?;
    Ok((loss, grads))
}

/// Core kernel; records are reduced in slice order. `grads` is overwritten.
pub(crate) fn loss_and_grad(
    heads: &Heads,
    batch: &[Example<'_>],
    loc_weight: f64,
    grads: &mut ParamTensors,
) -> Result<f64> {
    let cls = &heads.cls;
    let cols = cls.cols();
    let bg = cls.background_column();
    let outs = heads.reg.outputs();
    let n = batch.len() as f64;
    let n_fg = batch.iter().filter(|e| e.column != bg).count();

    for t in grads.tensors_mut() {
        t.fill(0.0);
    }

    let col_norms = match cls.kind {
        ClassifierKind::Cosine => Some(cls.nonzero_column_norms()?),
        ClassifierKind::Fc => None,
    };
    // Cosine weight gradient is sum_r coef_rj f_r - shrink_j w_j; shrink collected here.
    let mut shrink = vec![0.0; cols];

    let mut scores = vec![0.0; cols];
    let mut probs = vec![0.0; cols];
    let mut coef = vec![0.0; cols];
    let mut cls_loss = 0.0;
    let mut loc_loss = 0.0;
    for ex in batch {
        let fnorm = cls.scores_into(ex.feature, col_norms.as_deref(), &mut scores)?;
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::Numeric("non-finite classification score".into()));
        }
        let (lse, _) = log_sum_exp(&scores);
        cls_loss += lse - scores[ex.column];
        softmax_into(&scores, &mut probs);

        // dL/ds_j for this record
        for (j, (c, p)) in coef.iter_mut().zip(&probs).enumerate() {
            *c = (p - if j == ex.column { 1.0 } else { 0.0 }) / n;
        }
        match cls.kind {
            ClassifierKind::Fc => {
                for (gb, c) in grads.bias.iter_mut().zip(&coef) {
                    *gb += c;
                }
            }
            ClassifierKind::Cosine => {
                let norms = col_norms.as_deref().unwrap();
                for j in 0..cols {
                    let g = coef[j];
                    // scores[j] = alpha * cos_j
                    shrink[j] += g * scores[j] / (norms[j] * norms[j]);
                    coef[j] = g * cls.alpha / (fnorm * norms[j]);
                }
            }
        }
        for (fi, grow) in ex.feature.iter().zip(grads.weight.chunks_exact_mut(cols)) {
            for (g, c) in grow.iter_mut().zip(&coef) {
                *g += fi * c;
            }
        }

        if ex.column != bg && loc_weight != 0.0 {
            let pred = heads.reg.deltas(ex.feature, ex.column);
            loc_loss += smooth_l1(&pred, &ex.reg_target);
            let scale = loc_weight / n_fg as f64;
            let mut d = [0.0; 4];
            for m in 0..4 {
                d[m] = scale * smooth_l1_grad(pred[m] - ex.reg_target[m]);
            }
            let block = 4 * ex.column..4 * ex.column + 4;
            for (gb, dm) in grads.reg_bias[block.clone()].iter_mut().zip(&d) {
                *gb += dm;
            }
            for (fi, grow) in ex
                .feature
                .iter()
                .zip(grads.reg_weight.chunks_exact_mut(outs))
            {
                for (g, dm) in grow[block.clone()].iter_mut().zip(&d) {
                    *g += fi * dm;
                }
            }
        }
    }

    if cls.kind == ClassifierKind::Cosine {
        for (grow, wrow) in grads
            .weight
            .chunks_exact_mut(cols)
            .zip(cls.weight.chunks_exact(cols))
        {
            for ((g, w), s) in grow.iter_mut().zip(wrow).zip(&shrink) {
                *g -= s * w;
            }
        }
    }

    let mut loss = cls_loss / n;
    if n_fg > 0 && loc_weight != 0.0 {
        loss += loc_weight * loc_loss / n_fg as f64;
    }
    if !loss.is_finite() {
        return Err(Error::Numeric("non-finite loss".into()));
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::BBox;
    use crate::head::ClassifierKind;
    use approx::assert_abs_diff_eq;

    #[test]
    fn uniform_scores_give_log_classes() {
        let s = vec![0.7; 21];
        assert_abs_diff_eq!(cross_entropy(&s, 4).unwrap(), 21f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(21f64.ln(), 3.0445, epsilon = 1e-4);
    }

    #[test]
    fn two_class_hand_example() {
        // -log(e^2 / (e + e^2)) = ln(1 + e) - 1
        let want = (1.0 + 1f64.exp()).ln() - 1.0;
        assert_abs_diff_eq!(
            cross_entropy(&[1.0, 2.0], 1).unwrap(),
            want,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(want, 0.3133, epsilon = 1e-4);
        let lower = (1.0 + 1f64.exp()).ln();
        assert_abs_diff_eq!(
            cross_entropy(&[1.0, 2.0], 0).unwrap(),
            lower,
            epsilon = 1e-12
        );
    }

    #[test]
    fn margin_drives_loss_down() {
        let mut prev = f64::INFINITY;
        for m in [0.0, 1.0, 5.0, 20.0, 100.0, 1000.0] {
            let l = cross_entropy(&[m, 0.0, 0.0], 0).unwrap();
            assert!(l < prev || l == 0.0);
            assert!(l >= 0.0);
            prev = l;
        }
        assert!(prev < 1e-300);
    }

    #[test]
    fn cross_entropy_errors() {
        assert!(cross_entropy(&[f64::NAN, 0.0], 0).is_err());
        assert!(cross_entropy(&[0.0, 0.0], 2).is_err());
    }

    #[test]
    fn smooth_l1_examples() {
        assert_eq!(smooth_l1(&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 3.0, 4.0]), 0.0);
        assert_abs_diff_eq!(smooth_l1(&[0.5, 0.0, 0.0, 0.0], &[0.0; 4]), 0.125);
        assert_abs_diff_eq!(smooth_l1(&[0.0, -2.0, 0.0, 0.0], &[0.0; 4]), 1.5);
    }

    fn rec(label: i32, feature: Vec<f32>) -> FeatureRecord {
        FeatureRecord {
            image_id: 1,
            proposal: BBox::new(0.0, 0.0, 4.0, 4.0),
            label,
            reg_target: if label < 0 {
                [0.0; 4]
            } else {
                [0.2, -0.1, 0.3, 1.7]
            },
            feature,
        }
    }

    #[test]
    fn all_background_batch_has_no_regression_gradient() {
        for kind in [ClassifierKind::Fc, ClassifierKind::Cosine] {
            let h = Heads::random(kind, 20.0, 3, vec![1, 2], 4).unwrap();
            let batch = vec![rec(-1, vec![1.0, 2.0, 3.0]), rec(-1, vec![-1.0, 0.5, 0.0])];
            let (loss, g) = batch_loss(&h, &batch, 1.0).unwrap();
            let cls_only: f64 = batch
                .iter()
                .map(|r| {
                    let f: Vec<f64> = r.feature.iter().map(|&v| v as f64).collect();
                    cross_entropy(&h.forward_scores(&f).unwrap(), 2).unwrap()
                })
                .sum::<f64>()
                / 2.0;
            assert_abs_diff_eq!(loss, cls_only, epsilon = 1e-12);
            assert!(g.reg_weight.iter().chain(&g.reg_bias).all(|&v| v == 0.0));
        }
    }

    #[test]
    fn duplicated_batch_is_equivalent() {
        for kind in [ClassifierKind::Fc, ClassifierKind::Cosine] {
            let h = Heads::random(kind, 20.0, 3, vec![1, 2], 8).unwrap();
            let batch = vec![
                rec(1, vec![1.0, 2.0, 3.0]),
                rec(-1, vec![-1.0, 0.5, 0.0]),
                rec(2, vec![0.1, -0.4, 2.0]),
            ];
            let doubled: Vec<_> = batch.iter().chain(&batch).cloned().collect();
            let (l1, g1) = batch_loss(&h, &batch, 1.0).unwrap();
            let (l2, g2) = batch_loss(&h, &doubled, 1.0).unwrap();
            assert_abs_diff_eq!(l1, l2, epsilon = 1e-12);
            for (a, b) in g1.tensors().iter().zip(g2.tensors()) {
                for (x, y) in a.iter().zip(b.iter()) {
                    assert_abs_diff_eq!(x, y, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn zero_feature_under_cosine_is_error() {
        let h = Heads::random(ClassifierKind::Cosine, 20.0, 2, vec![1], 0).unwrap();
        assert!(matches!(
            batch_loss(&h, &[rec(1, vec![0.0, 0.0])], 1.0),
            Err(Error::Numeric(_))
        ));
        assert!(batch_loss(&h, &[], 1.0).is_err());
        assert!(batch_loss(&h, &[rec(7, vec![1.0, 0.0])], 1.0).is_err());
    }
}
