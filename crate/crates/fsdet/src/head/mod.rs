//! Last-layer box predictor: classifier (FC or cosine) plus per-class box regressor.
//!
//! Both weight matrices are stored row-major with one row per feature
//! dimension. The classifier has `C + 1` columns, foreground classes in
//! `class_ids` order followed by background; the regressor has four delta
//! outputs per foreground class.

mod loss;
mod optim;
mod predict;
mod train;

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

pub use loss::{batch_loss, cross_entropy, smooth_l1};
pub use optim::{sgd_step, OptimState};
pub use predict::{nms, predict, PredictConfig};
pub use train::{train_head, TrainConfig, TrainReport};

use crate::error::{Error, Result};
use crate::featurestore::{FeatureRecord, FeatureSet};

/// Scale factor applied to cosine similarities by default.
pub const DEFAULT_ALPHA: f64 = 20.0;
/// Standard deviation of the Gaussian used for freshly initialized weights.
pub const INIT_STD: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassifierKind {
    Fc,
    Cosine,
}

impl std::str::FromStr for ClassifierKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fc" => Ok(ClassifierKind::Fc),
            "cosine" => Ok(ClassifierKind::Cosine),
            other => Err(Error::InvalidArgument(format!(
                "unknown classifier kind {other:?}"
            ))),
        }
    }
}

impl std::fmt::Display for ClassifierKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ClassifierKind::Fc => "fc",
            ClassifierKind::Cosine => "cosine",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub kind: ClassifierKind,
    pub dim: usize,
    /// Foreground class count `C`.
    pub num_classes: usize,
    /// `dim x (C + 1)`, row-major.
    pub weight: Vec<f64>,
    /// `C + 1` entries for FC, empty for cosine.
    pub bias: Vec<f64>,
    pub alpha: f64,
}

impl ClassifierHead {
    pub fn cols(&self) -> usize {
        self.num_classes + 1
    }

    pub fn background_column(&self) -> usize {
        self.num_classes
    }

    pub fn column(&self, j: usize) -> impl Iterator<Item = f64> + '_ {
        let cols = self.cols();
        (0..self.dim).map(move |i| self.weight[i * cols + j])
    }

    pub fn column_norms(&self) -> Vec<f64> {
        let cols = self.cols();
        let mut sq = vec![0.0; cols];
        for row in self.weight.chunks_exact(cols) {
            for (s, w) in sq.iter_mut().zip(row) {
                *s += w * w;
            }
        }
        sq.into_iter().map(f64::sqrt).collect()
    }

    /// Per-class scores for one feature vector.
    ///
    /// FC: `f . w_j + b_j`. Cosine: `alpha * (f . w_j) / (|f| |w_j|)`, which
    /// fails on a zero-norm feature or weight column.
    pub fn forward_scores(&self, f: &[f64]) -> Result<Vec<f64>> {
        if f.len() != self.dim {
            return Err(Error::InvalidArgument(format!(
                "feature length {} != head dim {}",
                f.len(),
                self.dim
            )));
        }
        let col_norms = match self.kind {
            ClassifierKind::Cosine => Some(self.nonzero_column_norms()?),
            ClassifierKind::Fc => None,
        };
        let mut out = vec![0.0; self.cols()];
        self.scores_into(f, col_norms.as_deref(), &mut out)?;
        Ok(out)
    }

    pub(crate) fn nonzero_column_norms(&self) -> Result<Vec<f64>> {
        let norms = self.column_norms();
        if let Some(j) = norms.iter().position(|&n| n.is_nan() || n <= 0.0) {
            return Err(Error::Numeric(format!(
                "cosine classifier column {j} has zero norm"
            )));
        }
        Ok(norms)
    }

    /// Raw dot products `f . w_j` into `out`, then the kind-specific transform.
    /// `col_norms` must be given for the cosine kind.
    pub(crate) fn scores_into(
        &self,
        f: &[f64],
        col_norms: Option<&[f64]>,
        out: &mut [f64],
    ) -> Result<f64> {
        let cols = self.cols();
        out.fill(0.0);
        for (fi, row) in f.iter().zip(self.weight.chunks_exact(cols)) {
            for (o, w) in out.iter_mut().zip(row) {
                *o += fi * w;
            }
        }
        match self.kind {
            ClassifierKind::Fc => {
                for (o, b) in out.iter_mut().zip(&self.bias) {
                    *o += b;
                }
                Ok(0.0)
            }
            ClassifierKind::Cosine => {
                let fnorm = f.iter().map(|x| x * x).sum::<f64>().sqrt();
                if fnorm.is_nan() || fnorm <= 0.0 {
                    return Err(Error::Numeric(
                        "cosine classifier got a zero-norm feature".into(),
                    ));
                }
                let norms = col_norms.expect("cosine scores need column norms");
                for (o, n) in out.iter_mut().zip(norms) {
                    *o = self.alpha * *o / (fnorm * n);
                }
                Ok(fnorm)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressorHead {
    pub dim: usize,
    pub num_classes: usize,
    /// `dim x 4C`, row-major.
    pub weight: Vec<f64>,
    /// `4C` entries.
    pub bias: Vec<f64>,
}

impl RegressorHead {
    pub fn outputs(&self) -> usize {
        4 * self.num_classes
    }

    /// Predicted deltas of foreground column `class`.
    pub fn deltas(&self, f: &[f64], class: usize) -> [f64; 4] {
        let outs = self.outputs();
        let mut d: [f64; 4] = self.bias[4 * class..4 * class + 4].try_into().unwrap();
        for (fi, row) in f.iter().zip(self.weight.chunks_exact(outs)) {
            for (dm, w) in d.iter_mut().zip(&row[4 * class..4 * class + 4]) {
                *dm += fi * w;
            }
        }
        d
    }
}

/// Gradient-, velocity- or mask-shaped companion of [`Heads`] parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensors<T = f64> {
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    pub reg_weight: Vec<T>,
    pub reg_bias: Vec<T>,
}

impl<T: Clone> ParamTensors<T> {
    pub fn filled_like(h: &Heads, v: T) -> Self {
        ParamTensors {
            weight: vec![v.clone(); h.cls.weight.len()],
            bias: vec![v.clone(); h.cls.bias.len()],
            reg_weight: vec![v.clone(); h.reg.weight.len()],
            reg_bias: vec![v; h.reg.bias.len()],
        }
    }

    pub fn tensors(&self) -> [&[T]; 4] {
        [&self.weight, &self.bias, &self.reg_weight, &self.reg_bias]
    }

    pub fn tensors_mut(&mut self) -> [&mut [T]; 4] {
        [
            &mut self.weight,
            &mut self.bias,
            &mut self.reg_weight,
            &mut self.reg_bias,
        ]
    }
}

impl ParamTensors<f64> {
    pub fn zeros_like(h: &Heads) -> Self {
        Self::filled_like(h, 0.0)
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// The trainable predictor: classifier and regressor sharing one class layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Heads {
    pub cls: ClassifierHead,
    pub reg: RegressorHead,
    /// Category id of each foreground column.
    pub class_ids: Vec<u32>,
}

/// Shape and class layout of a head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadSpec {
    pub kind: ClassifierKind,
    pub alpha: f64,
    pub dim: usize,
    pub base_classes: Vec<u32>,
    pub novel_classes: Vec<u32>,
}

impl HeadSpec {
    pub fn class_ids(&self) -> Vec<u32> {
        self.base_classes
            .iter()
            .chain(&self.novel_classes)
            .copied()
            .collect()
    }
}

/// How novel-class weights are initialized before fine-tuning.
#[derive(Debug, Clone, Copy)]
pub enum InitMode<'a> {
    /// Zero-mean Gaussian with std [`INIT_STD`].
    Random,
    /// Weights of a head trained on novel-class features alone.
    NovelPretrained {
        features: &'a FeatureSet,
        train: &'a TrainConfig,
    },
}

impl Heads {
    /// Fresh head with every weight drawn from N(0, INIT_STD^2) and zero biases.
    pub fn random(
        kind: ClassifierKind,
        alpha: f64,
        dim: usize,
        class_ids: Vec<u32>,
        seed: u64,
    ) -> Result<Self> {
        if dim == 0 || class_ids.is_empty() {
            return Err(Error::InvalidArgument(
                "head needs dim >= 1 and at least one class".into(),
            ));
        }
        if kind == ClassifierKind::Cosine && !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "alpha must be > 0, got {alpha}"
            )));
        }
        let c = class_ids.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).unwrap();
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.sample(normal)).collect() };
        let weight = draw(dim * (c + 1));
        let reg_weight = draw(dim * 4 * c);
        Ok(Heads {
            cls: ClassifierHead {
                kind,
                dim,
                num_classes: c,
                weight,
                bias: match kind {
                    ClassifierKind::Fc => vec![0.0; c + 1],
                    ClassifierKind::Cosine => Vec::new(),
                },
                alpha,
            },
            reg: RegressorHead {
                dim,
                num_classes: c,
                weight: reg_weight,
                bias: vec![0.0; 4 * c],
            },
            class_ids,
        })
    }

    pub fn dim(&self) -> usize {
        self.cls.dim
    }

    pub fn num_classes(&self) -> usize {
        self.class_ids.len()
    }

    pub fn kind(&self) -> ClassifierKind {
        self.cls.kind
    }

    pub fn column_of(&self, category_id: u32) -> Option<usize> {
        self.class_ids.iter().position(|&c| c == category_id)
    }

    /// Classifier column of a feature record label; background maps to the last column.
    pub fn target_column(&self, r: &FeatureRecord) -> Result<usize> {
        match r.category() {
            None => Ok(self.cls.background_column()),
            Some(c) => self.column_of(c).ok_or_else(|| {
                Error::Validation(format!("record label {c} is not a class of this head"))
            }),
        }
    }

    pub fn forward_scores(&self, f: &[f64]) -> Result<Vec<f64>> {
        self.cls.forward_scores(f)
    }

    pub fn tensors(&self) -> [&[f64]; 4] {
        [
            &self.cls.weight,
            &self.cls.bias,
            &self.reg.weight,
            &self.reg.bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 4] {
        [
            &mut self.cls.weight,
            &mut self.cls.bias,
            &mut self.reg.weight,
            &mut self.reg.bias,
        ]
    }

    /// Copies classifier column `src_col` of `src` into `dst_col` of `self`,
    /// along with the regressor block when both columns are foreground.
    fn copy_class_from(&mut self, src: &Heads, src_col: usize, dst_col: usize) {
        let (sc, dc) = (src.cls.cols(), self.cls.cols());
        for i in 0..self.dim() {
            self.cls.weight[i * dc + dst_col] = src.cls.weight[i * sc + src_col];
        }
        if !self.cls.bias.is_empty() {
            self.cls.bias[dst_col] = src.cls.bias[src_col];
        }
        let src_fg = src_col < src.cls.num_classes;
        let dst_fg = dst_col < self.cls.num_classes;
        if src_fg && dst_fg {
            let (so, do_) = (src.reg.outputs(), self.reg.outputs());
            for i in 0..self.dim() {
                for m in 0..4 {
                    self.reg.weight[i * do_ + 4 * dst_col + m] =
                        src.reg.weight[i * so + 4 * src_col + m];
                }
            }
            for m in 0..4 {
                self.reg.bias[4 * dst_col + m] = src.reg.bias[4 * src_col + m];
            }
        }
    }

    pub fn to_json_value(&self) -> serde_json::Value {
        let file = HeadFile {
            kind: self.cls.kind,
            dim: self.dim(),
            num_classes: self.num_classes(),
            alpha: (self.cls.kind == ClassifierKind::Cosine).then_some(self.cls.alpha),
            w: self.cls.weight.clone(),
            b: (self.cls.kind == ClassifierKind::Fc).then(|| self.cls.bias.clone()),
            r: self.reg.weight.clone(),
            b_r: self.reg.bias.clone(),
            class_ids: self.class_ids.clone(),
        };
        serde_json::to_value(file).expect("head serializes")
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let f: HeadFile = serde_json::from_str(s)?;
        let c = f.num_classes;
        let bad = |what: &str| Error::Validation(format!("head file: {what}"));
        if f.class_ids.len() != c {
            return Err(bad("class_ids length != num_classes"));
        }
        if f.w.len() != f.dim * (c + 1) {
            return Err(bad("W has wrong length"));
        }
        if f.r.len() != f.dim * 4 * c || f.b_r.len() != 4 * c {
            return Err(bad("R or b_r has wrong length"));
        }
        let (bias, alpha) = match f.kind {
            ClassifierKind::Fc => {
                let b = f.b.ok_or_else(|| bad("fc head needs b"))?;
                if b.len() != c + 1 {
                    return Err(bad("b has wrong length"));
                }
                (b, f.alpha.unwrap_or(DEFAULT_ALPHA))
            }
            ClassifierKind::Cosine => (
                Vec::new(),
                f.alpha.ok_or_else(|| bad("cosine head needs alpha"))?,
            ),
        };
        let all_finite = [&f.w, &bias, &f.r, &f.b_r]
            .iter()
            .all(|t| t.iter().all(|v| v.is_finite()));
        if !all_finite {
            return Err(bad("non-finite parameter"));
        }
        Ok(Heads {
            cls: ClassifierHead {
                kind: f.kind,
                dim: f.dim,
                num_classes: c,
                weight: f.w,
                bias,
                alpha,
            },
            reg: RegressorHead {
                dim: f.dim,
                num_classes: c,
                weight: f.r,
                bias: f.b_r,
            },
            class_ids: f.class_ids,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(&self.to_json_value())?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Heads::from_json_str(&text)
    }
}

#[derive(Serialize, Deserialize)]
struct HeadFile {
    kind: ClassifierKind,
    dim: usize,
    num_classes: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    alpha: Option<f64>,
    #[serde(rename = "W")]
    w: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    b: Option<Vec<f64>>,
    #[serde(rename = "R")]
    r: Vec<f64>,
    b_r: Vec<f64>,
    class_ids: Vec<u32>,
}

/// Builds the fine-tuning head: base classes followed by novel classes.
///
/// Base-class and background columns are copied from `base_head` when given.
/// Novel columns come from `mode`; in [`InitMode::NovelPretrained`] a head of
/// the same kind is first trained on the novel-class (and background) records
/// and its novel columns are copied over.
pub fn init_head(
    spec: &HeadSpec,
    mode: InitMode<'_>,
    base_head: Option<&Heads>,
    seed: u64,
) -> Result<Heads> {
    let mut heads = Heads::random(spec.kind, spec.alpha, spec.dim, spec.class_ids(), seed)?;
    if let Some(base) = base_head {
        if base.dim() != spec.dim {
            return Err(Error::InvalidArgument(format!(
                "base head dim {} != {}",
                base.dim(),
                spec.dim
            )));
        }
        if base.kind() != spec.kind {
            return Err(Error::InvalidArgument(format!(
                "base head kind {} != {}",
                base.kind(),
                spec.kind
            )));
        }
        let src_cols: HashMap<u32, usize> = base
            .class_ids
            .iter()
            .enumerate()
            .map(|(j, &c)| (c, j))
            .collect();
        for (dst, &c) in spec.base_classes.iter().enumerate() {
            let src = *src_cols.get(&c).ok_or_else(|| {
                Error::InvalidArgument(format!("base head has no column for base class {c}"))
            })?;
            heads.copy_class_from(base, src, dst);
        }
        heads.copy_class_from(
            base,
            base.cls.background_column(),
            heads.cls.background_column(),
        );
    }

    if let InitMode::NovelPretrained { features, train } = mode {
        let novel: std::collections::BTreeSet<u32> = spec.novel_classes.iter().copied().collect();
        let subset = features.filter_labels(&novel, true);
        let mut novel_head = Heads::random(
            spec.kind,
            spec.alpha,
            spec.dim,
            spec.novel_classes.clone(),
            seed ^ 0x9e37_79b9_7f4a_7c15,
        )?;
        let no_freeze = TrainConfig {
            freeze_base_classifier_columns: false,
            ..train.clone()
        };
        train_head(&mut novel_head, &subset, &no_freeze, &Default::default())?;
        let offset = spec.base_classes.len();
        for j in 0..spec.novel_classes.len() {
            heads.copy_class_from(&novel_head, j, offset + j);
        }
    }
    Ok(heads)
}
