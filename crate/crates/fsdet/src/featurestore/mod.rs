//! Per-proposal frozen feature records.
//!
//! The backbone and proposal network are not part of this crate; their
//! output is consumed as a [`FeatureSet`], either read from the binary
//! feature file or produced by [`synth_features`].
//!
//! Feature file layout (little-endian, no padding):
//!
//! ```text
//! "TFAF" | u32 version=1 | u32 dim | u64 count
//! per record: u64 image_id | 4 x f32 proposal (x1,y1,x2,y2) | i32 label
//!             | 4 x f32 reg_target | dim x f32 feature
//! ```

mod codec;
mod synth;

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub use codec::{decode_reg_target, encode_reg_target, LOG_SCALE_CLIP};
pub use synth::{synth_features, SynthConfig, SynthOutput};

use crate::dataset::{BBox, Dataset};
use crate::error::{Error, Result};
use crate::evaluator::iou;

pub const MAGIC: &[u8; 4] = b"TFAF";
pub const VERSION: u32 = 1;
pub const BACKGROUND: i32 = -1;

/// One proposal: where it is, what it covers, and its frozen feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub image_id: u64,
    pub proposal: BBox,
    /// Category id, or [`BACKGROUND`].
    pub label: i32,
    pub reg_target: [f32; 4],
    pub feature: Vec<f32>,
}

impl FeatureRecord {
    pub fn is_background(&self) -> bool {
        self.label == BACKGROUND
    }

    pub fn category(&self) -> Option<u32> {
        u32::try_from(self.label).ok()
    }

    pub fn reg_target_f64(&self) -> [f64; 4] {
        self.reg_target.map(f64::from)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureSet {
    pub dim: usize,
    pub records: Vec<FeatureRecord>,
}

impl FeatureSet {
    pub fn new(dim: usize, records: Vec<FeatureRecord>) -> Result<Self> {
        let fs = FeatureSet { dim, records };
        fs.validate()?;
        Ok(fs)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Validation(
                "feature dimension must be at least 1".into(),
            ));
        }
        for (i, r) in self.records.iter().enumerate() {
            if r.feature.len() != self.dim {
                return Err(Error::Validation(format!(
                    "record {i}: feature length {} != dim {}",
                    r.feature.len(),
                    self.dim
                )));
            }
            if r.label < BACKGROUND {
                return Err(Error::Validation(format!(
                    "record {i}: label {} is neither a category id nor -1",
                    r.label
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn image_ids(&self) -> BTreeSet<u64> {
        self.records.iter().map(|r| r.image_id).collect()
    }

    /// New set holding the records at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> FeatureSet {
        FeatureSet {
            dim: self.dim,
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
        }
    }

    /// Keeps foreground records whose label is in `labels`, plus background
    /// records when `keep_background` is set.
    pub fn filter_labels(&self, labels: &BTreeSet<u32>, keep_background: bool) -> FeatureSet {
        FeatureSet {
            dim: self.dim,
            records: self
                .records
                .iter()
                .filter(|r| match r.category() {
                    Some(c) => labels.contains(&c),
                    None => keep_background,
                })
                .cloned()
                .collect(),
        }
    }

    /// For every foreground record, the annotation in the same image and of
    /// the same category that its proposal overlaps most; `None` for
    /// background records or when nothing overlaps.
    pub fn assign_annotations(&self, d: &Dataset) -> Vec<Option<u64>> {
        let mut by_image: HashMap<(u64, u32), Vec<(u64, BBox)>> = HashMap::new();
        for a in d.annotations() {
            by_image
                .entry((a.image_id, a.category_id))
                .or_default()
                .push((a.id, a.bbox));
        }
        self.records
            .iter()
            .map(|r| {
                let cat = r.category()?;
                let cands = by_image.get(&(r.image_id, cat))?;
                let mut best: Option<(u64, f64)> = None;
                for &(id, b) in cands {
                    let o = iou(&r.proposal, &b);
                    if o > 0.0 && best.is_none_or(|(_, bo)| o > bo) {
                        best = Some((id, o));
                    }
                }
                best.map(|(id, _)| id)
            })
            .collect()
    }

    /// Fine-tuning subset for a set of picked annotations: the foreground
    /// records assigned to them plus every background record from the
    /// images they live in.
    pub fn subset_for_annotations(&self, d: &Dataset, picked: &BTreeSet<u64>) -> FeatureSet {
        let assigned = self.assign_annotations(d);
        let images: BTreeSet<u64> = d
            .annotations()
            .iter()
            .filter(|a| picked.contains(&a.id))
            .map(|a| a.image_id)
            .collect();
        let idx: Vec<usize> = self
            .records
            .iter()
            .zip(&assigned)
            .enumerate()
            .filter(|(_, (r, a))| match a {
                Some(id) => picked.contains(id),
                None => r.is_background() && images.contains(&r.image_id),
            })
            .map(|(i, _)| i)
            .collect();
        self.select(&idx)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let io = |e| Error::io("<feature stream>", e);
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
        let dim = u32::try_from(self.dim)
            .map_err(|_| Error::InvalidArgument("feature dim exceeds u32".into()))?;
        w.write_all(&dim.to_le_bytes()).map_err(io)?;
        w.write_all(&(self.records.len() as u64).to_le_bytes())
            .map_err(io)?;
        let mut buf = Vec::with_capacity(8 + 4 * (9 + self.dim));
        for r in &self.records {
            buf.clear();
            buf.extend_from_slice(&r.image_id.to_le_bytes());
            for v in r.proposal.to_xyxy() {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
            buf.extend_from_slice(&r.label.to_le_bytes());
            for v in r.reg_target {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            for v in &r.feature {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf).map_err(io)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Parse(format!("bad feature file magic {magic:?}")));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(Error::Parse(format!(
                "unsupported feature file version {version}"
            )));
        }
        let dim = read_u32(r)? as usize;
        let count = read_u64(r)?;
        let mut records = Vec::with_capacity(count.min(1 << 20) as usize);
        for _ in 0..count {
            let image_id = read_u64(r)?;
            let p = [read_f32(r)?, read_f32(r)?, read_f32(r)?, read_f32(r)?].map(f64::from);
            let label = read_u32(r)? as i32;
            let reg_target = [read_f32(r)?, read_f32(r)?, read_f32(r)?, read_f32(r)?];
            let mut bytes = vec![0u8; 4 * dim];
            read_exact(r, &mut bytes)?;
            let feature = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            records.push(FeatureRecord {
                image_id,
                proposal: BBox::from_xyxy(p[0], p[1], p[2], p[3]),
                label,
                reg_target,
                feature,
            });
        }
        FeatureSet::new(dim, records)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        FeatureSet::read_from(&mut BufReader::new(f))
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::Parse(format!("truncated feature file: {e}")))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f32(r: &mut impl Read) -> Result<f32> {
    read_u32(r).map(f32::from_bits)
}
