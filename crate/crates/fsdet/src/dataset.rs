//! Detection annotations: images, boxes and the base/novel category table.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in pixel coordinates, stored as top-left corner plus size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub const fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox { x, y, w, h }
    }

    pub fn from_xyxy(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox {
            x: x1,
            y: y1,
            w: x2 - x1,
            h: y2 - y1,
        }
    }

    pub fn to_xyxy(&self) -> [f64; 4] {
        [self.x, self.y, self.x + self.w, self.y + self.h]
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + 0.5 * self.w, self.y + 0.5 * self.h)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.w.is_finite() && self.h.is_finite()
    }

    /// Finite with strictly positive extent.
    pub fn has_positive_size(&self) -> bool {
        self.is_finite() && self.w > 0.0 && self.h > 0.0
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }
}

impl From<[f64; 4]> for BBox {
    fn from(v: [f64; 4]) -> Self {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Image {
    pub id: u64,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Annotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u32,
    pub bbox: BBox,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Base,
    Novel,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub id: u32,
    pub name: String,
    pub split: Split,
}

/// Category table partitioned into base and novel classes.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CategoryTable {
    entries: Vec<Category>,
}

impl CategoryTable {
    pub fn new(entries: Vec<Category>) -> Result<Self> {
        let mut seen = HashSet::new();
        for c in &entries {
            if !seen.insert(c.id) {
                return Err(Error::Validation(format!(
                    "category {}: duplicate id",
                    c.id
                )));
            }
        }
        Ok(CategoryTable { entries })
    }

    pub fn entries(&self) -> &[Category] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: u32) -> Option<&Category> {
        self.entries.iter().find(|c| c.id == id)
    }

    pub fn contains(&self, id: u32) -> bool {
        self.get(id).is_some()
    }

    pub fn ids(&self) -> Vec<u32> {
        self.entries.iter().map(|c| c.id).collect()
    }

    pub fn ids_with_split(&self, split: Split) -> Vec<u32> {
        self.entries
            .iter()
            .filter(|c| c.split == split)
            .map(|c| c.id)
            .collect()
    }

    pub fn base_ids(&self) -> Vec<u32> {
        self.ids_with_split(Split::Base)
    }

    pub fn novel_ids(&self) -> Vec<u32> {
        self.ids_with_split(Split::Novel)
    }
}

/// LVIS-style frequency bucket, by number of distinct images a category appears in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Frequency {
    Rare,
    Common,
    Frequent,
}

impl Frequency {
    pub fn from_image_count(n: usize) -> Self {
        match n {
            0..=9 => Frequency::Rare,
            10..=100 => Frequency::Common,
            _ => Frequency::Frequent,
        }
    }
}

/// A validated, immutable detection dataset.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    images: Vec<Image>,
    annotations: Vec<Annotation>,
    categories: CategoryTable,
}

#[derive(Serialize, Deserialize)]
struct AnnotationFile {
    images: Vec<Image>,
    annotations: Vec<AnnotationEntry>,
    categories: Vec<Category>,
}

#[derive(Serialize, Deserialize)]
struct AnnotationEntry {
    id: u64,
    image_id: u64,
    category_id: u32,
    bbox: [f64; 4],
}

impl Dataset {
    /// Builds a dataset, checking ids, references and box bounds.
    pub fn new(
        images: Vec<Image>,
        annotations: Vec<Annotation>,
        categories: CategoryTable,
    ) -> Result<Self> {
        let mut image_index: HashMap<u64, &Image> = HashMap::with_capacity(images.len());
        for img in &images {
            if image_index.insert(img.id, img).is_some() {
                return Err(Error::Validation(format!("image {}: duplicate id", img.id)));
            }
        }
        let mut ann_ids = HashSet::with_capacity(annotations.len());
        for a in &annotations {
            if !ann_ids.insert(a.id) {
                return Err(Error::Validation(format!(
                    "annotation {}: duplicate id",
                    a.id
                )));
            }
            let Some(img) = image_index.get(&a.image_id) else {
                return Err(Error::Validation(format!(
                    "annotation {}: image_id {} does not resolve to an image",
                    a.id, a.image_id
                )));
            };
            if !categories.contains(a.category_id) {
                return Err(Error::Validation(format!(
                    "annotation {}: category_id {} does not resolve to a category",
                    a.id, a.category_id
                )));
            }
            let b = a.bbox;
            if !b.has_positive_size() {
                return Err(Error::Validation(format!(
                    "annotation {}: bbox must be finite with w > 0 and h > 0, got {:?}",
                    a.id,
                    b.to_array()
                )));
            }
            if b.x < 0.0
                || b.y < 0.0
                || b.x + b.w > img.width as f64
                || b.y + b.h > img.height as f64
            {
                return Err(Error::Validation(format!(
                    "annotation {}: bbox {:?} exceeds image {} bounds {}x{}",
                    a.id,
                    b.to_array(),
                    img.id,
                    img.width,
                    img.height
                )));
            }
        }
        Ok(Dataset {
            images,
            annotations,
            categories,
        })
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let file: AnnotationFile = serde_json::from_str(s)?;
        let annotations = file
            .annotations
            .into_iter()
            .map(|a| Annotation {
                id: a.id,
                image_id: a.image_id,
                category_id: a.category_id,
                bbox: BBox::from(a.bbox),
            })
            .collect();
        Dataset::new(
            file.images,
            annotations,
            CategoryTable::new(file.categories)?,
        )
    }

    pub fn to_json_string(&self) -> Result<String> {
        let file = AnnotationFile {
            images: self.images.clone(),
            annotations: self
                .annotations
                .iter()
                .map(|a| AnnotationEntry {
                    id: a.id,
                    image_id: a.image_id,
                    category_id: a.category_id,
                    bbox: a.bbox.to_array(),
                })
                .collect(),
            categories: self.categories.entries.clone(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    /// Loads and validates an annotation file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Dataset::from_json_str(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json_string()?).map_err(|e| Error::io(path, e))
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    pub fn annotations(&self) -> &[Annotation] {
        &self.annotations
    }

    pub fn categories(&self) -> &CategoryTable {
        &self.categories
    }

    pub fn annotation(&self, id: u64) -> Option<&Annotation> {
        self.annotations.iter().find(|a| a.id == id)
    }

    /// Annotations of one category, in file order.
    pub fn annotations_of(&self, category_id: u32) -> impl Iterator<Item = &Annotation> {
        self.annotations
            .iter()
            .filter(move |a| a.category_id == category_id)
    }

    /// Buckets every category by the number of distinct images it appears in.
    pub fn frequency_buckets(&self) -> BTreeMap<u32, Frequency> {
        let mut images_per_cat: HashMap<u32, HashSet<u64>> = HashMap::new();
        for a in &self.annotations {
            images_per_cat
                .entry(a.category_id)
                .or_default()
                .insert(a.image_id);
        }
        self.categories
            .entries
            .iter()
            .map(|c| {
                let n = images_per_cat.get(&c.id).map_or(0, HashSet::len);
                (c.id, Frequency::from_image_count(n))
            })
            .collect()
    }

    /// Keeps only annotations (and categories) in `keep`; all images are retained.
    pub fn filter_by_categories(&self, keep: &BTreeSet<u32>) -> Result<Dataset> {
        if let Some(unknown) = keep.iter().find(|id| !self.categories.contains(**id)) {
            return Err(Error::InvalidArgument(format!(
                "unknown category id {unknown}"
            )));
        }
        Ok(Dataset {
            images: self.images.clone(),
            annotations: self
                .annotations
                .iter()
                .filter(|a| keep.contains(&a.category_id))
                .copied()
                .collect(),
            categories: CategoryTable {
                entries: self
                    .categories
                    .entries
                    .iter()
                    .filter(|c| keep.contains(&c.id))
                    .cloned()
                    .collect(),
            },
        })
    }

    /// Keeps only the listed images and their annotations; the category table is unchanged.
    pub fn restrict_to_images(&self, image_ids: &BTreeSet<u64>) -> Dataset {
        Dataset {
            images: self
                .images
                .iter()
                .filter(|i| image_ids.contains(&i.id))
                .copied()
                .collect(),
            annotations: self
                .annotations
                .iter()
                .filter(|a| image_ids.contains(&a.image_id))
                .copied()
                .collect(),
            categories: self.categories.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cats() -> Vec<Category> {
        vec![
            Category {
                id: 1,
                name: "cat".into(),
                split: Split::Base,
            },
            Category {
                id: 2,
                name: "dog".into(),
                split: Split::Novel,
            },
        ]
    }

    const MINIMAL: &str = r#"{
        "images": [{"id": 1, "width": 100, "height": 80}],
        "annotations": [{"id": 10, "image_id": 1, "category_id": 2, "bbox": [5, 5, 20, 30]}],
        "categories": [{"id": 1, "name": "cat", "split": "base"},
                       {"id": 2, "name": "dog", "split": "novel", "supercategory": "animal"}],
        "info": {"ignored": true}
    }"#;

    #[test]
    fn minimal_file_counts() {
        let d = Dataset::from_json_str(MINIMAL).unwrap();
        assert_eq!(
            (
                d.images().len(),
                d.annotations().len(),
                d.categories().len()
            ),
            (1, 1, 2)
        );
        assert_eq!(d.categories().base_ids(), vec![1]);
        assert_eq!(d.categories().novel_ids(), vec![2]);
    }

    #[test]
    fn dangling_image_reference_names_annotation_and_field() {
        let s = MINIMAL.replace("\"image_id\": 1", "\"image_id\": 99");
        let err = Dataset::from_json_str(&s).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Validation(_)));
        assert!(msg.contains("annotation 10"), "{msg}");
        assert!(msg.contains("image_id 99"), "{msg}");
    }

    #[test]
    fn zero_width_box_rejected() {
        let s = MINIMAL.replace("[5, 5, 20, 30]", "[5, 5, 0, 30]");
        assert!(matches!(
            Dataset::from_json_str(&s),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn out_of_bounds_box_rejected() {
        let s = MINIMAL.replace("[5, 5, 20, 30]", "[90, 5, 20, 30]");
        let err = Dataset::from_json_str(&s).unwrap_err();
        assert!(err.to_string().contains("exceeds image 1"));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let imgs = vec![Image {
            id: 1,
            width: 10,
            height: 10,
        }];
        let a = Annotation {
            id: 3,
            image_id: 1,
            category_id: 1,
            bbox: BBox::new(0.0, 0.0, 1.0, 1.0),
        };
        let err = Dataset::new(imgs, vec![a, a], CategoryTable::new(cats()).unwrap()).unwrap_err();
        assert!(err.to_string().contains("duplicate"));
        let mut dup = cats();
        dup[1].id = 1;
        assert!(CategoryTable::new(dup).is_err());
    }

    #[test]
    fn malformed_json_is_parse_error() {
        assert!(matches!(
            Dataset::from_json_str("{\"images\": ["),
            Err(Error::Parse(_))
        ));
    }

    #[test]
    fn unknown_category_in_filter() {
        let d = Dataset::from_json_str(MINIMAL).unwrap();
        let keep: BTreeSet<u32> = [7].into_iter().collect();
        assert!(matches!(
            d.filter_by_categories(&keep),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn bucket_boundaries() {
        assert_eq!(Frequency::from_image_count(0), Frequency::Rare);
        assert_eq!(Frequency::from_image_count(9), Frequency::Rare);
        assert_eq!(Frequency::from_image_count(10), Frequency::Common);
        assert_eq!(Frequency::from_image_count(100), Frequency::Common);
        assert_eq!(Frequency::from_image_count(101), Frequency::Frequent);
    }
}
