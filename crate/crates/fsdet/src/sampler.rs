//! Balanced K-shot subset construction and repeated-run seed schedules.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};

/// Annotation ids picked per class for one K-shot draw.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShotSet {
    pub k: usize,
    pub seed: u64,
    pub picks: BTreeMap<u32, Vec<u64>>,
    pub shortfalls: BTreeMap<u32, usize>,
}

impl ShotSet {
    /// All picked annotation ids, across classes.
    pub fn annotation_ids(&self) -> BTreeSet<u64> {
        self.picks.values().flatten().copied().collect()
    }

    pub fn total_picks(&self) -> usize {
        self.picks.values().map(Vec::len).sum()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Generator for one class: the run seed selects the key, the category the stream.
pub(crate) fn class_rng(seed: u64, category_id: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(category_id as u64);
    rng
}

/// Draws up to `k` annotations per class uniformly without replacement.
///
/// Each class is sampled from its own generator keyed by `(seed, category_id)`,
/// over its annotations sorted by id, so the picks for a class depend only on
/// that class's annotations. Classes with fewer than `k` annotations give up
/// all of them and record the shortfall.
pub fn sample_kshot(d: &Dataset, classes: &BTreeSet<u32>, k: usize, seed: u64) -> Result<ShotSet> {
    if classes.is_empty() {
        return Err(Error::InvalidArgument("class set is empty".into()));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if let Some(unknown) = classes.iter().find(|c| !d.categories().contains(**c)) {
        return Err(Error::InvalidArgument(format!(
            "unknown category id {unknown}"
        )));
    }

    let mut picks = BTreeMap::new();
    let mut shortfalls = BTreeMap::new();
    for &cat in classes {
        let mut pool: Vec<u64> = d.annotations_of(cat).map(|a| a.id).collect();
        pool.sort_unstable();
        let chosen: Vec<u64> = if pool.len() <= k {
            pool.clone()
        } else {
            let mut rng = class_rng(seed, cat);
            let mut ids: Vec<u64> = rand::seq::index::sample(&mut rng, pool.len(), k)
                .into_iter()
                .map(|i| pool[i])
                .collect();
            ids.sort_unstable();
            ids
        };
        shortfalls.insert(cat, k - chosen.len());
        picks.insert(cat, chosen);
    }
    Ok(ShotSet {
        k,
        seed,
        picks,
        shortfalls,
    })
}

/// Per-run seeds `base_seed + i` with wrap-around.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedSchedule {
    pub base_seed: u64,
    pub n_runs: usize,
    pub run_seeds: Vec<u64>,
}

pub fn seed_schedule(base_seed: u64, n_runs: usize) -> Result<SeedSchedule> {
    if n_runs == 0 {
        return Err(Error::InvalidArgument("n_runs must be at least 1".into()));
    }
    let run_seeds = (0..n_runs as u64)
        .map(|i| base_seed.wrapping_add(i))
        .collect();
    Ok(SeedSchedule {
        base_seed,
        n_runs,
        run_seeds,
    })
}
