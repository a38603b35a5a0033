use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Result, TileSet, TilingError};
use crate::raster::ClassId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub assignments: BTreeMap<usize, Split>,
    /// Training share, e.g. 0.9.
    pub ratio: f64,
    pub seed: u64,
}

impl SplitManifest {
    pub fn ids(&self, split: Split) -> Vec<usize> {
        self.assignments.iter().filter(|(_, &s)| s == split).map(|(&id, _)| id).collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.assignments.values().filter(|&&s| s == split).count()
    }
}

/// Stratified random train/validation split.
///
/// Tiles are stratified by their dominant class. Within a stratum a
/// `1 - ratio` share (rounded) goes to validation. A class that only occurs
/// in a single tile pins that tile to training, and a repair pass swaps
/// tiles so that every class seen anywhere is present in training.
pub fn stratified_split(tileset: &TileSet, ratio: f64, seed: u64) -> Result<SplitManifest> {
    if tileset.is_empty() {
        return Err(TilingError::EmptyTileSet);
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(TilingError::InvalidParameter(format!("split ratio {ratio} not in (0, 1)")));
    }

    let classes: Vec<Vec<ClassId>> = tileset.tiles.iter().map(|t| t.classes_present()).collect();
    let ids: Vec<usize> = tileset.tiles.iter().map(|t| t.tile_id).collect();

    let mut carriers: BTreeMap<ClassId, Vec<usize>> = BTreeMap::new();
    for (idx, cs) in classes.iter().enumerate() {
        for &c in cs {
            carriers.entry(c).or_default().push(idx);
        }
    }
    let pinned: BTreeSet<usize> =
        carriers.values().filter(|v| v.len() == 1).map(|v| v[0]).collect();

    let mut strata: BTreeMap<ClassId, Vec<usize>> = BTreeMap::new();
    for (idx, t) in tileset.tiles.iter().enumerate() {
        strata.entry(t.dominant_class()).or_default().push(idx);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = vec![Split::Train; tileset.len()];
    for members in strata.values() {
        let mut candidates: Vec<usize> =
            members.iter().copied().filter(|i| !pinned.contains(i)).collect();
        candidates.shuffle(&mut rng);
        let target = (members.len() as f64 * (1.0 - ratio)).round() as usize;
        for &i in candidates.iter().take(target.min(candidates.len())) {
            split[i] = Split::Validation;
        }
    }

    let stratum_of: Vec<ClassId> = tileset.tiles.iter().map(|t| t.dominant_class()).collect();
    for (&class, holders) in &carriers {
        if holders.iter().any(|&i| split[i] == Split::Train) {
            continue;
        }
        let promote = holders[0];
        split[promote] = Split::Train;
        // Give the stratum its validation tile back if some training tile
        // can leave without taking a class out of training.
        let swap = (0..tileset.len()).find(|&j| {
            j != promote
                && split[j] == Split::Train
                && stratum_of[j] == stratum_of[promote]
                && !pinned.contains(&j)
                && !classes[j].contains(&class)
                && classes[j].iter().all(|c| {
                    carriers[c].iter().any(|&k| k != j && split[k] == Split::Train)
                })
        });
        if let Some(j) = swap {
            split[j] = Split::Validation;
        }
    }

    Ok(SplitManifest {
        assignments: ids.into_iter().zip(split).collect(),
        ratio,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::{ClassPalette, Dtype};
    use crate::tiling::Tile;

    fn set(labels: Vec<Vec<ClassId>>) -> TileSet {
        let tiles = labels
            .into_iter()
            .enumerate()
            .map(|(id, labels)| Tile {
                tile_id: id,
                origin_row: 0,
                origin_col: 0,
                size: 2,
                bands: 1,
                dtype: Dtype::U8,
                image: vec![0; 4],
                labels,
            })
            .collect();
        TileSet {
            tiles,
            tile_size: 2,
            stride: 2,
            source_dims: (2, 2),
            palette: ClassPalette::nalcms(),
        }
    }

    #[test]
    fn single_stratum_ninety_ten() {
        let ts = set(vec![vec![1, 1, 1, 1]; 100]);
        let m = stratified_split(&ts, 0.9, 3).unwrap();
        assert_eq!(m.count(Split::Train), 90);
        assert_eq!(m.count(Split::Validation), 10);
    }

    #[test]
    fn lone_class_goes_to_training() {
        let mut labels = vec![vec![1, 1, 1, 1]; 20];
        labels[7] = vec![1, 1, 1, 5];
        let ts = set(labels);
        for seed in 0..20 {
            let m = stratified_split(&ts, 0.5, seed).unwrap();
            assert_eq!(m.assignments[&7], Split::Train);
        }
    }

    #[test]
    fn repair_keeps_every_class_in_training() {
        // class 4 appears in two tiles of a large stratum; at a low ratio both
        // would often land in validation without the repair pass.
        let mut labels = vec![vec![2, 2, 2, 2]; 10];
        labels[3] = vec![2, 2, 2, 4];
        labels[8] = vec![2, 2, 2, 4];
        let ts = set(labels);
        for seed in 0..50 {
            let m = stratified_split(&ts, 0.2, seed).unwrap();
            assert!(m.assignments[&3] == Split::Train || m.assignments[&8] == Split::Train);
            assert!((m.count(Split::Validation) as i64 - 8).abs() <= 1);
        }
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let ts = set((0..50).map(|i| vec![(i % 3) as ClassId + 1; 4]).collect());
        let a = stratified_split(&ts, 0.9, 11).unwrap();
        assert_eq!(a, stratified_split(&ts, 0.9, 11).unwrap());
        assert_ne!(a, stratified_split(&ts, 0.9, 12).unwrap());
    }

    #[test]
    fn errors() {
        assert!(matches!(stratified_split(&set(vec![]), 0.9, 0), Err(TilingError::EmptyTileSet)));
        let ts = set(vec![vec![1; 4]]);
        assert!(stratified_split(&ts, 1.0, 0).is_err());
    }
}
