//! On-disk tile store: `manifest.json` plus one image and one label raster
//! per tile.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Result, Split, SplitManifest, Tile, TileSet, TilingError};
use crate::raster::{
    load_label_map, load_raster, save_label_map, save_raster, ClassPalette, LabelMap, PaletteEntry,
    Raster, RasterError, RasterHeader,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileStoreEntry {
    pub id: usize,
    pub row: usize,
    pub col: usize,
    pub split: Option<Split>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileStoreManifest {
    pub tile_size: usize,
    pub stride: usize,
    pub source_height: usize,
    pub source_width: usize,
    #[serde(default)]
    pub split_ratio: Option<f64>,
    #[serde(default)]
    pub split_seed: Option<u64>,
    pub palette: Vec<PaletteEntry>,
    pub tiles: Vec<TileStoreEntry>,
}

fn image_name(id: usize) -> String {
    format!("tile_{id:06}.bsq")
}

fn label_name(id: usize) -> String {
    format!("tile_{id:06}.labels.bsq")
}

fn io(dir: &Path, e: std::io::Error) -> TilingError {
    TilingError::Raster(RasterError::IoFailure { path: dir.to_path_buf(), source: e })
}

pub fn save_tile_store(dir: impl AsRef<Path>, tiles: &TileSet, split: Option<&SplitManifest>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    for t in &tiles.tiles {
        let header = RasterHeader::new(t.size, t.size, t.bands, t.dtype);
        save_raster(&Raster::new(header, t.image.clone())?, dir.join(image_name(t.tile_id)))?;
        let labels = LabelMap::new(t.size, t.size, t.labels.clone(), tiles.palette.clone())?;
        save_label_map(&labels, dir.join(label_name(t.tile_id)))?;
    }
    let manifest = TileStoreManifest {
        tile_size: tiles.tile_size,
        stride: tiles.stride,
        source_height: tiles.source_dims.0,
        source_width: tiles.source_dims.1,
        split_ratio: split.map(|s| s.ratio),
        split_seed: split.map(|s| s.seed),
        palette: tiles.palette.entries().to_vec(),
        tiles: tiles
            .tiles
            .iter()
            .map(|t| TileStoreEntry {
                id: t.tile_id,
                row: t.origin_row,
                col: t.origin_col,
                split: split.and_then(|s| s.assignments.get(&t.tile_id).copied()),
            })
            .collect(),
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    let path = dir.join("manifest.json");
    fs::write(&path, text).map_err(|e| io(&path, e))
}

/// Loads a tile store. The split is returned only when every tile has one.
pub fn load_tile_store(dir: impl AsRef<Path>) -> Result<(TileSet, Option<SplitManifest>)> {
    let dir = dir.as_ref();
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| io(&path, e))?;
    let m: TileStoreManifest =
        serde_json::from_str(&text).map_err(|e| TilingError::MalformedStore(e.to_string()))?;
    let palette = ClassPalette::new(m.palette.clone())?;
    let mut tiles = Vec::with_capacity(m.tiles.len());
    for e in &m.tiles {
        let image = load_raster(dir.join(image_name(e.id)))?;
        let labels = load_label_map(dir.join(label_name(e.id)))?;
        if image.width() != m.tile_size || image.height() != m.tile_size {
            return Err(TilingError::MalformedStore(format!("tile {} has the wrong size", e.id)));
        }
        labels.ensure_matches(&image)?;
        tiles.push(Tile {
            tile_id: e.id,
            origin_row: e.row,
            origin_col: e.col,
            size: m.tile_size,
            bands: image.bands(),
            dtype: image.dtype(),
            image: image.into_samples(),
            labels: labels.into_labels(),
        });
    }
    let split = if !m.tiles.is_empty() && m.tiles.iter().all(|e| e.split.is_some()) {
        let assignments: BTreeMap<usize, Split> =
            m.tiles.iter().map(|e| (e.id, e.split.unwrap())).collect();
        Some(SplitManifest {
            assignments,
            ratio: m.split_ratio.unwrap_or(0.9),
            seed: m.split_seed.unwrap_or(0),
        })
    } else {
        None
    };
    let set = TileSet {
        tiles,
        tile_size: m.tile_size,
        stride: m.stride,
        source_dims: (m.source_height, m.source_width),
        palette,
    };
    Ok((set, split))
}
