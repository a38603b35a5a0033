//! Cutting mosaics into square tiles and putting predictions back together.
//!
//! With stride equal to the tile size the grid is disjoint ("regular"
//! tiling). With stride equal to half the tile size neighbouring tiles
//! overlap by half ("shifted" tiling), which roughly quadruples the count.
//! For an `H x W` mosaic, tile size `T` and stride `s` the grid holds
//!
//! ```text
//! n = (floor((H - T) / s) + 1) * (floor((W - T) / s) + 1)
//! ```
//!
//! tiles. Trailing rows and columns that do not fill a whole tile are dropped.

mod split;
mod stitch;
mod store;
mod transform;

pub use split::{stratified_split, Split, SplitManifest};
pub use stitch::{stitch, Stitched, Stitcher};
pub use store::{load_tile_store, save_tile_store, TileStoreManifest, TileStoreEntry};
pub use transform::{apply_transform, TransformSpec};

use thiserror::Error;

use crate::raster::{ClassId, ClassPalette, Dtype, LabelMap, Raster, RasterError, NO_DATA_CLASS};

#[derive(Debug, Error)]
pub enum TilingError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("tile size {tile} exceeds the {height}x{width} mosaic")]
    TileLargerThanMosaic { tile: usize, height: usize, width: usize },
    #[error("invalid tiling parameter: {0}")]
    InvalidParameter(String),
    #[error("tile set is empty")]
    EmptyTileSet,
    #[error("zoom fraction {0} outside [0.7, 1.0)")]
    InvalidZoomFraction(f64),
    #[error("{uncovered} pixels are not covered by any tile")]
    CoverageGap { uncovered: usize },
    #[error("malformed tile store: {0}")]
    MalformedStore(String),
    #[error(transparent)]
    Raster(#[from] RasterError),
}

pub type Result<T, E = TilingError> = std::result::Result<T, E>;

/// Square image and label patch cut from a mosaic.
#[derive(Debug, Clone, PartialEq)]
pub struct Tile {
    pub tile_id: usize,
    pub origin_row: usize,
    pub origin_col: usize,
    pub size: usize,
    pub bands: usize,
    pub dtype: Dtype,
    /// Band-major `bands x size x size` samples.
    pub image: Vec<u16>,
    /// Row-major `size x size` class IDs.
    pub labels: Vec<ClassId>,
}

impl Tile {
    #[inline]
    pub fn sample(&self, band: usize, row: usize, col: usize) -> u16 {
        self.image[(band * self.size + row) * self.size + col]
    }

    #[inline]
    pub fn label(&self, row: usize, col: usize) -> ClassId {
        self.labels[row * self.size + col]
    }

    /// Most frequent class; ties go to the lowest ID.
    pub fn dominant_class(&self) -> ClassId {
        let max = self.labels.iter().copied().max().unwrap_or(0) as usize;
        let mut counts = vec![0usize; max + 1];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        let mut best = 0;
        for (c, &n) in counts.iter().enumerate() {
            if n > counts[best] {
                best = c;
            }
        }
        best as ClassId
    }

    pub fn classes_present(&self) -> Vec<ClassId> {
        let mut v: Vec<ClassId> = self.labels.clone();
        v.sort_unstable();
        v.dedup();
        v
    }

    /// Fraction of pixels whose label is not "No data".
    pub fn valid_fraction(&self) -> f64 {
        let valid = self.labels.iter().filter(|&&l| l != NO_DATA_CLASS).count();
        valid as f64 / self.labels.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TileSet {
    pub tiles: Vec<Tile>,
    pub tile_size: usize,
    pub stride: usize,
    /// `(height, width)` of the source mosaic.
    pub source_dims: (usize, usize),
    pub palette: ClassPalette,
}

impl TileSet {
    pub fn len(&self) -> usize {
        self.tiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tiles.is_empty()
    }

    pub fn get(&self, tile_id: usize) -> Option<&Tile> {
        self.tiles.iter().find(|t| t.tile_id == tile_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TilingOptions {
    pub tile_size: usize,
    pub stride: usize,
    /// Drop tiles whose share of non-"No data" labels is below this value.
    pub min_valid_fraction: Option<f64>,
}

impl TilingOptions {
    pub fn regular(tile_size: usize) -> Self {
        TilingOptions { tile_size, stride: tile_size, min_valid_fraction: None }
    }

    /// Half-overlap tiling.
    pub fn shifted(tile_size: usize) -> Self {
        TilingOptions { tile_size, stride: (tile_size / 2).max(1), min_valid_fraction: None }
    }
}

/// Closed-form tile count; zero when the mosaic is smaller than a tile.
pub fn tile_count(height: usize, width: usize, tile: usize, stride: usize) -> usize {
    if tile == 0 || stride == 0 || height < tile || width < tile {
        return 0;
    }
    ((height - tile) / stride + 1) * ((width - tile) / stride + 1)
}

/// Top-left corners of the tile grid in row-major order.
pub fn tile_origins(
    height: usize,
    width: usize,
    tile: usize,
    stride: usize,
) -> impl Iterator<Item = (usize, usize)> {
    let (rows, cols) = if tile == 0 || stride == 0 || height < tile || width < tile {
        (0, 0)
    } else {
        ((height - tile) / stride + 1, (width - tile) / stride + 1)
    };
    (0..rows).flat_map(move |i| (0..cols).map(move |j| (i * stride, j * stride)))
}

fn check_params(height: usize, width: usize, opts: &TilingOptions) -> Result<()> {
    if opts.tile_size == 0 || opts.stride == 0 {
        return Err(TilingError::InvalidParameter("tile size and stride must be positive".into()));
    }
    if opts.tile_size > height || opts.tile_size > width {
        return Err(TilingError::TileLargerThanMosaic { tile: opts.tile_size, height, width });
    }
    if let Some(f) = opts.min_valid_fraction {
        if !(0.0..=1.0).contains(&f) {
            return Err(TilingError::InvalidParameter(format!("min valid fraction {f}")));
        }
    }
    Ok(())
}

/// Crops one tile out of a raster/label pair.
pub fn crop_tile(raster: &Raster, labels: &LabelMap, tile_id: usize, row: usize, col: usize, size: usize) -> Tile {
    let bands = raster.bands();
    let mut image = Vec::with_capacity(bands * size * size);
    for b in 0..bands {
        let plane = raster.band(b);
        for r in row..row + size {
            let start = r * raster.width() + col;
            image.extend_from_slice(&plane[start..start + size]);
        }
    }
    let mut lab = Vec::with_capacity(size * size);
    for r in row..row + size {
        let start = r * labels.width() + col;
        lab.extend_from_slice(&labels.labels()[start..start + size]);
    }
    Tile {
        tile_id,
        origin_row: row,
        origin_col: col,
        size,
        bands,
        dtype: raster.dtype(),
        image,
        labels: lab,
    }
}

/// Splits a raster and its label map into tiles on a regular grid.
///
/// Tile IDs are grid positions in row-major order, so they stay stable when
/// the valid-fraction filter drops tiles.
pub fn tile_mosaic(raster: &Raster, labels: &LabelMap, opts: TilingOptions) -> Result<TileSet> {
    labels.ensure_matches(raster).map_err(|e| TilingError::DimensionMismatch(e.to_string()))?;
    let (h, w) = (raster.height(), raster.width());
    check_params(h, w, &opts)?;
    let tiles = tile_origins(h, w, opts.tile_size, opts.stride)
        .enumerate()
        .map(|(id, (r, c))| crop_tile(raster, labels, id, r, c, opts.tile_size))
        .filter(|t| opts.min_valid_fraction.is_none_or(|f| t.valid_fraction() >= f))
        .collect();
    Ok(TileSet {
        tiles,
        tile_size: opts.tile_size,
        stride: opts.stride,
        source_dims: (h, w),
        palette: labels.palette().clone(),
    })
}

/// Mirror-reflects an index into `0..n` (edge sample not repeated).
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Extends a raster to `height x width` by reflecting across the bottom and
/// right edges. Used at prediction time so the disjoint grid covers the
/// whole map.
pub fn reflect_pad(raster: &Raster, height: usize, width: usize) -> Result<Raster> {
    if height < raster.height() || width < raster.width() {
        return Err(TilingError::DimensionMismatch(format!(
            "cannot pad {}x{} down to {}x{}",
            raster.height(),
            raster.width(),
            height,
            width
        )));
    }
    let mut samples = Vec::with_capacity(height * width * raster.bands());
    for b in 0..raster.bands() {
        for r in 0..height {
            let sr = reflect_index(r as isize, raster.height());
            for c in 0..width {
                let sc = reflect_index(c as isize, raster.width());
                samples.push(raster.get(b, sr, sc));
            }
        }
    }
    let mut header = raster.header().clone();
    header.height = height;
    header.width = width;
    Ok(Raster::new(header, samples)?)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::raster::RasterHeader;

    pub(crate) fn ramp(h: usize, w: usize, bands: usize) -> (Raster, LabelMap) {
        let samples = (0..h * w * bands).map(|i| (i % 251) as u16).collect();
        let raster = Raster::new(RasterHeader::new(w, h, bands, Dtype::U8), samples).unwrap();
        let pal = ClassPalette::from_names(&["a", "b", "c"]).unwrap();
        let labels = (0..h * w).map(|i| ((i / 3) % 4) as ClassId).collect();
        (raster, LabelMap::new(w, h, labels, pal).unwrap())
    }

    #[test]
    fn closed_form_counts() {
        assert_eq!(tile_count(448, 448, 224, 224), 4);
        assert_eq!(tile_count(2240, 2240, 224, 112), 361);
        assert_eq!(tile_count(14975, 13331, 224, 224), 3894);
        assert_eq!(tile_count(100, 100, 224, 224), 0);
    }

    #[test]
    fn origins_match_count() {
        assert_eq!(tile_origins(448, 448, 224, 224).collect::<Vec<_>>(), vec![
            (0, 0),
            (0, 224),
            (224, 0),
            (224, 224)
        ]);
        assert_eq!(tile_origins(2240, 2240, 224, 112).count(), 361);
        assert_eq!(tile_origins(10, 10, 11, 1).count(), 0);
    }

    #[test]
    fn tiles_are_exact_crops() {
        let (r, l) = ramp(10, 12, 2);
        let ts = tile_mosaic(&r, &l, TilingOptions { tile_size: 4, stride: 3, min_valid_fraction: None }).unwrap();
        assert_eq!(ts.len(), tile_count(10, 12, 4, 3));
        for t in &ts.tiles {
            for b in 0..2 {
                for i in 0..4 {
                    for j in 0..4 {
                        assert_eq!(t.sample(b, i, j), r.get(b, t.origin_row + i, t.origin_col + j));
                        assert_eq!(t.label(i, j), l.get(t.origin_row + i, t.origin_col + j));
                    }
                }
            }
        }
    }

    #[test]
    fn tiling_errors() {
        let (r, l) = ramp(10, 12, 1);
        assert!(matches!(
            tile_mosaic(&r, &l, TilingOptions::regular(11)),
            Err(TilingError::TileLargerThanMosaic { .. })
        ));
        let (_, other) = ramp(11, 12, 1);
        assert!(matches!(
            tile_mosaic(&r, &other, TilingOptions::regular(4)),
            Err(TilingError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn valid_fraction_filter_keeps_ids() {
        let (r, _) = ramp(8, 8, 1);
        let pal = ClassPalette::from_names(&["a"]).unwrap();
        let mut lab = vec![1; 64];
        for row in 0..4 {
            for col in 0..4 {
                lab[row * 8 + col] = 0;
            }
        }
        let l = LabelMap::new(8, 8, lab, pal).unwrap();
        let opts = TilingOptions { tile_size: 4, stride: 4, min_valid_fraction: Some(0.5) };
        let ts = tile_mosaic(&r, &l, opts).unwrap();
        assert_eq!(ts.tiles.iter().map(|t| t.tile_id).collect::<Vec<_>>(), vec![1, 2, 3]);
    }

    #[test]
    fn reflection() {
        assert_eq!((0..8).map(|i| reflect_index(i, 3)).collect::<Vec<_>>(), vec![0, 1, 2, 1, 0, 1, 2, 1]);
        assert_eq!(reflect_index(5, 1), 0);
        let (r, _) = ramp(3, 3, 1);
        let p = reflect_pad(&r, 5, 4).unwrap();
        assert_eq!(p.get(0, 4, 3), r.get(0, 0, 1));
    }

    #[test]
    fn dominant_class_tie_goes_low() {
        let t = Tile {
            tile_id: 0,
            origin_row: 0,
            origin_col: 0,
            size: 2,
            bands: 1,
            dtype: Dtype::U8,
            image: vec![0; 4],
            labels: vec![3, 1, 3, 1],
        };
        assert_eq!(t.dominant_class(), 1);
        assert_eq!(t.classes_present(), vec![1, 3]);
    }
}
