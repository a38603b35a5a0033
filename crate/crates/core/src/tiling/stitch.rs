use super::{Result, TileSet, TilingError};
use crate::raster::{ClassId, ClassPalette, LabelMap, NO_DATA_CLASS};

/// Accumulates per-class scores from (possibly overlapping) tiles and
/// resolves each pixel to the class with the highest total. Ties go to the
/// lowest class ID. Accumulation is a sum, so tile order does not matter.
#[derive(Debug, Clone)]
pub struct Stitcher {
    height: usize,
    width: usize,
    num_classes: usize,
    /// Pixel-major `height x width x num_classes`.
    scores: Vec<f32>,
    hits: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct Stitched {
    pub map: LabelMap,
    /// Pixels no tile touched; they are labelled "No data".
    pub uncovered: usize,
}

impl Stitched {
    pub fn require_full_coverage(self) -> Result<LabelMap> {
        match self.uncovered {
            0 => Ok(self.map),
            uncovered => Err(TilingError::CoverageGap { uncovered }),
        }
    }
}

impl Stitcher {
    pub fn new(height: usize, width: usize, num_classes: usize) -> Self {
        Stitcher {
            height,
            width,
            num_classes,
            scores: vec![0.0; height * width * num_classes],
            hits: vec![0; height * width],
        }
    }

    fn check_extent(&self, row: usize, col: usize, size: usize) -> Result<()> {
        if row + size > self.height || col + size > self.width {
            return Err(TilingError::DimensionMismatch(format!(
                "tile at ({row}, {col}) of size {size} leaves the {}x{} map",
                self.height, self.width
            )));
        }
        Ok(())
    }

    /// Adds one vote per pixel for the tile's label.
    pub fn add_labels(&mut self, row: usize, col: usize, size: usize, labels: &[ClassId]) -> Result<()> {
        self.check_extent(row, col, size)?;
        if labels.len() != size * size {
            return Err(TilingError::DimensionMismatch(format!(
                "{} labels for a {size}x{size} tile",
                labels.len()
            )));
        }
        for i in 0..size {
            for j in 0..size {
                let l = labels[i * size + j] as usize;
                if l >= self.num_classes {
                    return Err(TilingError::InvalidParameter(format!(
                        "label {l} outside {} classes",
                        self.num_classes
                    )));
                }
                let px = (row + i) * self.width + col + j;
                self.scores[px * self.num_classes + l] += 1.0;
                self.hits[px] += 1;
            }
        }
        Ok(())
    }

    /// Adds class scores laid out `num_classes x size x size`.
    pub fn add_scores(&mut self, row: usize, col: usize, size: usize, scores: &[f32]) -> Result<()> {
        self.check_extent(row, col, size)?;
        let plane = size * size;
        if scores.len() != self.num_classes * plane {
            return Err(TilingError::DimensionMismatch(format!(
                "{} scores for {} classes of a {size}x{size} tile",
                scores.len(),
                self.num_classes
            )));
        }
        for i in 0..size {
            for j in 0..size {
                let px = (row + i) * self.width + col + j;
                for c in 0..self.num_classes {
                    self.scores[px * self.num_classes + c] += scores[c * plane + i * size + j];
                }
                self.hits[px] += 1;
            }
        }
        Ok(())
    }

    pub fn finish(self, palette: ClassPalette) -> Result<Stitched> {
        let mut uncovered = 0;
        let mut labels = Vec::with_capacity(self.height * self.width);
        for (px, &hits) in self.hits.iter().enumerate() {
            if hits == 0 {
                uncovered += 1;
                labels.push(NO_DATA_CLASS);
                continue;
            }
            let s = &self.scores[px * self.num_classes..(px + 1) * self.num_classes];
            let mut best = 0;
            for c in 1..s.len() {
                if s[c] > s[best] {
                    best = c;
                }
            }
            labels.push(best as ClassId);
        }
        let map = LabelMap::new(self.width, self.height, labels, palette)?;
        Ok(Stitched { map, uncovered })
    }
}

/// Reassembles a label map from the label patches of a tile set.
pub fn stitch(tiles: &TileSet) -> Result<Stitched> {
    let (h, w) = tiles.source_dims;
    let mut st = Stitcher::new(h, w, tiles.palette.len());
    for t in &tiles.tiles {
        st.add_labels(t.origin_row, t.origin_col, t.size, &t.labels)?;
    }
    st.finish(tiles.palette.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::{Dtype, Raster, RasterHeader};
    use crate::tiling::{tile_mosaic, TilingOptions};

    fn mosaic(h: usize, w: usize) -> (Raster, LabelMap) {
        let r = Raster::new(RasterHeader::new(w, h, 1, Dtype::U8), vec![7; h * w]).unwrap();
        let labels = (0..h * w).map(|i| (1 + (i * 13 / 7) % 3) as ClassId).collect();
        let pal = ClassPalette::from_names(&["a", "b", "c"]).unwrap();
        (r, LabelMap::new(w, h, labels, pal).unwrap())
    }

    #[test]
    fn disjoint_round_trip() {
        let (r, l) = mosaic(448, 448);
        let ts = tile_mosaic(&r, &l, TilingOptions::regular(224)).unwrap();
        let st = stitch(&ts).unwrap();
        assert_eq!(st.uncovered, 0);
        assert_eq!(st.map, l);
    }

    #[test]
    fn trailing_margin_is_flagged() {
        let (r, l) = mosaic(255, 224);
        let ts = tile_mosaic(&r, &l, TilingOptions::regular(224)).unwrap();
        let st = stitch(&ts).unwrap();
        assert_eq!(st.uncovered, 31 * 224);
        for row in 224..255 {
            for col in 0..224 {
                assert_eq!(st.map.get(row, col), NO_DATA_CLASS);
            }
        }
        assert!(matches!(st.require_full_coverage(), Err(TilingError::CoverageGap { uncovered }) if uncovered == 31 * 224));
    }

    #[test]
    fn ties_go_to_lowest_class() {
        let pal = ClassPalette::from_names(&["a", "b", "c"]).unwrap();
        let mut st = Stitcher::new(1, 2, 4);
        st.add_labels(0, 0, 1, &[3]).unwrap();
        st.add_labels(0, 0, 1, &[2]).unwrap();
        st.add_scores(0, 1, 1, &[0.0, 0.5, 0.5, 0.1]).unwrap();
        let m = st.finish(pal).unwrap().map;
        assert_eq!(m.labels(), &[2, 1]);
    }

    #[test]
    fn tile_outside_map() {
        let mut st = Stitcher::new(4, 4, 2);
        assert!(st.add_labels(2, 2, 3, &[0; 9]).is_err());
    }
}
