use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Result, Tile, TilingError};

pub const MIN_ZOOM: f64 = 0.7;

/// Geometric training-time transform. Applied in the order: zoom crop,
/// counter-clockwise rotation by `rotation * 90` degrees, horizontal flip
/// (mirror columns), vertical flip (mirror rows).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TransformSpec {
    pub rotation: u8,
    pub hflip: bool,
    pub vflip: bool,
    /// Side of the random crop as a fraction of the tile, in `[0.7, 1.0)`.
    pub zoom: Option<f64>,
}

impl TransformSpec {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn rotate(k: u8) -> Self {
        TransformSpec { rotation: k % 4, ..Self::default() }
    }

    /// Draws each component independently: uniform rotation, fair coins for
    /// the flips and for whether to zoom.
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let rotation = rng.random_range(0..4u8);
        let hflip = rng.random_bool(0.5);
        let vflip = rng.random_bool(0.5);
        let zoom = rng.random_bool(0.5).then(|| rng.random_range(MIN_ZOOM..1.0));
        TransformSpec { rotation, hflip, vflip, zoom }
    }

    /// Inverse of the rotation/flip part; `None` when a zoom is present.
    pub fn inverse(&self) -> Option<Self> {
        if self.zoom.is_some() {
            return None;
        }
        let k = self.rotation % 4;
        Some(match (self.hflip, self.vflip) {
            (false, false) => Self::rotate((4 - k) % 4),
            // a flip after a rotation is a reflection, hence an involution
            (true, false) | (false, true) => *self,
            // both flips make a half turn
            (true, true) => Self::rotate((4 - (k + 2) % 4) % 4),
        })
    }
}

fn rot90<T: Copy>(plane: &[T], n: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(n * n);
    for r in 0..n {
        for c in 0..n {
            out.push(plane[c * n + (n - 1 - r)]);
        }
    }
    out
}

fn mirror_cols<T: Copy>(plane: &mut [T], n: usize) {
    for row in plane.chunks_exact_mut(n) {
        row.reverse();
    }
}

fn mirror_rows<T: Copy>(plane: &mut [T], n: usize) {
    for r in 0..n / 2 {
        let (a, b) = plane.split_at_mut((n - 1 - r) * n);
        a[r * n..(r + 1) * n].swap_with_slice(&mut b[..n]);
    }
}

fn orient<T: Copy>(plane: &[T], n: usize, spec: &TransformSpec) -> Vec<T> {
    let mut p = plane.to_vec();
    for _ in 0..spec.rotation % 4 {
        p = rot90(&p, n);
    }
    if spec.hflip {
        mirror_cols(&mut p, n);
    }
    if spec.vflip {
        mirror_rows(&mut p, n);
    }
    p
}

/// Source coordinate of output pixel `i` when stretching `crop` samples to `n`.
fn source_coord(i: usize, crop: usize, n: usize) -> f64 {
    ((i as f64 + 0.5) * crop as f64 / n as f64 - 0.5).clamp(0.0, (crop - 1) as f64)
}

fn nearest(i: usize, crop: usize, n: usize) -> usize {
    (((i as f64 + 0.5) * crop as f64 / n as f64) as usize).min(crop - 1)
}

fn zoom_bilinear(plane: &[u16], n: usize, r0: usize, c0: usize, crop: usize) -> Vec<u16> {
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        let y = source_coord(i, crop, n);
        let y0 = y.floor() as usize;
        let y1 = (y0 + 1).min(crop - 1);
        let fy = y - y0 as f64;
        for j in 0..n {
            let x = source_coord(j, crop, n);
            let x0 = x.floor() as usize;
            let x1 = (x0 + 1).min(crop - 1);
            let fx = x - x0 as f64;
            let at = |yy: usize, xx: usize| plane[(r0 + yy) * n + c0 + xx] as f64;
            let v = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1))
                + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1));
            out.push(v.round() as u16);
        }
    }
    out
}

fn zoom_nearest<T: Copy>(plane: &[T], n: usize, r0: usize, c0: usize, crop: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        let y = nearest(i, crop, n);
        for j in 0..n {
            out.push(plane[(r0 + y) * n + c0 + nearest(j, crop, n)]);
        }
    }
    out
}

/// Applies `spec` to the image and labels of a tile with identical geometry.
/// `seed` only picks the zoom window.
pub fn apply_transform(tile: &Tile, spec: &TransformSpec, seed: u64) -> Result<Tile> {
    let n = tile.size;
    let plane_len = n * n;
    let (mut image, mut labels) = (tile.image.clone(), tile.labels.clone());

    if let Some(f) = spec.zoom {
        if !(MIN_ZOOM..1.0).contains(&f) {
            return Err(TilingError::InvalidZoomFraction(f));
        }
        let crop = ((f * n as f64).round() as usize).clamp(1, n);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r0 = rng.random_range(0..=n - crop);
        let c0 = rng.random_range(0..=n - crop);
        image = image
            .chunks_exact(plane_len)
            .flat_map(|p| zoom_bilinear(p, n, r0, c0, crop))
            .collect();
        labels = zoom_nearest(&labels, n, r0, c0, crop);
    }

    let image = image.chunks_exact(plane_len).flat_map(|p| orient(p, n, spec)).collect();
    let labels = orient(&labels, n, spec);
    Ok(Tile { image, labels, ..tile.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::Dtype;
    use proptest::prelude::*;

    fn tile(n: usize, bands: usize, salt: u16) -> Tile {
        Tile {
            tile_id: 0,
            origin_row: 0,
            origin_col: 0,
            size: n,
            bands,
            dtype: Dtype::U16,
            image: (0..(n * n * bands) as u16).map(|v| v.wrapping_mul(31).wrapping_add(salt)).collect(),
            labels: (0..(n * n) as u16).map(|v| (v * 7 + salt) % 5).collect(),
        }
    }

    #[test]
    fn identity_is_noop() {
        let t = tile(5, 2, 1);
        assert_eq!(apply_transform(&t, &TransformSpec::identity(), 0).unwrap(), t);
    }

    #[test]
    fn rot90_twice_is_rot180() {
        let t = tile(6, 3, 4);
        let once = apply_transform(&t, &TransformSpec::rotate(1), 0).unwrap();
        let twice = apply_transform(&once, &TransformSpec::rotate(1), 0).unwrap();
        assert_eq!(twice, apply_transform(&t, &TransformSpec::rotate(2), 0).unwrap());
    }

    #[test]
    fn rot90_is_counter_clockwise() {
        // [[0,1],[2,3]] -> [[1,3],[0,2]]
        assert_eq!(rot90(&[0, 1, 2, 3], 2), vec![1, 3, 0, 2]);
    }

    #[test]
    fn flips() {
        let mut p = vec![0, 1, 2, 3, 4, 5, 6, 7, 8];
        mirror_rows(&mut p, 3);
        assert_eq!(p, vec![6, 7, 8, 3, 4, 5, 0, 1, 2]);
        mirror_cols(&mut p, 3);
        assert_eq!(p, vec![8, 7, 6, 5, 4, 3, 2, 1, 0]);
    }

    #[test]
    fn zoom_range_checked() {
        let t = tile(4, 1, 0);
        let spec = TransformSpec { zoom: Some(0.5), ..Default::default() };
        assert!(matches!(apply_transform(&t, &spec, 0), Err(TilingError::InvalidZoomFraction(_))));
        let spec = TransformSpec { zoom: Some(1.0), ..Default::default() };
        assert!(apply_transform(&t, &spec, 0).is_err());
    }

    #[test]
    fn zoom_keeps_dims_and_label_alphabet() {
        let t = tile(16, 2, 3);
        let spec = TransformSpec { zoom: Some(0.75), rotation: 1, ..Default::default() };
        let z = apply_transform(&t, &spec, 9).unwrap();
        assert_eq!(z.image.len(), t.image.len());
        assert_eq!(z.labels.len(), t.labels.len());
        assert!(z.labels.iter().all(|l| t.labels.contains(l)));
        assert_eq!(z, apply_transform(&t, &spec, 9).unwrap());
    }

    proptest! {
        #[test]
        fn inverse_restores(n in 1usize..9, bands in 1usize..4, salt in 0u16..100,
                            k in 0u8..4, h: bool, v: bool) {
            let t = tile(n, bands, salt);
            let spec = TransformSpec { rotation: k, hflip: h, vflip: v, zoom: None };
            let fwd = apply_transform(&t, &spec, 0).unwrap();
            let back = apply_transform(&fwd, &spec.inverse().unwrap(), 0).unwrap();
            prop_assert_eq!(back, t);
        }

        #[test]
        fn labels_follow_image(n in 2usize..10, seed: u64, k in 0u8..4, h: bool, v: bool,
                               zoom in proptest::option::of(0.7f64..0.99)) {
            // Put the label into the image so misalignment would show up.
            let mut t = tile(n, 1, 0);
            t.image = t.labels.clone();
            let spec = TransformSpec { rotation: k, hflip: h, vflip: v, zoom };
            let out = apply_transform(&t, &spec, seed).unwrap();
            if zoom.is_none() {
                prop_assert_eq!(&out.image, &out.labels);
            }
            prop_assert_eq!(out.labels.len(), n * n);
        }
    }
}
