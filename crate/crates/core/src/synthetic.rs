//! Synthetic multispectral scenes with known labels.
//!
//! Labels are a Voronoi partition of random sites, optionally overlaid with
//! thin lines and small discs. Every class has a fixed spectral signature
//! that depends only on its ID, so scenes drawn with different seeds share
//! the same class appearance. Clouds are bright in every band, brightest in
//! band 0.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::raster::{ClassId, ClassPalette, Dtype, LabelMap, Raster, RasterError, RasterHeader, CLOUD_CLASS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub bands: usize,
    pub dtype: Dtype,
    /// Classes painted into the scene; Voronoi sites cycle through them.
    pub classes: Vec<ClassId>,
    pub regions: usize,
    /// Thin lines and small discs per 10,000 pixels.
    pub fine_density: f64,
    /// Fraction of the scene covered by cloud discs, labelled as the cloud
    /// class.
    pub cloud_cover: f64,
    /// Gaussian noise as a fraction of the dtype range.
    pub noise: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            width: 128,
            height: 128,
            bands: 3,
            dtype: Dtype::U16,
            classes: vec![1, 6, 10, 11, 14],
            regions: 12,
            fine_density: 0.0,
            cloud_cover: 0.0,
            noise: 0.03,
        }
    }
}

/// Mean reflectance of `class` in `band` as a fraction of the dtype range.
/// Band 0 stays below 0.35 for land classes so clouds separate cleanly.
pub fn class_signature(class: ClassId, band: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0000 + class as u64);
    rng.set_stream(band as u64);
    let (lo, hi) = if band == 0 { (0.05, 0.35) } else { (0.1, 0.75) };
    rng.random_range(lo..hi)
}

const CLOUD_LEVEL: f64 = 0.9;

fn paint_disc(labels: &mut [ClassId], w: usize, h: usize, cy: f64, cx: f64, r: f64, class: ClassId) {
    let (y0, y1) = ((cy - r).floor().max(0.0) as usize, ((cy + r).ceil() as usize).min(h.saturating_sub(1)));
    let (x0, x1) = ((cx - r).floor().max(0.0) as usize, ((cx + r).ceil() as usize).min(w.saturating_sub(1)));
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            if dy * dy + dx * dx <= r * r {
                labels[y * w + x] = class;
            }
        }
    }
}

fn paint_line<R: Rng>(labels: &mut [ClassId], w: usize, h: usize, rng: &mut R, class: ClassId) {
    let (y0, x0) = (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64));
    let angle = rng.random_range(0.0..std::f64::consts::PI);
    let len = rng.random_range(0.2..0.6) * w.max(h) as f64;
    let thick = rng.random_range(0.5..1.2);
    let steps = (len * 2.0) as usize;
    for s in 0..steps {
        let t = s as f64 / 2.0;
        let (y, x) = (y0 + t * angle.sin(), x0 + t * angle.cos());
        if y < 0.0 || x < 0.0 || y >= h as f64 || x >= w as f64 {
            break;
        }
        paint_disc(labels, w, h, y, x, thick, class);
    }
}

pub fn generate_labels(spec: &SceneSpec, seed: u64) -> Vec<ClassId> {
    let (w, h) = (spec.width, spec.height);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_sites = spec.regions.max(spec.classes.len()).max(1);
    let sites: Vec<(f64, f64, ClassId)> = (0..n_sites)
        .map(|i| {
            let class = spec.classes[i % spec.classes.len()];
            (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64), class)
        })
        .collect();
    let mut labels = vec![0; w * h];
    for y in 0..h {
        for x in 0..w {
            let (yf, xf) = (y as f64 + 0.5, x as f64 + 0.5);
            let nearest = sites
                .iter()
                .min_by(|a, b| {
                    let da = (a.0 - yf).powi(2) + (a.1 - xf).powi(2);
                    let db = (b.0 - yf).powi(2) + (b.1 - xf).powi(2);
                    da.total_cmp(&db)
                })
                .expect("at least one site");
            labels[y * w + x] = nearest.2;
        }
    }
    let fine = (spec.fine_density * (w * h) as f64 / 10_000.0).round() as usize;
    for i in 0..fine {
        let class = spec.classes[rng.random_range(0..spec.classes.len())];
        if i % 2 == 0 {
            paint_line(&mut labels, w, h, &mut rng, class);
        } else {
            let (cy, cx) = (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64));
            paint_disc(&mut labels, w, h, cy, cx, rng.random_range(1.0..2.5), class);
        }
    }
    let mut covered = 0.0;
    let target = spec.cloud_cover.clamp(0.0, 0.9) * (w * h) as f64;
    while covered < target {
        let r = rng.random_range(0.04..0.12) * w.min(h) as f64;
        let (cy, cx) = (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64));
        paint_disc(&mut labels, w, h, cy, cx, r, CLOUD_CLASS);
        covered = labels.iter().filter(|&&l| l == CLOUD_CLASS).count() as f64;
    }
    labels
}

/// Renders an image for a label layout.
pub fn render_image(labels: &[ClassId], spec: &SceneSpec, seed: u64) -> Result<Raster, RasterError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1111_2222_3333_4444);
    let max = spec.dtype.max_value() as f64;
    let noise = Normal::new(0.0, spec.noise.max(0.0)).expect("finite noise");
    let mut samples = Vec::with_capacity(labels.len() * spec.bands);
    for b in 0..spec.bands {
        let top = labels.iter().copied().max().unwrap_or(0);
        let sig: Vec<f64> = (0..=top).map(|c| class_signature(c, b)).collect();
        for &l in labels {
            let mean = if l == CLOUD_CLASS { CLOUD_LEVEL - 0.05 * b as f64 } else { sig[l as usize] };
            let v = (mean + noise.sample(&mut rng)).clamp(0.0, 1.0);
            samples.push((v * max).round() as u16);
        }
    }
    Raster::new(RasterHeader::new(spec.width, spec.height, spec.bands, spec.dtype), samples)
}

pub fn generate_scene(spec: &SceneSpec, palette: &ClassPalette, seed: u64) -> Result<(Raster, LabelMap), RasterError> {
    let labels = generate_labels(spec, seed);
    let raster = render_image(&labels, spec, seed)?;
    let map = LabelMap::new(spec.width, spec.height, labels, palette.clone())?;
    Ok((raster, map))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_class_present_and_deterministic() {
        let spec = SceneSpec { width: 64, height: 48, ..Default::default() };
        let (r, l) = generate_scene(&spec, &ClassPalette::nalcms(), 3).unwrap();
        for c in &spec.classes {
            assert!(l.labels().contains(c), "class {c} missing");
        }
        let (r2, l2) = generate_scene(&spec, &ClassPalette::nalcms(), 3).unwrap();
        assert_eq!((r, l), (r2, l2));
    }

    #[test]
    fn clouds_are_bright_in_band_zero() {
        let spec = SceneSpec { width: 64, height: 64, cloud_cover: 0.15, noise: 0.0, ..Default::default() };
        let (r, l) = generate_scene(&spec, &ClassPalette::nalcms(), 5).unwrap();
        let cloudy = l.labels().iter().filter(|&&c| c == CLOUD_CLASS).count() as f64 / 4096.0;
        assert!(cloudy >= 0.15);
        let max = Dtype::U16.max_value() as f64;
        for (i, &c) in l.labels().iter().enumerate() {
            let v = r.band(0)[i] as f64 / max;
            assert_eq!(c == CLOUD_CLASS, v > 0.5);
        }
    }

    #[test]
    fn fine_structures_add_small_features() {
        let base = SceneSpec { width: 96, height: 96, regions: 4, ..Default::default() };
        let fine = SceneSpec { fine_density: 10.0, ..base.clone() };
        let changed = generate_labels(&base, 1)
            .iter()
            .zip(generate_labels(&fine, 1))
            .filter(|(a, b)| **a != *b)
            .count();
        assert!(changed > 100 && changed < 96 * 96 / 2, "{changed}");
    }
}
