//! Cloud labels from imagery.
//!
//! Two routes: Otsu thresholding of the blue band for 8-bit scenes, and bit
//! decoding of a quality-assessment band for scenes that ship one.

use thiserror::Error;

use crate::raster::{
    extract_band, ClassPalette, Dtype, LabelMap, Raster, RasterError, CLOUD_CLASS, NO_DATA_CLASS,
};

#[derive(Debug, Error)]
pub enum CloudMaskError {
    #[error("histogram needs at least two populated bins")]
    DegenerateHistogram,
    #[error("bit {bit} is outside a {width}-bit sample")]
    BitOutOfRange { bit: u8, width: u32 },
    #[error("confidence bits ({lo}, {hi}) must satisfy lo < hi")]
    InvalidBitRange { lo: u8, hi: u8 },
    #[error(transparent)]
    Raster(#[from] RasterError),
}

pub type Result<T, E = CloudMaskError> = std::result::Result<T, E>;

/// Sample-value histogram; one bin per representable value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Histogram {
    bins: Vec<u64>,
    total: u64,
}

impl Histogram {
    pub fn from_bins(bins: Vec<u64>) -> Self {
        let total = bins.iter().sum();
        Histogram { bins, total }
    }

    /// Counts the samples of a plane, skipping `nodata`.
    pub fn from_plane(plane: &[u16], dtype: Dtype, nodata: Option<u16>) -> Self {
        let mut bins = vec![0u64; dtype.max_value() as usize + 1];
        for &v in plane {
            if Some(v) != nodata {
                bins[v as usize] += 1;
            }
        }
        Histogram::from_bins(bins)
    }

    pub fn bins(&self) -> &[u64] {
        &self.bins
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    /// Adds another histogram of the same length bin by bin.
    pub fn merge(&mut self, other: &Histogram) {
        assert_eq!(self.bins.len(), other.bins.len(), "histograms of different widths");
        for (a, b) in self.bins.iter_mut().zip(&other.bins) {
            *a += b;
        }
        self.total += other.total;
    }
}

/// Between-class variance of a split, from exact integer moments of the two
/// classes: `n0 * n1 * (mu0 - mu1)^2`. Proportional to `w0 * w1 * (mu0 - mu1)^2`,
/// so its argmax is the Otsu threshold.
pub fn between_class_variance(n0: u64, s0: u128, n1: u64, s1: u128) -> f64 {
    if n0 == 0 || n1 == 0 {
        return 0.0;
    }
    let d = s0 as f64 / n0 as f64 - s1 as f64 / n1 as f64;
    n0 as f64 * n1 as f64 * d * d
}

/// Otsu's threshold: the `t` maximizing between-class variance where class 0
/// holds samples `<= t`. Ties resolve to the lowest `t`.
pub fn otsu_threshold(hist: &Histogram) -> Result<u16> {
    if hist.bins.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(CloudMaskError::DegenerateHistogram);
    }
    let total_n = hist.total;
    let total_s: u128 = hist.bins.iter().enumerate().map(|(v, &c)| v as u128 * c as u128).sum();
    let (mut n0, mut s0) = (0u64, 0u128);
    let (mut best_t, mut best) = (0usize, f64::NEG_INFINITY);
    for (t, &c) in hist.bins.iter().enumerate() {
        n0 += c;
        s0 += t as u128 * c as u128;
        let var = between_class_variance(n0, s0, total_n - n0, total_s - s0);
        if var > best {
            best = var;
            best_t = t;
        }
    }
    Ok(best_t as u16)
}

/// Per-pixel flags matching a source raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CloudMask {
    pub width: usize,
    pub height: usize,
    pub flags: Vec<bool>,
}

impl CloudMask {
    pub fn cloud_fraction(&self) -> f64 {
        self.flags.iter().filter(|&&f| f).count() as f64 / self.flags.len() as f64
    }

    /// One-band label map in the NALCMS palette: 0 clear, 16 cloud.
    pub fn to_label_map(&self) -> LabelMap {
        let labels = self.flags.iter().map(|&f| if f { CLOUD_CLASS } else { NO_DATA_CLASS }).collect();
        LabelMap::new(self.width, self.height, labels, ClassPalette::nalcms())
            .expect("mask dimensions are consistent")
    }

    /// Overwrites `labels` with the cloud class wherever the mask is set.
    pub fn merge_into(&self, labels: &LabelMap) -> Result<LabelMap> {
        if (labels.width(), labels.height()) != (self.width, self.height) {
            return Err(RasterError::DimensionMismatch(format!(
                "mask is {}x{}, labels are {}x{}",
                self.width,
                self.height,
                labels.width(),
                labels.height()
            ))
            .into());
        }
        let merged = labels.labels().iter().zip(&self.flags).map(|(&l, &f)| if f { CLOUD_CLASS } else { l }).collect();
        Ok(LabelMap::new(self.width, self.height, merged, labels.palette().clone())?)
    }
}

/// Flags pixels whose blue sample exceeds the Otsu threshold of the blue
/// band. Nodata pixels are never cloud.
pub fn cloud_mask_otsu(raster: &Raster, blue_band: usize) -> Result<CloudMask> {
    let blue = extract_band(raster, blue_band)?;
    let nodata = raster.nodata();
    let t = otsu_threshold(&Histogram::from_plane(&blue, raster.dtype(), nodata))?;
    let flags = blue.iter().map(|&v| Some(v) != nodata && v > t).collect();
    Ok(CloudMask { width: raster.width(), height: raster.height(), flags })
}

/// Layout of the cloud bits inside a QA word.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QaBitSpec {
    pub cloud_bit: u8,
    /// Inclusive `(low, high)` bit range of the cloud confidence field.
    pub confidence_bits: Option<(u8, u8)>,
    pub confidence_min: u16,
}

impl Default for QaBitSpec {
    /// Landsat 8 Collection 1 BQA: cloud at bit 4, confidence in bits 5-6,
    /// "high" confidence = 3.
    fn default() -> Self {
        QaBitSpec { cloud_bit: 4, confidence_bits: Some((5, 6)), confidence_min: 3 }
    }
}

impl QaBitSpec {
    pub fn validate(&self, width: u32) -> Result<()> {
        if self.cloud_bit as u32 >= width {
            return Err(CloudMaskError::BitOutOfRange { bit: self.cloud_bit, width });
        }
        if let Some((lo, hi)) = self.confidence_bits {
            if lo >= hi {
                return Err(CloudMaskError::InvalidBitRange { lo, hi });
            }
            if hi as u32 >= width {
                return Err(CloudMaskError::BitOutOfRange { bit: hi, width });
            }
        }
        Ok(())
    }

    #[inline]
    pub fn is_cloud(&self, word: u16) -> bool {
        if word >> self.cloud_bit & 1 == 0 {
            return false;
        }
        match self.confidence_bits {
            None => true,
            Some((lo, hi)) => {
                let mask = (1u32 << (hi - lo + 1)) - 1;
                ((word as u32 >> lo) & mask) as u16 >= self.confidence_min
            }
        }
    }
}

/// Decodes cloud flags from a QA plane.
pub fn cloud_mask_qa(
    qa_band: &[u16],
    width: usize,
    height: usize,
    dtype: Dtype,
    spec: &QaBitSpec,
) -> Result<CloudMask> {
    spec.validate(dtype.bits())?;
    if qa_band.len() != width * height {
        return Err(RasterError::DimensionMismatch(format!(
            "QA plane has {} samples for {width}x{height}",
            qa_band.len()
        ))
        .into());
    }
    let flags = qa_band.iter().map(|&w| spec.is_cloud(w)).collect();
    Ok(CloudMask { width, height, flags })
}
