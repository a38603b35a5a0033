//! Band-sequential raster and label-map storage.
//!
//! A raster on disk is two files: `<name>.bsq` holding the samples band by
//! band, row-major within each band, little-endian; and `<name>.bsq.json`, a
//! sidecar describing the payload. Label maps use the same layout with a
//! single band and an extra `palette` array.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Class identifier inside a [`LabelMap`].
pub type ClassId = u16;

/// The class every palette reserves for pixels without data.
pub const NO_DATA_CLASS: ClassId = 0;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("missing sidecar header {0}")]
    MissingHeader(PathBuf),
    #[error("malformed sidecar header: {0}")]
    MalformedHeader(String),
    #[error("payload holds {actual} bytes but the header implies {expected}")]
    PayloadSizeMismatch { expected: usize, actual: usize },
    #[error("unsupported dtype {0:?}")]
    UnsupportedDtype(String),
    #[error("sample {value} does not fit dtype {dtype}")]
    SampleOutOfRange { value: u64, dtype: Dtype },
    #[error("band index {index} out of range for a {bands}-band raster")]
    BandOutOfRange { index: usize, bands: usize },
    #[error("invalid raster dimensions {width}x{height}x{bands}")]
    InvalidDimensions { width: usize, height: usize, bands: usize },
    #[error("label {label} is not in a palette of {size} classes")]
    LabelOutOfRange { label: ClassId, size: usize },
    #[error("invalid palette: {0}")]
    InvalidPalette(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("i/o failure on {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

pub type Result<T, E = RasterError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Dtype {
    #[serde(rename = "u8")]
    U8,
    #[serde(rename = "u16")]
    U16,
}

impl Dtype {
    pub fn max_value(self) -> u16 {
        match self {
            Dtype::U8 => u8::MAX as u16,
            Dtype::U16 => u16::MAX,
        }
    }

    pub fn bytes(self) -> usize {
        match self {
            Dtype::U8 => 1,
            Dtype::U16 => 2,
        }
    }

    pub fn bits(self) -> u32 {
        8 * self.bytes() as u32
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "u8" | "uint8" => Ok(Dtype::U8),
            "u16" | "uint16" => Ok(Dtype::U16),
            other => Err(RasterError::UnsupportedDtype(other.to_string())),
        }
    }
}

impl std::fmt::Display for Dtype {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Dtype::U8 => "u8",
            Dtype::U16 => "u16",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RasterHeader {
    pub width: usize,
    pub height: usize,
    pub bands: usize,
    pub dtype: Dtype,
    pub nodata: Option<u16>,
    pub band_names: Option<Vec<String>>,
}

impl RasterHeader {
    pub fn new(width: usize, height: usize, bands: usize, dtype: Dtype) -> Self {
        RasterHeader { width, height, bands, dtype, nodata: None, band_names: None }
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn sample_count(&self) -> usize {
        self.pixels() * self.bands
    }

    fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.bands == 0 {
            return Err(RasterError::InvalidDimensions {
                width: self.width,
                height: self.height,
                bands: self.bands,
            });
        }
        if let Some(nd) = self.nodata {
            if nd > self.dtype.max_value() {
                return Err(RasterError::SampleOutOfRange { value: nd as u64, dtype: self.dtype });
            }
        }
        if let Some(names) = &self.band_names {
            if names.len() != self.bands {
                return Err(RasterError::MalformedHeader(format!(
                    "{} band names for {} bands",
                    names.len(),
                    self.bands
                )));
            }
        }
        Ok(())
    }
}

/// Multi-band integer image. Samples are band-major: `(band, row, col)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    header: RasterHeader,
    samples: Vec<u16>,
}

impl Raster {
    pub fn new(header: RasterHeader, samples: Vec<u16>) -> Result<Self> {
        header.validate()?;
        if samples.len() != header.sample_count() {
            return Err(RasterError::PayloadSizeMismatch {
                expected: header.sample_count(),
                actual: samples.len(),
            });
        }
        let max = header.dtype.max_value();
        if let Some(&bad) = samples.iter().find(|&&s| s > max) {
            return Err(RasterError::SampleOutOfRange { value: bad as u64, dtype: header.dtype });
        }
        Ok(Raster { header, samples })
    }

    /// Builds a raster from per-band planes of equal size.
    pub fn from_bands(
        width: usize,
        height: usize,
        dtype: Dtype,
        planes: &[Vec<u16>],
    ) -> Result<Self> {
        let mut samples = Vec::with_capacity(width * height * planes.len());
        for p in planes {
            if p.len() != width * height {
                return Err(RasterError::DimensionMismatch(format!(
                    "band plane has {} samples, expected {}",
                    p.len(),
                    width * height
                )));
            }
            samples.extend_from_slice(p);
        }
        Raster::new(RasterHeader::new(width, height, planes.len(), dtype), samples)
    }

    pub fn header(&self) -> &RasterHeader {
        &self.header
    }

    pub fn width(&self) -> usize {
        self.header.width
    }

    pub fn height(&self) -> usize {
        self.header.height
    }

    pub fn bands(&self) -> usize {
        self.header.bands
    }

    pub fn dtype(&self) -> Dtype {
        self.header.dtype
    }

    pub fn nodata(&self) -> Option<u16> {
        self.header.nodata
    }

    pub fn samples(&self) -> &[u16] {
        &self.samples
    }

    pub fn with_nodata(mut self, nodata: Option<u16>) -> Result<Self> {
        self.header.nodata = nodata;
        self.header.validate()?;
        Ok(self)
    }

    pub fn with_band_names(mut self, names: Vec<String>) -> Result<Self> {
        self.header.band_names = Some(names);
        self.header.validate()?;
        Ok(self)
    }

    #[inline]
    pub fn get(&self, band: usize, row: usize, col: usize) -> u16 {
        self.samples[(band * self.header.height + row) * self.header.width + col]
    }

    pub fn band(&self, band: usize) -> &[u16] {
        let n = self.header.pixels();
        &self.samples[band * n..(band + 1) * n]
    }

    /// True when every band of the pixel equals the declared nodata value.
    pub fn is_nodata(&self, row: usize, col: usize) -> bool {
        match self.header.nodata {
            None => false,
            Some(nd) => (0..self.header.bands).all(|b| self.get(b, row, col) == nd),
        }
    }

    pub fn into_samples(self) -> Vec<u16> {
        self.samples
    }
}

/// Copies one band out of a raster.
pub fn extract_band(raster: &Raster, band_index: usize) -> Result<Vec<u16>> {
    if band_index >= raster.bands() {
        return Err(RasterError::BandOutOfRange { index: band_index, bands: raster.bands() });
    }
    Ok(raster.band(band_index).to_vec())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rgb(pub u8, pub u8, pub u8);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaletteEntry {
    pub id: ClassId,
    pub name: String,
    pub color: Rgb,
}

/// Ordered class list. IDs are contiguous from 0 and class 0 is "No data".
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassPalette {
    entries: Vec<PaletteEntry>,
}

impl ClassPalette {
    pub fn new(entries: Vec<PaletteEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(RasterError::InvalidPalette("empty palette".into()));
        }
        for (i, e) in entries.iter().enumerate() {
            if e.id as usize != i {
                return Err(RasterError::InvalidPalette(format!(
                    "class ids must be contiguous from 0; entry {i} has id {}",
                    e.id
                )));
            }
        }
        if !entries[0].name.eq_ignore_ascii_case("no data") {
            return Err(RasterError::InvalidPalette(format!(
                "class 0 must be \"No data\", found {:?}",
                entries[0].name
            )));
        }
        let mut names: Vec<&str> = entries.iter().map(|e| e.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(RasterError::InvalidPalette("duplicate class names".into()));
        }
        Ok(ClassPalette { entries })
    }

    /// Builds a palette from names; class 0 "No data" is prepended.
    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        let mut all = vec!["No data".to_string()];
        all.extend(names.iter().map(|s| s.as_ref().to_string()));
        let entries = all
            .into_iter()
            .enumerate()
            .map(|(i, name)| PaletteEntry { id: i as ClassId, name, color: default_color(i) })
            .collect();
        ClassPalette::new(entries)
    }

    /// The seventeen land-cover classes: no data, fifteen NALCMS land
    /// classes present in the prairie watersheds, and cloud.
    pub fn nalcms() -> Self {
        let names = NALCMS_CLASSES;
        let entries = names
            .iter()
            .enumerate()
            .map(|(i, (name, c))| PaletteEntry {
                id: i as ClassId,
                name: name.to_string(),
                color: Rgb(c[0], c[1], c[2]),
            })
            .collect();
        ClassPalette::new(entries).expect("built-in palette is valid")
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[PaletteEntry] {
        &self.entries
    }

    pub fn name(&self, id: ClassId) -> Option<&str> {
        self.entries.get(id as usize).map(|e| e.name.as_str())
    }
}

/// Class ID of the cloud label in the NALCMS palette.
pub const CLOUD_CLASS: ClassId = 16;

const NALCMS_CLASSES: [(&str, [u8; 3]); 17] = [
    ("No data", [0, 0, 0]),
    ("Temperate or sub-polar needleleaf forest", [0, 61, 0]),
    ("Sub-polar taiga needleleaf forest", [148, 156, 112]),
    ("Temperate or sub-polar broadleaf deciduous forest", [20, 140, 61]),
    ("Mixed forest", [92, 117, 43]),
    ("Temperate or sub-polar shrubland", [179, 138, 51]),
    ("Temperate or sub-polar grassland", [225, 207, 138]),
    ("Sub-polar or polar shrubland-lichen-moss", [156, 117, 84]),
    ("Sub-polar or polar grassland-lichen-moss", [186, 212, 143]),
    ("Sub-polar or polar barren-lichen-moss", [64, 138, 112]),
    ("Wetland", [107, 163, 138]),
    ("Cropland", [230, 174, 102]),
    ("Barren land", [168, 171, 174]),
    ("Urban and built-up", [220, 33, 38]),
    ("Water", [76, 112, 163]),
    ("Snow and ice", [255, 250, 255]),
    ("Cloud", [240, 240, 240]),
];

fn default_color(i: usize) -> Rgb {
    if i == 0 {
        return Rgb(0, 0, 0);
    }
    // Spread hues with a cheap integer hash.
    let h = (i as u32).wrapping_mul(2_654_435_761);
    Rgb((h >> 24) as u8, (h >> 16) as u8, (h >> 8) as u8)
}

/// Row-major grid of class IDs with its palette.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    width: usize,
    height: usize,
    labels: Vec<ClassId>,
    palette: ClassPalette,
}

impl LabelMap {
    pub fn new(
        width: usize,
        height: usize,
        labels: Vec<ClassId>,
        palette: ClassPalette,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(RasterError::InvalidDimensions { width, height, bands: 1 });
        }
        if labels.len() != width * height {
            return Err(RasterError::PayloadSizeMismatch {
                expected: width * height,
                actual: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= palette.len()) {
            return Err(RasterError::LabelOutOfRange { label: bad, size: palette.len() });
        }
        Ok(LabelMap { width, height, labels, palette })
    }

    pub fn filled(width: usize, height: usize, class: ClassId, palette: ClassPalette) -> Result<Self> {
        LabelMap::new(width, height, vec![class; width * height], palette)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[ClassId] {
        &self.labels
    }

    pub fn palette(&self) -> &ClassPalette {
        &self.palette
    }

    pub fn num_classes(&self) -> usize {
        self.palette.len()
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> ClassId {
        self.labels[row * self.width + col]
    }

    pub fn into_labels(self) -> Vec<ClassId> {
        self.labels
    }

    /// Checks the map against a companion raster.
    pub fn ensure_matches(&self, raster: &Raster) -> Result<()> {
        if self.width != raster.width() || self.height != raster.height() {
            return Err(RasterError::DimensionMismatch(format!(
                "labels are {}x{}, raster is {}x{}",
                self.width,
                self.height,
                raster.width(),
                raster.height()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    width: usize,
    height: usize,
    bands: usize,
    dtype: String,
    #[serde(default)]
    nodata: Option<u16>,
    #[serde(default)]
    band_names: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    palette: Option<Vec<PaletteEntry>>,
}

/// Path of the sidecar for a payload path: `x.bsq` -> `x.bsq.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> RasterError + '_ {
    move |source| RasterError::IoFailure { path: path.to_path_buf(), source }
}

fn read_sidecar(path: &Path) -> Result<Sidecar> {
    let side = sidecar_path(path);
    let text = match fs::read_to_string(&side) {
        Ok(t) => t,
        Err(e) if e.kind() == io::ErrorKind::NotFound => {
            return Err(RasterError::MissingHeader(side))
        }
        Err(e) => return Err(io_err(&side)(e)),
    };
    serde_json::from_str(&text).map_err(|e| RasterError::MalformedHeader(e.to_string()))
}

fn decode_payload(bytes: &[u8], header: &RasterHeader) -> Result<Vec<u16>> {
    let expected = header.sample_count() * header.dtype.bytes();
    if bytes.len() != expected {
        return Err(RasterError::PayloadSizeMismatch { expected, actual: bytes.len() });
    }
    Ok(match header.dtype {
        Dtype::U8 => bytes.iter().map(|&b| b as u16).collect(),
        Dtype::U16 => bytes.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect(),
    })
}

fn encode_payload(samples: &[u16], dtype: Dtype) -> Vec<u8> {
    match dtype {
        Dtype::U8 => samples.iter().map(|&s| s as u8).collect(),
        Dtype::U16 => samples.iter().flat_map(|s| s.to_le_bytes()).collect(),
    }
}

fn load_parts(path: &Path) -> Result<(RasterHeader, Vec<u16>, Option<Vec<PaletteEntry>>)> {
    let side = read_sidecar(path)?;
    let header = RasterHeader {
        width: side.width,
        height: side.height,
        bands: side.bands,
        dtype: Dtype::parse(&side.dtype)?,
        nodata: side.nodata,
        band_names: side.band_names,
    };
    header.validate()?;
    let bytes = fs::read(path).map_err(io_err(path))?;
    let samples = decode_payload(&bytes, &header)?;
    Ok((header, samples, side.palette))
}

fn write_parts(path: &Path, header: &RasterHeader, samples: &[u16], palette: Option<&ClassPalette>) -> Result<()> {
    let side = Sidecar {
        width: header.width,
        height: header.height,
        bands: header.bands,
        dtype: header.dtype.to_string(),
        nodata: header.nodata,
        band_names: header.band_names.clone(),
        palette: palette.map(|p| p.entries().to_vec()),
    };
    let text = serde_json::to_string_pretty(&side).expect("sidecar serializes");
    fs::write(path, encode_payload(samples, header.dtype)).map_err(io_err(path))?;
    let side_path = sidecar_path(path);
    fs::write(&side_path, text).map_err(io_err(&side_path))?;
    Ok(())
}

pub fn load_raster(path: impl AsRef<Path>) -> Result<Raster> {
    let (header, samples, _) = load_parts(path.as_ref())?;
    Raster::new(header, samples)
}

pub fn save_raster(raster: &Raster, path: impl AsRef<Path>) -> Result<()> {
    write_parts(path.as_ref(), raster.header(), raster.samples(), None)
}

/// Loads a one-band label map. A missing palette in the sidecar falls back to
/// the NALCMS palette.
pub fn load_label_map(path: impl AsRef<Path>) -> Result<LabelMap> {
    let (header, samples, palette) = load_parts(path.as_ref())?;
    if header.bands != 1 {
        return Err(RasterError::MalformedHeader(format!(
            "label maps have one band, found {}",
            header.bands
        )));
    }
    let palette = match palette {
        Some(p) => ClassPalette::new(p)?,
        None => ClassPalette::nalcms(),
    };
    let labels = match header.nodata {
        // nodata samples become class 0
        Some(nd) if nd != NO_DATA_CLASS => samples
            .into_iter()
            .map(|s| if s == nd { NO_DATA_CLASS } else { s })
            .collect(),
        _ => samples,
    };
    LabelMap::new(header.width, header.height, labels, palette)
}

pub fn save_label_map(map: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    let dtype = if map.num_classes() <= 256 { Dtype::U8 } else { Dtype::U16 };
    let mut header = RasterHeader::new(map.width(), map.height(), 1, dtype);
    header.nodata = Some(NO_DATA_CLASS);
    write_parts(path.as_ref(), &header, map.labels(), Some(map.palette()))
}
