//! Stage wiring shared by the command-line tool: configuration model,
//! evaluation under both protocols, and the synthetic end-to-end demo.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloudmask::{cloud_mask_otsu, cloud_mask_qa, CloudMask, CloudMaskError, QaBitSpec};
use crate::metrics::{
    aggregate, class_frequencies, confusion, write_class_frequencies, write_reports, ConfusionMatrix, MetricsError,
    MetricsReport, Summary,
};
use crate::raster::{extract_band, save_label_map, save_raster, ClassPalette, LabelMap, Raster, RasterError, CLOUD_CLASS};
use crate::segnet::{build_model, save_checkpoint, ModelConfig, SegnetError};
use crate::synthetic::{generate_labels, render_image, SceneSpec};
use crate::tiling::{save_tile_store, stratified_split, tile_mosaic, Split, TilingError, TilingOptions};
use crate::trainer::{predict_raster, train, Phase, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("cannot write {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Tiling(#[from] TilingError),
    #[error(transparent)]
    CloudMask(#[from] CloudMaskError),
    #[error(transparent)]
    Model(#[from] SegnetError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TilingParams {
    pub tile_size: usize,
    /// Defaults to half the tile size (shifted tiling).
    pub stride: Option<usize>,
    pub min_valid_fraction: Option<f64>,
    /// Training share of the stratified split.
    pub split_ratio: f64,
}

impl Default for TilingParams {
    fn default() -> Self {
        TilingParams { tile_size: 224, stride: None, min_valid_fraction: None, split_ratio: 0.9 }
    }
}

impl TilingParams {
    pub fn options(&self) -> TilingOptions {
        TilingOptions {
            tile_size: self.tile_size,
            stride: self.stride.unwrap_or((self.tile_size / 2).max(1)),
            min_valid_fraction: self.min_valid_fraction,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CloudMethod {
    Otsu,
    Qa,
    Off,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CloudParams {
    pub method: CloudMethod,
    pub blue_band: usize,
    pub qa_band: Option<usize>,
    pub cloud_bit: u8,
    pub confidence_bits: Option<(u8, u8)>,
    pub confidence_min: u16,
}

impl Default for CloudParams {
    fn default() -> Self {
        let qa = QaBitSpec::default();
        CloudParams {
            method: CloudMethod::Otsu,
            blue_band: 0,
            qa_band: None,
            cloud_bit: qa.cloud_bit,
            confidence_bits: qa.confidence_bits,
            confidence_min: qa.confidence_min,
        }
    }
}

impl CloudParams {
    pub fn qa_spec(&self) -> QaBitSpec {
        QaBitSpec { cloud_bit: self.cloud_bit, confidence_bits: self.confidence_bits, confidence_min: self.confidence_min }
    }

    /// Cloud mask of `raster`, or `None` when masking is off.
    pub fn mask(&self, raster: &Raster) -> Result<Option<CloudMask>> {
        match self.method {
            CloudMethod::Off => Ok(None),
            CloudMethod::Otsu => Ok(Some(cloud_mask_otsu(raster, self.blue_band)?)),
            CloudMethod::Qa => {
                let band = self.qa_band.ok_or_else(|| PipelineError::Config("QA masking needs qa_band".into()))?;
                let plane = extract_band(raster, band)?;
                Ok(Some(cloud_mask_qa(&plane, raster.width(), raster.height(), raster.dtype(), &self.qa_spec())?))
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub input: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub scene: SceneSpec,
    pub tiling: TilingParams,
    pub cloudmask: CloudParams,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl PipelineConfig {
    /// Desk-scale settings for the synthetic demo: a 128x128 three-band
    /// scene with five land classes and scattered clouds, 32-pixel tiles and
    /// a short two-phase schedule.
    pub fn demo() -> Self {
        let tile = 32;
        PipelineConfig {
            scene: SceneSpec { cloud_cover: 0.1, fine_density: 2.0, ..SceneSpec::default() },
            tiling: TilingParams { tile_size: tile, ..TilingParams::default() },
            model: ModelConfig { tile_size: tile, ..ModelConfig::default() },
            train: TrainConfig {
                phases: vec![Phase { learning_rate: 1e-3, epochs: 24 }, Phase { learning_rate: 1e-4, epochs: 8 }],
                ..TrainConfig::default()
            },
            ..PipelineConfig::default()
        }
    }

    /// Seed for one stochastic stage, derived from the global seed.
    pub fn stage_seed(&self, stage: Stage) -> u64 {
        self.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(stage as u64)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        self.train.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        if self.tiling.tile_size != self.model.tile_size {
            return Err(PipelineError::Config(format!(
                "tiling.tile_size {} differs from model.tile_size {}",
                self.tiling.tile_size, self.model.tile_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Scene = 1,
    Split = 2,
    ModelInit = 3,
    Training = 4,
    TestScene = 5,
}

/// Scores of one prediction against its reference.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub confusion: ConfusionMatrix,
    pub pooled: MetricsReport,
    /// Present when a block size was given.
    pub per_tile: Option<MetricsReport>,
}

/// Confusion matrix and reports for a prediction. With `block = Some(n)` the
/// maps are also cut into `n x n` blocks (smaller at the right and bottom
/// edges), scored per block and combined by class pixel share.
pub fn evaluate_maps(pred: &LabelMap, truth: &LabelMap, block: Option<usize>) -> Result<Evaluation> {
    let classes = truth.palette().len();
    let cm = confusion(pred, truth, classes)?;
    let pooled = MetricsReport::from_confusion(&cm)?;
    let per_tile = match block {
        None => None,
        Some(0) => return Err(PipelineError::Config("block size must be positive".into())),
        Some(n) => {
            let (w, h) = (truth.width(), truth.height());
            let mut reports = Vec::new();
            for r0 in (0..h).step_by(n) {
                for c0 in (0..w).step_by(n) {
                    let (mut p, mut t) = (Vec::new(), Vec::new());
                    for r in r0..(r0 + n).min(h) {
                        let span = r * w + c0..r * w + (c0 + n).min(w);
                        p.extend_from_slice(&pred.labels()[span.clone()]);
                        t.extend_from_slice(&truth.labels()[span]);
                    }
                    let mut block_cm = ConfusionMatrix::new(classes);
                    block_cm.add_pixels(&p, &t)?;
                    reports.push(MetricsReport::from_confusion(&block_cm)?);
                }
            }
            Some(aggregate(&reports)?)
        }
    };
    Ok(Evaluation { confusion: cm, pooled, per_tile })
}

/// Writes the pooled reports into `dir` and the per-tile ones, if any, into
/// `dir/per_tile`.
pub fn write_evaluation(dir: &Path, eval: &Evaluation, palette: &ClassPalette) -> Result<()> {
    write_reports(dir, &eval.confusion, &eval.pooled, palette)?;
    if let Some(per_tile) = &eval.per_tile {
        write_reports(dir.join("per_tile"), &eval.confusion, per_tile, palette)?;
    }
    Ok(())
}

/// A synthetic scene whose land-cover reference does not know about the
/// clouds, as with a real reference map; the clouds only show in the image.
pub struct SyntheticScene {
    pub image: Raster,
    pub land_cover: LabelMap,
    pub true_clouds: Vec<bool>,
}

pub fn synthetic_scene(spec: &SceneSpec, palette: &ClassPalette, seed: u64) -> Result<SyntheticScene> {
    let cloudy = generate_labels(spec, seed);
    let clear = generate_labels(&SceneSpec { cloud_cover: 0.0, ..spec.clone() }, seed);
    let image = render_image(&cloudy, spec, seed)?;
    let true_clouds = cloudy.iter().map(|&l| l == CLOUD_CLASS).collect();
    let land_cover = LabelMap::new(spec.width, spec.height, clear, palette.clone())?;
    Ok(SyntheticScene { image, land_cover, true_clouds })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoOutcome {
    pub tiles: usize,
    pub train_tiles: usize,
    pub validation_tiles: usize,
    /// Share of pixels where the cloud mask agrees with the rendered clouds.
    pub cloud_agreement: f64,
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_val_oa: Option<f64>,
    pub pooled: Summary,
    pub per_tile: Summary,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_path_buf(), source }
}

fn reference_with_clouds(params: &CloudParams, scene: &SyntheticScene) -> Result<(LabelMap, f64)> {
    match params.mask(&scene.image)? {
        None => Ok((scene.land_cover.clone(), 1.0)),
        Some(mask) => {
            let agree = mask.flags.iter().zip(&scene.true_clouds).filter(|(a, b)| a == b).count();
            Ok((mask.merge_into(&scene.land_cover)?, agree as f64 / mask.flags.len() as f64))
        }
    }
}

/// Runs every stage on synthetic data and writes the artifacts into `out`:
///
/// * `scene.bsq`, `reference.bsq`, `class_frequencies.csv`
/// * `tiles/` with the split recorded in its manifest
/// * `best.ckpt`, `final.ckpt`, `history.csv`
/// * `test_scene.bsq`, `test_reference.bsq`, `prediction.bsq`
/// * `confusion.csv`, `per_class.csv`, `summary.json` (pooled) and the same
///   under `per_tile/`
///
/// Everything except the timing column of `history.csv` is a function of
/// the configuration alone.
pub fn run_demo(config: &PipelineConfig, out: &Path) -> Result<DemoOutcome> {
    config.validate()?;
    let palette = ClassPalette::nalcms();
    if config.model.num_classes != palette.len() {
        return Err(PipelineError::Config(format!(
            "the demo uses the {}-class NALCMS palette, model.num_classes is {}",
            palette.len(),
            config.model.num_classes
        )));
    }
    if config.scene.bands != config.model.input_channels {
        return Err(PipelineError::Config(format!(
            "scene has {} bands, model.input_channels is {}",
            config.scene.bands, config.model.input_channels
        )));
    }
    fs::create_dir_all(out).map_err(io_err(out))?;

    let scene = synthetic_scene(&config.scene, &palette, config.stage_seed(Stage::Scene))?;
    let (reference, cloud_agreement) = reference_with_clouds(&config.cloudmask, &scene)?;
    save_raster(&scene.image, out.join("scene.bsq"))?;
    save_label_map(&reference, out.join("reference.bsq"))?;
    write_class_frequencies(out.join("class_frequencies.csv"), &class_frequencies(&reference), &palette)?;

    let tiles = tile_mosaic(&scene.image, &reference, config.tiling.options())?;
    let split = stratified_split(&tiles, config.tiling.split_ratio, config.stage_seed(Stage::Split))?;
    save_tile_store(out.join("tiles"), &tiles, Some(&split))?;

    let mut model = build_model(&config.model, config.stage_seed(Stage::ModelInit))?;
    let train_cfg = TrainConfig { seed: config.stage_seed(Stage::Training), ..config.train.clone() };
    let outcome = train(&mut model, &tiles, &split, &train_cfg)?;
    let best = outcome.best_model(&model);
    save_checkpoint(&model, out.join("final.ckpt"))?;
    save_checkpoint(&best, out.join("best.ckpt"))?;
    let history = out.join("history.csv");
    fs::write(&history, outcome.history.to_csv()).map_err(io_err(&history))?;

    let test = synthetic_scene(&config.scene, &palette, config.stage_seed(Stage::TestScene))?;
    let (test_reference, _) = reference_with_clouds(&config.cloudmask, &test)?;
    let prediction = predict_raster(&best, &test.image, &palette)?;
    save_raster(&test.image, out.join("test_scene.bsq"))?;
    save_label_map(&test_reference, out.join("test_reference.bsq"))?;
    save_label_map(&prediction, out.join("prediction.bsq"))?;

    let eval = evaluate_maps(&prediction, &test_reference, Some(config.tiling.tile_size))?;
    write_evaluation(out, &eval, &palette)?;

    Ok(DemoOutcome {
        tiles: tiles.len(),
        train_tiles: split.count(Split::Train),
        validation_tiles: split.count(Split::Validation),
        cloud_agreement,
        epochs: train_cfg.total_epochs(),
        best_epoch: outcome.best_epoch,
        best_val_oa: outcome.best_val_oa,
        pooled: Summary::from(&eval.pooled),
        per_tile: Summary::from(eval.per_tile.as_ref().expect("block size given")),
    })
}
