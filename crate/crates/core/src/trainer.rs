//! Phased Adam training over a tile store, validation tracking, and
//! whole-raster prediction.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{adam_step, softmax_cross_entropy, AdamState, AutodiffError, Gradients, Tape, Tensor4};
use crate::metrics::{overall_accuracy, ConfusionMatrix, MetricsError};
use crate::raster::{ClassId, ClassPalette, LabelMap, Raster, RasterError};
use crate::segnet::{save_checkpoint, Model, SegnetError};
use crate::tiling::{apply_transform, reflect_pad, Split, SplitManifest, Stitcher, Tile, TileSet, TilingError, TransformSpec};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("label {label} out of range for a {classes}-class model")]
    LabelOutOfRange { label: ClassId, classes: usize },
    #[error("the training split is empty")]
    EmptyTrainingSplit,
    #[error("raster has {found} bands, the model expects {expected}")]
    ChannelMismatch { expected: usize, found: usize },
    #[error("tile {0} has no split assignment")]
    UnassignedTile(usize),
    #[error("tile size {found} does not match the model tile size {expected}")]
    TileSizeMismatch { expected: usize, found: usize },
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("numeric failure: {0}")]
    NumericFailure(String),
    #[error(transparent)]
    Model(#[from] SegnetError),
    #[error(transparent)]
    Tiling(#[from] TilingError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

impl From<AutodiffError> for TrainError {
    fn from(e: AutodiffError) -> Self {
        match e {
            AutodiffError::NonFinite(what) => TrainError::NumericFailure(what),
            other => TrainError::Model(SegnetError::Autodiff(other)),
        }
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub learning_rate: f64,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub phases: Vec<Phase>,
    pub batch_size: usize,
    pub seed: u64,
    pub transform_enabled: bool,
    /// Write `epoch_NNNN.ckpt` every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
    /// Class excluded from the loss.
    pub ignore_class: Option<ClassId>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            phases: vec![Phase { learning_rate: 1e-4, epochs: 30 }, Phase { learning_rate: 1e-5, epochs: 30 }],
            batch_size: 8,
            seed: 0,
            transform_enabled: true,
            checkpoint_every: 0,
            checkpoint_dir: None,
            ignore_class: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.phases.is_empty() {
            return Err(TrainError::InvalidConfig("no training phases".into()));
        }
        for p in &self.phases {
            if !(p.learning_rate > 0.0 && p.learning_rate.is_finite()) || p.epochs == 0 {
                return Err(TrainError::InvalidConfig(format!("phase {p:?} needs a positive rate and epochs")));
            }
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch size must be at least 1".into()));
        }
        if self.checkpoint_every > 0 && self.checkpoint_dir.is_none() {
            return Err(TrainError::InvalidConfig("periodic checkpoints need a checkpoint directory".into()));
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.phases.iter().map(|p| p.epochs).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: usize,
    pub learning_rate: f64,
    pub loss: f64,
    pub val_oa: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    /// Columns `epoch,phase,lr,loss,val_oa,seconds`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,phase,lr,loss,val_oa,seconds\n");
        for r in &self.records {
            let oa = r.val_oa.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(s, "{},{},{},{},{},{:.3}", r.epoch, r.phase, r.learning_rate, r.loss, oa, r.seconds);
        }
        s
    }

    /// The history without wall-clock times, for reproducibility checks.
    pub fn without_timing(&self) -> TrainHistory {
        TrainHistory { records: self.records.iter().map(|r| EpochRecord { seconds: 0.0, ..r.clone() }).collect() }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: TrainHistory,
    /// Parameters of the epoch with the highest validation OA (the final
    /// epoch when there is no validation split).
    pub best_params: Vec<Tensor4<f32>>,
    pub best_epoch: usize,
    pub best_val_oa: Option<f64>,
}

impl TrainOutcome {
    pub fn best_model(&self, trained: &Model) -> Model {
        let mut m = trained.clone();
        m.params_mut().clone_from_slice(&self.best_params);
        m
    }
}

/// Order in which the training tiles are visited in `epoch`.
pub fn epoch_order(seed: u64, epoch: usize, ids: &[usize]) -> Vec<usize> {
    let mut order = ids.to_vec();
    order.shuffle(&mut epoch_rng(seed, epoch));
    order
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// Scales samples to `[0, 1]` by the dtype maximum.
pub fn tiles_to_tensor(tiles: &[&Tile]) -> Result<Tensor4<f32>> {
    let first = tiles.first().ok_or_else(|| TrainError::InvalidConfig("empty batch".into()))?;
    let (b, s) = (first.bands, first.size);
    let mut data = Vec::with_capacity(tiles.len() * b * s * s);
    for t in tiles {
        let scale = 1.0 / t.dtype.max_value() as f32;
        data.extend(t.image.iter().map(|&v| v as f32 * scale));
    }
    Ok(Tensor4::from_vec([tiles.len(), b, s, s], data)?)
}

/// Mean cross-entropy of a batch and its gradients.
pub fn loss_and_gradients(
    model: &Model,
    batch: &Tensor4<f32>,
    targets: &[ClassId],
    ignore_class: Option<ClassId>,
) -> Result<(f32, usize, Gradients<f32>)> {
    let mut tape = Tape::new(model.params());
    let x = tape.input(batch.clone());
    let y = model.record(&mut tape, x)?;
    let ce = softmax_cross_entropy(tape.value(y), targets, ignore_class)?;
    let grads = tape.backward(y, ce.grad)?;
    if grads.params.iter().any(|g| !g.all_finite()) {
        return Err(TrainError::NumericFailure("parameter gradients".into()));
    }
    Ok((ce.loss, ce.counted, grads))
}

/// Per-pixel argmax over the class axis, ties to the lowest class.
pub fn argmax_labels(logits: &Tensor4<f32>) -> Vec<Vec<ClassId>> {
    let [n, c, h, w] = logits.dims();
    let plane = h * w;
    (0..n)
        .map(|i| {
            let item = logits.item(i);
            (0..plane)
                .map(|p| {
                    let mut best = 0;
                    for ch in 1..c {
                        if item[ch * plane + p] > item[best * plane + p] {
                            best = ch;
                        }
                    }
                    best as ClassId
                })
                .collect()
        })
        .collect()
}

const PREDICT_BATCH: usize = 8;

pub fn predict_tiles(model: &Model, tiles: &[&Tile]) -> Result<Vec<Vec<ClassId>>> {
    let mut out = Vec::with_capacity(tiles.len());
    for chunk in tiles.chunks(PREDICT_BATCH) {
        let logits = model.forward(&tiles_to_tensor(chunk)?)?;
        out.extend(argmax_labels(&logits));
    }
    Ok(out)
}

/// Overall accuracy of the model on a set of tiles.
pub fn evaluate_tiles(model: &Model, tiles: &[&Tile]) -> Result<f64> {
    let mut cm = ConfusionMatrix::new(model.config.num_classes);
    for (t, pred) in tiles.iter().zip(predict_tiles(model, tiles)?) {
        cm.add_pixels(&pred, &t.labels)?;
    }
    Ok(overall_accuracy(&cm)?)
}

fn check_inputs(model: &Model, tiles: &TileSet, split: &SplitManifest) -> Result<()> {
    let classes = model.config.num_classes;
    for t in &tiles.tiles {
        if !split.assignments.contains_key(&t.tile_id) {
            return Err(TrainError::UnassignedTile(t.tile_id));
        }
        if t.size != model.config.tile_size {
            return Err(TrainError::TileSizeMismatch { expected: model.config.tile_size, found: t.size });
        }
        if t.bands != model.config.input_channels {
            return Err(TrainError::ChannelMismatch { expected: model.config.input_channels, found: t.bands });
        }
        if let Some(&label) = t.labels.iter().find(|&&l| l as usize >= classes) {
            return Err(TrainError::LabelOutOfRange { label, classes });
        }
    }
    Ok(())
}

/// Trains `model` in place. Each epoch visits the training tiles in a fresh
/// seeded order, optionally through a random geometric transform per tile,
/// then measures OA on the validation tiles without transforms.
pub fn train(model: &mut Model, tiles: &TileSet, split: &SplitManifest, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    check_inputs(model, tiles, split)?;
    let by_id = |id: usize| tiles.get(id).expect("split ids come from the tile set");
    let train_ids: Vec<usize> =
        tiles.tiles.iter().map(|t| t.tile_id).filter(|id| split.assignments[id] == Split::Train).collect();
    if train_ids.is_empty() {
        return Err(TrainError::EmptyTrainingSplit);
    }
    let val_tiles: Vec<&Tile> =
        tiles.tiles.iter().filter(|t| split.assignments[&t.tile_id] == Split::Validation).collect();
    if let Some(dir) = &config.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|source| SegnetError::Io { path: dir.clone(), source })?;
    }

    let mut adam = AdamState::new(config.phases[0].learning_rate, model.params());
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, usize, Vec<Tensor4<f32>>)> = None;
    let mut epoch = 0;
    for (phase_idx, phase) in config.phases.iter().enumerate() {
        adam.lr = phase.learning_rate;
        for _ in 0..phase.epochs {
            epoch += 1;
            let started = Instant::now();
            let mut rng = epoch_rng(config.seed, epoch);
            let mut order = train_ids.clone();
            order.shuffle(&mut rng);
            let mut batch_tiles: Vec<Tile> = Vec::with_capacity(order.len());
            for id in order {
                let t = by_id(id);
                batch_tiles.push(if config.transform_enabled {
                    let spec = TransformSpec::random(&mut rng);
                    apply_transform(t, &spec, rng.random())?
                } else {
                    t.clone()
                });
            }

            let (mut loss_sum, mut counted_sum) = (0.0f64, 0usize);
            for chunk in batch_tiles.chunks(config.batch_size) {
                let refs: Vec<&Tile> = chunk.iter().collect();
                let x = tiles_to_tensor(&refs)?;
                let targets: Vec<ClassId> = chunk.iter().flat_map(|t| t.labels.iter().copied()).collect();
                let (loss, counted, grads) = loss_and_gradients(model, &x, &targets, config.ignore_class)?;
                loss_sum += loss as f64 * counted as f64;
                counted_sum += counted;
                adam_step(model.params_mut(), &grads.params, &mut adam)?;
            }
            if model.params().iter().any(|p| !p.all_finite()) {
                return Err(TrainError::NumericFailure(format!("parameters after epoch {epoch}")));
            }
            let loss = if counted_sum == 0 { 0.0 } else { loss_sum / counted_sum as f64 };
            let val_oa = if val_tiles.is_empty() { None } else { Some(evaluate_tiles(model, &val_tiles)?) };

            let score = val_oa.unwrap_or(f64::NEG_INFINITY);
            let improved = match (&best, val_oa) {
                (Some((b, _, _)), Some(v)) => v > *b,
                _ => true,
            };
            if improved {
                best = Some((score, epoch, model.params().to_vec()));
            }
            if let (Some(dir), true) = (&config.checkpoint_dir, config.checkpoint_every > 0) {
                if epoch % config.checkpoint_every == 0 {
                    save_checkpoint(model, dir.join(format!("epoch_{epoch:04}.ckpt")))?;
                }
            }
            history.records.push(EpochRecord {
                epoch,
                phase: phase_idx + 1,
                learning_rate: phase.learning_rate,
                loss,
                val_oa,
                seconds: started.elapsed().as_secs_f64(),
            });
        }
    }
    let (score, best_epoch, best_params) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        history,
        best_params,
        best_epoch,
        best_val_oa: (score > f64::NEG_INFINITY).then_some(score),
    })
}

/// Labels a whole raster: reflect-pad to a multiple of the tile size, predict
/// disjoint tiles, stitch, and crop back to the raster extent.
pub fn predict_raster(model: &Model, raster: &Raster, palette: &ClassPalette) -> Result<LabelMap> {
    let cfg = &model.config;
    if raster.bands() != cfg.input_channels {
        return Err(TrainError::ChannelMismatch { expected: cfg.input_channels, found: raster.bands() });
    }
    if palette.len() != cfg.num_classes {
        return Err(TrainError::InvalidConfig(format!(
            "palette has {} classes, the model {}",
            palette.len(),
            cfg.num_classes
        )));
    }
    let t = cfg.tile_size;
    let (h, w) = (raster.height(), raster.width());
    let (ph, pw) = (h.div_ceil(t) * t, w.div_ceil(t) * t);
    let padded = if (ph, pw) == (h, w) { raster.clone() } else { reflect_pad(raster, ph, pw)? };
    let blank = LabelMap::filled(pw, ph, 0, palette.clone())?;
    let mut stitcher = Stitcher::new(ph, pw, cfg.num_classes);
    let origins: Vec<(usize, usize)> = (0..ph / t).flat_map(|r| (0..pw / t).map(move |c| (r * t, c * t))).collect();
    for chunk in origins.chunks(PREDICT_BATCH) {
        let tiles: Vec<Tile> =
            chunk.iter().enumerate().map(|(i, &(r, c))| crate::tiling::crop_tile(&padded, &blank, i, r, c, t)).collect();
        let refs: Vec<&Tile> = tiles.iter().collect();
        for (&(r, c), labels) in chunk.iter().zip(predict_tiles(model, &refs)?) {
            stitcher.add_labels(r, c, t, &labels)?;
        }
    }
    let full = stitcher.finish(palette.clone())?.require_full_coverage()?;
    let mut labels = Vec::with_capacity(h * w);
    for row in 0..h {
        labels.extend_from_slice(&full.labels()[row * pw..row * pw + w]);
    }
    Ok(LabelMap::new(w, h, labels, palette.clone())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::{Dtype, RasterHeader};
    use crate::segnet::{build_model, ModelConfig};
    use crate::synthetic::{generate_scene, SceneSpec};
    use crate::tiling::{stratified_split, tile_mosaic, TilingOptions};

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            num_classes: 4,
            input_channels: 2,
            encoder_widths: vec![4, 8, 8],
            output_stride: 4,
            tile_size: 16,
            ..Default::default()
        }
    }

    fn tiny_data() -> (TileSet, SplitManifest) {
        let pal = ClassPalette::from_names(&["a", "b", "c"]).unwrap();
        let spec = SceneSpec { width: 64, height: 64, bands: 2, classes: vec![1, 2, 3], regions: 6, ..Default::default() };
        let (r, l) = generate_scene(&spec, &pal, 2).unwrap();
        let ts = tile_mosaic(&r, &l, TilingOptions::regular(16)).unwrap();
        let split = stratified_split(&ts, 0.75, 1).unwrap();
        (ts, split)
    }

    fn quick(phases: Vec<Phase>) -> TrainConfig {
        TrainConfig { phases, batch_size: 4, seed: 3, ..Default::default() }
    }

    #[test]
    fn schedule_bookkeeping() {
        let (ts, split) = tiny_data();
        let mut m = build_model(&tiny_config(), 1).unwrap();
        let cfg = quick(vec![Phase { learning_rate: 1e-4, epochs: 2 }, Phase { learning_rate: 1e-5, epochs: 2 }]);
        let out = train(&mut m, &ts, &split, &cfg).unwrap();
        let lrs: Vec<f64> = out.history.records.iter().map(|r| r.learning_rate).collect();
        assert_eq!(lrs, [1e-4, 1e-4, 1e-5, 1e-5]);
        assert_eq!(out.history.records.iter().map(|r| r.phase).collect::<Vec<_>>(), [1, 1, 2, 2]);
        assert!(out.history.records.iter().all(|r| r.val_oa.is_some()));
        let csv = out.history.to_csv();
        assert!(csv.starts_with("epoch,phase,lr,loss,val_oa,seconds\n1,1,0.0001,"));
    }

    #[test]
    fn identical_seeds_identical_history() {
        let (ts, split) = tiny_data();
        let cfg = quick(vec![Phase { learning_rate: 1e-3, epochs: 3 }]);
        let run = || {
            let mut m = build_model(&tiny_config(), 5).unwrap();
            let out = train(&mut m, &ts, &split, &cfg).unwrap();
            (out.history.without_timing(), m)
        };
        let (h1, m1) = run();
        let (h2, m2) = run();
        assert_eq!(h1, h2);
        assert_eq!(m1, m2);
    }

    #[test]
    fn shuffling_changes_order_but_not_membership() {
        let ids: Vec<usize> = (0..24).collect();
        let epochs = 100;
        let mut changed = 0;
        for e in 1..=epochs {
            let o = epoch_order(7, e, &ids);
            let mut sorted = o.clone();
            sorted.sort();
            assert_eq!(sorted, ids);
            changed += usize::from(o != ids);
        }
        assert!(changed as f64 >= 0.95 * epochs as f64);
        assert_ne!(epoch_order(7, 1, &ids), epoch_order(7, 2, &ids));
    }

    #[test]
    fn every_parameter_receives_gradient() {
        for variant in [crate::segnet::DecoderVariant::ModifiedUnet, crate::segnet::DecoderVariant::PlainUnet] {
            let (ts, _) = tiny_data();
            let m = build_model(&ModelConfig { decoder_variant: variant, ..tiny_config() }, 2).unwrap();
            let refs: Vec<&Tile> = ts.tiles.iter().take(4).collect();
            let targets: Vec<ClassId> = refs.iter().flat_map(|t| t.labels.iter().copied()).collect();
            let (_, _, g) = loss_and_gradients(&m, &tiles_to_tensor(&refs).unwrap(), &targets, None).unwrap();
            for (name, g) in m.param_names().iter().zip(&g.params) {
                assert!(g.norm() > 0.0, "{name} has zero gradient");
            }
        }
    }

    #[test]
    fn input_errors() {
        let (ts, split) = tiny_data();
        let mut m = build_model(&ModelConfig { num_classes: 3, ..tiny_config() }, 1).unwrap();
        let cfg = quick(vec![Phase { learning_rate: 1e-3, epochs: 1 }]);
        assert!(matches!(train(&mut m, &ts, &split, &cfg), Err(TrainError::LabelOutOfRange { label: 3, classes: 3 })));

        let mut m = build_model(&tiny_config(), 1).unwrap();
        let all_val = SplitManifest {
            assignments: split.assignments.keys().map(|&k| (k, Split::Validation)).collect(),
            ..split.clone()
        };
        assert!(matches!(train(&mut m, &ts, &all_val, &cfg), Err(TrainError::EmptyTrainingSplit)));
        let bad = TrainConfig { batch_size: 0, ..cfg };
        assert!(matches!(train(&mut m, &ts, &split, &bad), Err(TrainError::InvalidConfig(_))));
    }

    #[test]
    fn single_tile_raster_prediction() {
        let m = build_model(&tiny_config(), 4).unwrap();
        let (ts, _) = tiny_data();
        let t = &ts.tiles[0];
        let r = Raster::new(RasterHeader::new(16, 16, 2, Dtype::U16), t.image.clone()).unwrap();
        let pal = ts.palette.clone();
        let map = predict_raster(&m, &r, &pal).unwrap();
        let direct = argmax_labels(&m.forward(&tiles_to_tensor(&[t]).unwrap()).unwrap());
        assert_eq!(map.labels(), &direct[0][..]);
    }

    #[test]
    fn ragged_raster_keeps_its_extent() {
        let m = build_model(&tiny_config(), 4).unwrap();
        let r = Raster::new(RasterHeader::new(21, 35, 2, Dtype::U8), (0..21 * 35 * 2).map(|i| (i % 251) as u16).collect()).unwrap();
        let pal = ClassPalette::from_names(&["a", "b", "c"]).unwrap();
        let map = predict_raster(&m, &r, &pal).unwrap();
        assert_eq!((map.width(), map.height()), (21, 35));
        assert_eq!(predict_raster(&m, &r, &pal).unwrap(), map);
        let wrong = Raster::new(RasterHeader::new(16, 16, 3, Dtype::U8), vec![0; 768]).unwrap();
        assert!(matches!(predict_raster(&m, &wrong, &pal), Err(TrainError::ChannelMismatch { expected: 2, found: 3 })));
    }
}
