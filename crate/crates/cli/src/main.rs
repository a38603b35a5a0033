use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use landseg::autodiff::AutodiffError;
use landseg::cloudmask::CloudMaskError;
use landseg::metrics::{class_frequencies, class_frequency_csv, write_class_frequencies, MetricsError, Summary};
use landseg::pipeline::{evaluate_maps, run_demo, write_evaluation, CloudMethod, PipelineConfig, PipelineError, Stage};
use landseg::raster::{load_label_map, load_raster, save_label_map, ClassPalette, RasterError};
use landseg::segnet::{build_model, load_checkpoint, save_checkpoint, DecoderVariant, ModelConfig, SegnetError};
use landseg::tiling::{load_tile_store, save_tile_store, stratified_split, tile_mosaic, TilingError};
use landseg::trainer::{predict_raster, train, TrainConfig, TrainError};

#[derive(Parser)]
#[command(name = "landseg", version, about = "Land-cover segmentation pipeline")]
struct Cli {
    /// TOML file with `seed`, `tiling`, `cloudmask`, `model`, `train` and
    /// `scene` sections; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to the available cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Cut a raster and its label map into tiles.
    Tile(TileArgs),
    /// Assign the tiles of a store to training and validation.
    Split(SplitArgs),
    /// Derive a cloud label map from a raster.
    Cloudmask(CloudArgs),
    /// Train a model on a split tile store.
    Train(TrainArgs),
    /// Label a whole raster with a checkpoint.
    Predict(PredictArgs),
    /// Score a prediction against a reference map.
    Evaluate(EvaluateArgs),
    /// Class frequencies of a label map and parameter counts of the model.
    Report(ReportArgs),
    /// Run every stage on a synthetic scene.
    Demo,
}

#[derive(Args)]
struct TileArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    tile_size: Option<usize>,
    /// Defaults to half the tile size.
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long)]
    min_valid: Option<f64>,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    tiles: PathBuf,
    /// Training share.
    #[arg(long)]
    ratio: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Otsu,
    Qa,
}

#[derive(Args)]
struct CloudArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    #[arg(long)]
    blue_band: Option<usize>,
    #[arg(long)]
    qa_band: Option<usize>,
    #[arg(long)]
    cloud_bit: Option<u8>,
    /// Confidence bit range as `LO,HI`.
    #[arg(long, value_parser = parse_bit_range)]
    conf_bits: Option<(u8, u8)>,
    #[arg(long)]
    conf_min: Option<u16>,
    /// Also write this label map with cloud pixels set to the cloud class.
    #[arg(long)]
    merge_into: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    tiles: PathBuf,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    no_transforms: bool,
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    /// Label map whose palette names the output classes.
    #[arg(long)]
    palette_from: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    /// Also score `N x N` blocks and combine them by class pixel share.
    #[arg(long)]
    block: Option<usize>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    labels: Option<PathBuf>,
}

fn parse_bit_range(s: &str) -> Result<(u8, u8), String> {
    let (lo, hi) = s.split_once(',').ok_or("expected LO,HI")?;
    let p = |v: &str| v.trim().parse::<u8>().map_err(|e| e.to_string());
    Ok((p(lo)?, p(hi)?))
}

fn merge_toml(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge_toml(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// `base` overlaid with the config file, then with `--seed`.
fn load_config(cli: &Cli, base: PipelineConfig) -> Result<PipelineConfig, PipelineError> {
    let mut cfg = match &cli.config {
        None => base,
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|source| PipelineError::Io { path: path.clone(), source })?;
            let user: toml::Value =
                toml::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
            let mut merged = toml::Value::try_from(&base).map_err(|e| PipelineError::Config(e.to_string()))?;
            merge_toml(&mut merged, user);
            merged.try_into().map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?
        }
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn out_dir(cli: &Cli, cfg: &PipelineConfig, fallback: &str) -> Result<PathBuf, PipelineError> {
    let dir = cli.out.clone().or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from(fallback));
    fs::create_dir_all(&dir).map_err(|source| PipelineError::Io { path: dir.clone(), source })?;
    Ok(dir)
}

fn write_text(path: &Path, text: &str) -> Result<(), PipelineError> {
    fs::write(path, text).map_err(|source| PipelineError::Io { path: path.to_path_buf(), source })
}

fn palette_for(classes: usize) -> Result<ClassPalette, PipelineError> {
    let nalcms = ClassPalette::nalcms();
    if classes == nalcms.len() {
        return Ok(nalcms);
    }
    let names: Vec<String> = (1..classes).map(|i| format!("class {i}")).collect();
    Ok(ClassPalette::from_names(&names)?)
}

fn run(cli: &Cli) -> Result<(), PipelineError> {
    let base = match cli.command {
        Command::Demo => PipelineConfig::demo(),
        _ => PipelineConfig::default(),
    };
    let mut cfg = load_config(cli, base)?;
    match &cli.command {
        Command::Tile(a) => {
            if let Some(t) = a.tile_size {
                cfg.tiling.tile_size = t;
            }
            if a.stride.is_some() {
                cfg.tiling.stride = a.stride;
            }
            if a.min_valid.is_some() {
                cfg.tiling.min_valid_fraction = a.min_valid;
            }
            let raster = load_raster(&a.input)?;
            let labels = load_label_map(&a.labels)?;
            let tiles = tile_mosaic(&raster, &labels, cfg.tiling.options())?;
            let out = out_dir(cli, &cfg, "tiles")?;
            save_tile_store(&out, &tiles, None)?;
            println!("{} tiles written to {}", tiles.len(), out.display());
        }
        Command::Split(a) => {
            let ratio = a.ratio.unwrap_or(cfg.tiling.split_ratio);
            let (tiles, _) = load_tile_store(&a.tiles)?;
            let split = stratified_split(&tiles, ratio, cfg.stage_seed(Stage::Split))?;
            let out = out_dir(cli, &cfg, "split")?;
            if same_dir(&out, &a.tiles) {
                return Err(PipelineError::Config("--out must differ from --tiles; inputs are never rewritten".into()));
            }
            save_tile_store(&out, &tiles, Some(&split))?;
            println!(
                "{} training and {} validation tiles written to {}",
                split.count(landseg::tiling::Split::Train),
                split.count(landseg::tiling::Split::Validation),
                out.display()
            );
        }
        Command::Cloudmask(a) => {
            let c = &mut cfg.cloudmask;
            if let Some(m) = a.method {
                c.method = match m {
                    MethodArg::Otsu => CloudMethod::Otsu,
                    MethodArg::Qa => CloudMethod::Qa,
                };
            }
            c.blue_band = a.blue_band.unwrap_or(c.blue_band);
            c.qa_band = a.qa_band.or(c.qa_band);
            c.cloud_bit = a.cloud_bit.unwrap_or(c.cloud_bit);
            c.confidence_bits = a.conf_bits.or(c.confidence_bits);
            c.confidence_min = a.conf_min.unwrap_or(c.confidence_min);
            let raster = load_raster(&a.input)?;
            let mask = cfg.cloudmask.mask(&raster)?.ok_or_else(|| PipelineError::Config("cloud masking is off".into()))?;
            let out = out_dir(cli, &cfg, "cloudmask")?;
            save_label_map(&mask.to_label_map(), out.join("cloud_mask.bsq"))?;
            if let Some(labels) = &a.merge_into {
                save_label_map(&mask.merge_into(&load_label_map(labels)?)?, out.join("reference.bsq"))?;
            }
            println!("cloud fraction {:.4}", mask.cloud_fraction());
        }
        Command::Train(a) => {
            if let Some(b) = a.batch_size {
                cfg.train.batch_size = b;
            }
            if a.no_transforms {
                cfg.train.transform_enabled = false;
            }
            let out = out_dir(cli, &cfg, "model")?;
            if let Some(n) = a.checkpoint_every {
                cfg.train.checkpoint_every = n;
            }
            if cfg.train.checkpoint_every > 0 && cfg.train.checkpoint_dir.is_none() {
                cfg.train.checkpoint_dir = Some(out.join("checkpoints"));
            }
            let (tiles, split) = load_tile_store(&a.tiles)?;
            let split = split.ok_or_else(|| {
                PipelineError::Config(format!("{} has no split; run `landseg split` first", a.tiles.display()))
            })?;
            let mut model = build_model(&cfg.model, cfg.stage_seed(Stage::ModelInit))?;
            let train_cfg = TrainConfig { seed: cfg.stage_seed(Stage::Training), ..cfg.train.clone() };
            let outcome = train(&mut model, &tiles, &split, &train_cfg)?;
            save_checkpoint(&model, out.join("final.ckpt"))?;
            save_checkpoint(&outcome.best_model(&model), out.join("best.ckpt"))?;
            write_text(&out.join("history.csv"), &outcome.history.to_csv())?;
            let last = outcome.history.records.last().expect("at least one epoch");
            println!(
                "{} epochs, final loss {:.4}, best epoch {} (val OA {})",
                last.epoch,
                last.loss,
                outcome.best_epoch,
                outcome.best_val_oa.map_or("n/a".into(), |v| format!("{:.4}", v))
            );
        }
        Command::Predict(a) => {
            let model = load_checkpoint(&a.checkpoint, None)?;
            let palette = match &a.palette_from {
                Some(p) => load_label_map(p)?.palette().clone(),
                None => palette_for(model.config.num_classes)?,
            };
            let raster = load_raster(&a.input)?;
            let map = predict_raster(&model, &raster, &palette)?;
            let out = out_dir(cli, &cfg, "prediction")?;
            save_label_map(&map, out.join("prediction.bsq"))?;
            println!("prediction written to {}", out.join("prediction.bsq").display());
        }
        Command::Evaluate(a) => {
            let pred = load_label_map(&a.pred)?;
            let truth = load_label_map(&a.truth)?;
            let eval = evaluate_maps(&pred, &truth, a.block)?;
            let out = out_dir(cli, &cfg, "evaluation")?;
            write_evaluation(&out, &eval, truth.palette())?;
            print_json(&Summary::from(&eval.pooled));
            if let Some(pt) = &eval.per_tile {
                print_json(&Summary::from(pt));
            }
        }
        Command::Report(a) => {
            let mut lines = Vec::new();
            for variant in [DecoderVariant::ModifiedUnet, DecoderVariant::PlainUnet] {
                let model = build_model(&ModelConfig { decoder_variant: variant, ..cfg.model.clone() }, 0)?;
                let n = model.param_count();
                lines.push((variant, n.encoder, n.decoder, n.head, n.total()));
            }
            println!("decoder,encoder_params,decoder_params,head_params,total");
            for (v, e, d, h, t) in &lines {
                println!("{v:?},{e},{d},{h},{t}");
            }
            println!("plain/modified decoder ratio {:.3}", lines[1].2 as f64 / lines[0].2 as f64);
            if let Some(path) = &a.labels {
                let map = load_label_map(path)?;
                let counts = class_frequencies(&map);
                let out = out_dir(cli, &cfg, "report")?;
                write_class_frequencies(out.join("class_frequencies.csv"), &counts, map.palette())?;
                print!("{}", class_frequency_csv(&counts, map.palette()));
            }
        }
        Command::Demo => {
            let out = out_dir(cli, &cfg, "demo_out")?;
            let outcome = run_demo(&cfg, &out)?;
            print_json(&outcome);
        }
    }
    Ok(())
}

fn same_dir(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(x), Ok(y)) => x == y,
        _ => false,
    }
}

fn print_json<T: serde::Serialize>(v: &T) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
}

/// Exit code and a stable name for an error.
fn classify(e: &PipelineError) -> (u8, &'static str) {
    const USAGE: u8 = 1;
    const DATA: u8 = 2;
    const NUMERIC: u8 = 3;
    match e {
        PipelineError::Config(_) => (USAGE, "ConfigError"),
        PipelineError::Io { .. } => (DATA, "IoError"),
        PipelineError::Raster(r) => raster_kind(r),
        PipelineError::Tiling(t) => match t {
            TilingError::DimensionMismatch(_) => (USAGE, "DimensionMismatch"),
            TilingError::InvalidParameter(_) | TilingError::InvalidZoomFraction(_) => (USAGE, "InvalidParameter"),
            TilingError::TileLargerThanMosaic { .. } => (USAGE, "TileLargerThanMosaic"),
            TilingError::Raster(r) => raster_kind(r),
            _ => (DATA, "TilingError"),
        },
        PipelineError::CloudMask(c) => match c {
            CloudMaskError::BitOutOfRange { .. } | CloudMaskError::InvalidBitRange { .. } => (USAGE, "InvalidBitSpec"),
            CloudMaskError::DegenerateHistogram => (DATA, "DegenerateHistogram"),
            CloudMaskError::Raster(r) => raster_kind(r),
        },
        PipelineError::Model(m) => segnet_kind(m),
        PipelineError::Train(t) => match t {
            TrainError::NumericFailure(_) => (NUMERIC, "NumericFailure"),
            TrainError::InvalidConfig(_) => (USAGE, "ConfigError"),
            TrainError::ChannelMismatch { .. } | TrainError::TileSizeMismatch { .. } => (USAGE, "DimensionMismatch"),
            TrainError::Model(m) => segnet_kind(m),
            TrainError::Raster(r) => raster_kind(r),
            TrainError::Metrics(MetricsError::DimensionMismatch(_)) => (USAGE, "DimensionMismatch"),
            _ => (DATA, "DataError"),
        },
        PipelineError::Metrics(m) => match m {
            MetricsError::DimensionMismatch(_) => (USAGE, "DimensionMismatch"),
            MetricsError::LabelOutOfRange { .. } => (DATA, "LabelOutOfRange"),
            _ => (DATA, "MetricsError"),
        },
    }
}

fn raster_kind(e: &RasterError) -> (u8, &'static str) {
    match e {
        RasterError::DimensionMismatch(_) => (1, "DimensionMismatch"),
        RasterError::BandOutOfRange { .. } => (1, "BandOutOfRange"),
        RasterError::IoFailure { .. } => (2, "IoError"),
        _ => (2, "MalformedRaster"),
    }
}

fn segnet_kind(e: &SegnetError) -> (u8, &'static str) {
    match e {
        SegnetError::Autodiff(AutodiffError::NonFinite(_)) => (3, "NumericFailure"),
        SegnetError::Autodiff(_) => (2, "ShapeMismatch"),
        SegnetError::Checkpoint { .. } => (2, "MalformedCheckpoint"),
        SegnetError::Io { .. } => (2, "IoError"),
        SegnetError::ConfigMismatch => (1, "ConfigMismatch"),
        _ => (1, "ConfigError"),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("landseg: ConfigError: {e}");
            return ExitCode::from(1);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, kind) = classify(&e);
            eprintln!("landseg: {kind}: {e}");
            ExitCode::from(code)
        }
    }
}
