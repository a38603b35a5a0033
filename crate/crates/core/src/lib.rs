//! Land-cover segmentation of multispectral mosaics on the CPU.
//!
//! The modules follow the pipeline: [`raster`] reads and writes band
//! rasters and label maps, [`cloudmask`] adds cloud labels, [`tiling`] cuts
//! tiles and splits them, [`segnet`] builds the encoder-decoder on top of
//! the [`autodiff`] engine, [`trainer`] fits and applies it, and [`metrics`]
//! scores the result. [`pipeline`] wires them together behind one
//! configuration, and [`synthetic`] generates test scenes.

pub mod autodiff;
pub mod cloudmask;
pub mod metrics;
pub mod pipeline;
pub mod raster;
pub mod segnet;
pub mod synthetic;
pub mod tiling;
pub mod trainer;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/rasters.md")]
    mod rasters {}
    #[doc = include_str!("../../../book/src/cloud-labels.md")]
    mod cloud_labels {}
    #[doc = include_str!("../../../book/src/tiling.md")]
    mod tiling {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/network.md")]
    mod network {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
