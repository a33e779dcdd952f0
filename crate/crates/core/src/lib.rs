//! Ventricular segmentation micro-framework.
//!
//! Everything needed to build, train, and benchmark the two
//! encoder-decoder segmentation families (the symmetric `deepventricle`
//! and the bottleneck-based `fastventricle`) on synthetic short-axis
//! cardiac phantoms, and to evaluate predictions the way a clinical
//! volumetry pipeline would: frustum volumes, relative absolute volume
//! error, Dice, Bland-Altman agreement, and Wilcoxon-Mann-Whitney
//! comparisons.

pub mod config;
pub mod error;
pub mod graph;
pub mod layers;
pub mod metrics;
pub mod models;
pub mod phantom;
pub mod pipeline;
pub mod report;
pub mod rng;
pub mod search;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{ModelGraph, TrainMode};
pub use rng::SeedRng;
pub use tensor::Tensor4;
