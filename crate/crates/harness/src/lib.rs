//! Desk-scale experiment harness around `mcl-core`.
//!
//! * [`config`]: the flat TOML run configuration.
//! * [`dataset`]: procedural shapes and PPM image directories.
//! * [`train`]: self-supervised and supervised pre-training loops.
//! * [`checkpoint`], [`metrics`]: persistence and CSV logging.
//! * [`probe`]: linear evaluation of a frozen backbone.
//! * [`preview`], [`ppm`]: montage images with tile outlines.
//! * [`ablate`]: named ablation grids.
//! * [`gradcheck`]: finite-difference check of the full loss.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod gradcheck;
pub mod metrics;
pub mod ppm;
pub mod preview;
pub mod probe;
pub mod train;

pub use config::{Objective, TrainConfig};
pub use dataset::Dataset;
