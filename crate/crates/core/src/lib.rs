//! Multi-level contrastive pre-training on montage images.
//!
//! Augmented views are downsampled by `2^s`, shuffled, and tiled into
//! montages the size of the original image. A feature pyramid routes each
//! montage level to the map whose stride undoes the downsampling, so every
//! tile pools an equally sized feature region. Pooled tiles are projected
//! into unit embeddings and trained with InfoNCE across levels against an EMA
//! target network.
//!
//! Module map:
//!
//! * [`tensor`], [`ops`], [`autodiff`], [`gradcheck`]: numerical core.
//! * [`augment`]: seeded two-view augmentation and boundary masks.
//! * [`montage`]: montage assembly with exact tile bookkeeping.
//! * [`pyramid`]: backbone, pyramid neck, head, projector/predictor, EMA.
//! * [`loss`]: InfoNCE, level matching modes, symmetric multi-level loss.
//! * [`optim`]: LARS, SGD, schedules, weight rescaling.
//! * [`supervised`]: multi-level cross-entropy on montages.
//! * [`ssl`]: one self-supervised training step wired end to end.

pub mod augment;
pub mod autodiff;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod montage;
pub mod ops;
pub mod optim;
pub mod par;
pub mod pyramid;
pub mod rng;
pub mod ssl;
pub mod supervised;
pub mod tensor;

pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use rng::SeededRng;
pub use tensor::{Real, Tensor};
