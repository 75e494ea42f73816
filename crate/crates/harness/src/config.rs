//! Run configuration: one flat TOML table, unknown keys rejected.
//!
//! ```toml
//! seed = 7
//! objective = "ssl"
//! dataset = "procedural-shapes"
//! n_train = 2000
//! n_eval = 500
//! image_size = [64, 64]
//! levels = 3
//! mode = "a"
//! epochs = 30
//! batch_size = 64
//! ```
//!
//! The probe keys default to lr 0.3 for 30 epochs, a desk-scale stand-in for
//! the lr 10 / 100 epochs ImageNet linear evaluation.

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use mcl_core::augment::AugPolicy;
use mcl_core::loss::{LevelWeights, LossConfig, MatchMode};
use mcl_core::optim::OptimConfig;
use mcl_core::pyramid::{Neck, NetConfig};
use mcl_core::ssl::SslConfig;

use crate::dataset::{DatasetKind, DatasetSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    Ssl,
    Supervised,
}

impl std::str::FromStr for Objective {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> anyhow::Result<Self> {
        match s {
            "ssl" => Ok(Self::Ssl),
            "supervised" => Ok(Self::Supervised),
            _ => bail!("unknown objective `{s}` (expected ssl or supervised)"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub objective: Objective,
    /// Metrics and checkpoints land here.
    pub out_dir: PathBuf,

    pub dataset: DatasetKind,
    /// Root of an image-directory dataset (`<root>/{train,eval}/<class>/*.ppm`).
    pub data_dir: Option<PathBuf>,
    pub n_train: usize,
    pub n_eval: usize,
    pub classes: usize,
    pub image_size: (usize, usize),

    pub stem_channels: usize,
    pub stage_channels: Vec<usize>,
    /// Montage levels `S`, also the number of pyramid maps.
    pub levels: usize,
    pub pyramid_channels: usize,
    pub head_convs: usize,
    pub proj_hidden: usize,
    pub embed_dim: usize,
    pub neck: Neck,
    pub predictor_final_bn: bool,
    pub bn_momentum: f64,
    pub bn_eps: f64,

    pub tau: f64,
    pub mode: MatchMode,
    pub level_weights: LevelWeights,
    pub symmetric: bool,
    pub adjacent_include_self: bool,
    /// Gaussian boundary mask `k`; absent means no smoothing.
    pub boundary_smoothing: Option<f64>,

    /// Different blur/solarize probabilities per view, as in BYOL.
    pub aug_asymmetric: bool,
    /// Full policy overrides; `out_size` must equal `image_size`.
    pub aug_view0: Option<AugPolicy>,
    pub aug_view1: Option<AugPolicy>,

    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub lr_scale: f64,
    pub weight_decay: f64,
    pub trust_coefficient: f64,
    pub momentum: f64,
    pub exclude_bias_and_norm: bool,
    pub ema_base: f64,
    /// Divide non-normalization parameters by this once at initialization.
    pub weight_rescale: Option<f64>,

    pub probe_lr: f64,
    pub probe_epochs: usize,
    pub probe_momentum: f64,
    pub probe_batch: usize,
    pub probe_weight_decay: f64,

    /// Metrics row every `log_every` steps.
    pub log_every: usize,
    /// Checkpoint every `checkpoint_every` epochs (0: only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            objective: Objective::Ssl,
            out_dir: PathBuf::from("runs/default"),
            dataset: DatasetKind::ProceduralShapes,
            data_dir: None,
            n_train: 2000,
            n_eval: 500,
            classes: 10,
            image_size: (64, 64),
            stem_channels: 8,
            stage_channels: vec![8, 16, 32, 64],
            levels: 3,
            pyramid_channels: 32,
            head_convs: 2,
            proj_hidden: 128,
            embed_dim: 64,
            neck: Neck::Fpn,
            predictor_final_bn: false,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            tau: 0.2,
            mode: MatchMode::ToLargest,
            level_weights: LevelWeights::Halving,
            symmetric: true,
            adjacent_include_self: true,
            boundary_smoothing: None,
            aug_asymmetric: true,
            aug_view0: None,
            aug_view1: None,
            epochs: 30,
            warmup_epochs: 3,
            batch_size: 64,
            lr_scale: 1.0,
            weight_decay: 1e-5,
            trust_coefficient: 1e-3,
            momentum: 0.9,
            exclude_bias_and_norm: true,
            ema_base: 0.99,
            weight_rescale: None,
            probe_lr: 0.3,
            probe_epochs: 30,
            probe_momentum: 0.9,
            probe_batch: 256,
            probe_weight_decay: 0.0,
            log_every: 1,
            checkpoint_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.net().validate()?;
        self.optim().validate()?;
        self.loss().validate()?;
        self.loss().pairs(self.levels)?;
        self.level_weights.resolve(self.levels)?;
        for p in self.policies() {
            p.validate()?;
            p.validate_levels(self.levels)?;
            ensure!(p.out_size == self.image_size, "augmentation out_size {:?} differs from image_size {:?}", p.out_size, self.image_size);
        }
        self.dataset_spec().validate(self.levels)?;
        ensure!(self.batch_size >= 2, "batch_size must be at least 2");
        ensure!(self.n_train >= self.batch_size, "n_train {} is smaller than one batch", self.n_train);
        ensure!(self.epochs > 0, "epochs must be positive");
        ensure!((0.0..=1.0).contains(&self.ema_base), "ema_base must lie in [0, 1]");
        ensure!(self.log_every > 0, "log_every must be positive");
        ensure!(self.probe_batch > 0 && self.probe_epochs > 0, "probe_batch and probe_epochs must be positive");
        if let Some(k) = self.boundary_smoothing {
            ensure!(k > 0.0, "boundary_smoothing must be > 0");
        }
        if let Some(a) = self.weight_rescale {
            ensure!(a > 0.0, "weight_rescale must be > 0");
        }
        Ok(())
    }

    pub fn net(&self) -> NetConfig {
        NetConfig {
            in_channels: 3,
            stem_channels: self.stem_channels,
            stage_channels: self.stage_channels.clone(),
            pyramid_levels: self.levels,
            pyramid_channels: self.pyramid_channels,
            head_convs: self.head_convs,
            proj_hidden: self.proj_hidden,
            embed_dim: self.embed_dim,
            input_size: self.image_size,
            neck: self.neck,
            predictor_final_bn: self.predictor_final_bn,
            bn_momentum: self.bn_momentum,
            bn_eps: self.bn_eps,
        }
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            tau: self.tau,
            mode: self.mode,
            level_weights: self.level_weights.clone(),
            symmetric: self.symmetric,
            adjacent_include_self: self.adjacent_include_self,
        }
    }

    pub fn ssl(&self) -> SslConfig {
        SslConfig {
            loss: self.loss(),
            boundary_smoothing: self.boundary_smoothing,
        }
    }

    pub fn optim(&self) -> OptimConfig {
        OptimConfig {
            lr_scale: self.lr_scale,
            batch_size: self.batch_size,
            warmup_epochs: self.warmup_epochs,
            total_epochs: self.epochs,
            weight_decay: self.weight_decay,
            trust_coefficient: self.trust_coefficient,
            momentum: self.momentum,
            exclude_bias_and_norm: self.exclude_bias_and_norm,
        }
    }

    pub fn policies(&self) -> [AugPolicy; 2] {
        let pick = |over: &Option<AugPolicy>, v| over.clone().unwrap_or_else(|| AugPolicy::byol(self.image_size, v, self.aug_asymmetric));
        [pick(&self.aug_view0, 0), pick(&self.aug_view1, 1)]
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            kind: self.dataset,
            dir: self.data_dir.clone(),
            n_train: self.n_train,
            n_eval: self.n_eval,
            classes: self.classes,
            image_size: self.image_size,
            seed: self.seed,
        }
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.n_train / self.batch_size
    }

    pub fn total_steps(&self) -> usize {
        self.steps_per_epoch() * self.epochs
    }

    /// SHA-256 over everything that shapes the trajectory. Output and
    /// logging keys are left out so a run can be resumed elsewhere.
    pub fn hash(&self) -> String {
        let canonical = Self {
            out_dir: PathBuf::new(),
            log_every: 0,
            checkpoint_every: 0,
            ..self.clone()
        };
        let digest = Sha256::digest(canonical.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
