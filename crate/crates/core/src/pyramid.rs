//! Online/target networks: conv backbone, feature-pyramid neck, shared conv
//! head with per-tile average pooling, projector and predictor MLPs.
//!
//! An [`Encoder`] only describes the architecture (which parameter slot feeds
//! which layer). Values live in a [`ParamStore`]; the online and target
//! networks are two stores with identical layout.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{invalid, Error, Result};
use crate::montage::MontageBatch;
use crate::ops::{BnMode, Roi, RunningStats};
use crate::rng::SeededRng;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Neck {
    /// Lateral 1x1 convs, nearest 2x top-down path, 3x3 smoothing.
    Fpn,
    /// One 1x1 projection of the last stage, bilinearly resized per level.
    Interpolate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub in_channels: usize,
    pub stem_channels: usize,
    /// One entry per stride-2 stage.
    pub stage_channels: Vec<usize>,
    /// Number of pyramid maps `S`, taken from the last `S` stages.
    pub pyramid_levels: usize,
    pub pyramid_channels: usize,
    pub head_convs: usize,
    pub proj_hidden: usize,
    pub embed_dim: usize,
    pub input_size: (usize, usize),
    pub neck: Neck,
    pub predictor_final_bn: bool,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            stem_channels: 16,
            stage_channels: vec![16, 32, 64, 128],
            pyramid_levels: 3,
            pyramid_channels: 64,
            head_convs: 4,
            proj_hidden: 256,
            embed_dim: 64,
            input_size: (64, 64),
            neck: Neck::Fpn,
            predictor_final_bn: false,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }
}

impl NetConfig {
    /// Head and MLP widths of the original ResNet-50 setup.
    pub fn full_width() -> Self {
        Self {
            stem_channels: 64,
            stage_channels: vec![256, 512, 1024, 2048],
            pyramid_channels: 256,
            proj_hidden: 2048,
            embed_dim: 256,
            input_size: (224, 224),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.pyramid_levels;
        if s == 0 {
            return Err(invalid!("pyramid_levels must be >= 1"));
        }
        if self.stage_channels.len() < s {
            return Err(invalid!(
                "{} backbone stages cannot feed {s} pyramid levels",
                self.stage_channels.len()
            ));
        }
        let coarsest = self.stage_strides()[self.stage_channels.len() - 1];
        let (h, w) = self.input_size;
        if h % coarsest != 0 || w % coarsest != 0 {
            return Err(invalid!(
                "input {h}x{w} not divisible by the coarsest stride {coarsest}"
            ));
        }
        Ok(())
    }

    /// Output stride of each backbone stage (stem keeps full resolution).
    pub fn stage_strides(&self) -> Vec<usize> {
        (0..self.stage_channels.len()).map(|k| 2 << k).collect()
    }

    /// Strides of the pyramid maps, finest first.
    pub fn pyramid_strides(&self) -> Vec<usize> {
        let st = self.stage_strides();
        st[st.len() - self.pyramid_levels..].to_vec()
    }

    /// Feature cells `(h, w)` pooled per tile at montage level `s`.
    pub fn pooled_cells(&self, s: usize) -> Result<(usize, usize)> {
        let idx = assign_level(s, self.pyramid_levels)?;
        let stride = self.pyramid_strides()[idx] << s;
        Ok((self.input_size.0 / stride, self.input_size.1 / stride))
    }
}

/// Pyramid index (maps ordered finest first) for montage level `s`: a tile
/// downsampled by `2^s` reads the map whose stride is `2^s` times smaller
/// than the coarsest, i.e. index `S - 1 - s`.
pub fn assign_level(s: usize, levels: usize) -> Result<usize> {
    if s >= levels {
        return Err(invalid!("montage level {s} outside 0..{levels}"));
    }
    Ok(levels - 1 - s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    ConvWeight,
    LinearWeight,
    Bias,
    NormScale,
    NormShift,
}

impl ParamKind {
    pub fn is_weight(self) -> bool {
        matches!(self, ParamKind::ConvWeight | ParamKind::LinearWeight)
    }

    pub fn is_norm(self) -> bool {
        matches!(self, ParamKind::NormScale | ParamKind::NormShift)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormState<T> {
    pub name: String,
    pub stats: RunningStats<T>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    pub params: Vec<Param<T>>,
    pub norms: Vec<NormState<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Same names, kinds and shapes, parameter for parameter.
    pub fn congruent(&self, other: &Self) -> bool {
        self.params.len() == other.params.len()
            && self.norms.len() == other.norms.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.kind == b.kind && a.value.shape() == b.value.shape())
            && self
                .norms
                .iter()
                .zip(&other.norms)
                .all(|(a, b)| a.name == b.name && a.stats.mean.len() == b.stats.mean.len())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let cv = |v: &[T]| v.iter().map(|x| U::from_f64(x.to_f64().unwrap()).unwrap()).collect();
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    kind: p.kind,
                    value: p.value.cast(),
                })
                .collect(),
            norms: self
                .norms
                .iter()
                .map(|n| NormState {
                    name: n.name.clone(),
                    stats: RunningStats {
                        mean: cv(&n.stats.mean),
                        var: cv(&n.stats.var),
                    },
                })
                .collect(),
        }
    }

    /// Squared distance summed over all parameters.
    pub fn distance_sq(&self, other: &Self) -> f64 {
        self.params
            .iter()
            .zip(&other.params)
            .flat_map(|(a, b)| a.value.data().iter().zip(b.value.data()))
            .map(|(&x, &y)| (x - y).to_f64().unwrap().powi(2))
            .sum()
    }
}

// ---------------------------------------------------------------------------
// layout

#[derive(Debug, Clone)]
struct ConvBn {
    w: usize,
    gamma: usize,
    beta: usize,
    norm: usize,
    stride: usize,
}

#[derive(Debug, Clone)]
struct Conv {
    w: usize,
    b: usize,
    pad: usize,
}

#[derive(Debug, Clone)]
struct Bn1d {
    gamma: usize,
    beta: usize,
    norm: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct Dense {
    w: usize,
    b: Option<usize>,
}

#[derive(Debug, Clone)]
struct Mlp {
    fc1: Dense,
    bn1: Bn1d,
    fc2: Dense,
    bn2: Option<Bn1d>,
}

/// Collects parameter slots and their initial values.
pub(crate) struct Builder<T> {
    store: ParamStore<T>,
    seed: u64,
}

impl<T: Real> Builder<T> {
    pub(crate) fn new(seed: u64) -> Self {
        Self {
            store: ParamStore::default(),
            seed,
        }
    }

    fn add(&mut self, name: String, kind: ParamKind, value: Tensor<T>) -> usize {
        self.store.params.push(Param { name, kind, value });
        self.store.params.len() - 1
    }

    fn normal(&mut self, name: String, kind: ParamKind, shape: &[usize], std: f64) -> usize {
        let idx = self.store.params.len() as u64;
        let mut g = SeededRng::derive(self.seed, &[0x1417, idx]).generator();
        let dist = Normal::new(0.0, std).expect("finite std");
        let value = Tensor::from_fn(shape, |_| T::lit(dist.sample(&mut g)));
        self.add(name, kind, value)
    }

    fn conv_bn(&mut self, name: &str, cin: usize, cout: usize, stride: usize) -> ConvBn {
        let fan_in = (cin * 9) as f64;
        let w = self.normal(format!("{name}.conv.weight"), ParamKind::ConvWeight, &[cout, cin, 3, 3], (2.0 / fan_in).sqrt());
        let bn = self.bn(&format!("{name}.bn"), cout);
        ConvBn {
            w,
            gamma: bn.gamma,
            beta: bn.beta,
            norm: bn.norm,
            stride,
        }
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) -> Conv {
        let fan_in = (cin * k * k) as f64;
        let w = self.normal(format!("{name}.weight"), ParamKind::ConvWeight, &[cout, cin, k, k], (2.0 / fan_in).sqrt());
        let b = self.add(format!("{name}.bias"), ParamKind::Bias, Tensor::zeros(&[cout]));
        Conv { w, b, pad: k / 2 }
    }

    fn bn(&mut self, name: &str, c: usize) -> Bn1d {
        let gamma = self.add(format!("{name}.weight"), ParamKind::NormScale, Tensor::ones(&[c]));
        let beta = self.add(format!("{name}.bias"), ParamKind::NormShift, Tensor::zeros(&[c]));
        self.store.norms.push(NormState {
            name: name.to_string(),
            stats: RunningStats::fresh(c),
        });
        Bn1d {
            gamma,
            beta,
            norm: self.store.norms.len() - 1,
        }
    }

    pub(crate) fn dense(&mut self, name: &str, cin: usize, cout: usize, bias: bool, gain: f64) -> Dense {
        let w = self.normal(
            format!("{name}.weight"),
            ParamKind::LinearWeight,
            &[cout, cin],
            (gain / cin as f64).sqrt(),
        );
        let b = bias.then(|| self.add(format!("{name}.bias"), ParamKind::Bias, Tensor::zeros(&[cout])));
        Dense { w, b }
    }

    fn mlp(&mut self, name: &str, cin: usize, hidden: usize, out: usize, final_bn: bool) -> Mlp {
        // Layers followed by BN carry no bias; the final layer keeps one
        // unless a BN follows it.
        let fc1 = self.dense(&format!("{name}.fc1"), cin, hidden, false, 2.0);
        let bn1 = self.bn(&format!("{name}.bn1"), hidden);
        let fc2 = self.dense(&format!("{name}.fc2"), hidden, out, !final_bn, 1.0);
        let bn2 = final_bn.then(|| self.bn(&format!("{name}.bn2"), out));
        Mlp { fc1, bn1, fc2, bn2 }
    }

    pub(crate) fn finish(self) -> ParamStore<T> {
        self.store
    }
}

/// Feature maps of one forward pass, finest first.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub maps: Vec<Option<Var>>,
    pub strides: Vec<usize>,
}

impl FeaturePyramid {
    pub fn map(&self, idx: usize) -> Result<Var> {
        self.maps
            .get(idx)
            .copied()
            .flatten()
            .ok_or_else(|| invalid!("pyramid level {idx} was not computed"))
    }
}

/// Parameter slots bound into one graph.
#[derive(Debug, Clone)]
pub struct Bound {
    pub vars: Vec<Var>,
}

impl Bound {
    fn v(&self, i: usize) -> Var {
        self.vars[i]
    }
}

/// Registers every parameter of `store` as a leaf of `g`.
pub fn bind<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, trainable: bool) -> Bound {
    Bound {
        vars: store
            .params
            .iter()
            .map(|p| g.leaf(p.value.clone(), trainable))
            .collect(),
    }
}

/// Batch-norm behaviour for one forward pass.
pub struct NormCtx<'a, T> {
    pub mode: BnMode,
    pub stats: &'a mut [NormState<T>],
    /// Fold batch statistics into `stats` (train mode only).
    pub update: bool,
    pub momentum: T,
    pub eps: T,
}

impl<'a, T: Real> NormCtx<'a, T> {
    pub fn train(stats: &'a mut [NormState<T>], cfg: &NetConfig) -> Self {
        Self {
            mode: BnMode::Train,
            stats,
            update: true,
            momentum: T::lit(cfg.bn_momentum),
            eps: T::lit(cfg.bn_eps),
        }
    }

    pub fn eval(stats: &'a mut [NormState<T>], cfg: &NetConfig) -> Self {
        Self {
            mode: BnMode::Eval,
            update: false,
            ..Self::train(stats, cfg)
        }
    }

    /// Train-mode normalization that leaves the running statistics alone.
    pub fn frozen_train(stats: &'a mut [NormState<T>], cfg: &NetConfig) -> Self {
        Self {
            update: false,
            ..Self::train(stats, cfg)
        }
    }

    fn apply(&mut self, g: &mut Graph<T>, x: Var, gamma: Var, beta: Var, norm: usize) -> Result<Var> {
        let state = &mut self.stats[norm];
        let (y, batch) = g.batchnorm(x, gamma, beta, self.eps, self.mode, Some(&state.stats))?;
        if let (true, Some(b)) = (self.update, batch) {
            state.stats.update(&b.mean, &b.var_unbiased, self.momentum);
        }
        Ok(y)
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub cfg: NetConfig,
    stem: ConvBn,
    stages: Vec<ConvBn>,
    laterals: Vec<Conv>,
    smooth: Vec<Conv>,
    head: Vec<Conv>,
    projector: Option<Mlp>,
    predictor: Option<Mlp>,
}

impl Encoder {
    /// Builds the layout and a freshly initialized parameter store.
    pub fn init<T: Real>(cfg: &NetConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        let mut b = Builder::new(seed);
        let enc = Self::build(cfg, &mut b, true)?;
        Ok((enc, b.finish()))
    }

    /// Layout without projector and predictor.
    pub(crate) fn build<T: Real>(cfg: &NetConfig, b: &mut Builder<T>, mlps: bool) -> Result<Self> {
        cfg.validate()?;
        let stem = b.conv_bn("backbone.stem", cfg.in_channels, cfg.stem_channels, 1);
        let mut cin = cfg.stem_channels;
        let stages = cfg
            .stage_channels
            .iter()
            .enumerate()
            .map(|(k, &c)| {
                let s = b.conv_bn(&format!("backbone.stage{}", k + 1), cin, c, 2);
                cin = c;
                s
            })
            .collect();
        let k = cfg.stage_channels.len();
        let pc = cfg.pyramid_channels;
        let (laterals, smooth) = match cfg.neck {
            Neck::Fpn => {
                let lat = (k - cfg.pyramid_levels..k)
                    .enumerate()
                    .map(|(l, st)| b.conv(&format!("neck.lateral{l}"), cfg.stage_channels[st], pc, 1))
                    .collect();
                let sm = (0..cfg.pyramid_levels)
                    .map(|l| b.conv(&format!("neck.smooth{l}"), pc, pc, 3))
                    .collect();
                (lat, sm)
            }
            Neck::Interpolate => (vec![b.conv("neck.project", cfg.stage_channels[k - 1], pc, 1)], vec![]),
        };
        let head = (0..cfg.head_convs)
            .map(|i| b.conv(&format!("head.conv{i}"), pc, pc, 3))
            .collect();
        let projector = mlps.then(|| b.mlp("projector", pc, cfg.proj_hidden, cfg.embed_dim, true));
        let predictor =
            mlps.then(|| b.mlp("predictor", cfg.embed_dim, cfg.proj_hidden, cfg.embed_dim, cfg.predictor_final_bn));
        Ok(Self {
            cfg: cfg.clone(),
            stem,
            stages,
            laterals,
            smooth,
            head,
            projector,
            predictor,
        })
    }

    fn conv_bn<T: Real>(&self, g: &mut Graph<T>, p: &Bound, bn: &mut NormCtx<T>, l: &ConvBn, x: Var) -> Result<Var> {
        let y = g.conv2d(x, p.v(l.w), None, l.stride, 1)?;
        let y = bn.apply(g, y, p.v(l.gamma), p.v(l.beta), l.norm)?;
        Ok(g.relu(y))
    }

    fn conv<T: Real>(g: &mut Graph<T>, p: &Bound, l: &Conv, x: Var) -> Result<Var> {
        g.conv2d(x, p.v(l.w), Some(p.v(l.b)), 1, l.pad)
    }

    /// Outputs of every stride-2 stage.
    pub fn backbone<T: Real>(&self, g: &mut Graph<T>, p: &Bound, bn: &mut NormCtx<T>, x: Var) -> Result<Vec<Var>> {
        let shape = g.value(x).shape().to_vec();
        let coarsest = *self.cfg.stage_strides().last().unwrap();
        if shape.len() != 4 || shape[2] % coarsest != 0 || shape[3] % coarsest != 0 {
            return Err(invalid!(
                "input {shape:?} must be [B,C,H,W] with H, W divisible by {coarsest}"
            ));
        }
        let mut h = self.conv_bn(g, p, bn, &self.stem, x)?;
        let mut outs = Vec::with_capacity(self.stages.len());
        for st in &self.stages {
            h = self.conv_bn(g, p, bn, st, h)?;
            outs.push(h);
        }
        Ok(outs)
    }

    /// Pyramid maps from backbone stage outputs. With `only = Some(i)` just
    /// map `i` (and what it depends on) is computed.
    pub fn pyramid<T: Real>(&self, g: &mut Graph<T>, p: &Bound, stages: &[Var], only: Option<usize>) -> Result<FeaturePyramid> {
        let levels = self.cfg.pyramid_levels;
        let strides = self.cfg.pyramid_strides();
        let wanted = |l: usize| only.is_none_or(|o| o == l);
        let mut maps = vec![None; levels];
        let k = stages.len();
        match self.cfg.neck {
            Neck::Fpn => {
                let first = only.unwrap_or(0);
                let mut top: Option<Var> = None;
                for l in (first..levels).rev() {
                    let lat = Self::conv(g, p, &self.laterals[l], stages[k - levels + l])?;
                    let merged = match top {
                        Some(t) => {
                            let up = g.upsample_nearest2x(t)?;
                            g.add(lat, up)?
                        }
                        None => lat,
                    };
                    if wanted(l) {
                        maps[l] = Some(Self::conv(g, p, &self.smooth[l], merged)?);
                    }
                    top = Some(merged);
                }
            }
            Neck::Interpolate => {
                let base = Self::conv(g, p, &self.laterals[0], stages[k - 1])?;
                let shape = g.value(base).shape().to_vec();
                let coarse = strides[levels - 1];
                for (l, &st) in strides.iter().enumerate() {
                    if wanted(l) {
                        let f = coarse / st;
                        maps[l] = Some(g.bilinear_resize(base, shape[2] * f, shape[3] * f)?);
                    }
                }
            }
        }
        Ok(FeaturePyramid { maps, strides })
    }

    pub fn forward_pyramid<T: Real>(&self, g: &mut Graph<T>, p: &Bound, bn: &mut NormCtx<T>, x: Var) -> Result<FeaturePyramid> {
        let stages = self.backbone(g, p, bn, x)?;
        self.pyramid(g, p, &stages, None)
    }

    /// Shared conv head (conv + relu, repeated).
    pub fn head<T: Real>(&self, g: &mut Graph<T>, p: &Bound, mut x: Var) -> Result<Var> {
        for l in &self.head {
            let y = Self::conv(g, p, l, x)?;
            x = g.relu(y);
        }
        Ok(x)
    }

    /// Montage images -> head features of the assigned map -> per-tile
    /// average pool. Rows are ordered by source index.
    pub fn encode_montage<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        bn: &mut NormCtx<T>,
        mb: &MontageBatch<T>,
    ) -> Result<Var> {
        self.encode_tiles(g, p, bn, mb, true)
    }

    /// [`Self::encode_montage`] with a choice of row order, see
    /// [`pool_subimage_latents`].
    pub fn encode_tiles<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        bn: &mut NormCtx<T>,
        mb: &MontageBatch<T>,
        by_source: bool,
    ) -> Result<Var> {
        let idx = assign_level(mb.level, self.cfg.pyramid_levels)?;
        let x = g.constant(mb.images.clone());
        let stages = self.backbone(g, p, bn, x)?;
        let pyr = self.pyramid(g, p, &stages, Some(idx))?;
        let feat = self.head(g, p, pyr.map(idx)?)?;
        pool_subimage_latents(g, feat, pyr.strides[idx], mb, by_source)
    }

    pub fn project<T: Real>(&self, g: &mut Graph<T>, p: &Bound, bn: &mut NormCtx<T>, x: Var) -> Result<Var> {
        let m = self.projector.as_ref().ok_or_else(|| invalid!("encoder was built without a projector"))?;
        self.mlp(g, p, bn, m, x)
    }

    pub fn predict<T: Real>(&self, g: &mut Graph<T>, p: &Bound, bn: &mut NormCtx<T>, x: Var) -> Result<Var> {
        let m = self.predictor.as_ref().ok_or_else(|| invalid!("encoder was built without a predictor"))?;
        self.mlp(g, p, bn, m, x)
    }

    fn mlp<T: Real>(&self, g: &mut Graph<T>, p: &Bound, bn: &mut NormCtx<T>, m: &Mlp, x: Var) -> Result<Var> {
        let h = dense(g, p, &m.fc1, x)?;
        let h = bn.apply(g, h, p.v(m.bn1.gamma), p.v(m.bn1.beta), m.bn1.norm)?;
        let h = g.relu(h);
        let y = dense(g, p, &m.fc2, h)?;
        match &m.bn2 {
            Some(b) => bn.apply(g, y, p.v(b.gamma), p.v(b.beta), b.norm),
            None => Ok(y),
        }
    }

    /// `u = normalize(predictor(projector(pooled)))`.
    pub fn online_latents<T: Real>(&self, g: &mut Graph<T>, p: &Bound, bn: &mut NormCtx<T>, pooled: Var) -> Result<Var> {
        let z = self.project(g, p, bn, pooled)?;
        let q = self.predict(g, p, bn, z)?;
        g.l2_normalize(q)
    }

    /// `v = normalize(projector(pooled))`.
    pub fn target_latents<T: Real>(&self, g: &mut Graph<T>, p: &Bound, bn: &mut NormCtx<T>, pooled: Var) -> Result<Var> {
        let z = self.project(g, p, bn, pooled)?;
        g.l2_normalize(z)
    }

    /// Globally pooled last-stage backbone features `[B, C_last]`.
    pub fn backbone_features<T: Real>(&self, g: &mut Graph<T>, p: &Bound, bn: &mut NormCtx<T>, x: Var) -> Result<Var> {
        let stages = self.backbone(g, p, bn, x)?;
        g.global_avg_pool(*stages.last().unwrap())
    }

    /// Parameter slots that belong to the backbone (stem and stages).
    pub fn backbone_params<T: Real>(&self, store: &ParamStore<T>) -> Vec<usize> {
        (0..store.params.len())
            .filter(|&i| store.params[i].name.starts_with("backbone."))
            .collect()
    }
}

pub(crate) fn dense<T: Real>(g: &mut Graph<T>, p: &Bound, d: &Dense, x: Var) -> Result<Var> {
    g.linear(x, p.v(d.w), d.b.map(|b| p.v(b)))
}

/// Average-pools every tile of `mb` from `fmap` (stride `stride` relative to
/// the montage). With `by_source` row `b` is source image `b`; otherwise rows
/// follow tile slots.
pub fn pool_subimage_latents<T: Real>(
    g: &mut Graph<T>,
    fmap: Var,
    stride: usize,
    mb: &MontageBatch<T>,
    by_source: bool,
) -> Result<Var> {
    let order: Vec<usize> = if by_source {
        mb.slot_of()
    } else {
        (0..mb.batch_size()).collect()
    };
    let shape = g.value(fmap).shape().to_vec();
    let rois = order
        .iter()
        .map(|&slot| {
            let t = mb.tiles[slot];
            let b = t.bx;
            if [b.x0, b.y0, b.x1, b.y1].iter().any(|c| c % stride != 0) {
                return Err(invalid!("tile {b:?} does not align with feature stride {stride}"));
            }
            let roi = Roi {
                image: t.montage,
                x0: b.x0 / stride,
                y0: b.y0 / stride,
                x1: b.x1 / stride,
                y1: b.y1 / stride,
            };
            if roi.x1 > shape[3] || roi.y1 > shape[2] {
                return Err(invalid!("tile {b:?} falls outside the {}x{} map", shape[2], shape[3]));
            }
            Ok(roi)
        })
        .collect::<Result<Vec<_>>>()?;
    g.roi_avg_pool(fmap, rois)
}

/// `target <- m target + (1 - m) online`, parameters and running statistics.
pub fn ema_update<T: Real>(target: &mut ParamStore<T>, online: &ParamStore<T>, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(invalid!("EMA momentum {m} outside [0, 1]"));
    }
    if !target.congruent(online) {
        return Err(Error::Shape("online and target stores differ in layout".into()));
    }
    let (keep, take) = (T::lit(m), T::one() - T::lit(m));
    let blend = |t: &mut [T], o: &[T]| t.iter_mut().zip(o).for_each(|(a, &b)| *a = keep * *a + take * b);
    for (t, o) in target.params.iter_mut().zip(&online.params) {
        blend(t.value.data_mut(), o.value.data());
    }
    for (t, o) in target.norms.iter_mut().zip(&online.norms) {
        blend(&mut t.stats.mean, &o.stats.mean);
        blend(&mut t.stats.var, &o.stats.var);
    }
    Ok(())
}

/// Cosine ramp of the EMA momentum from `m0` at step 0 to 1 at `total`.
pub fn momentum_schedule(step: usize, total: usize, m0: f64) -> f64 {
    if total == 0 {
        return 1.0;
    }
    let progress = step.min(total) as f64 / total as f64;
    let ramp = (1.0 - (std::f64::consts::PI * progress).cos()) / 2.0;
    (m0 + (1.0 - m0) * ramp).min(1.0)
}

/// Online and target stores sharing one layout.
#[derive(Debug, Clone)]
pub struct NetworkPair<T> {
    pub encoder: Encoder,
    pub online: ParamStore<T>,
    pub target: ParamStore<T>,
}

impl<T: Real> NetworkPair<T> {
    /// Target starts as an exact copy of the online network.
    pub fn new(cfg: &NetConfig, seed: u64) -> Result<Self> {
        let (encoder, online) = Encoder::init(cfg, seed)?;
        Ok(Self {
            encoder,
            target: online.clone(),
            online,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::montage::assemble;

    fn tiny() -> NetConfig {
        NetConfig {
            stem_channels: 4,
            stage_channels: vec![4, 6, 8, 8],
            pyramid_levels: 3,
            pyramid_channels: 6,
            head_convs: 2,
            proj_hidden: 12,
            embed_dim: 5,
            input_size: (64, 64),
            ..NetConfig::default()
        }
    }

    fn input(b: usize, h: usize) -> Tensor<f32> {
        Tensor::from_fn(&[b, 3, h, h], |i| ((i * 7919) % 97) as f32 / 97.0)
    }

    #[test]
    fn level_assignment() {
        assert_eq!(assign_level(0, 3).unwrap(), 2);
        assert_eq!(assign_level(2, 3).unwrap(), 0);
        assert_eq!(assign_level(0, 1).unwrap(), 0);
        assert!(assign_level(3, 3).is_err());
    }

    #[test]
    fn pyramid_shapes() {
        let cfg = tiny();
        assert_eq!(cfg.pyramid_strides(), vec![4, 8, 16]);
        let (enc, store) = Encoder::init::<f32>(&cfg, 0).unwrap();
        let mut store = store;
        let mut g = Graph::no_grad();
        let p = bind(&mut g, &store, false);
        let mut bn = NormCtx::train(&mut store.norms, &cfg);
        let x = g.constant(input(2, 64));
        let pyr = enc.forward_pyramid(&mut g, &p, &mut bn, x).unwrap();
        let sizes: Vec<_> = pyr
            .maps
            .iter()
            .map(|m| g.value(m.unwrap()).shape().to_vec())
            .collect();
        assert_eq!(sizes, vec![vec![2, 6, 16, 16], vec![2, 6, 8, 8], vec![2, 6, 4, 4]]);
    }

    #[test]
    fn single_level_matches_full_pyramid() {
        let cfg = tiny();
        let (enc, mut store) = Encoder::init::<f64>(&cfg, 1).unwrap();
        let mut g = Graph::no_grad();
        let p = bind(&mut g, &store, false);
        let mut bn = NormCtx::frozen_train(&mut store.norms, &cfg);
        let x = g.constant(input(2, 64).cast());
        let stages = enc.backbone(&mut g, &p, &mut bn, x).unwrap();
        let full = enc.pyramid(&mut g, &p, &stages, None).unwrap();
        for l in 0..3 {
            let one = enc.pyramid(&mut g, &p, &stages, Some(l)).unwrap();
            assert_eq!(g.value(one.map(l).unwrap()), g.value(full.map(l).unwrap()));
        }
    }

    #[test]
    fn interpolated_pyramid_resizes_last_stage() {
        let cfg = NetConfig {
            neck: Neck::Interpolate,
            ..tiny()
        };
        let (enc, mut store) = Encoder::init::<f64>(&cfg, 2).unwrap();
        let mut g = Graph::no_grad();
        let p = bind(&mut g, &store, false);
        let mut bn = NormCtx::train(&mut store.norms, &cfg);
        let x = g.constant(input(1, 64).cast());
        let pyr = enc.forward_pyramid(&mut g, &p, &mut bn, x).unwrap();
        let coarse = g.value(pyr.map(2).unwrap()).clone();
        for (l, size) in [(0, 16), (1, 8)] {
            let want = crate::ops::bilinear_resize(&coarse, size, size).unwrap();
            assert_eq!(g.value(pyr.map(l).unwrap()), &want);
        }
    }

    #[test]
    fn single_level_pyramid() {
        let cfg = NetConfig {
            pyramid_levels: 1,
            ..tiny()
        };
        let (enc, mut store) = Encoder::init::<f32>(&cfg, 3).unwrap();
        let mut g = Graph::no_grad();
        let p = bind(&mut g, &store, false);
        let mut bn = NormCtx::train(&mut store.norms, &cfg);
        let x = g.constant(input(2, 64));
        let pyr = enc.forward_pyramid(&mut g, &p, &mut bn, x).unwrap();
        assert_eq!(pyr.maps.len(), 1);
        assert_eq!(pyr.strides, vec![16]);
    }

    #[test]
    fn scale_alignment_is_constant() {
        for levels in 1..=4 {
            let cfg = NetConfig {
                pyramid_levels: levels,
                ..tiny()
            };
            let cells: Vec<_> = (0..levels).map(|s| cfg.pooled_cells(s).unwrap()).collect();
            assert!(cells.iter().all(|&c| c == cells[0]), "{cells:?}");
            assert_eq!(cells[0], (4, 4));
        }
    }

    #[test]
    fn quadrant_pooling_follows_sources() {
        let mb = assemble(&Tensor::<f64>::zeros(&[4, 1, 4, 4]), 1, SeededRng::new(3, 3)).unwrap();
        // feature map whose quadrants hold the source index of the tile there
        let mut fmap = Tensor::<f64>::zeros(&[1, 1, 4, 4]);
        for (slot, t) in mb.tiles.iter().enumerate() {
            for y in t.bx.y0..t.bx.y1 {
                for x in t.bx.x0..t.bx.x1 {
                    fmap.set(&[0, 0, y, x], mb.src_ids[slot] as f64 + 10.0);
                }
            }
        }
        let mut g = Graph::no_grad();
        let f = g.constant(fmap);
        let pooled = pool_subimage_latents(&mut g, f, 1, &mb, true).unwrap();
        assert_eq!(g.value(pooled).data(), &[10.0, 11.0, 12.0, 13.0]);
    }

    #[test]
    fn constant_map_pools_to_constant() {
        let mb = assemble(&Tensor::<f64>::zeros(&[16, 1, 16, 16]), 2, SeededRng::new(0, 1)).unwrap();
        let mut g = Graph::no_grad();
        let f = g.constant(Tensor::full(&[1, 3, 8, 8], 0.7));
        let pooled = pool_subimage_latents(&mut g, f, 2, &mb, true).unwrap();
        assert_eq!(g.value(pooled).shape(), &[16, 3]);
        assert!(g.value(pooled).data().iter().all(|&v| v == 0.7));
        assert!(pool_subimage_latents(&mut g, f, 3, &mb, true).is_err());
    }

    #[test]
    fn latents_are_unit_and_asymmetric() {
        let cfg = tiny();
        let mut pair = NetworkPair::<f64>::new(&cfg, 4).unwrap();
        let x = input(16, 64).cast::<f64>();
        let mb = assemble(&x, 1, SeededRng::new(1, 1)).unwrap();

        let mut g = Graph::new();
        let p = bind(&mut g, &pair.online, true);
        let mut bn = NormCtx::train(&mut pair.online.norms, &cfg);
        let pooled = pair.encoder.encode_montage(&mut g, &p, &mut bn, &mb).unwrap();
        let u = pair.encoder.online_latents(&mut g, &p, &mut bn, pooled).unwrap();

        let mut tg = Graph::no_grad();
        let tp = bind(&mut tg, &pair.target, false);
        let mut tbn = NormCtx::frozen_train(&mut pair.target.norms, &cfg);
        let tpooled = pair.encoder.encode_montage(&mut tg, &tp, &mut tbn, &mb).unwrap();
        let v = pair.encoder.target_latents(&mut tg, &tp, &mut tbn, tpooled).unwrap();

        for t in [g.value(u), tg.value(v)] {
            for row in t.data().chunks(cfg.embed_dim) {
                let n: f64 = row.iter().map(|a| a * a).sum::<f64>().sqrt();
                assert!((n - 1.0).abs() < 1e-6);
            }
        }
        assert_ne!(g.value(u), tg.value(v));
        assert_eq!(tg.tracked_nodes(), 0);
    }

    #[test]
    fn ema_endpoints() {
        let cfg = tiny();
        let (_, online) = Encoder::init::<f64>(&cfg, 5).unwrap();
        let (_, base) = Encoder::init::<f64>(&cfg, 6).unwrap();

        let mut t = base.clone();
        ema_update(&mut t, &online, 1.0).unwrap();
        assert_eq!(t, base);

        let mut t = base.clone();
        ema_update(&mut t, &online, 0.0).unwrap();
        assert_eq!(t.params, online.params);

        let mut z = online.clone();
        z.params.iter_mut().for_each(|p| p.value = Tensor::zeros(p.value.shape()));
        let mut one = online.clone();
        one.params.iter_mut().for_each(|p| p.value = Tensor::ones(p.value.shape()));
        ema_update(&mut z, &one, 0.99).unwrap();
        assert!(z.params.iter().all(|p| p.value.data().iter().all(|&v| (v - 0.01).abs() < 1e-15)));
        assert!(ema_update(&mut z, &one, 1.5).is_err());
    }

    #[test]
    fn ema_contracts() {
        let cfg = tiny();
        let (_, online) = Encoder::init::<f64>(&cfg, 7).unwrap();
        let (_, mut target) = Encoder::init::<f64>(&cfg, 8).unwrap();
        let mut last = target.distance_sq(&online);
        for _ in 0..10 {
            ema_update(&mut target, &online, 0.9).unwrap();
            let d = target.distance_sq(&online);
            assert!(d < last);
            last = d;
        }
        assert!(target.congruent(&online));
    }

    #[test]
    fn momentum_schedule_values() {
        assert_eq!(momentum_schedule(0, 100, 0.99), 0.99);
        assert_eq!(momentum_schedule(100, 100, 0.99), 1.0);
        assert!((momentum_schedule(50, 100, 0.99) - 0.995).abs() < 1e-12);
    }
}
