//! Multi-level InfoNCE.
//!
//! Latents are unit rows aligned by source image: row `b` of every level of
//! both views comes from batch image `b`. A query row's positive is the same
//! row of the target level; the other rows of that target level are its
//! negatives.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{invalid, Error, Result};
use crate::ops::log_sum_exp;
use crate::tensor::{Real, Tensor};

/// Which (query level, target level) pairs are matched.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MatchMode {
    /// (a) every level targets the full-resolution view.
    #[serde(rename = "a")]
    ToLargest,
    /// (b) every level targets its counterpart level.
    #[serde(rename = "b")]
    SameLevel,
    /// (c) neighbouring levels.
    #[serde(rename = "c")]
    AdjacentLevels,
    /// (d) all pairs.
    #[serde(rename = "d")]
    DenseAll,
}

impl MatchMode {
    pub const ALL: [MatchMode; 4] = [Self::ToLargest, Self::SameLevel, Self::AdjacentLevels, Self::DenseAll];

    pub fn letter(self) -> char {
        match self {
            Self::ToLargest => 'a',
            Self::SameLevel => 'b',
            Self::AdjacentLevels => 'c',
            Self::DenseAll => 'd',
        }
    }
}

impl fmt::Display for MatchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

impl FromStr for MatchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "a" | "to-largest" => Ok(Self::ToLargest),
            "b" | "same-level" => Ok(Self::SameLevel),
            "c" | "adjacent" => Ok(Self::AdjacentLevels),
            "d" | "dense" => Ok(Self::DenseAll),
            _ => Err(invalid!("unknown match mode {s:?}, expected one of a, b, c, d")),
        }
    }
}

/// Per-level loss weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LevelWeights {
    /// `1 / 2^(i+1)` for level `i`.
    Halving,
    Uniform,
    Custom(Vec<f64>),
}

impl LevelWeights {
    pub fn resolve(&self, levels: usize) -> Result<Vec<f64>> {
        let w = match self {
            Self::Halving => (0..levels).map(|i| 0.5f64.powi(i as i32 + 1)).collect(),
            Self::Uniform => vec![1.0; levels],
            Self::Custom(w) if w.len() == levels => w.clone(),
            Self::Custom(w) => return Err(invalid!("{} level weights given for {levels} levels", w.len())),
        };
        if let Some(bad) = w.iter().find(|&&x| !(x > 0.0 && x.is_finite())) {
            return Err(invalid!("level weight {bad} must be positive"));
        }
        Ok(w)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub tau: f64,
    pub mode: MatchMode,
    pub level_weights: LevelWeights,
    pub symmetric: bool,
    /// Whether mode (c) also pairs each level with itself.
    pub adjacent_include_self: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.2,
            mode: MatchMode::ToLargest,
            level_weights: LevelWeights::Halving,
            symmetric: true,
            adjacent_include_self: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(invalid!("temperature must be positive, got {}", self.tau));
        }
        if let LevelWeights::Custom(w) = &self.level_weights {
            LevelWeights::Custom(w.clone()).resolve(w.len())?;
        }
        Ok(())
    }

    pub fn pairs(&self, levels: usize) -> Result<Vec<(usize, usize)>> {
        pair_levels(self.mode, levels, self.adjacent_include_self)
    }
}

/// Sorted `(query_level, target_level)` pairs for `levels` montage levels.
///
/// Without the self pair, mode (c) at a single level falls back to `(0, 0)`
/// so that every configuration has at least one term.
pub fn pair_levels(mode: MatchMode, levels: usize, adjacent_include_self: bool) -> Result<Vec<(usize, usize)>> {
    if levels == 0 {
        return Err(invalid!("at least one level is required"));
    }
    let all = (0..levels).flat_map(|q| (0..levels).map(move |t| (q, t)));
    let pairs: Vec<_> = match mode {
        MatchMode::ToLargest => (0..levels).map(|q| (q, 0)).collect(),
        MatchMode::SameLevel => (0..levels).map(|q| (q, q)).collect(),
        MatchMode::AdjacentLevels if levels == 1 => vec![(0, 0)],
        MatchMode::AdjacentLevels => all
            .filter(|&(q, t)| q.abs_diff(t) == 1 || (adjacent_include_self && q == t))
            .collect(),
        MatchMode::DenseAll => all.collect(),
    };
    Ok(pairs)
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

fn check_unit<T: Real>(row: &[T], what: &str) -> Result<()> {
    let n = dot(row, row).sqrt().to_f64().unwrap_or(f64::NAN);
    if (n - 1.0).abs() > 1e-3 {
        return Err(invalid!("{what} has norm {n}, expected a unit vector"));
    }
    Ok(())
}

/// `-log(exp(u.v+/tau) / (exp(u.v+/tau) + sum exp(u.v-/tau)))` for one query.
///
/// With no negatives the value degenerates to 0; this is logged because the
/// term then carries no contrastive signal.
pub fn info_nce<T: Real>(u: &[T], v_pos: &[T], v_negs: &[&[T]], tau: T) -> Result<T> {
    if tau <= T::zero() {
        return Err(invalid!("temperature must be positive, got {tau}"));
    }
    if v_pos.len() != u.len() || v_negs.iter().any(|v| v.len() != u.len()) {
        return Err(Error::Shape("info_nce vectors differ in length".into()));
    }
    check_unit(u, "query")?;
    check_unit(v_pos, "positive")?;
    for v in v_negs {
        check_unit(v, "negative")?;
    }
    if v_negs.is_empty() {
        log::warn!("info_nce evaluated without negatives");
        return Ok(T::zero());
    }
    let pos = dot(u, v_pos) / tau;
    let logits: Vec<T> = std::iter::once(pos).chain(v_negs.iter().map(|v| dot(u, v) / tau)).collect();
    Ok(log_sum_exp(&logits) - pos)
}

fn check_pair<T: Real>(u: &Tensor<T>, v: &Tensor<T>) -> Result<usize> {
    if u.ndim() != 2 || u.shape() != v.shape() {
        return Err(Error::Shape(format!(
            "latent sets must both be [B, D], got {:?} and {:?}",
            u.shape(),
            v.shape()
        )));
    }
    let b = u.dim(0);
    if b < 2 {
        return Err(invalid!("batch of {b} leaves no negatives; need B >= 2"));
    }
    Ok(b)
}

/// Mean InfoNCE over query rows, evaluated row by row with [`info_nce`].
pub fn level_pair_loss_ref<T: Real>(u: &Tensor<T>, v: &Tensor<T>, tau: T) -> Result<T> {
    let b = check_pair(u, v)?;
    let mut total = T::zero();
    for i in 0..b {
        let negs: Vec<&[T]> = (0..b).filter(|&j| j != i).map(|j| v.slab(j)).collect();
        total += info_nce(u.slab(i), v.slab(i), &negs, tau)?;
    }
    Ok(total / T::lit(b as f64))
}

/// Graph version of [`level_pair_loss_ref`]: cross-entropy of `U V^T / tau`
/// against the diagonal.
pub fn level_pair_loss<T: Real>(g: &mut Graph<T>, u: Var, v: Var, tau: T) -> Result<Var> {
    let b = check_pair(g.value(u), g.value(v))?;
    let sim = g.matmul(u, v, true)?;
    let logits = g.scale(sim, T::one() / tau);
    let labels: Vec<usize> = (0..b).collect();
    g.softmax_cross_entropy(logits, &labels)
}

/// Per-level latents of one view. `online[s]` / `target[s]` is `None` for
/// levels that were not computed.
#[derive(Debug, Clone, Default)]
pub struct ViewLatents {
    pub online: Vec<Option<Var>>,
    pub target: Vec<Option<Var>>,
}

impl ViewLatents {
    fn get(set: &[Option<Var>], level: usize, what: &str) -> Result<Var> {
        set.get(level).copied().flatten().ok_or_else(|| {
            log::error!("{what} latents missing for level {level}");
            Error::MissingLevel(level)
        })
    }
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub total: Var,
    /// Unweighted sum of the terms whose query is level `i` (both directions).
    pub per_level: Vec<f64>,
    pub weights: Vec<f64>,
    /// Mean query/positive cosine over every term.
    pub pos_cos: f64,
    /// Mean query/negative cosine over every term.
    pub neg_cos: f64,
}

fn cosine_stats<T: Real>(u: &Tensor<T>, v: &Tensor<T>) -> (f64, f64) {
    let b = u.dim(0);
    let (mut pos, mut neg) = (0.0, 0.0);
    for i in 0..b {
        for j in 0..b {
            let c = dot(u.slab(i), v.slab(j)).to_f64().unwrap();
            if i == j {
                pos += c;
            } else {
                neg += c;
            }
        }
    }
    (pos / b as f64, neg / (b * (b - 1)) as f64)
}

/// `L_u = sum_(q,t) w_q l(U1[q], V2[t])`, mirrored for `L_v`; the total is
/// `L_u + L_v` when symmetric.
pub fn total_loss<T: Real>(
    g: &mut Graph<T>,
    view1: &ViewLatents,
    view2: &ViewLatents,
    levels: usize,
    cfg: &LossConfig,
) -> Result<LossOutput> {
    cfg.validate()?;
    let pairs = cfg.pairs(levels)?;
    let weights = cfg.level_weights.resolve(levels)?;
    let tau = T::lit(cfg.tau);
    let mut directions = vec![(view1, view2)];
    if cfg.symmetric {
        directions.push((view2, view1));
    }
    let mut terms = Vec::with_capacity(pairs.len() * directions.len());
    let mut per_level = vec![0.0; levels];
    let (mut pos, mut neg) = (0.0, 0.0);
    for &(query, key) in &directions {
        for &(q, t) in &pairs {
            let u = ViewLatents::get(&query.online, q, "online")?;
            let v = ViewLatents::get(&key.target, t, "target")?;
            let l = level_pair_loss(g, u, v, tau)?;
            per_level[q] += g.value(l).item().to_f64().unwrap();
            let (p, n) = cosine_stats(g.value(u), g.value(v));
            pos += p;
            neg += n;
            terms.push((l, T::lit(weights[q])));
        }
    }
    let count = terms.len() as f64;
    let total = g.weighted_sum(&terms)?;
    Ok(LossOutput {
        total,
        per_level,
        weights,
        pos_cos: pos / count,
        neg_cos: neg / count,
    })
}
