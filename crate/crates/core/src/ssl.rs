//! One self-supervised step: montages of both views at every level, online
//! and target forward passes, the multi-level loss, LARS and the EMA update.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph};
use crate::error::{invalid, Error, Result};
use crate::loss::{total_loss, LossConfig, LossOutput, ViewLatents};
use crate::montage::{assemble_with, MontageBatch};
use crate::optim::Lars;
use crate::pyramid::{bind, ema_update, Bound, NetworkPair, NormCtx};
use crate::rng::SeededRng;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SslConfig {
    pub loss: LossConfig,
    /// Gaussian boundary-mask width `k`; `None` disables smoothing.
    pub boundary_smoothing: Option<f64>,
}

impl Default for SslConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig::default(),
            boundary_smoothing: None,
        }
    }
}

/// Number of leading montage levels a batch of `batch` images can fill.
pub fn active_levels(batch: usize, levels: usize) -> usize {
    (0..levels).take_while(|&s| batch >= 1 << (2 * s)).count()
}

/// Montages of `view` at levels `0..levels`, level `s` shuffled by
/// `rng.child(s)`.
pub fn view_montages<T: Real>(
    view: &Tensor<T>,
    levels: usize,
    rng: SeededRng,
    smoothing: Option<f64>,
) -> Result<Vec<MontageBatch<T>>> {
    (0..levels)
        .map(|s| assemble_with(view, s, rng.child(s as u64), smoothing))
        .collect()
}

/// The online graph with the loss recorded on it.
pub struct LossGraph<T> {
    pub graph: Graph<T>,
    /// Online parameters as bound into `graph`.
    pub online: Bound,
    pub loss: LossOutput,
    pub levels: usize,
}

impl<T: Real> LossGraph<T> {
    pub fn total(&self) -> T {
        self.graph.value(self.loss.total).item()
    }

    /// Gradients of the online parameters, in store order.
    pub fn backward(&self) -> Result<Vec<Option<Tensor<T>>>> {
        let mut grads: Gradients<T> = self.graph.backward(self.loss.total)?;
        Ok(self.online.vars.iter().map(|&v| grads.take(v)).collect())
    }
}

/// Forward pass of both networks on two augmented views.
///
/// The target runs in a value-only graph with train-mode normalization that
/// leaves its running statistics alone; its latents enter the online graph
/// as constants. Online running statistics are updated when `update_stats`.
pub fn forward_loss<T: Real>(
    pair: &mut NetworkPair<T>,
    views: [&Tensor<T>; 2],
    cfg: &SslConfig,
    rng: SeededRng,
    update_stats: bool,
) -> Result<LossGraph<T>> {
    let net = &pair.encoder.cfg;
    let batch = views[0].dim(0);
    if views[1].shape() != views[0].shape() {
        return Err(Error::Shape(format!(
            "views differ in shape: {:?} vs {:?}",
            views[0].shape(),
            views[1].shape()
        )));
    }
    let levels = active_levels(batch, net.pyramid_levels);
    if levels < net.pyramid_levels {
        log::warn!(
            "batch of {batch} fills only {levels} of {} montage levels; the rest are skipped",
            net.pyramid_levels
        );
    }
    if levels == 0 {
        return Err(invalid!("empty batch"));
    }

    let mut g = Graph::new();
    let online = bind(&mut g, &pair.online, true);
    let mut tg = Graph::no_grad();
    let target = bind(&mut tg, &pair.target, false);
    let mut latents = [ViewLatents::default(), ViewLatents::default()];
    for (v, view) in views.iter().enumerate() {
        let montages = view_montages(view, levels, rng.child(v as u64), cfg.boundary_smoothing)?;
        for mb in &montages {
            let u = {
                let mut bn = if update_stats {
                    NormCtx::train(&mut pair.online.norms, net)
                } else {
                    NormCtx::frozen_train(&mut pair.online.norms, net)
                };
                let pooled = pair.encoder.encode_montage(&mut g, &online, &mut bn, mb)?;
                pair.encoder.online_latents(&mut g, &online, &mut bn, pooled)?
            };
            let z = {
                let mut bn = NormCtx::frozen_train(&mut pair.target.norms, net);
                let pooled = pair.encoder.encode_montage(&mut tg, &target, &mut bn, mb)?;
                pair.encoder.target_latents(&mut tg, &target, &mut bn, pooled)?
            };
            latents[v].online.push(Some(u));
            let z = g.constant(tg.value(z).clone());
            latents[v].target.push(Some(z));
        }
    }
    let loss = total_loss(&mut g, &latents[0], &latents[1], levels, &cfg.loss)?;
    Ok(LossGraph {
        graph: g,
        online,
        loss,
        levels,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub total: f64,
    /// Unweighted loss per query level (both directions summed).
    pub per_level: Vec<f64>,
    pub weights: Vec<f64>,
    pub pos_cos: f64,
    pub neg_cos: f64,
    pub levels: usize,
}

/// Forward, backward, LARS with learning rate `lr`, then EMA with `ema_m`.
/// Nothing is modified if the loss or any gradient is not finite.
pub fn ssl_step<T: Real>(
    pair: &mut NetworkPair<T>,
    opt: &mut Lars<T>,
    views: [&Tensor<T>; 2],
    cfg: &SslConfig,
    lr: f64,
    ema_m: f64,
    rng: SeededRng,
) -> Result<StepOutcome> {
    let norms_before = pair.online.norms.clone();
    let lg = forward_loss(pair, views, cfg, rng, true)?;
    let total = lg.total().to_f64().unwrap();
    let outcome = StepOutcome {
        total,
        per_level: lg.loss.per_level.clone(),
        weights: lg.loss.weights.clone(),
        pos_cos: lg.loss.pos_cos,
        neg_cos: lg.loss.neg_cos,
        levels: lg.levels,
    };
    let grads = if total.is_finite() { lg.backward() } else { Err(Error::NonFinite("loss".into())) };
    let grads = match grads {
        Ok(g) => g,
        Err(e) => {
            pair.online.norms = norms_before;
            return Err(e);
        }
    };
    if let Err(e) = opt.step(&mut pair.online, &grads, lr) {
        pair.online.norms = norms_before;
        return Err(e);
    }
    ema_update(&mut pair.target, &pair.online, ema_m)?;
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::MatchMode;
    use crate::optim::OptimConfig;
    use crate::pyramid::NetConfig;

    pub(crate) fn tiny() -> NetConfig {
        NetConfig {
            in_channels: 3,
            stem_channels: 3,
            stage_channels: vec![4, 4],
            pyramid_levels: 2,
            pyramid_channels: 4,
            head_convs: 1,
            proj_hidden: 6,
            embed_dim: 4,
            input_size: (16, 16),
            ..NetConfig::default()
        }
    }

    fn views(b: usize) -> [Tensor<f64>; 2] {
        let f = |k: f64| Tensor::from_fn(&[b, 3, 16, 16], move |i| ((i as f64 * 0.013 + k).sin() + 1.0) / 2.0);
        [f(0.0), f(1.7)]
    }

    #[test]
    fn level_capacity() {
        assert_eq!(active_levels(64, 3), 3);
        assert_eq!(active_levels(8, 3), 2);
        assert_eq!(active_levels(1, 3), 1);
        assert_eq!(active_levels(0, 3), 0);
    }

    #[test]
    fn target_gets_no_gradient() {
        let mut pair = NetworkPair::<f64>::new(&tiny(), 3).unwrap();
        let [a, b] = views(4);
        let lg = forward_loss(&mut pair, [&a, &b], &SslConfig::default(), SeededRng::new(1, 0), true).unwrap();
        let mut grads = lg.graph.backward(lg.loss.total).unwrap();
        // target latents are constants: untracked and without gradient
        let consts = (0..lg.graph.len()).filter(|&i| !lg.online.vars.iter().any(|v| v.index() == i));
        assert!(consts.count() > 0);
        let online_grads: Vec<_> = lg.online.vars.iter().map(|&v| grads.take(v)).collect();
        assert!(online_grads.iter().all(|g| g.is_some()));
    }

    #[test]
    fn step_leaves_target_to_ema() {
        let mut pair = NetworkPair::<f64>::new(&tiny(), 3).unwrap();
        let init = pair.clone();
        let mut opt = Lars::new(OptimConfig::default(), &pair.online).unwrap();
        let [a, b] = views(4);
        let out = ssl_step(&mut pair, &mut opt, [&a, &b], &SslConfig::default(), 0.0, 0.99, SeededRng::new(1, 0)).unwrap();
        assert!(out.total.is_finite());
        // lr = 0 keeps the online parameters
        assert_eq!(pair.online.params, init.online.params);
        // EMA of identical params leaves them in place, up to rounding
        assert!(pair.target.distance_sq(&init.target) < 1e-28);
        // but running statistics moved online and were blended into the target
        assert_ne!(pair.online.norms, init.online.norms);
        assert_ne!(pair.target.norms, init.target.norms);
    }

    #[test]
    fn training_moves_target_towards_online() {
        let mut pair = NetworkPair::<f64>::new(&tiny(), 3).unwrap();
        let mut opt = Lars::new(OptimConfig::default(), &pair.online).unwrap();
        let [a, b] = views(4);
        ssl_step(&mut pair, &mut opt, [&a, &b], &SslConfig::default(), 1.0, 0.5, SeededRng::new(1, 0)).unwrap();
        let after_step = pair.online.distance_sq(&pair.target);
        assert!(after_step > 0.0);
    }

    #[test]
    fn all_modes_produce_finite_losses() {
        for mode in MatchMode::ALL {
            let mut pair = NetworkPair::<f64>::new(&tiny(), 5).unwrap();
            let cfg = SslConfig {
                loss: LossConfig {
                    mode,
                    ..LossConfig::default()
                },
                boundary_smoothing: Some(0.5),
            };
            let [a, b] = views(4);
            let lg = forward_loss(&mut pair, [&a, &b], &cfg, SeededRng::new(2, 0), false).unwrap();
            assert!(lg.total().is_finite());
            assert_eq!(lg.levels, 2);
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let run = || {
            let mut pair = NetworkPair::<f32>::new(&tiny(), 9).unwrap();
            let mut opt = Lars::new(OptimConfig::default(), &pair.online).unwrap();
            let [a, b] = views(4).map(|t| t.cast::<f32>());
            let out = ssl_step(&mut pair, &mut opt, [&a, &b], &SslConfig::default(), 0.5, 0.99, SeededRng::new(4, 0)).unwrap();
            (out, pair.online)
        };
        let (o1, p1) = run();
        let (o2, p2) = run();
        assert_eq!(o1, o2);
        assert_eq!(p1, p2);
    }

    #[test]
    fn small_batch_skips_levels() {
        let mut pair = NetworkPair::<f64>::new(&tiny(), 3).unwrap();
        let [a, b] = views(2);
        let lg = forward_loss(&mut pair, [&a, &b], &SslConfig::default(), SeededRng::new(1, 0), false).unwrap();
        assert_eq!(lg.levels, 1);
    }
}
