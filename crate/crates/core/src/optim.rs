//! LARS and momentum SGD, the warmup + cosine learning-rate schedule, and
//! weight rescaling.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::pyramid::{ParamKind, ParamStore};
use crate::tensor::{Real, Tensor};

/// Weight-decay values of the `wd-sweep` ablation.
pub const WD_SWEEP: [f64; 3] = [1.5e-6, 5e-6, 1e-5];
/// Divisors of the `rescale-sweep` ablation.
pub const RESCALE_SWEEP: [f64; 2] = [1.5, 2.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    /// `base_lr = lr_scale * batch_size / 256`.
    pub lr_scale: f64,
    pub batch_size: usize,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub weight_decay: f64,
    pub trust_coefficient: f64,
    pub momentum: f64,
    /// Biases and normalization parameters skip weight decay and trust
    /// adaptation.
    pub exclude_bias_and_norm: bool,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr_scale: 1.0,
            batch_size: 256,
            warmup_epochs: 10,
            total_epochs: 100,
            weight_decay: 1e-5,
            trust_coefficient: 1e-3,
            momentum: 0.9,
            exclude_bias_and_norm: true,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_epochs > self.total_epochs {
            return Err(invalid!(
                "warmup_epochs {} exceeds total_epochs {}",
                self.warmup_epochs,
                self.total_epochs
            ));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(invalid!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.lr_scale >= 0.0 && self.trust_coefficient > 0.0) {
            return Err(invalid!("lr_scale must be >= 0 and trust_coefficient > 0"));
        }
        if self.batch_size == 0 {
            return Err(invalid!("batch_size must be positive"));
        }
        Ok(())
    }

    pub fn base_lr(&self) -> f64 {
        self.lr_scale * self.batch_size as f64 / 256.0
    }

    pub fn excluded(&self, kind: ParamKind) -> bool {
        self.exclude_bias_and_norm && !kind.is_weight()
    }
}

/// Learning rate for optimizer step `step` (0-based).
///
/// Warmup ramps linearly so that the last warmup step is exactly `base_lr`;
/// the cosine phase then starts from `base_lr` and reaches exactly 0 at the
/// last step `total - 1` (and stays 0 beyond).
pub fn lr_schedule(step: usize, steps_per_epoch: usize, cfg: &OptimConfig) -> f64 {
    let base = cfg.base_lr();
    let warmup = cfg.warmup_epochs * steps_per_epoch;
    let total = cfg.total_epochs * steps_per_epoch;
    if step < warmup {
        if step + 1 == warmup {
            return base;
        }
        return base * (step + 1) as f64 / warmup as f64;
    }
    let last = total.saturating_sub(1);
    if step >= last {
        return 0.0;
    }
    let progress = (step - warmup) as f64 / (last - warmup) as f64;
    base * ((std::f64::consts::PI * progress).cos() + 1.0) / 2.0
}

/// `eta * |w| / |g|`, or 1 when either norm vanishes.
pub fn trust_ratio(w_norm: f64, g_norm: f64, eta: f64) -> f64 {
    if w_norm > 0.0 && g_norm > 0.0 {
        eta * w_norm / g_norm
    } else {
        1.0
    }
}

fn norm<T: Real>(x: &[T]) -> f64 {
    x.iter().map(|v| v.to_f64().unwrap().powi(2)).sum::<f64>().sqrt()
}

fn check_grads<T: Real>(store: &ParamStore<T>, grads: &[Option<Tensor<T>>]) -> Result<()> {
    if grads.len() != store.params.len() {
        return Err(Error::Shape(format!(
            "{} gradients for {} parameters",
            grads.len(),
            store.params.len()
        )));
    }
    for (p, g) in store.params.iter().zip(grads) {
        if let Some(g) = g {
            if g.shape() != p.value.shape() {
                return Err(Error::Shape(format!(
                    "gradient of {} is {:?}, parameter is {:?}",
                    p.name,
                    g.shape(),
                    p.value.shape()
                )));
            }
            if !g.is_finite() {
                log::error!("non-finite gradient for {}; step aborted", p.name);
                return Err(Error::NonFinite(format!("gradient of {}", p.name)));
            }
        }
    }
    Ok(())
}

fn zero_buffers<T: Real>(store: &ParamStore<T>) -> Vec<Tensor<T>> {
    store.params.iter().map(|p| Tensor::zeros(p.value.shape())).collect()
}

/// Layer-wise adaptive rate scaling with momentum.
///
/// Parameters whose gradient is `None` are left untouched, buffers included.
#[derive(Debug, Clone, PartialEq)]
pub struct Lars<T> {
    pub cfg: OptimConfig,
    pub buffers: Vec<Tensor<T>>,
}

impl<T: Real> Lars<T> {
    pub fn new(cfg: OptimConfig, store: &ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            buffers: zero_buffers(store),
            cfg,
        })
    }

    /// `g = grad + wd w`, `v = mu v + trust lr g`, `w -= v`.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lr: f64) -> Result<()> {
        check_grads(store, grads)?;
        let cfg = &self.cfg;
        for ((p, g), buf) in store.params.iter_mut().zip(grads).zip(&mut self.buffers) {
            let Some(g) = g else { continue };
            let excluded = cfg.excluded(p.kind);
            let wd = if excluded { 0.0 } else { cfg.weight_decay };
            let w = p.value.data_mut();
            let upd: Vec<f64> = w
                .iter()
                .zip(g.data())
                .map(|(&w, &g)| g.to_f64().unwrap() + wd * w.to_f64().unwrap())
                .collect();
            let trust = if excluded {
                1.0
            } else {
                trust_ratio(norm(w), upd.iter().map(|x| x * x).sum::<f64>().sqrt(), cfg.trust_coefficient)
            };
            let (mu, scale) = (T::lit(cfg.momentum), trust * lr);
            for ((w, v), u) in w.iter_mut().zip(buf.data_mut()).zip(&upd) {
                *v = mu * *v + T::lit(scale * u);
                *w -= *v;
            }
        }
        Ok(())
    }
}

/// Momentum SGD, `v = mu v + grad + wd w`, `w -= lr v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    pub buffers: Vec<Tensor<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64, store: &ParamStore<T>) -> Self {
        Self {
            momentum,
            weight_decay,
            buffers: zero_buffers(store),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lr: f64) -> Result<()> {
        check_grads(store, grads)?;
        let (mu, wd, lr) = (T::lit(self.momentum), T::lit(self.weight_decay), T::lit(lr));
        for ((p, g), buf) in store.params.iter_mut().zip(grads).zip(&mut self.buffers) {
            let Some(g) = g else { continue };
            for ((w, v), &g) in p.value.data_mut().iter_mut().zip(buf.data_mut()).zip(g.data()) {
                *v = mu * *v + g + wd * *w;
                *w -= lr * *v;
            }
        }
        Ok(())
    }
}

/// Divides every conv/linear weight and bias by `alpha`; normalization
/// parameters and running statistics are left alone.
pub fn weight_rescale<T: Real>(store: &mut ParamStore<T>, alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(invalid!("rescale divisor must be positive, got {alpha}"));
    }
    let inv = T::lit(1.0 / alpha);
    for p in store.params.iter_mut().filter(|p| !p.kind.is_norm()) {
        if alpha != 1.0 {
            p.value.data_mut().iter_mut().for_each(|w| *w *= inv);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pyramid::{NormState, Param};

    fn store(kind: ParamKind, w: Vec<f64>) -> ParamStore<f64> {
        ParamStore {
            params: vec![Param {
                name: "p".into(),
                kind,
                value: Tensor::new(vec![w.len()], w).unwrap(),
            }],
            norms: vec![],
        }
    }

    fn grads(g: Vec<f64>) -> Vec<Option<Tensor<f64>>> {
        vec![Some(Tensor::new(vec![g.len()], g).unwrap())]
    }

    #[test]
    fn schedule_endpoints_exact() {
        let cfg = OptimConfig {
            batch_size: 256,
            warmup_epochs: 10,
            total_epochs: 100,
            ..OptimConfig::default()
        };
        let spe = 7;
        assert_eq!(lr_schedule(10 * spe - 1, spe, &cfg), 1.0);
        assert_eq!(lr_schedule(10 * spe, spe, &cfg), 1.0);
        assert_eq!(lr_schedule(100 * spe - 1, spe, &cfg), 0.0);
        assert_eq!(lr_schedule(100 * spe, spe, &cfg), 0.0);
        let small = OptimConfig {
            batch_size: 64,
            ..cfg.clone()
        };
        assert_eq!(lr_schedule(10 * spe - 1, spe, &small), 0.25);
    }

    #[test]
    fn warmup_ramp() {
        let cfg = OptimConfig {
            warmup_epochs: 1,
            total_epochs: 3,
            ..OptimConfig::default()
        };
        assert_eq!(lr_schedule(0, 100, &cfg), cfg.base_lr() / 100.0);
        // continuous across the boundary within one ramp increment
        let inc = cfg.base_lr() / 100.0;
        assert!((lr_schedule(100, 100, &cfg) - lr_schedule(99, 100, &cfg)).abs() <= inc);
        let mut prev = f64::INFINITY;
        for s in 100..300 {
            let lr = lr_schedule(s, 100, &cfg);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn lars_scalar_example() {
        let cfg = OptimConfig {
            weight_decay: 0.0,
            momentum: 0.0,
            ..OptimConfig::default()
        };
        let mut s = store(ParamKind::ConvWeight, vec![2.0]);
        let mut opt = Lars::new(cfg, &s).unwrap();
        opt.step(&mut s, &grads(vec![1.0]), 1.0).unwrap();
        assert!((s.params[0].value.data()[0] - 1.998).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_no_decay_is_noop() {
        let cfg = OptimConfig {
            weight_decay: 0.0,
            ..OptimConfig::default()
        };
        let mut s = store(ParamKind::LinearWeight, vec![1.0, -3.0]);
        let before = s.clone();
        let mut opt = Lars::new(cfg, &s).unwrap();
        opt.step(&mut s, &grads(vec![0.0, 0.0]), 0.5).unwrap();
        assert_eq!(s, before);
    }

    #[test]
    fn zero_lr_is_noop() {
        let mut s = store(ParamKind::ConvWeight, vec![1.0, 2.0]);
        let before = s.clone();
        let mut opt = Lars::new(OptimConfig::default(), &s).unwrap();
        opt.step(&mut s, &grads(vec![0.3, -0.1]), 0.0).unwrap();
        assert_eq!(s, before);
    }

    #[test]
    fn excluded_bias_is_plain_momentum_sgd() {
        let cfg = OptimConfig::default();
        let mut s = store(ParamKind::Bias, vec![1.0, 1.0]);
        let mut opt = Lars::new(cfg, &s).unwrap();
        opt.step(&mut s, &grads(vec![0.5, -0.5]), 0.1).unwrap();
        assert_eq!(s.params[0].value.data(), &[0.95, 1.05]);
        opt.step(&mut s, &grads(vec![0.5, -0.5]), 0.1).unwrap();
        // v = 0.9 * 0.05 + 0.05
        assert!((s.params[0].value.data()[0] - (0.95 - 0.095)).abs() < 1e-15);
    }

    #[test]
    fn exclusion_walk() {
        let cfg = OptimConfig::default();
        assert!(cfg.excluded(ParamKind::Bias));
        assert!(cfg.excluded(ParamKind::NormScale));
        assert!(cfg.excluded(ParamKind::NormShift));
        assert!(!cfg.excluded(ParamKind::ConvWeight));
        assert!(!cfg.excluded(ParamKind::LinearWeight));
        let off = OptimConfig {
            exclude_bias_and_norm: false,
            ..cfg
        };
        assert!(!off.excluded(ParamKind::Bias));
    }

    #[test]
    fn trust_ratio_scale_invariant() {
        for c in [0.1, 3.0, 1e4] {
            assert!((trust_ratio(2.0 * c, 0.5 * c, 1e-3) - trust_ratio(2.0, 0.5, 1e-3)).abs() < 1e-15);
        }
        assert_eq!(trust_ratio(0.0, 1.0, 1e-3), 1.0);
        assert_eq!(trust_ratio(1.0, 0.0, 1e-3), 1.0);
    }

    #[test]
    fn nan_gradient_aborts_untouched() {
        let mut s = store(ParamKind::ConvWeight, vec![1.0]);
        let before = s.clone();
        let mut opt = Lars::new(OptimConfig::default(), &s).unwrap();
        assert!(matches!(opt.step(&mut s, &grads(vec![f64::NAN]), 1.0), Err(Error::NonFinite(_))));
        assert_eq!(s, before);
    }

    #[test]
    fn missing_gradient_skipped() {
        let mut s = store(ParamKind::ConvWeight, vec![1.0]);
        let before = s.clone();
        let mut opt = Lars::new(OptimConfig::default(), &s).unwrap();
        opt.step(&mut s, &[None], 1.0).unwrap();
        assert_eq!(s, before);
    }

    #[test]
    fn rescale_skips_norm() {
        let mut s = ParamStore {
            params: vec![
                Param {
                    name: "w".into(),
                    kind: ParamKind::ConvWeight,
                    value: Tensor::new(vec![2], vec![2.0, 4.0]).unwrap(),
                },
                Param {
                    name: "g".into(),
                    kind: ParamKind::NormScale,
                    value: Tensor::new(vec![1], vec![3.0]).unwrap(),
                },
            ],
            norms: vec![NormState {
                name: "n".into(),
                stats: crate::ops::RunningStats::fresh(1),
            }],
        };
        let orig = s.clone();
        weight_rescale(&mut s, 1.0).unwrap();
        assert_eq!(s, orig);
        weight_rescale(&mut s, 2.0).unwrap();
        assert_eq!(s.params[0].value.data(), &[1.0, 2.0]);
        assert_eq!(s.params[1].value.data(), &[3.0]);
        assert!(weight_rescale(&mut s, 0.0).is_err());
    }

    #[test]
    fn sgd_matches_hand_update() {
        let mut s = store(ParamKind::LinearWeight, vec![1.0]);
        let mut opt = Sgd::new(0.9, 0.0, &s);
        opt.step(&mut s, &grads(vec![2.0]), 0.1).unwrap();
        assert!((s.params[0].value.data()[0] - 0.8).abs() < 1e-15);
        opt.step(&mut s, &grads(vec![2.0]), 0.1).unwrap();
        assert!((s.params[0].value.data()[0] - (0.8 - 0.38)).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        let bad = OptimConfig {
            warmup_epochs: 20,
            total_epochs: 10,
            ..OptimConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(OptimConfig {
            weight_decay: -1.0,
            ..OptimConfig::default()
        }
        .validate()
        .is_err());
    }
}
