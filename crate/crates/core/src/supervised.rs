//! Supervised multi-level training: labels follow the montage shuffle and a
//! shared linear classifier scores every pooled tile at every level.

use crate::autodiff::{Graph, Var};
use crate::error::{invalid, Error, Result};
use crate::loss::LevelWeights;
use crate::montage::{assemble, MontageBatch};
use crate::optim::Sgd;
use crate::pyramid::{bind, dense, Bound, Builder, Dense, Encoder, NetConfig, NormCtx, ParamStore};
use crate::rng::SeededRng;
use crate::tensor::{Real, Tensor};

/// Labels in tile-slot order: row `b` is `labels[src_ids[b]]`.
pub fn assemble_targets<T>(labels: &[usize], mb: &MontageBatch<T>) -> Result<Vec<usize>> {
    if labels.len() != mb.src_ids.len() {
        return Err(Error::Shape(format!(
            "{} labels for a montage batch of {}",
            labels.len(),
            mb.src_ids.len()
        )));
    }
    Ok(mb.src_ids.iter().map(|&s| labels[s]).collect())
}

/// `sum_s w_s CE(logits_s, labels_s)`, each term a batch mean.
pub fn multilevel_ce<T: Real>(g: &mut Graph<T>, logits: &[Var], labels: &[Vec<usize>], weights: &[f64]) -> Result<Var> {
    multilevel_ce_terms(g, logits, labels, weights).map(|(total, _)| total)
}

/// [`multilevel_ce`] plus the unweighted per-level terms.
pub fn multilevel_ce_terms<T: Real>(
    g: &mut Graph<T>,
    logits: &[Var],
    labels: &[Vec<usize>],
    weights: &[f64],
) -> Result<(Var, Vec<f64>)> {
    if logits.len() != labels.len() || logits.len() != weights.len() {
        return Err(invalid!(
            "{} logit sets, {} label sets and {} weights",
            logits.len(),
            labels.len(),
            weights.len()
        ));
    }
    let terms = logits
        .iter()
        .zip(labels)
        .zip(weights)
        .map(|((&l, y), &w)| Ok((g.softmax_cross_entropy(l, y)?, T::lit(w))))
        .collect::<Result<Vec<_>>>()?;
    let parts = terms.iter().map(|t| g.value(t.0).item().to_f64().unwrap()).collect();
    Ok((g.weighted_sum(&terms)?, parts))
}

/// Backbone, neck and head of the contrastive encoder plus one classifier;
/// no projector, predictor or target network.
#[derive(Debug, Clone)]
pub struct SupervisedNet {
    pub encoder: Encoder,
    pub classes: usize,
    classifier: Dense,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupervisedStep {
    pub loss: f64,
    /// Mean cross-entropy per level; `None` where the batch was too small.
    pub per_level: Vec<Option<f64>>,
}

impl SupervisedNet {
    pub fn init<T: Real>(cfg: &NetConfig, classes: usize, seed: u64) -> Result<(Self, ParamStore<T>)> {
        if classes < 2 {
            return Err(invalid!("need at least 2 classes, got {classes}"));
        }
        let mut b = Builder::new(seed);
        let encoder = Encoder::build(cfg, &mut b, false)?;
        let classifier = b.dense("classifier", cfg.pyramid_channels, classes, true, 1.0);
        Ok((
            Self {
                encoder,
                classes,
                classifier,
            },
            b.finish(),
        ))
    }

    /// `[N, pyramid_channels] -> [N, classes]`.
    pub fn classify<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        dense(g, p, &self.classifier, x)
    }

    /// Logits of every tile of `mb`, rows in slot order.
    pub fn tile_logits<T: Real>(&self, g: &mut Graph<T>, p: &Bound, bn: &mut NormCtx<T>, mb: &MontageBatch<T>) -> Result<Var> {
        let pooled = self.encoder.encode_tiles(g, p, bn, mb, false)?;
        self.classify(g, p, pooled)
    }

    /// One SGD step on the multi-level objective. Level `s` uses a montage
    /// shuffled by `rng.child(s)`; levels with fewer than `4^s` images are
    /// skipped.
    #[allow(clippy::too_many_arguments)]
    pub fn step<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        opt: &mut Sgd<T>,
        batch: &Tensor<T>,
        labels: &[usize],
        weights: &LevelWeights,
        lr: f64,
        rng: SeededRng,
    ) -> Result<SupervisedStep> {
        let cfg = &self.encoder.cfg;
        let levels = cfg.pyramid_levels;
        let w = weights.resolve(levels)?;
        if let Some(&bad) = labels.iter().find(|&&y| y >= self.classes) {
            return Err(invalid!("label {bad} out of range for {} classes", self.classes));
        }
        let mut g = Graph::new();
        let p = bind(&mut g, store, true);
        let mut per_level = vec![None; levels];
        let (mut logits, mut targets, mut used) = (vec![], vec![], vec![]);
        {
            let mut bn = NormCtx::train(&mut store.norms, cfg);
            for s in 0..levels {
                if batch.dim(0) < 1 << (2 * s) {
                    log::warn!("batch of {} too small for level {s}; skipped", batch.dim(0));
                    continue;
                }
                let mb = assemble(batch, s, rng.child(s as u64))?;
                logits.push(self.tile_logits(&mut g, &p, &mut bn, &mb)?);
                targets.push(assemble_targets(labels, &mb)?);
                used.push(s);
            }
        }
        if used.is_empty() {
            return Err(invalid!("no montage level fits a batch of {}", batch.dim(0)));
        }
        let uw: Vec<f64> = used.iter().map(|&s| w[s]).collect();
        let (loss, parts) = multilevel_ce_terms(&mut g, &logits, &targets, &uw)?;
        let value = g.value(loss).item().to_f64().unwrap();
        if !value.is_finite() {
            return Err(Error::NonFinite("supervised loss".into()));
        }
        for (&s, ce) in used.iter().zip(parts) {
            per_level[s] = Some(ce);
        }
        let mut grads = g.backward(loss)?;
        let grads: Vec<_> = p.vars.iter().map(|&v| grads.take(v)).collect();
        opt.step(store, &grads, lr)?;
        Ok(SupervisedStep { loss: value, per_level })
    }
}
