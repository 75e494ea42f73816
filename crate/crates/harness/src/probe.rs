//! Linear probing of a frozen backbone.
//!
//! Features are the globally pooled last backbone stage, computed with
//! eval-mode batch norm; the neck, head and MLPs play no part. Features are
//! standardized with train-split statistics, then a softmax classifier is
//! trained with momentum SGD under a cosine-decayed learning rate.

use anyhow::ensure;
use rand::seq::SliceRandom;
use sha2::{Digest, Sha256};

use mcl_core::optim::Sgd;
use mcl_core::pyramid::{bind, Encoder, NormCtx, Param, ParamKind, ParamStore};
use mcl_core::{Graph, SeededRng, Tensor};

use crate::config::TrainConfig;
use crate::dataset::{Dataset, LabeledImages};

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub lr: f64,
    pub epochs: usize,
    pub momentum: f64,
    pub batch: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl From<&TrainConfig> for ProbeConfig {
    fn from(c: &TrainConfig) -> Self {
        Self {
            lr: c.probe_lr,
            epochs: c.probe_epochs,
            momentum: c.probe_momentum,
            batch: c.probe_batch,
            weight_decay: c.probe_weight_decay,
            seed: c.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    /// Top-1 accuracy on the eval split.
    pub top1: f64,
    pub train_top1: f64,
    /// SHA-256 of the backbone parameters before and after probing.
    pub digest_before: String,
    pub digest_after: String,
}

impl ProbeReport {
    pub fn frozen(&self) -> bool {
        self.digest_before == self.digest_after
    }
}

/// Hash of every backbone parameter's bytes, in slot order.
pub fn backbone_digest(encoder: &Encoder, store: &ParamStore<f32>) -> String {
    let mut h = Sha256::new();
    for i in encoder.backbone_params(store) {
        let p = &store.params[i];
        h.update(p.name.as_bytes());
        for v in p.value.data() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// `[N, C_last]` pooled backbone features of `images`, `chunk` at a time.
pub fn extract_features(encoder: &Encoder, store: &ParamStore<f32>, images: &Tensor<f32>, chunk: usize) -> anyhow::Result<Tensor<f32>> {
    let n = images.dim(0);
    let per = images.numel() / n.max(1);
    let mut rows = vec![];
    let mut norms = store.norms.clone();
    for start in (0..n).step_by(chunk.max(1)) {
        let end = (start + chunk).min(n);
        let mut shape = images.shape().to_vec();
        shape[0] = end - start;
        let x = Tensor::new(shape, images.data()[start * per..end * per].to_vec())?;
        let mut g = Graph::no_grad();
        let p = bind(&mut g, store, false);
        let mut bn = NormCtx::eval(&mut norms, &encoder.cfg);
        let xv = g.constant(x);
        let f = encoder.backbone_features(&mut g, &p, &mut bn, xv)?;
        rows.push(g.value(f).clone());
    }
    let c = rows[0].dim(1);
    let data: Vec<f32> = rows.into_iter().flat_map(|r| r.into_data()).collect();
    Ok(Tensor::new(vec![n, c], data)?)
}

fn standardize(train: &mut Tensor<f32>, eval: &mut Tensor<f32>) {
    let (n, c) = (train.dim(0), train.dim(1));
    let mut mean = vec![0f64; c];
    let mut var = vec![0f64; c];
    for row in train.data().chunks(c) {
        row.iter().zip(&mut mean).for_each(|(&v, m)| *m += v as f64 / n as f64);
    }
    for row in train.data().chunks(c) {
        row.iter().zip(&mean).zip(&mut var).for_each(|((&v, m), s)| *s += (v as f64 - m).powi(2) / n as f64);
    }
    let apply = |t: &mut Tensor<f32>| {
        for row in t.data_mut().chunks_mut(c) {
            for ((v, m), s) in row.iter_mut().zip(&mean).zip(&var) {
                *v = ((*v as f64 - m) / (s + 1e-6).sqrt()) as f32;
            }
        }
    };
    apply(train);
    apply(eval);
}

fn accuracy(store: &ParamStore<f32>, x: &Tensor<f32>, labels: &[usize]) -> anyhow::Result<f64> {
    let mut g = Graph::no_grad();
    let xv = g.constant(x.clone());
    let w = g.constant(store.params[0].value.clone());
    let b = g.constant(store.params[1].value.clone());
    let logits = g.linear(xv, w, Some(b))?;
    let k = store.params[1].value.numel();
    let correct = g
        .value(logits)
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &y)| {
            let best = row.iter().enumerate().fold(0, |bi, (i, &v)| if v > row[bi] { i } else { bi });
            best == y
        })
        .count();
    Ok(correct as f64 / labels.len().max(1) as f64)
}

/// Softmax regression `[K, C]` weight plus bias on `x: [N, C]`, trained with
/// momentum SGD and a cosine-decayed learning rate from zero init.
pub fn fit_linear(x: &Tensor<f32>, labels: &[usize], classes: usize, cfg: &ProbeConfig) -> anyhow::Result<ParamStore<f32>> {
    let (n, c, k) = (x.dim(0), x.dim(1), classes);
    ensure!(labels.len() == n, "{} labels for {n} rows", labels.len());
    let mut clf = ParamStore::<f32> {
        params: vec![
            Param {
                name: "probe.weight".into(),
                kind: ParamKind::LinearWeight,
                value: Tensor::zeros(&[k, c]),
            },
            Param {
                name: "probe.bias".into(),
                kind: ParamKind::Bias,
                value: Tensor::zeros(&[k]),
            },
        ],
        norms: vec![],
    };
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay, &clf);
    let total = (cfg.epochs * n.div_ceil(cfg.batch)).max(1);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut SeededRng::derive(cfg.seed, &[0x960BE, epoch as u64]).generator());
        for idx in order.chunks(cfg.batch) {
            let xb = Tensor::new(vec![idx.len(), c], idx.iter().flat_map(|&i| x.slab(i).to_vec()).collect())?;
            let yb: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let mut g = Graph::new();
            let xv = g.constant(xb);
            let w = g.param(clf.params[0].value.clone());
            let b = g.param(clf.params[1].value.clone());
            let logits = g.linear(xv, w, Some(b))?;
            let loss = g.softmax_cross_entropy(logits, &yb)?;
            let mut grads = g.backward(loss)?;
            let lr = cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos());
            opt.step(&mut clf, &[grads.take(w), grads.take(b)], lr)?;
            step += 1;
        }
    }
    Ok(clf)
}

/// Trains a linear classifier on frozen features of `encoder` and reports
/// eval top-1. The backbone is only read; the digests prove it.
pub fn linear_probe(encoder: &Encoder, store: &ParamStore<f32>, data: &Dataset, cfg: &ProbeConfig) -> anyhow::Result<ProbeReport> {
    ensure!(data.classes >= 2, "need at least 2 classes");
    let check = |split: &LabeledImages| split.labels.iter().all(|&y| y < data.classes);
    ensure!(check(&data.train) && check(&data.eval), "class mismatch: labels exceed {} classes", data.classes);
    let digest_before = backbone_digest(encoder, store);

    let mut xtr = extract_features(encoder, store, &data.train.images, 256)?;
    let mut xev = extract_features(encoder, store, &data.eval.images, 256)?;
    standardize(&mut xtr, &mut xev);
    let clf = fit_linear(&xtr, &data.train.labels, data.classes, cfg)?;

    Ok(ProbeReport {
        top1: accuracy(&clf, &xev, &data.eval.labels)?,
        train_top1: accuracy(&clf, &xtr, &data.train.labels)?,
        digest_before,
        digest_after: backbone_digest(encoder, store),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_toy_dataset, DatasetKind, DatasetSpec};
    use mcl_core::pyramid::NetworkPair;

    #[test]
    fn fits_separable_clusters() {
        // three well-separated clusters in 4 dims
        let n = 90;
        let x = Tensor::from_fn(&[n, 4], |i| {
            let (row, col) = (i / 4, i % 4);
            let centre = if col == row % 3 { 3.0 } else { 0.0 };
            centre + ((i * 7919 % 101) as f32 / 101.0 - 0.5)
        });
        let labels: Vec<usize> = (0..n).map(|r| r % 3).collect();
        let cfg = ProbeConfig::from(&TrainConfig::default());
        let clf = fit_linear(&x, &labels, 3, &cfg).unwrap();
        assert_eq!(accuracy(&clf, &x, &labels).unwrap(), 1.0);
    }

    #[test]
    fn backbone_untouched() {
        let cfg = TrainConfig {
            stem_channels: 4,
            stage_channels: vec![4, 8, 8, 8],
            pyramid_channels: 8,
            head_convs: 1,
            proj_hidden: 16,
            embed_dim: 8,
            image_size: (32, 32),
            ..TrainConfig::default()
        };
        let data = generate_toy_dataset(&DatasetSpec {
            kind: DatasetKind::ProceduralShapes,
            dir: None,
            n_train: 60,
            n_eval: 20,
            classes: 2,
            image_size: (32, 32),
            seed: 1,
        })
        .unwrap();
        let pair = NetworkPair::<f32>::new(&cfg.net(), 0).unwrap();
        let before = pair.online.clone();
        let r = linear_probe(&pair.encoder, &pair.online, &data, &ProbeConfig::from(&cfg)).unwrap();
        assert!(r.frozen());
        assert_eq!(pair.online, before);
        assert!((0.0..=1.0).contains(&r.top1));
    }
}
