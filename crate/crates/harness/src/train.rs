//! Pre-training loops for both objectives, with checkpointing and metrics.
//!
//! Every stochastic choice of step `t` is derived from `(seed, t)`: the
//! epoch's sample order from `(seed, epoch)`, augmentation from
//! `(seed, AUG, t)`, montage shuffles from `(seed, MONTAGE, t)`. A resumed run
//! therefore needs nothing beyond the parameters, running statistics,
//! optimizer buffers and step count to replay the uninterrupted trajectory.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, ensure, Context};
use log::info;
use rand::seq::SliceRandom;

use mcl_core::augment::{apply_pipeline, two_views, view_rng, AugPolicy};
use mcl_core::optim::{lr_schedule, weight_rescale, Lars, Sgd};
use mcl_core::pyramid::{momentum_schedule, Encoder, NetworkPair, ParamStore};
use mcl_core::ssl::ssl_step;
use mcl_core::supervised::SupervisedNet;
use mcl_core::{par, SeededRng, Tensor};

use crate::checkpoint::{Checkpoint, Entry};
use crate::config::{Objective, TrainConfig};
use crate::dataset::Dataset;
use crate::metrics::{MetricsRow, MetricsWriter};

const ORDER: u64 = 0x0D3E;
const AUG: u64 = 0xA06;
const MONTAGE: u64 = 0x303A;

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Clone)]
pub enum Model {
    Ssl {
        pair: NetworkPair<f32>,
        opt: Lars<f32>,
    },
    Supervised {
        net: SupervisedNet,
        store: ParamStore<f32>,
        opt: Sgd<f32>,
    },
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Model,
    /// Optimizer steps taken so far.
    pub step: usize,
}

type View<'a> = (String, Vec<usize>, &'a [f32]);
type ViewMut<'a> = (String, Vec<usize>, &'a mut [f32]);

fn store_views<'a>(prefix: &str, s: &'a ParamStore<f32>) -> Vec<View<'a>> {
    let mut v: Vec<View> = s.params.iter().map(|p| (format!("{prefix}/{}", p.name), p.value.shape().to_vec(), p.value.data())).collect();
    for n in &s.norms {
        let c = n.stats.mean.len();
        v.push((format!("{prefix}/{}.running_mean", n.name), vec![c], &n.stats.mean));
        v.push((format!("{prefix}/{}.running_var", n.name), vec![c], &n.stats.var));
    }
    v
}

fn store_views_mut<'a>(prefix: &str, s: &'a mut ParamStore<f32>) -> Vec<ViewMut<'a>> {
    let mut v: Vec<ViewMut> = s
        .params
        .iter_mut()
        .map(|p| (format!("{prefix}/{}", p.name), p.value.shape().to_vec(), p.value.data_mut()))
        .collect();
    for n in &mut s.norms {
        let c = n.stats.mean.len();
        v.push((format!("{prefix}/{}.running_mean", n.name), vec![c], &mut n.stats.mean));
        v.push((format!("{prefix}/{}.running_var", n.name), vec![c], &mut n.stats.var));
    }
    v
}

fn buffer_views<'a>(prefix: &str, s: &ParamStore<f32>, bufs: &'a [Tensor<f32>]) -> Vec<View<'a>> {
    s.params.iter().zip(bufs).map(|(p, b)| (format!("{prefix}/{}", p.name), b.shape().to_vec(), b.data())).collect()
}

fn buffer_views_mut<'a>(prefix: &str, s: &ParamStore<f32>, bufs: &'a mut [Tensor<f32>]) -> Vec<ViewMut<'a>> {
    s.params
        .iter()
        .zip(bufs)
        .map(|(p, b)| (format!("{prefix}/{}", p.name), b.shape().to_vec(), b.data_mut()))
        .collect()
}

impl TrainState {
    /// Fresh networks and optimizer for `cfg`, with the optional initial
    /// weight rescale applied.
    pub fn init(cfg: &TrainConfig) -> anyhow::Result<Self> {
        let model = match cfg.objective {
            Objective::Ssl => {
                let mut pair = NetworkPair::<f32>::new(&cfg.net(), cfg.seed)?;
                if let Some(alpha) = cfg.weight_rescale {
                    weight_rescale(&mut pair.online, alpha)?;
                    pair.target = pair.online.clone();
                }
                let opt = Lars::new(cfg.optim(), &pair.online)?;
                Model::Ssl { pair, opt }
            }
            Objective::Supervised => {
                let (net, mut store) = SupervisedNet::init::<f32>(&cfg.net(), cfg.classes, cfg.seed)?;
                if let Some(alpha) = cfg.weight_rescale {
                    weight_rescale(&mut store, alpha)?;
                }
                let opt = Sgd::new(cfg.momentum, cfg.weight_decay, &store);
                Model::Supervised { net, store, opt }
            }
        };
        Ok(Self { model, step: 0 })
    }

    pub fn objective(&self) -> Objective {
        match self.model {
            Model::Ssl { .. } => Objective::Ssl,
            Model::Supervised { .. } => Objective::Supervised,
        }
    }

    /// The trained (online) encoder and its parameters.
    pub fn encoder(&self) -> (&Encoder, &ParamStore<f32>) {
        match &self.model {
            Model::Ssl { pair, .. } => (&pair.encoder, &pair.online),
            Model::Supervised { net, store, .. } => (&net.encoder, store),
        }
    }

    fn views(&self) -> Vec<View<'_>> {
        match &self.model {
            Model::Ssl { pair, opt } => {
                let mut v = store_views("online", &pair.online);
                v.extend(store_views("target", &pair.target));
                v.extend(buffer_views("lars", &pair.online, &opt.buffers));
                v
            }
            Model::Supervised { store, opt, .. } => {
                let mut v = store_views("online", store);
                v.extend(buffer_views("sgd", store, &opt.buffers));
                v
            }
        }
    }

    fn views_mut(&mut self) -> Vec<ViewMut<'_>> {
        match &mut self.model {
            Model::Ssl { pair, opt } => {
                let mut v = buffer_views_mut("lars", &pair.online, &mut opt.buffers);
                v.extend(store_views_mut("online", &mut pair.online));
                v.extend(store_views_mut("target", &mut pair.target));
                v
            }
            Model::Supervised { store, opt, .. } => {
                let mut v = buffer_views_mut("sgd", store, &mut opt.buffers);
                v.extend(store_views_mut("online", store));
                v
            }
        }
    }

    pub fn to_checkpoint(&self, cfg: &TrainConfig) -> Checkpoint {
        Checkpoint {
            config_hash: cfg.hash(),
            objective: objective_name(self.objective()).into(),
            step: self.step,
            entries: self
                .views()
                .into_iter()
                .map(|(name, shape, data)| Entry {
                    name,
                    shape,
                    data: data.to_vec(),
                })
                .collect(),
        }
    }

    /// Rebuilds the state of a run of `cfg` from `ckpt`. The config hash,
    /// objective, and the exact set of entries and shapes must all match.
    pub fn from_checkpoint(cfg: &TrainConfig, ckpt: &Checkpoint) -> anyhow::Result<Self> {
        ensure!(
            ckpt.config_hash == cfg.hash(),
            "checkpoint was written by a different configuration (hash {} vs {})",
            ckpt.config_hash,
            cfg.hash()
        );
        let mut state = Self::init(cfg)?;
        ensure!(ckpt.objective == objective_name(cfg.objective), "checkpoint objective {} differs from config", ckpt.objective);
        let mut slots = state.views_mut();
        ensure!(slots.len() == ckpt.entries.len(), "checkpoint has {} entries, model needs {}", ckpt.entries.len(), slots.len());
        for (name, shape, data) in slots.iter_mut() {
            let e = ckpt.get(name).with_context(|| format!("checkpoint lacks {name}"))?;
            ensure!(&e.shape == shape, "{name}: checkpoint shape {:?}, model shape {:?}", e.shape, shape);
            data.copy_from_slice(&e.data);
        }
        drop(slots);
        state.step = ckpt.step;
        Ok(state)
    }
}

fn objective_name(o: Objective) -> &'static str {
    match o {
        Objective::Ssl => "ssl",
        Objective::Supervised => "supervised",
    }
}

/// Sample order of epoch `epoch`.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut SeededRng::derive(seed, &[ORDER, epoch as u64]).generator());
    idx
}

fn aug_seed(seed: u64, step: usize) -> u64 {
    SeededRng::derive(seed, &[AUG, step as u64]).stream_id
}

fn montage_rng(seed: u64, step: usize) -> SeededRng {
    SeededRng::derive(seed, &[MONTAGE, step as u64])
}

/// One augmented view per image, as in the first view of [`two_views`].
fn single_view(batch: &Tensor<f32>, policy: &AugPolicy, base_seed: u64) -> anyhow::Result<Tensor<f32>> {
    let (c, h, w) = (batch.dim(1), batch.dim(2), batch.dim(3));
    let imgs = par::map(batch.dim(0), |i| {
        let img = Tensor::new(vec![c, h, w], batch.slab(i).to_vec())?;
        apply_pipeline(&img, policy, view_rng(base_seed, i, 0))
    });
    Ok(Tensor::stack(&imgs.into_iter().collect::<mcl_core::Result<Vec<_>>>()?)?)
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Continue from this checkpoint.
    pub resume: Option<PathBuf>,
    /// Stop (and checkpoint) once this many total steps have been taken.
    pub stop_after: Option<usize>,
}

#[derive(Debug)]
pub struct RunSummary {
    /// Rows logged by this invocation.
    pub rows: Vec<MetricsRow>,
    pub metrics: PathBuf,
    pub checkpoint: PathBuf,
    pub state: TrainState,
}

pub fn run_paths(out_dir: &Path) -> (PathBuf, PathBuf) {
    (out_dir.join(METRICS_FILE), out_dir.join(CHECKPOINT_FILE))
}

pub fn pretrain(cfg: &TrainConfig, data: &Dataset, opts: &RunOptions) -> anyhow::Result<RunSummary> {
    cfg.validate()?;
    ensure!(data.classes == cfg.classes, "class mismatch: dataset has {}, config {}", data.classes, cfg.classes);
    ensure!(
        data.train.images.shape()[2..] == [cfg.image_size.0, cfg.image_size.1],
        "dataset images are {:?}, config wants {:?}",
        &data.train.images.shape()[2..],
        cfg.image_size
    );
    std::fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    std::fs::write(cfg.out_dir.join(CONFIG_FILE), cfg.to_toml())?;
    let (metrics_path, ckpt_path) = run_paths(&cfg.out_dir);

    let mut state = match &opts.resume {
        Some(p) => TrainState::from_checkpoint(cfg, &Checkpoint::load(p)?)?,
        None => TrainState::init(cfg)?,
    };
    ensure!(state.objective() == cfg.objective, "objective mismatch");
    let mut writer = match opts.resume {
        Some(_) => MetricsWriter::resume(&metrics_path, cfg.levels, state.step)?,
        None => MetricsWriter::create(&metrics_path, cfg.levels)?,
    };

    let spe = cfg.steps_per_epoch();
    let total = cfg.total_steps();
    let end = opts.stop_after.map_or(total, |s| s.min(total));
    let (optim, ssl, policies) = (cfg.optim(), cfg.ssl(), cfg.policies());
    let weights = cfg.level_weights.resolve(cfg.levels)?;
    let started = Instant::now();
    let mut rows = vec![];
    let mut order: (usize, Vec<usize>) = (usize::MAX, vec![]);
    let mut epoch_rows: Vec<MetricsRow> = vec![];

    while state.step < end {
        let step = state.step;
        let (epoch, k) = (step / spe, step % spe);
        if order.0 != epoch {
            order = (epoch, epoch_order(cfg.seed, epoch, data.train.len()));
        }
        let idx = &order.1[k * cfg.batch_size..(k + 1) * cfg.batch_size];
        let batch = data.train.gather(idx);
        let lr = lr_schedule(step, spe, &optim);

        let outcome = match &mut state.model {
            Model::Ssl { pair, opt } => {
                let m = momentum_schedule(step, total, cfg.ema_base);
                let (a, b) = two_views(&batch, &policies, aug_seed(cfg.seed, step))?;
                ssl_step(pair, opt, [&a, &b], &ssl, lr, m, montage_rng(cfg.seed, step)).map(|o| {
                    let pad = |v: &[f64]| (0..cfg.levels).map(|l| v.get(l).copied()).collect::<Vec<_>>();
                    MetricsRow {
                        step,
                        epoch,
                        lr,
                        ema_m: Some(m),
                        total_loss: o.total,
                        level_losses: pad(&o.per_level),
                        level_weights: pad(&o.weights),
                        pos_cos: Some(o.pos_cos),
                        neg_cos: Some(o.neg_cos),
                        wall_time: 0.0,
                    }
                })
            }
            Model::Supervised { net, store, opt } => {
                let labels = data.train.labels_of(idx);
                let x = single_view(&batch, &policies[0], aug_seed(cfg.seed, step))?;
                let norms = store.norms.clone();
                let r = net.step(store, opt, &x, &labels, &cfg.level_weights, lr, montage_rng(cfg.seed, step));
                if r.is_err() {
                    store.norms = norms;
                }
                r.map(|o| MetricsRow {
                    step,
                    epoch,
                    lr,
                    ema_m: None,
                    total_loss: o.loss,
                    level_losses: o.per_level.clone(),
                    level_weights: o.per_level.iter().zip(&weights).map(|(l, &w)| l.map(|_| w)).collect(),
                    pos_cos: None,
                    neg_cos: None,
                    wall_time: 0.0,
                })
            }
        };
        let mut row = match outcome {
            Ok(r) => r,
            Err(e) => {
                // the failed step left the state untouched: keep it as the
                // last good checkpoint
                state.to_checkpoint(cfg).save(&ckpt_path)?;
                return Err(e).with_context(|| format!("step {step} failed; last good state saved to {}", ckpt_path.display()));
            }
        };
        row.wall_time = started.elapsed().as_secs_f64();
        state.step += 1;

        if step % cfg.log_every == 0 {
            writer.append(&row)?;
        }
        epoch_rows.push(row.clone());
        rows.push(row);

        if state.step % spe == 0 {
            let done = state.step / spe;
            let mean = |f: &dyn Fn(&MetricsRow) -> Option<f64>| crate::metrics::mean_of(&epoch_rows, f).unwrap_or(f64::NAN);
            info!(
                "epoch {done}/{}: loss {:.4}, pos cos {:.3}, neg cos {:.3}, lr {:.4}, {:.0}s",
                cfg.epochs,
                mean(&|r| Some(r.total_loss)),
                mean(&|r| r.pos_cos),
                mean(&|r| r.neg_cos),
                lr,
                started.elapsed().as_secs_f64()
            );
            epoch_rows.clear();
            if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
                state.to_checkpoint(cfg).save(&ckpt_path)?;
            }
        }
    }
    state.to_checkpoint(cfg).save(&ckpt_path)?;
    Ok(RunSummary {
        rows,
        metrics: metrics_path,
        checkpoint: ckpt_path,
        state,
    })
}

/// Loads a checkpoint against its run config, checking the hash.
pub fn load_state(cfg: &TrainConfig, ckpt: &Path) -> anyhow::Result<TrainState> {
    let c = Checkpoint::load(ckpt)?;
    if c.config_hash != cfg.hash() {
        bail!("{} was written by a different configuration", ckpt.display());
    }
    TrainState::from_checkpoint(cfg, &c)
}
