//! Named ablation grids. Every cell shares the base seed and epoch budget,
//! runs pre-training plus a linear probe, and yields one CSV row.

use std::path::Path;

use anyhow::{bail, Context};
use serde::Serialize;

use mcl_core::loss::MatchMode;
use mcl_core::optim::{RESCALE_SWEEP, WD_SWEEP};

use crate::config::TrainConfig;
use crate::dataset::Dataset;
use crate::metrics::mean_of;
use crate::probe::{linear_probe, ProbeConfig};
use crate::train::{pretrain, RunOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Levels,
    Modes,
    Boundary,
    WdSweep,
    RescaleSweep,
}

impl Preset {
    pub const ALL: [Preset; 5] = [Preset::Levels, Preset::Modes, Preset::Boundary, Preset::WdSweep, Preset::RescaleSweep];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Levels => "levels",
            Preset::Modes => "modes",
            Preset::Boundary => "boundary",
            Preset::WdSweep => "wd-sweep",
            Preset::RescaleSweep => "rescale-sweep",
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> anyhow::Result<Self> {
        match Preset::ALL.into_iter().find(|p| p.name() == s) {
            Some(p) => Ok(p),
            None => bail!(
                "unknown preset `{s}` (expected one of {})",
                Preset::ALL.map(|p| p.name()).join(", ")
            ),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Cell {
    pub name: String,
    pub cfg: TrainConfig,
}

/// The grid of `preset` around `base`; each cell writes into its own
/// subdirectory of `base.out_dir`.
pub fn cells(preset: Preset, base: &TrainConfig) -> Vec<Cell> {
    let cell = |name: String, f: &dyn Fn(&mut TrainConfig)| {
        let mut cfg = base.clone();
        f(&mut cfg);
        cfg.out_dir = base.out_dir.join(format!("{}-{name}", preset.name()));
        Cell { name, cfg }
    };
    match preset {
        Preset::Levels => (1..=4).map(|s| cell(format!("S{s}"), &|c| c.levels = s)).collect(),
        Preset::Modes => MatchMode::ALL.iter().map(|&m| cell(m.letter().to_string(), &|c| c.mode = m)).collect(),
        Preset::Boundary => [None, Some(0.75), Some(0.5)]
            .into_iter()
            .map(|k| {
                let name = k.map_or("none".to_string(), |k| format!("k{k}"));
                cell(name, &|c| c.boundary_smoothing = k)
            })
            .collect(),
        Preset::WdSweep => WD_SWEEP.iter().map(|&wd| cell(format!("wd{wd:e}"), &|c| c.weight_decay = wd)).collect(),
        Preset::RescaleSweep => RESCALE_SWEEP
            .iter()
            .map(|&a| cell(format!("div{a}"), &|c| c.weight_rescale = Some(a)))
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub preset: String,
    pub cell: String,
    pub levels: usize,
    pub mode: String,
    pub boundary_smoothing: Option<f64>,
    pub weight_decay: f64,
    pub weight_rescale: Option<f64>,
    pub epochs: usize,
    pub first_epoch_loss: f64,
    pub last_epoch_loss: f64,
    pub final_pos_cos: f64,
    pub final_neg_cos: f64,
    pub probe_top1: f64,
}

/// Runs every cell of `preset` and writes `ablation-<preset>.csv` into
/// `base.out_dir`.
pub fn ablate(preset: Preset, base: &TrainConfig, data: &Dataset) -> anyhow::Result<Vec<AblationRow>> {
    std::fs::create_dir_all(&base.out_dir)?;
    let mut rows = vec![];
    for c in cells(preset, base) {
        log::info!("ablation {} cell {}", preset.name(), c.name);
        let run = pretrain(&c.cfg, data, &RunOptions::default()).with_context(|| format!("cell {}", c.name))?;
        let spe = c.cfg.steps_per_epoch();
        let last_epoch = c.cfg.epochs - 1;
        let first: Vec<_> = run.rows.iter().filter(|r| r.step < spe).cloned().collect();
        let last: Vec<_> = run.rows.iter().filter(|r| r.epoch == last_epoch).cloned().collect();
        let (enc, store) = run.state.encoder();
        let probe = linear_probe(enc, store, data, &ProbeConfig::from(&c.cfg))?;
        rows.push(AblationRow {
            preset: preset.name().into(),
            cell: c.name.clone(),
            levels: c.cfg.levels,
            mode: c.cfg.mode.letter().to_string(),
            boundary_smoothing: c.cfg.boundary_smoothing,
            weight_decay: c.cfg.weight_decay,
            weight_rescale: c.cfg.weight_rescale,
            epochs: c.cfg.epochs,
            first_epoch_loss: mean_of(&first, |r| Some(r.total_loss)).unwrap_or(f64::NAN),
            last_epoch_loss: mean_of(&last, |r| Some(r.total_loss)).unwrap_or(f64::NAN),
            final_pos_cos: mean_of(&last, |r| r.pos_cos).unwrap_or(f64::NAN),
            final_neg_cos: mean_of(&last, |r| r.neg_cos).unwrap_or(f64::NAN),
            probe_top1: probe.top1,
        });
    }
    write_rows(&base.out_dir.join(format!("ablation-{}.csv", preset.name())), &rows)?;
    Ok(rows)
}

pub fn write_rows(path: &Path, rows: &[AblationRow]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grids_have_the_table_rows() {
        let base = TrainConfig::default();
        let names = |p| cells(p, &base).into_iter().map(|c| c.name).collect::<Vec<_>>();
        assert_eq!(names(Preset::Modes), ["a", "b", "c", "d"]);
        assert_eq!(names(Preset::Levels), ["S1", "S2", "S3", "S4"]);
        assert_eq!(names(Preset::Boundary), ["none", "k0.75", "k0.5"]);
        assert_eq!(cells(Preset::WdSweep, &base).len(), 3);
        assert_eq!(cells(Preset::RescaleSweep, &base).len(), 2);
        for p in Preset::ALL {
            for c in cells(p, &base) {
                c.cfg.validate().unwrap();
                assert_eq!(c.cfg.epochs, base.epochs);
                assert_eq!(c.cfg.seed, base.seed);
            }
        }
    }

    #[test]
    fn preset_names_parse() {
        for p in Preset::ALL {
            assert_eq!(p.name().parse::<Preset>().unwrap(), p);
        }
        assert!("nope".parse::<Preset>().is_err());
    }
}
