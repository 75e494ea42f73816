use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use mcl_core::loss::MatchMode;
use mcl_harness::ablate::{ablate, Preset};
use mcl_harness::gradcheck::full_loss_check;
use mcl_harness::preview::montage_preview;
use mcl_harness::probe::{linear_probe, ProbeConfig};
use mcl_harness::train::{load_state, pretrain, RunOptions, TrainState};
use mcl_harness::{dataset, Objective, TrainConfig};

#[derive(Parser)]
#[command(name = "mcl", about = "Multi-level contrastive pre-training at desk scale")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Pre-train a network and write metrics.csv and checkpoint.ckpt.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_parser = ["a", "b", "c", "d"])]
        mode: Option<String>,
        #[arg(long)]
        levels: Option<usize>,
        #[arg(long, value_parser = ["ssl", "supervised"])]
        objective: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from a checkpoint written by the same configuration.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Linear probe of a checkpoint's frozen backbone.
    Probe {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Also probe a randomly initialized backbone for reference.
        #[arg(long)]
        baseline: bool,
    },
    /// Write one outlined montage per level as PPM.
    Preview {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an ablation grid: levels, modes, boundary, wd-sweep, rescale-sweep.
    Ablate {
        #[arg(long)]
        preset: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of the full loss in every matching mode.
    Gradcheck,
}

fn config(path: Option<&PathBuf>) -> anyhow::Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::load(p),
        None => Ok(TrainConfig::default()),
    }
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    match cli.cmd {
        Cmd::Pretrain {
            config: path,
            mode,
            levels,
            objective,
            out,
            resume,
        } => {
            let mut cfg = config(path.as_ref())?;
            if let Some(m) = mode {
                cfg.mode = m.parse::<MatchMode>()?;
            }
            if let Some(s) = levels {
                cfg.levels = s;
            }
            if let Some(o) = objective {
                cfg.objective = o.parse::<Objective>()?;
            }
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            cfg.validate()?;
            let data = dataset::load(&cfg.dataset_spec())?;
            let run = pretrain(&cfg, &data, &RunOptions { resume, stop_after: None })?;
            if let (Some(first), Some(last)) = (run.rows.first(), run.rows.last()) {
                println!("steps {}..={}: loss {:.4} -> {:.4}", first.step, last.step, first.total_loss, last.total_loss);
            }
            println!("metrics    {}", run.metrics.display());
            println!("checkpoint {}", run.checkpoint.display());
            Ok(true)
        }
        Cmd::Probe { ckpt, config: path, baseline } => {
            let cfg = TrainConfig::load(&path)?;
            let data = dataset::load(&cfg.dataset_spec())?;
            let state = load_state(&cfg, &ckpt)?;
            let (enc, store) = state.encoder();
            let r = linear_probe(enc, store, &data, &ProbeConfig::from(&cfg))?;
            println!("probe top-1 {:.4} (train {:.4}), backbone frozen: {}", r.top1, r.train_top1, r.frozen());
            if baseline {
                let init = TrainState::init(&cfg)?;
                let (enc, store) = init.encoder();
                let b = linear_probe(enc, store, &data, &ProbeConfig::from(&cfg))?;
                println!("random-init top-1 {:.4}", b.top1);
            }
            Ok(r.frozen())
        }
        Cmd::Preview { config: path, out } => {
            let cfg = config(path.as_ref())?;
            let data = dataset::load(&cfg.dataset_spec())?;
            for (p, _) in montage_preview(&cfg, &data, &out)? {
                println!("{}", p.display());
            }
            Ok(true)
        }
        Cmd::Ablate {
            preset,
            config: path,
            epochs,
            out,
        } => {
            let preset: Preset = preset.parse()?;
            let mut cfg = config(path.as_ref())?;
            if let Some(e) = epochs {
                cfg.epochs = e;
                cfg.warmup_epochs = cfg.warmup_epochs.min(e);
            }
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            cfg.validate()?;
            let data = dataset::load(&cfg.dataset_spec())?;
            let rows = ablate(preset, &cfg, &data)?;
            println!("cell\tfirst_loss\tlast_loss\tpos_cos\tneg_cos\tprobe_top1");
            for r in rows {
                println!(
                    "{}\t{:.4}\t{:.4}\t{:.3}\t{:.3}\t{:.4}",
                    r.cell, r.first_epoch_loss, r.last_epoch_loss, r.final_pos_cos, r.final_neg_cos, r.probe_top1
                );
            }
            Ok(true)
        }
        Cmd::Gradcheck => {
            let mut ok = true;
            for mode in MatchMode::ALL {
                let c = full_loss_check(mode).with_context(|| format!("mode {mode}"))?;
                let pass = c.report.max_rel_error < 1e-4;
                ok &= pass;
                println!(
                    "mode {mode}: {} coordinates, max relative error {:.3e}, exact zeros in {:?} [{}]",
                    c.report.checked,
                    c.report.max_rel_error,
                    c.zero_params,
                    if pass { "ok" } else { "FAIL" }
                );
            }
            Ok(ok)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
