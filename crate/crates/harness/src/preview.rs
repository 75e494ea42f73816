//! Montage previews: the first montage of every level with its tile
//! outlines drawn in, written as PPM.

use std::path::{Path, PathBuf};

use anyhow::Context;

use mcl_core::montage::{assemble, MontageBatch};
use mcl_core::{SeededRng, Tensor};

use crate::config::TrainConfig;
use crate::dataset::Dataset;
use crate::ppm;

const OUTLINE: [f32; 3] = [1.0, 1.0, 0.0];

/// Copy of montage `m` of `mb` with a one-pixel outline along the inside
/// edge of each of its tiles.
pub fn outlined(mb: &MontageBatch<f32>, m: usize) -> Tensor<f32> {
    let (c, h, w) = (mb.images.dim(1), mb.images.dim(2), mb.images.dim(3));
    let mut img = Tensor::new(vec![c, h, w], mb.images.slab(m).to_vec()).expect("montage slab");
    let d = img.data_mut();
    for t in mb.tiles.iter().filter(|t| t.montage == m) {
        let b = t.bx;
        for y in b.y0..b.y1 {
            for x in b.x0..b.x1 {
                if y == b.y0 || y + 1 == b.y1 || x == b.x0 || x + 1 == b.x1 {
                    for ch in 0..c.min(3) {
                        d[(ch * h + y) * w + x] = OUTLINE[ch];
                    }
                }
            }
        }
    }
    img
}

/// Assembles montages of the first `4^(S-1)` train images at every level
/// and writes `level{s}.ppm` into `out_dir`. Returns the paths and the
/// images as written (before quantization).
pub fn montage_preview(cfg: &TrainConfig, data: &Dataset, out_dir: &Path) -> anyhow::Result<Vec<(PathBuf, Tensor<f32>)>> {
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let n = 1usize << (2 * (cfg.levels - 1));
    anyhow::ensure!(data.train.len() >= n, "preview needs {n} images, dataset has {}", data.train.len());
    let batch = data.train.gather(&(0..n).collect::<Vec<_>>());
    let mut out = vec![];
    for s in 0..cfg.levels {
        let mb = assemble(&batch, s, SeededRng::derive(cfg.seed, &[0x9E7, s as u64]))?;
        let img = outlined(&mb, 0);
        let path = out_dir.join(format!("level{s}.ppm"));
        ppm::write(&path, &img)?;
        out.push((path, img));
    }
    Ok(out)
}
