//! Montage assembly.
//!
//! At level `s` every image of a `[B, C, H, W]` batch is downsampled by
//! `r = 2^s`, the batch is shuffled, and consecutive groups of `r * r`
//! downsampled images are tiled row-major into `B / r^2` montages of the
//! original `H x W` size. Shuffled image `m * r^2 + i * r + j` lands in tile
//! `(i, j)` of montage `m`, which is the same placement as reshaping to
//! `[B/r^2, r, r, C, H/r, W/r]` and permuting axes to `(0, 3, 1, 4, 2, 5)`.

use rand::seq::SliceRandom;

use crate::augment::gaussian_boundary_mask;
use crate::error::{invalid, Error, Result};
use crate::ops::bilinear_resize;
use crate::rng::SeededRng;
use crate::tensor::{Real, Tensor};

/// Half-open pixel box `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TileBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl TileBox {
    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn overlaps(&self, o: &TileBox) -> bool {
        self.x0 < o.x1 && o.x0 < self.x1 && self.y0 < o.y1 && o.y0 < self.y1
    }
}

/// One placed subimage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tile {
    pub montage: usize,
    pub row: usize,
    pub col: usize,
    pub bx: TileBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MontageBatch<T> {
    pub level: usize,
    pub ratio: usize,
    /// `[B / 4^s, C, H, W]`
    pub images: Tensor<T>,
    /// Indexed by tile slot `m * r^2 + i * r + j`.
    pub tiles: Vec<Tile>,
    /// `src_ids[slot]` is the batch index of the image placed in that slot.
    pub src_ids: Vec<usize>,
}

/// Row-major boxes of the `4^s` tiles of one `h x w` montage.
pub fn subimage_boxes(s: usize, h: usize, w: usize) -> Result<Vec<TileBox>> {
    let r = 1usize << s;
    if h % r != 0 || w % r != 0 {
        return Err(Error::Divisibility(format!(
            "image size {h}x{w} is not divisible by 2^{s} = {r}"
        )));
    }
    let (th, tw) = (h / r, w / r);
    Ok((0..r * r)
        .map(|t| {
            let (i, j) = (t / r, t % r);
            TileBox {
                x0: j * tw,
                y0: i * th,
                x1: (j + 1) * tw,
                y1: (i + 1) * th,
            }
        })
        .collect())
}

pub fn check_divisibility(b: usize, h: usize, w: usize, s: usize) -> Result<()> {
    let r = 1usize << s;
    if b % (r * r) != 0 || b == 0 {
        return Err(Error::Divisibility(format!(
            "batch size {b} is not divisible by 4^{s} = {}",
            r * r
        )));
    }
    if h % r != 0 {
        return Err(Error::Divisibility(format!("height {h} is not divisible by 2^{s} = {r}")));
    }
    if w % r != 0 {
        return Err(Error::Divisibility(format!("width {w} is not divisible by 2^{s} = {r}")));
    }
    Ok(())
}

pub fn assemble<T: Real>(batch: &Tensor<T>, s: usize, rng: SeededRng) -> Result<MontageBatch<T>> {
    assemble_with(batch, s, rng, None)
}

/// [`assemble`] with optional boundary smoothing: each downsampled tile is
/// multiplied by [`gaussian_boundary_mask`] with this `k` before placement.
pub fn assemble_with<T: Real>(
    batch: &Tensor<T>,
    s: usize,
    rng: SeededRng,
    smoothing: Option<f64>,
) -> Result<MontageBatch<T>> {
    if batch.ndim() != 4 {
        return Err(invalid!("montage input must be [B, C, H, W], got {:?}", batch.shape()));
    }
    let (b, c, h, w) = (batch.dim(0), batch.dim(1), batch.dim(2), batch.dim(3));
    check_divisibility(b, h, w, s)?;
    let r = 1usize << s;
    let (th, tw) = (h / r, w / r);

    let mut small = bilinear_resize(batch, th, tw)?;
    if let Some(k) = smoothing {
        let mask = gaussian_boundary_mask::<T>(th, tw, k)?;
        for plane in small.data_mut().chunks_mut(th * tw) {
            plane.iter_mut().zip(mask.data()).for_each(|(v, &m)| *v *= m);
        }
    }

    let mut src_ids: Vec<usize> = (0..b).collect();
    src_ids.shuffle(&mut rng.generator());

    let per_montage = r * r;
    let layout = subimage_boxes(s, h, w)?;
    let mut images = Tensor::zeros(&[b / per_montage, c, h, w]);
    let mut tiles = Vec::with_capacity(b);
    for (slot, &src) in src_ids.iter().enumerate() {
        let (m, t) = (slot / per_montage, slot % per_montage);
        let bx = layout[t];
        tiles.push(Tile {
            montage: m,
            row: t / r,
            col: t % r,
            bx,
        });
        let tile = small.slab(src);
        let dst = images.slab_mut(m);
        for ch in 0..c {
            for y in 0..th {
                let from = &tile[(ch * th + y) * tw..][..tw];
                dst[(ch * h + bx.y0 + y) * w + bx.x0..][..tw].copy_from_slice(from);
            }
        }
    }
    let mb = MontageBatch {
        level: s,
        ratio: r,
        images,
        tiles,
        src_ids,
    };
    debug_assert!(mb.validate().is_ok());
    Ok(mb)
}

/// Cuts the tiles back out, ordered by source index: `[B, C, H/r, W/r]`.
pub fn disassemble<T: Real>(mb: &MontageBatch<T>) -> Result<Tensor<T>> {
    let (c, h, w) = (mb.images.dim(1), mb.images.dim(2), mb.images.dim(3));
    let (th, tw) = (h / mb.ratio, w / mb.ratio);
    let b = mb.src_ids.len();
    let mut out = Tensor::zeros(&[b, c, th, tw]);
    for (slot, tile) in mb.tiles.iter().enumerate() {
        let src = mb.images.slab(tile.montage);
        let dst = out.slab_mut(mb.src_ids[slot]);
        for ch in 0..c {
            for y in 0..th {
                dst[(ch * th + y) * tw..][..tw]
                    .copy_from_slice(&src[(ch * h + tile.bx.y0 + y) * w + tile.bx.x0..][..tw]);
            }
        }
    }
    Ok(out)
}

impl<T: Real> MontageBatch<T> {
    pub fn batch_size(&self) -> usize {
        self.src_ids.len()
    }

    /// Slot holding source image `src`.
    pub fn slot_of(&self) -> Vec<usize> {
        let mut inv = vec![0; self.src_ids.len()];
        for (slot, &src) in self.src_ids.iter().enumerate() {
            inv[src] = slot;
        }
        inv
    }

    /// Checks the tiling and provenance invariants.
    pub fn validate(&self) -> Result<()> {
        let b = self.src_ids.len();
        let per = self.ratio * self.ratio;
        let (h, w) = (self.images.dim(2), self.images.dim(3));
        if self.images.dim(0) * per != b {
            return Err(invalid!("{} montages cannot hold {b} tiles", self.images.dim(0)));
        }
        let mut seen = vec![false; b];
        for &s in &self.src_ids {
            if s >= b || std::mem::replace(&mut seen[s], true) {
                return Err(invalid!("src_ids is not a permutation of 0..{b}"));
            }
        }
        for m in 0..self.images.dim(0) {
            let boxes: Vec<&TileBox> = self.tiles[m * per..(m + 1) * per].iter().map(|t| &t.bx).collect();
            let area: usize = boxes.iter().map(|bx| bx.area()).sum();
            if area != h * w {
                return Err(invalid!("montage {m}: tiles cover {area} of {} pixels", h * w));
            }
            for (i, a) in boxes.iter().enumerate() {
                if a.width() * self.ratio != w || a.height() * self.ratio != h || a.x1 > w || a.y1 > h {
                    return Err(invalid!("montage {m}: tile {a:?} has the wrong size"));
                }
                if boxes[i + 1..].iter().any(|bx| a.overlaps(bx)) {
                    return Err(invalid!("montage {m}: overlapping tiles"));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn batch(b: usize, h: usize, seed: u64) -> Tensor<f32> {
        let mut g = SeededRng::new(seed, 0).generator();
        Tensor::from_fn(&[b, 3, h, h], |_| g.random::<f32>())
    }

    #[test]
    fn level_zero_permutes_only() {
        let x = batch(4, 8, 1);
        let mb = assemble(&x, 0, SeededRng::new(1, 1)).unwrap();
        assert_eq!(mb.images.shape(), x.shape());
        for (slot, &src) in mb.src_ids.iter().enumerate() {
            assert_eq!(mb.images.slab(slot), x.slab(src));
        }
        assert_eq!(disassemble(&mb).unwrap(), x);
    }

    #[test]
    fn level_one_grid() {
        let mb = assemble(&batch(16, 8, 2), 1, SeededRng::new(2, 0)).unwrap();
        assert_eq!(mb.images.shape(), &[4, 3, 8, 8]);
        assert_eq!(mb.tiles.len(), 16);
        mb.validate().unwrap();
    }

    #[test]
    fn level_two_boxes() {
        let mb = assemble(&batch(16, 64, 3), 2, SeededRng::new(3, 0)).unwrap();
        assert_eq!(mb.images.dim(0), 1);
        assert!(mb.tiles.iter().all(|t| t.bx.width() == 16 && t.bx.height() == 16));
    }

    #[test]
    fn box_enumeration() {
        let tb = |x0, y0, x1, y1| TileBox { x0, y0, x1, y1 };
        assert_eq!(subimage_boxes(0, 6, 10).unwrap(), vec![tb(0, 0, 10, 6)]);
        assert_eq!(
            subimage_boxes(1, 4, 4).unwrap(),
            vec![tb(0, 0, 2, 2), tb(2, 0, 4, 2), tb(0, 2, 2, 4), tb(2, 2, 4, 4)]
        );
        let b = subimage_boxes(2, 32, 64).unwrap();
        assert_eq!(b.len(), 16);
        assert_eq!(b[0], tb(0, 0, 16, 8));
    }

    #[test]
    fn divisibility_errors_name_constraint() {
        let e = assemble(&batch(6, 8, 4), 1, SeededRng::new(0, 0)).unwrap_err().to_string();
        assert!(e.contains("batch size 6") && e.contains("4^1"), "{e}");
        let x = Tensor::<f32>::zeros(&[4, 1, 6, 8]);
        let e = assemble(&x, 2, SeededRng::new(0, 0)).unwrap_err().to_string();
        assert!(e.contains("batch size 4"), "{e}");
        let x = Tensor::<f32>::zeros(&[4, 1, 5, 8]);
        let e = assemble(&x, 1, SeededRng::new(0, 0)).unwrap_err();
        assert!(matches!(e, Error::Divisibility(_)));
        assert!(e.to_string().contains("height 5"), "{e}");
    }

    #[test]
    fn fixed_seed_fixed_permutation() {
        let x = batch(16, 8, 5);
        let a = assemble(&x, 1, SeededRng::new(9, 9)).unwrap();
        let b = assemble(&x, 1, SeededRng::new(9, 9)).unwrap();
        assert_eq!(a.src_ids, b.src_ids);
        let c = assemble(&x, 1, SeededRng::new(9, 10)).unwrap();
        assert_ne!(a.src_ids, c.src_ids);
    }

    #[test]
    fn smoothing_attenuates_tile_edges() {
        let x = Tensor::<f64>::ones(&[4, 1, 8, 8]);
        let mb = assemble_with(&x, 1, SeededRng::new(0, 0), Some(0.5)).unwrap();
        let corner = mb.images.at(&[0, 0, 0, 0]);
        let center = mb.images.at(&[0, 0, 2, 2]);
        assert!(corner < center && center <= 1.0);
    }
}
