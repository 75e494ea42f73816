//! Labeled image sets: procedurally rendered shapes, or a directory of PPMs.
//!
//! A procedural image is a smooth random-color background with one large
//! shape of the labeled type and up to two small distractors of other
//! types. Every image draws from its own stream `(seed, split, index)`, so
//! generation is order-independent and can run on the worker pool.

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context};
use rand::Rng;
use serde::{Deserialize, Serialize};

use mcl_core::ops::bilinear_resize;
use mcl_core::{par, SeededRng, Tensor};

use crate::ppm;

/// Shape vocabulary of the procedural generator, in label order.
pub const SHAPES: [&str; 10] = [
    "disk", "square", "triangle", "plus", "ring", "bar", "diamond", "frame", "cross", "half-disk",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    ProceduralShapes,
    ImageDirectory,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub dir: Option<PathBuf>,
    pub n_train: usize,
    pub n_eval: usize,
    pub classes: usize,
    pub image_size: (usize, usize),
    pub seed: u64,
}

impl DatasetSpec {
    /// `levels` montage levels need both sides divisible by `2^(levels-1)`.
    pub fn validate(&self, levels: usize) -> anyhow::Result<()> {
        let d = 1usize << levels.saturating_sub(1);
        let (h, w) = self.image_size;
        ensure!(h > 0 && w > 0, "image_size must be positive");
        ensure!(h % d == 0 && w % d == 0, "image_size {h}x{w} is not divisible by 2^(S-1) = {d}");
        ensure!(self.classes >= 2, "need at least 2 classes");
        match self.kind {
            DatasetKind::ProceduralShapes => {
                ensure!(self.classes <= SHAPES.len(), "procedural shapes support at most {} classes", SHAPES.len());
                ensure!(self.n_train > 0 && self.n_eval > 0, "n_train and n_eval must be positive");
            }
            DatasetKind::ImageDirectory => ensure!(self.dir.is_some(), "image-directory datasets need data_dir"),
        }
        Ok(())
    }
}

/// `images: [N, 3, H, W]` in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImages {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
}

impl LabeledImages {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Images at `idx`, stacked in that order.
    pub fn gather(&self, idx: &[usize]) -> Tensor<f32> {
        let per = self.images.numel() / self.len().max(1);
        let mut shape = self.images.shape().to_vec();
        shape[0] = idx.len();
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            data.extend_from_slice(self.images.slab(i));
        }
        Tensor::new(shape, data).expect("gathered slabs match the shape")
    }

    pub fn labels_of(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.labels[i]).collect()
    }

    pub fn histogram(&self, classes: usize) -> Vec<usize> {
        let mut h = vec![0; classes];
        self.labels.iter().for_each(|&y| h[y] += 1);
        h
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: LabeledImages,
    pub eval: LabeledImages,
    pub classes: usize,
}

pub fn load(spec: &DatasetSpec) -> anyhow::Result<Dataset> {
    match spec.kind {
        DatasetKind::ProceduralShapes => generate_toy_dataset(spec),
        DatasetKind::ImageDirectory => {
            let dir = spec.dir.as_deref().context("image-directory datasets need data_dir")?;
            load_image_dir(dir, spec)
        }
    }
}

pub fn generate_toy_dataset(spec: &DatasetSpec) -> anyhow::Result<Dataset> {
    spec.validate(1)?;
    let split = |tag: u64, n: usize| -> anyhow::Result<LabeledImages> {
        let imgs = par::map(n, |i| {
            let label = i % spec.classes;
            render(label, spec.classes, spec.image_size, SeededRng::derive(spec.seed, &[0xDA7A, tag, i as u64]))
        });
        Ok(LabeledImages {
            images: Tensor::stack(&imgs)?,
            labels: (0..n).map(|i| i % spec.classes).collect(),
        })
    };
    Ok(Dataset {
        train: split(0, spec.n_train)?,
        eval: split(1, spec.n_eval)?,
        classes: spec.classes,
    })
}

/// Point-in-shape test in shape-local coordinates scaled to radius 1
/// (`y` grows downward).
fn inside(shape: usize, u: f64, v: f64) -> bool {
    let (au, av) = (u.abs(), v.abs());
    let rho2 = u * u + v * v;
    match shape {
        0 => rho2 <= 1.0,
        1 => au.max(av) <= 0.8,
        2 => {
            // apex up, base at v = 0.6
            v <= 0.6 && v >= -1.0 && au <= (v + 1.0) * 0.55
        }
        3 => (au <= 0.3 && av <= 1.0) || (av <= 0.3 && au <= 1.0),
        4 => (0.3..=1.0).contains(&rho2),
        5 => au <= 1.0 && av <= 0.35,
        6 => au + av <= 1.0,
        7 => au.max(av) <= 0.85 && au.max(av) >= 0.5,
        8 => {
            let (p, q) = ((u + v) * std::f64::consts::FRAC_1_SQRT_2, (u - v) * std::f64::consts::FRAC_1_SQRT_2);
            (p.abs() <= 0.25 && q.abs() <= 1.0) || (q.abs() <= 0.25 && p.abs() <= 1.0)
        }
        9 => rho2 <= 1.0 && v <= 0.1,
        _ => unreachable!("shape index checked by the caller"),
    }
}

struct Placed {
    shape: usize,
    cx: f64,
    cy: f64,
    r: f64,
    angle: f64,
    color: [f64; 3],
}

impl Placed {
    /// Coverage from a 2x2 supersample of pixel `(x, y)`.
    fn coverage(&self, x: usize, y: usize) -> f64 {
        let (s, c) = self.angle.sin_cos();
        let mut hit = 0;
        for (dx, dy) in [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)] {
            let (px, py) = (x as f64 + dx - self.cx, y as f64 + dy - self.cy);
            let (u, v) = ((c * px + s * py) / self.r, (-s * px + c * py) / self.r);
            hit += inside(self.shape, u, v) as usize;
        }
        hit as f64 / 4.0
    }
}

fn vivid(g: &mut impl Rng) -> [f64; 3] {
    // a random hue at high saturation, so shapes stand out from the muted
    // background
    let h = g.random_range(0.0..6.0);
    let x = 1.0 - ((h % 2.0) - 1.0f64).abs();
    let (r, gr, b) = match h as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    let v = g.random_range(0.6..1.0);
    [r * v, gr * v, b * v]
}

/// One `[3, H, W]` image whose largest shape has type `label`.
fn render(label: usize, classes: usize, (h, w): (usize, usize), rng: SeededRng) -> Tensor<f32> {
    let mut g = rng.generator();
    let side = h.min(w) as f64;

    // low-frequency background: a random 4x4 grid of near-gray cells,
    // bilinearly enlarged. Keeping it muted stops per-image background color
    // from being the easiest thing to tell instances apart by.
    let cells: Vec<f64> = (0..16).map(|_| g.random_range(0.15..0.55)).collect();
    let grid = Tensor::<f64>::from_fn(&[1, 3, 4, 4], |i| cells[i % 16] + g.random_range(-0.04..0.04));
    let bg = bilinear_resize(&grid, h, w).expect("positive size");
    let mut img = bg.into_data();

    let mut shapes = vec![];
    for _ in 0..g.random_range(0..=2usize) {
        let other = (label + g.random_range(1..classes)) % classes;
        shapes.push(Placed {
            shape: other,
            cx: g.random_range(0.12..0.88) * w as f64,
            cy: g.random_range(0.12..0.88) * h as f64,
            r: g.random_range(0.07..0.12) * side,
            angle: g.random_range(-0.3..0.3),
            color: vivid(&mut g),
        });
    }
    let r = g.random_range(0.22..0.32) * side;
    shapes.push(Placed {
        shape: label,
        cx: g.random_range(r..w as f64 - r),
        cy: g.random_range(r..h as f64 - r),
        r,
        angle: g.random_range(-0.3..0.3),
        color: vivid(&mut g),
    });

    // distractors first, the labeled shape on top
    for s in &shapes {
        let (x0, x1) = (((s.cx - 1.5 * s.r).floor().max(0.0)) as usize, ((s.cx + 1.5 * s.r).ceil() as usize).min(w));
        let (y0, y1) = (((s.cy - 1.5 * s.r).floor().max(0.0)) as usize, ((s.cy + 1.5 * s.r).ceil() as usize).min(h));
        for y in y0..y1 {
            for x in x0..x1 {
                let a = s.coverage(x, y);
                if a > 0.0 {
                    for (c, &col) in s.color.iter().enumerate() {
                        let p = &mut img[(c * h + y) * w + x];
                        *p = (1.0 - a) * *p + a * col;
                    }
                }
            }
        }
    }
    Tensor::new(vec![3, h, w], img.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect()).expect("image buffer")
}

/// `<root>/{train,eval}/<class>/*.ppm`, classes in lexicographic order,
/// every image bilinearly resized to `image_size`.
pub fn load_image_dir(root: &Path, spec: &DatasetSpec) -> anyhow::Result<Dataset> {
    let class_names = |split: &Path| -> anyhow::Result<Vec<String>> {
        let mut names = vec![];
        for e in std::fs::read_dir(split).with_context(|| format!("listing {}", split.display()))? {
            let e = e?;
            if e.file_type()?.is_dir() {
                names.push(e.file_name().to_string_lossy().into_owned());
            }
        }
        names.sort();
        Ok(names)
    };
    let train_classes = class_names(&root.join("train"))?;
    let eval_classes = class_names(&root.join("eval"))?;
    ensure!(train_classes == eval_classes, "train and eval class folders differ");
    if train_classes.len() != spec.classes {
        bail!("class mismatch: found {} class folders, config says {}", train_classes.len(), spec.classes);
    }
    let split = |name: &str| -> anyhow::Result<LabeledImages> {
        let (mut imgs, mut labels) = (vec![], vec![]);
        for (label, class) in train_classes.iter().enumerate() {
            let dir = root.join(name).join(class);
            let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "ppm"))
                .collect();
            files.sort();
            for f in files {
                let img = ppm::read(&f)?;
                let (c, h, w) = (img.dim(0), img.dim(1), img.dim(2));
                let img = bilinear_resize(&img.reshape(&[1, c, h, w])?, spec.image_size.0, spec.image_size.1)?;
                imgs.push(img.reshape(&[c, spec.image_size.0, spec.image_size.1])?);
                labels.push(label);
            }
        }
        ensure!(!imgs.is_empty(), "no .ppm images under {}", root.join(name).display());
        Ok(LabeledImages {
            images: Tensor::stack(&imgs)?,
            labels,
        })
    };
    Ok(Dataset {
        train: split("train")?,
        eval: split("eval")?,
        classes: spec.classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(n: usize) -> DatasetSpec {
        DatasetSpec {
            kind: DatasetKind::ProceduralShapes,
            dir: None,
            n_train: n,
            n_eval: 10,
            classes: 10,
            image_size: (32, 32),
            seed: 3,
        }
    }

    #[test]
    fn deterministic_and_bounded() {
        let a = generate_toy_dataset(&spec(20)).unwrap();
        let b = generate_toy_dataset(&spec(20)).unwrap();
        assert_eq!(a, b);
        assert!(a.train.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let c = generate_toy_dataset(&DatasetSpec { seed: 4, ..spec(20) }).unwrap();
        assert_ne!(a.train.images, c.train.images);
    }

    #[test]
    fn every_shape_fills_a_reasonable_area() {
        for shape in 0..SHAPES.len() {
            let n = 200;
            let mut hit = 0;
            for i in 0..n {
                for j in 0..n {
                    let (u, v) = (i as f64 / n as f64 * 2.0 - 1.0, j as f64 / n as f64 * 2.0 - 1.0);
                    hit += inside(shape, u, v) as usize;
                }
            }
            let frac = hit as f64 / (n * n) as f64;
            assert!((0.15..0.8).contains(&frac), "{}: {frac}", SHAPES[shape]);
        }
    }

    #[test]
    fn gather_keeps_order() {
        let d = generate_toy_dataset(&spec(6)).unwrap();
        let g = d.train.gather(&[4, 1]);
        assert_eq!(g.slab(0), d.train.images.slab(4));
        assert_eq!(g.slab(1), d.train.images.slab(1));
        assert_eq!(d.train.labels_of(&[4, 1]), vec![4, 1]);
    }

    #[test]
    fn divisibility() {
        let s = DatasetSpec {
            image_size: (64, 64),
            ..spec(1)
        };
        assert!(s.validate(4).is_ok());
        assert!(DatasetSpec { image_size: (36, 36), ..s }.validate(4).is_err());
    }
}
