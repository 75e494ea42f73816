//! Seeded two-view augmentation.
//!
//! The pipeline follows the usual BYOL recipe: random resized crop,
//! horizontal flip, color jitter (applied in a random order), grayscale,
//! Gaussian blur, solarization. Every draw comes from a [`SeededRng`]
//! derived from `(base_seed, image_index, view_index)`, so a batch is
//! reproducible bit for bit and each image can be processed independently.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::ops::bilinear_resize;
use crate::par;
use crate::rng::SeededRng;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugPolicy {
    /// Crop area as a fraction of the image, `(min, max)`.
    pub crop_scale: (f64, f64),
    /// Crop aspect ratio `w / h`, `(min, max)`.
    pub crop_ratio: (f64, f64),
    pub flip_p: f64,
    /// Brightness, contrast, saturation, hue strengths.
    pub jitter: (f64, f64, f64, f64),
    pub jitter_p: f64,
    pub blur_sigma: (f64, f64),
    pub blur_p: f64,
    pub grayscale_p: f64,
    pub solarize_threshold: f64,
    pub solarize_p: f64,
    /// Output `(H, W)`.
    pub out_size: (usize, usize),
}

impl AugPolicy {
    /// BYOL defaults for one view (`view` 0 or 1). With `asymmetric` the blur
    /// and solarize probabilities differ between views (1.0/0.1 and 0.0/0.2);
    /// otherwise both views use their average.
    pub fn byol(out_size: (usize, usize), view: usize, asymmetric: bool) -> Self {
        let (blur_p, solarize_p) = match (asymmetric, view) {
            (true, 0) => (1.0, 0.0),
            (true, _) => (0.1, 0.2),
            (false, _) => (0.55, 0.1),
        };
        Self {
            crop_scale: (0.08, 1.0),
            crop_ratio: (3.0 / 4.0, 4.0 / 3.0),
            flip_p: 0.5,
            jitter: (0.4, 0.4, 0.2, 0.1),
            jitter_p: 0.8,
            blur_sigma: (0.1, 2.0),
            blur_p,
            grayscale_p: 0.2,
            solarize_threshold: 0.5,
            solarize_p,
            out_size,
        }
    }

    /// Full-frame crop, no color changes.
    pub fn identity(out_size: (usize, usize)) -> Self {
        Self {
            crop_scale: (1.0, 1.0),
            crop_ratio: (1.0, 1.0),
            flip_p: 0.0,
            jitter: (0.0, 0.0, 0.0, 0.0),
            jitter_p: 0.0,
            blur_sigma: (0.1, 2.0),
            blur_p: 0.0,
            grayscale_p: 0.0,
            solarize_threshold: 0.5,
            solarize_p: 0.0,
            out_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("flip_p", self.flip_p),
            ("jitter_p", self.jitter_p),
            ("blur_p", self.blur_p),
            ("grayscale_p", self.grayscale_p),
            ("solarize_p", self.solarize_p),
            ("solarize_threshold", self.solarize_threshold),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(invalid!("{name} = {p} outside [0, 1]"));
            }
        }
        let (lo, hi) = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(invalid!("crop_scale ({lo}, {hi}) must satisfy 0 < min <= max <= 1"));
        }
        let (lo, hi) = self.crop_ratio;
        if !(lo > 0.0 && lo <= hi) {
            return Err(invalid!("crop_ratio ({lo}, {hi}) must satisfy 0 < min <= max"));
        }
        let (lo, hi) = self.blur_sigma;
        if !(lo > 0.0 && lo <= hi) {
            return Err(invalid!("blur_sigma ({lo}, {hi}) must satisfy 0 < min <= max"));
        }
        if self.out_size.0 == 0 || self.out_size.1 == 0 {
            return Err(invalid!("out_size {:?} must be positive", self.out_size));
        }
        Ok(())
    }

    /// Checks that `out_size` survives `levels` halvings.
    pub fn validate_levels(&self, levels: usize) -> Result<()> {
        let d = 1usize << levels.saturating_sub(1);
        if self.out_size.0 % d != 0 || self.out_size.1 % d != 0 {
            return Err(invalid!(
                "out_size {:?} not divisible by 2^(S-1) = {d}",
                self.out_size
            ));
        }
        Ok(())
    }
}

/// Crop window `(top, left, height, width)` in the torchvision
/// `RandomResizedCrop` style: ten rejection-sampled attempts, then a
/// center crop clamped to the ratio range.
fn sample_crop(rng: &mut impl Rng, h: usize, w: usize, policy: &AugPolicy) -> (usize, usize, usize, usize) {
    let area = (h * w) as f64;
    let (rlo, rhi) = (policy.crop_ratio.0.ln(), policy.crop_ratio.1.ln());
    for _ in 0..10 {
        let target = area * rng.random_range(policy.crop_scale.0..=policy.crop_scale.1);
        let ratio = rng.random_range(rlo..=rhi).exp();
        let cw = (target * ratio).sqrt().round() as usize;
        let ch = (target / ratio).sqrt().round() as usize;
        if cw > 0 && ch > 0 && cw <= w && ch <= h {
            let top = rng.random_range(0..=h - ch);
            let left = rng.random_range(0..=w - cw);
            return (top, left, ch, cw);
        }
    }
    let in_ratio = w as f64 / h as f64;
    let (ch, cw) = if in_ratio < policy.crop_ratio.0 {
        let cw = w;
        ((cw as f64 / policy.crop_ratio.0).round() as usize, cw)
    } else if in_ratio > policy.crop_ratio.1 {
        let ch = h;
        (ch, (ch as f64 * policy.crop_ratio.1).round() as usize)
    } else {
        (h, w)
    };
    let (ch, cw) = (ch.clamp(1, h), cw.clamp(1, w));
    ((h - ch) / 2, (w - cw) / 2, ch, cw)
}

fn crop<T: Real>(img: &Tensor<T>, top: usize, left: usize, ch: usize, cw: usize) -> Tensor<T> {
    let (c, w) = (img.dim(0), img.dim(2));
    let h = img.dim(1);
    let mut out = Tensor::zeros(&[c, ch, cw]);
    for k in 0..c {
        for y in 0..ch {
            let src = &img.data()[(k * h + top + y) * w + left..][..cw];
            out.data_mut()[(k * ch + y) * cw..][..cw].copy_from_slice(src);
        }
    }
    out
}

pub fn hflip<T: Real>(img: &Tensor<T>) -> Tensor<T> {
    let w = img.dim(img.ndim() - 1);
    let mut out = img.clone();
    for row in out.data_mut().chunks_mut(w) {
        row.reverse();
    }
    out
}

/// `v -> 1 - v` for every value at or above `threshold`.
pub fn solarize<T: Real>(img: &Tensor<T>, threshold: f64) -> Tensor<T> {
    let t = T::lit(threshold);
    img.map(|v| if v >= t { T::one() - v } else { v })
}

/// Clamps to `[0, 1]`, letting NaN through so corrupt input still surfaces
/// as a non-finite loss instead of turning black.
fn clamp01<T: Real>(img: &mut Tensor<T>) {
    img.data_mut().iter_mut().for_each(|v| {
        if *v < T::zero() {
            *v = T::zero();
        } else if *v > T::one() {
            *v = T::one();
        }
    });
}

fn luma<T: Real>(r: T, g: T, b: T) -> T {
    T::lit(0.299) * r + T::lit(0.587) * g + T::lit(0.114) * b
}

fn grayscale_in_place<T: Real>(img: &mut Tensor<T>) {
    if img.dim(0) != 3 {
        return;
    }
    let n = img.dim(1) * img.dim(2);
    let d = img.data_mut();
    for i in 0..n {
        let g = luma(d[i], d[n + i], d[2 * n + i]);
        d[i] = g;
        d[n + i] = g;
        d[2 * n + i] = g;
    }
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        (b - r) / d + 2.0
    } else {
        (r - g) / d + 4.0
    } / 6.0;
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6 % 2.0 - 1.0).abs());
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    (r + m, g + m, b + m)
}

#[derive(Clone, Copy)]
enum Jitter {
    Brightness(f64),
    Contrast(f64),
    Saturation(f64),
    Hue(f64),
}

fn apply_jitter<T: Real>(img: &mut Tensor<T>, j: Jitter) {
    let rgb = img.dim(0) == 3;
    let n = img.dim(1) * img.dim(2);
    match j {
        Jitter::Brightness(f) => {
            let f = T::lit(f);
            img.data_mut().iter_mut().for_each(|v| *v = *v * f);
        }
        Jitter::Contrast(f) => {
            let mean = if rgb {
                let d = img.data();
                (0..n).map(|i| luma(d[i], d[n + i], d[2 * n + i])).sum::<T>() / T::from_usize(n).unwrap()
            } else {
                img.sum() / T::from_usize(img.numel()).unwrap()
            };
            let f = T::lit(f);
            img.data_mut()
                .iter_mut()
                .for_each(|v| *v = (*v - mean) * f + mean);
        }
        Jitter::Saturation(f) if rgb => {
            let f = T::lit(f);
            let d = img.data_mut();
            for i in 0..n {
                let g = luma(d[i], d[n + i], d[2 * n + i]);
                for c in 0..3 {
                    d[c * n + i] = (d[c * n + i] - g) * f + g;
                }
            }
        }
        Jitter::Hue(shift) if rgb => {
            let d = img.data_mut();
            for i in 0..n {
                let px = |v: T| v.to_f64().unwrap();
                let (h, s, v) = rgb_to_hsv(px(d[i]), px(d[n + i]), px(d[2 * n + i]));
                let (r, g, b) = hsv_to_rgb(h + shift, s, v);
                d[i] = T::lit(r);
                d[n + i] = T::lit(g);
                d[2 * n + i] = T::lit(b);
            }
        }
        _ => {}
    }
    clamp01(img);
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur with edge clamping.
pub fn gaussian_blur<T: Real>(img: &Tensor<T>, sigma: f64) -> Tensor<T> {
    let (c, h, w) = (img.dim(0), img.dim(1), img.dim(2));
    let k: Vec<T> = gaussian_kernel(sigma).into_iter().map(T::lit).collect();
    let r = (k.len() / 2) as isize;
    let mut tmp = Tensor::zeros(img.shape());
    for ch in 0..c {
        for y in 0..h {
            let row = &img.data()[(ch * h + y) * w..][..w];
            let out = &mut tmp.data_mut()[(ch * h + y) * w..][..w];
            for (x, o) in out.iter_mut().enumerate() {
                *o = k
                    .iter()
                    .enumerate()
                    .map(|(i, &kv)| kv * row[(x as isize + i as isize - r).clamp(0, w as isize - 1) as usize])
                    .sum();
            }
        }
    }
    let mut out = Tensor::zeros(img.shape());
    for ch in 0..c {
        let plane = &tmp.data()[ch * h * w..][..h * w];
        for y in 0..h {
            for x in 0..w {
                out.data_mut()[(ch * h + y) * w + x] = k
                    .iter()
                    .enumerate()
                    .map(|(i, &kv)| kv * plane[(y as isize + i as isize - r).clamp(0, h as isize - 1) as usize * w + x])
                    .sum();
            }
        }
    }
    out
}

/// Runs the full pipeline on one `[C, H, W]` image with values in `[0, 1]`.
pub fn apply_pipeline<T: Real>(img: &Tensor<T>, policy: &AugPolicy, rng: SeededRng) -> Result<Tensor<T>> {
    if img.ndim() != 3 {
        return Err(shape_err!("augmentation wants [C, H, W], got {:?}", img.shape()));
    }
    policy.validate()?;
    let (h, w) = (img.dim(1), img.dim(2));
    if (h * w) as f64 * policy.crop_scale.0 < 1.0 {
        return Err(invalid!(
            "image {h}x{w} is smaller than the minimum crop (scale {})",
            policy.crop_scale.0
        ));
    }
    let mut g = rng.generator();

    let (top, left, ch, cw) = sample_crop(&mut g, h, w, policy);
    let cropped = crop(img, top, left, ch, cw);
    let c = img.dim(0);
    let (oh, ow) = policy.out_size;
    let mut out = bilinear_resize(&cropped.reshape(&[1, c, ch, cw])?, oh, ow)?.reshape(&[c, oh, ow])?;

    if g.random_bool(policy.flip_p) {
        out = hflip(&out);
    }
    if g.random_bool(policy.jitter_p) {
        let (b, ct, s, hu) = policy.jitter;
        let mut order = [0usize, 1, 2, 3];
        order.shuffle(&mut g);
        for o in order {
            let j = match o {
                0 => Jitter::Brightness(g.random_range((1.0 - b).max(0.0)..=1.0 + b)),
                1 => Jitter::Contrast(g.random_range((1.0 - ct).max(0.0)..=1.0 + ct)),
                2 => Jitter::Saturation(g.random_range((1.0 - s).max(0.0)..=1.0 + s)),
                _ => Jitter::Hue(g.random_range(-hu..=hu)),
            };
            apply_jitter(&mut out, j);
        }
    }
    if g.random_bool(policy.grayscale_p) {
        grayscale_in_place(&mut out);
    }
    if g.random_bool(policy.blur_p) {
        let sigma = g.random_range(policy.blur_sigma.0..=policy.blur_sigma.1);
        out = gaussian_blur(&out, sigma);
    }
    if g.random_bool(policy.solarize_p) {
        out = solarize(&out, policy.solarize_threshold);
    }
    clamp01(&mut out);
    Ok(out)
}

/// Augments every image of `batch: [B, C, H, W]` twice, with streams
/// `(base_seed, image, 0)` and `(base_seed, image, 1)`.
pub fn two_views<T: Real>(
    batch: &Tensor<T>,
    policies: &[AugPolicy; 2],
    base_seed: u64,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if batch.ndim() != 4 {
        return Err(shape_err!("two_views wants [B, C, H, W], got {:?}", batch.shape()));
    }
    let (c, h, w) = (batch.dim(1), batch.dim(2), batch.dim(3));
    let view = |v: usize| -> Result<Tensor<T>> {
        let imgs = par::map(batch.dim(0), |i| {
            let img = Tensor::new(vec![c, h, w], batch.slab(i).to_vec())?;
            apply_pipeline(&img, &policies[v], view_rng(base_seed, i, v))
        });
        Tensor::stack(&imgs.into_iter().collect::<Result<Vec<_>>>()?)
    };
    Ok((view(0)?, view(1)?))
}

pub fn view_rng(base_seed: u64, image: usize, view: usize) -> SeededRng {
    SeededRng::derive(base_seed, &[image as u64, view as u64])
}

/// `exp(-((x - cx)^2 / 2 sx^2 + (y - cy)^2 / 2 sy^2))` at pixel centers, with
/// `sx = k w`, `sy = k h`.
pub fn gaussian_boundary_mask<T: Real>(h: usize, w: usize, k: f64) -> Result<Tensor<T>> {
    if k.is_nan() || k <= 0.0 {
        return Err(invalid!("boundary mask k must be > 0, got {k}"));
    }
    let (sx, sy) = (k * w as f64, k * h as f64);
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    Ok(Tensor::from_fn(&[h, w], |i| {
        let (y, x) = ((i / w) as f64 + 0.5, (i % w) as f64 + 0.5);
        let e = (x - cx).powi(2) / (2.0 * sx * sx) + (y - cy).powi(2) / (2.0 * sy * sy);
        T::lit((-e).exp())
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_image(seed: u64) -> Tensor<f32> {
        let mut g = SeededRng::new(seed, 0).generator();
        Tensor::from_fn(&[3, 16, 16], |_| g.random::<f32>())
    }

    #[test]
    fn degenerate_policy_is_identity() {
        let img = sample_image(1);
        let out = apply_pipeline(&img, &AugPolicy::identity((16, 16)), SeededRng::new(3, 4)).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn flip_is_involution() {
        let img = sample_image(2);
        assert_eq!(hflip(&hflip(&img)), img);
        assert_ne!(hflip(&img), img);
    }

    #[test]
    fn solarize_hand_value() {
        let t = Tensor::<f64>::from_f64(&[2], &[0.9, 0.2]).unwrap();
        let s = solarize(&t, 0.5);
        assert!((s.data()[0] - 0.1).abs() < 1e-12);
        assert_eq!(s.data()[1], 0.2);
    }

    #[test]
    fn output_in_unit_range_and_deterministic() {
        let img = sample_image(3);
        for view in 0..2 {
            let p = AugPolicy::byol((16, 16), view, true);
            for s in 0..20 {
                let a = apply_pipeline(&img, &p, SeededRng::new(s, 1)).unwrap();
                let b = apply_pipeline(&img, &p, SeededRng::new(s, 1)).unwrap();
                assert_eq!(a, b);
                assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }

    #[test]
    fn rejects_tiny_image() {
        let img = Tensor::<f32>::zeros(&[3, 2, 2]);
        let p = AugPolicy::byol((2, 2), 0, true);
        assert!(apply_pipeline(&img, &p, SeededRng::new(0, 0)).is_err());
    }

    #[test]
    fn rejects_bad_probability() {
        let mut p = AugPolicy::identity((4, 4));
        p.flip_p = 1.5;
        assert!(p.validate().is_err());
        assert!(AugPolicy::identity((12, 12)).validate_levels(4).is_err());
        assert!(AugPolicy::identity((16, 16)).validate_levels(4).is_ok());
    }

    #[test]
    fn two_views_identity_policy() {
        let batch = Tensor::stack(&[sample_image(4), sample_image(5)]).unwrap();
        let id = AugPolicy::identity((16, 16));
        let (x, y) = two_views(&batch, &[id.clone(), id], 9).unwrap();
        assert_eq!(x, batch);
        assert_eq!(y, batch);
    }

    #[test]
    fn views_differ_per_image() {
        let imgs: Vec<_> = (0..4).map(sample_image).collect();
        let batch = Tensor::stack(&imgs).unwrap();
        let pol = [AugPolicy::byol((16, 16), 0, true), AugPolicy::byol((16, 16), 1, true)];
        let (x, y) = two_views(&batch, &pol, 11).unwrap();
        for i in 0..4 {
            assert_ne!(x.slab(i), y.slab(i), "image {i}");
        }
        let (x2, y2) = two_views(&batch, &pol, 11).unwrap();
        assert_eq!(x, x2);
        assert_eq!(y, y2);
    }

    #[test]
    fn view_streams_are_independent() {
        let img = sample_image(6);
        let p = AugPolicy::byol((16, 16), 0, false);
        let a = apply_pipeline(&img, &p, view_rng(5, 0, 0)).unwrap();
        let b = apply_pipeline(&img, &p, view_rng(5, 0, 1)).unwrap();
        assert_ne!(a, b);
        // the first view does not depend on whether the second was drawn
        assert_eq!(a, apply_pipeline(&img, &p, view_rng(5, 0, 0)).unwrap());
    }

    #[test]
    fn mask_values() {
        let m = gaussian_boundary_mask::<f64>(8, 8, 0.5).unwrap();
        assert!((m.at(&[0, 0]) - (-0.765625f64).exp()).abs() < 1e-12);
        assert!((m.at(&[0, 0]) - 0.4650).abs() < 1e-4);
        let odd = gaussian_boundary_mask::<f64>(5, 7, 0.3).unwrap();
        assert_eq!(odd.at(&[2, 3]), 1.0);
        let flat = gaussian_boundary_mask::<f64>(6, 6, f64::INFINITY).unwrap();
        assert!(flat.data().iter().all(|&v| v == 1.0));
        assert!(gaussian_boundary_mask::<f64>(4, 4, 0.0).is_err());
    }

    #[test]
    fn mask_symmetric() {
        let m = gaussian_boundary_mask::<f64>(6, 10, 0.75).unwrap();
        for y in 0..6 {
            for x in 0..10 {
                assert_eq!(m.at(&[y, x]), m.at(&[y, 9 - x]));
                assert_eq!(m.at(&[y, x]), m.at(&[5 - y, x]));
            }
        }
    }
}
