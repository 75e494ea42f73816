//! Forward and backward kernels on plain tensors.
//!
//! The [`Graph`](crate::autodiff::Graph) records calls to these and wires the
//! backward halves together; the forward halves are usable on their own.

use crate::error::{invalid, shape_err, Result};
use crate::par;
use crate::tensor::{gemm, Mat, Real, Tensor};

// ---------------------------------------------------------------------------
// convolution

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if x.len() != 4 || w.len() != 4 {
            return Err(shape_err!("conv2d wants 4-d input and kernel, got {x:?} and {w:?}"));
        }
        let (batch, cin, h, wd) = (x[0], x[1], x[2], x[3]);
        let (cout, wcin, kh, kw) = (w[0], w[1], w[2], w[3]);
        if cin != wcin {
            return Err(shape_err!(
                "conv2d input has {cin} channels but kernel {w:?} expects {wcin}"
            ));
        }
        if stride == 0 {
            return Err(invalid!("conv2d stride must be >= 1"));
        }
        if kh > h + 2 * pad || kw > wd + 2 * pad {
            return Err(shape_err!(
                "conv2d kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                wd + 2 * pad
            ));
        }
        Ok(Self {
            batch,
            cin,
            h,
            w: wd,
            cout,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (wd + 2 * pad - kw) / stride + 1,
        })
    }

    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Real>(img: &[T], g: &ConvGeom, cols: &mut [T]) {
    let p = g.p();
    for c in 0..g.cin {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &img[(c * g.h + iy as usize) * g.w..][..g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], g: &ConvGeom, img: &mut [T]) {
    let p = g.p();
    for c in 0..g.cin {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut img[(c * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// 2-d cross-correlation, `x: [B,Cin,H,W]`, `w: [Cout,Cin,kh,kw]`.
pub fn conv2d<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(x.shape(), w.shape(), stride, pad)?;
    if let Some(b) = b {
        if b.shape() != [g.cout] {
            return Err(shape_err!("conv2d bias {:?}, want [{}]", b.shape(), g.cout));
        }
    }
    let (k, p) = (g.k(), g.p());
    let in_per = g.cin * g.h * g.w;
    let mut out = Tensor::zeros(&[g.batch, g.cout, g.oh, g.ow]);
    par::for_chunks(out.data_mut(), g.cout * p, |i, dst| {
        let img = &x.data()[i * in_per..(i + 1) * in_per];
        if g.is_pointwise() {
            gemm(Mat::new(w.data(), g.cout, k), Mat::new(img, k, p), dst, false);
        } else {
            let mut cols = vec![T::zero(); k * p];
            im2col(img, &g, &mut cols);
            gemm(Mat::new(w.data(), g.cout, k), Mat::new(&cols, k, p), dst, false);
        }
        if let Some(b) = b {
            for (co, plane) in dst.chunks_mut(p).enumerate() {
                let bv = b.data()[co];
                plane.iter_mut().for_each(|v| *v += bv);
            }
        }
    });
    Ok(out)
}

pub struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Option<Tensor<T>>,
    pub db: Vec<T>,
}

pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
    dy: &Tensor<T>,
    need_dx: bool,
    need_dw: bool,
) -> Result<ConvGrads<T>> {
    let g = ConvGeom::new(x.shape(), w.shape(), stride, pad)?;
    let (k, p) = (g.k(), g.p());
    let in_per = g.cin * g.h * g.w;
    let out_per = g.cout * p;

    let per_image: Vec<(Option<Vec<T>>, Option<Vec<T>>)> = par::map(g.batch, |i| {
        let img = &x.data()[i * in_per..(i + 1) * in_per];
        let gy = &dy.data()[i * out_per..(i + 1) * out_per];
        let dx = need_dx.then(|| {
            let mut dcols = vec![T::zero(); k * p];
            gemm(Mat::new(w.data(), g.cout, k).t(), Mat::new(gy, g.cout, p), &mut dcols, false);
            if g.is_pointwise() {
                dcols
            } else {
                let mut dimg = vec![T::zero(); in_per];
                col2im(&dcols, &g, &mut dimg);
                dimg
            }
        });
        let dw = need_dw.then(|| {
            let mut dw = vec![T::zero(); g.cout * k];
            if g.is_pointwise() {
                gemm(Mat::new(gy, g.cout, p), Mat::new(img, k, p).t(), &mut dw, false);
            } else {
                let mut cols = vec![T::zero(); k * p];
                im2col(img, &g, &mut cols);
                gemm(Mat::new(gy, g.cout, p), Mat::new(&cols, k, p).t(), &mut dw, false);
            }
            dw
        });
        (dx, dw)
    });

    let mut dx = need_dx.then(|| Vec::with_capacity(x.numel()));
    let mut dw = need_dw.then(|| vec![T::zero(); g.cout * k]);
    for (dxi, dwi) in per_image {
        if let (Some(acc), Some(part)) = (dx.as_mut(), dxi) {
            acc.extend_from_slice(&part);
        }
        // summed in image order so the result does not depend on scheduling
        if let (Some(acc), Some(part)) = (dw.as_mut(), dwi) {
            acc.iter_mut().zip(&part).for_each(|(a, &v)| *a += v);
        }
    }
    let dx = dx.map(|d| Tensor::new(x.shape().to_vec(), d)).transpose()?;
    let dw = dw.map(|d| Tensor::new(w.shape().to_vec(), d)).transpose()?;

    let mut db = vec![T::zero(); g.cout];
    for i in 0..g.batch {
        for (co, plane) in dy.data()[i * out_per..(i + 1) * out_per].chunks(p).enumerate() {
            db[co] += plane.iter().copied().sum();
        }
    }
    Ok(ConvGrads { dx, dw, db })
}

// ---------------------------------------------------------------------------
// batch normalization

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Real> RunningStats<T> {
    pub fn fresh(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }

    /// `stat <- (1 - momentum) stat + momentum batch`; the variance fed in is
    /// the unbiased batch estimate.
    pub fn update(&mut self, mean: &[T], var_unbiased: &[T], momentum: T) {
        let keep = T::one() - momentum;
        for (r, &m) in self.mean.iter_mut().zip(mean) {
            *r = keep * *r + momentum * m;
        }
        for (r, &v) in self.var.iter_mut().zip(var_unbiased) {
            *r = keep * *r + momentum * v;
        }
    }
}

/// Layout helper: `[N, C, rest...]` as `(N, C, prod(rest))`.
fn ncl(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(shape_err!("batch norm wants at least [N, C], got {shape:?}"));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

pub struct BnTrainOut<T> {
    pub y: Tensor<T>,
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    /// Biased per-channel variance used for normalization.
    pub var: Vec<T>,
    pub count: usize,
}

pub fn batchnorm_train<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<BnTrainOut<T>> {
    let (n, c, l) = ncl(x.shape())?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(shape_err!("batch norm affine params must be [{c}]"));
    }
    let count = n * l;
    if count < 2 {
        return Err(invalid!(
            "train-mode batch norm needs at least 2 values per channel, got {count}"
        ));
    }
    let xs = x.data();
    let stats: Vec<(T, T)> = par::map(c, |ch| {
        let mut s = T::zero();
        for i in 0..n {
            s += xs[(i * c + ch) * l..][..l].iter().copied().sum::<T>();
        }
        let mean = s / T::from_usize(count).unwrap();
        let mut v = T::zero();
        for i in 0..n {
            for &e in &xs[(i * c + ch) * l..][..l] {
                let d = e - mean;
                v += d * d;
            }
        }
        (mean, v / T::from_usize(count).unwrap())
    });
    let mean: Vec<T> = stats.iter().map(|s| s.0).collect();
    let var: Vec<T> = stats.iter().map(|s| s.1).collect();
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); xs.len()];
    let mut y = Tensor::zeros(x.shape());
    for i in 0..n {
        for ch in 0..c {
            let o = (i * c + ch) * l;
            let (g, b) = (gamma.data()[ch], beta.data()[ch]);
            for j in o..o + l {
                let h = (xs[j] - mean[ch]) * inv_std[ch];
                xhat[j] = h;
                y.data_mut()[j] = g * h + b;
            }
        }
    }
    Ok(BnTrainOut {
        y,
        xhat,
        inv_std,
        mean,
        var,
        count,
    })
}

pub fn batchnorm_eval<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    stats: &RunningStats<T>,
    eps: T,
) -> Result<(Tensor<T>, Vec<T>)> {
    let (n, c, l) = ncl(x.shape())?;
    if gamma.shape() != [c] || beta.shape() != [c] || stats.mean.len() != c {
        return Err(shape_err!("batch norm params must have {c} channels"));
    }
    let inv_std: Vec<T> = stats.var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut y = Tensor::zeros(x.shape());
    for i in 0..n {
        for ch in 0..c {
            let o = (i * c + ch) * l;
            let scale = gamma.data()[ch] * inv_std[ch];
            let shift = beta.data()[ch] - stats.mean[ch] * scale;
            for j in o..o + l {
                y.data_mut()[j] = x.data()[j] * scale + shift;
            }
        }
    }
    Ok((y, inv_std))
}

/// Batch norm over `[N, C, ...]` (per-channel statistics across all other
/// axes). Train mode normalizes with the biased batch variance and folds the
/// batch statistics into `stats`; eval mode reads `stats` and rejects `None`.
pub fn batchnorm2d<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
    mode: BnMode,
    stats: &mut Option<RunningStats<T>>,
    momentum: T,
) -> Result<Tensor<T>> {
    match mode {
        BnMode::Train => {
            let out = batchnorm_train(x, gamma, beta, eps)?;
            let unbiased = unbiased_var(&out.var, out.count);
            stats
                .get_or_insert_with(|| RunningStats::fresh(out.mean.len()))
                .update(&out.mean, &unbiased, momentum);
            Ok(out.y)
        }
        BnMode::Eval => {
            let s = stats
                .as_ref()
                .ok_or_else(|| crate::error::Error::UninitializedStats("batchnorm2d".into()))?;
            Ok(batchnorm_eval(x, gamma, beta, s, eps)?.0)
        }
    }
}

pub(crate) fn unbiased_var<T: Real>(var: &[T], count: usize) -> Vec<T> {
    let f = T::from_usize(count).unwrap() / T::from_usize(count - 1).unwrap();
    var.iter().map(|&v| v * f).collect()
}

/// Returns `(dx, dgamma, dbeta)` for train-mode batch norm.
pub fn batchnorm_train_backward<T: Real>(
    shape: &[usize],
    gamma: &[T],
    xhat: &[T],
    inv_std: &[T],
    dy: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (n, c, l) = ncl(shape).expect("validated in forward");
    let count = T::from_usize(n * l).unwrap();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for i in 0..n {
        for ch in 0..c {
            let o = (i * c + ch) * l;
            for j in o..o + l {
                dgamma[ch] += dy[j] * xhat[j];
                dbeta[ch] += dy[j];
            }
        }
    }
    let mut dx = vec![T::zero(); dy.len()];
    for i in 0..n {
        for ch in 0..c {
            let o = (i * c + ch) * l;
            let k = gamma[ch] * inv_std[ch] / count;
            for j in o..o + l {
                dx[j] = k * (count * dy[j] - dbeta[ch] - xhat[j] * dgamma[ch]);
            }
        }
    }
    (dx, dgamma, dbeta)
}

// ---------------------------------------------------------------------------
// resizing

/// Per output index: `(lo, hi, frac)` with half-pixel centers.
pub(crate) fn bilinear_taps<T: Real>(inp: usize, out: usize) -> Vec<(usize, usize, T)> {
    let scale = inp as f64 / out as f64;
    (0..out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(inp - 1);
            let hi = (lo + 1).min(inp - 1);
            let frac = if lo == hi { 0.0 } else { src - lo as f64 };
            (lo, hi, T::lit(frac))
        })
        .collect()
}

fn check_resize(shape: &[usize], out_h: usize, out_w: usize) -> Result<(usize, usize, usize)> {
    if shape.len() != 4 {
        return Err(shape_err!("resize wants [B,C,H,W], got {shape:?}"));
    }
    if out_h == 0 || out_w == 0 || shape[2] == 0 || shape[3] == 0 {
        return Err(shape_err!("resize {shape:?} -> {out_h}x{out_w}"));
    }
    Ok((shape[0] * shape[1], shape[2], shape[3]))
}

/// Bilinear resampling with half-pixel centers (align-corners false).
pub fn bilinear_resize<T: Real>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (planes, h, w) = check_resize(x.shape(), out_h, out_w)?;
    let ty = bilinear_taps::<T>(h, out_h);
    let tx = bilinear_taps::<T>(w, out_w);
    let mut out = Tensor::zeros(&[x.dim(0), x.dim(1), out_h, out_w]);
    par::for_chunks(out.data_mut(), out_h * out_w, |pl, dst| {
        let src = &x.data()[pl * h * w..(pl + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let (r0, r1) = (&src[y0 * w..][..w], &src[y1 * w..][..w]);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = r0[x0] * (T::one() - fx) + r0[x1] * fx;
                let bot = r1[x0] * (T::one() - fx) + r1[x1] * fx;
                dst[oy * out_w + ox] = top * (T::one() - fy) + bot * fy;
            }
        }
    });
    debug_assert_eq!(planes * out_h * out_w, out.numel());
    Ok(out)
}

pub fn bilinear_resize_backward<T: Real>(in_shape: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (in_shape[2], in_shape[3]);
    let (out_h, out_w) = (dy.dim(2), dy.dim(3));
    let ty = bilinear_taps::<T>(h, out_h);
    let tx = bilinear_taps::<T>(w, out_w);
    let mut dx = Tensor::zeros(in_shape);
    par::for_chunks(dx.data_mut(), h * w, |pl, dst| {
        let g = &dy.data()[pl * out_h * out_w..(pl + 1) * out_h * out_w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let v = g[oy * out_w + ox];
                let (top, bot) = (v * (T::one() - fy), v * fy);
                dst[y0 * w + x0] += top * (T::one() - fx);
                dst[y0 * w + x1] += top * fx;
                dst[y1 * w + x0] += bot * (T::one() - fx);
                dst[y1 * w + x1] += bot * fx;
            }
        }
    });
    dx
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample_nearest2x<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, h, w) = check_resize(x.shape(), 1, 1)?;
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Tensor::zeros(&[x.dim(0), x.dim(1), oh, ow]);
    par::for_chunks(out.data_mut(), oh * ow, |pl, dst| {
        let src = &x.data()[pl * h * w..(pl + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                dst[oy * ow + ox] = src[(oy / 2) * w + ox / 2];
            }
        }
    });
    Ok(out)
}

pub fn upsample_nearest2x_backward<T: Real>(in_shape: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (in_shape[2], in_shape[3]);
    let ow = 2 * w;
    let mut dx = Tensor::zeros(in_shape);
    par::for_chunks(dx.data_mut(), h * w, |pl, dst| {
        let g = &dy.data()[pl * 4 * h * w..(pl + 1) * 4 * h * w];
        for (i, v) in g.iter().enumerate() {
            let (oy, ox) = (i / ow, i % ow);
            dst[(oy / 2) * w + ox / 2] += *v;
        }
    });
    dx
}

// ---------------------------------------------------------------------------
// pooling

/// Integer-aligned region of one feature map in a batch, `[x0,x1) x [y0,y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Roi {
    pub image: usize,
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Roi {
    pub fn area(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    fn validate(&self, n: usize, h: usize, w: usize) -> Result<()> {
        if self.image >= n || self.x0 >= self.x1 || self.y0 >= self.y1 || self.x1 > w || self.y1 > h
        {
            return Err(invalid!("region {self:?} empty or outside {n} maps of {h}x{w}"));
        }
        Ok(())
    }
}

/// Channelwise mean of `fmap: [C,h,w]` over the box `(x0, y0, x1, y1)`.
pub fn region_avg_pool<T: Real>(fmap: &Tensor<T>, bx: (usize, usize, usize, usize)) -> Result<Tensor<T>> {
    if fmap.ndim() != 3 {
        return Err(shape_err!("region_avg_pool wants [C,h,w], got {:?}", fmap.shape()));
    }
    let x = fmap.clone().reshape(&[1, fmap.dim(0), fmap.dim(1), fmap.dim(2)])?;
    let roi = Roi {
        image: 0,
        x0: bx.0,
        y0: bx.1,
        x1: bx.2,
        y1: bx.3,
    };
    roi_avg_pool(&x, &[roi])?.reshape(&[fmap.dim(0)])
}

/// Mean-pools each region of `x: [N,C,h,w]`; output `[R, C]`.
pub fn roi_avg_pool<T: Real>(x: &Tensor<T>, rois: &[Roi]) -> Result<Tensor<T>> {
    if x.ndim() != 4 {
        return Err(shape_err!("roi pooling wants [N,C,h,w], got {:?}", x.shape()));
    }
    let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    for r in rois {
        r.validate(n, h, w)?;
    }
    let mut out = Tensor::zeros(&[rois.len(), c]);
    par::for_chunks(out.data_mut(), c, |i, row| {
        let r = rois[i];
        let inv = T::one() / T::from_usize(r.area()).unwrap();
        for (ch, v) in row.iter_mut().enumerate() {
            let plane = &x.data()[(r.image * c + ch) * h * w..][..h * w];
            let mut s = T::zero();
            for y in r.y0..r.y1 {
                s += plane[y * w + r.x0..y * w + r.x1].iter().copied().sum::<T>();
            }
            *v = s * inv;
        }
    });
    Ok(out)
}

pub fn roi_avg_pool_backward<T: Real>(in_shape: &[usize], rois: &[Roi], dy: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = (in_shape[1], in_shape[2], in_shape[3]);
    let mut dx = Tensor::zeros(in_shape);
    for (i, r) in rois.iter().enumerate() {
        let inv = T::one() / T::from_usize(r.area()).unwrap();
        for ch in 0..c {
            let g = dy.data()[i * c + ch] * inv;
            let plane = &mut dx.data_mut()[(r.image * c + ch) * h * w..][..h * w];
            for y in r.y0..r.y1 {
                plane[y * w + r.x0..y * w + r.x1]
                    .iter_mut()
                    .for_each(|v| *v += g);
            }
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// normalization and losses

pub const L2_EPS: f64 = 1e-12;

pub struct L2Out<T> {
    pub y: Tensor<T>,
    pub norms: Vec<T>,
    /// Rows whose norm fell below the floor.
    pub floored_rows: usize,
}

/// Scales every row of `[N, D]` to unit Euclidean norm (norm floored at 1e-12).
pub fn l2_normalize_rows<T: Real>(x: &Tensor<T>) -> Result<L2Out<T>> {
    if x.ndim() != 2 {
        return Err(shape_err!("l2 normalize wants [N, D], got {:?}", x.shape()));
    }
    let d = x.dim(1);
    let eps = T::lit(L2_EPS);
    let mut y = x.clone();
    let mut norms = Vec::with_capacity(x.dim(0));
    let mut floored_rows = 0;
    for row in y.data_mut().chunks_mut(d) {
        let nrm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
        if nrm < eps {
            floored_rows += 1;
        }
        let nrm = nrm.max(eps);
        row.iter_mut().for_each(|v| *v = *v / nrm);
        norms.push(nrm);
    }
    Ok(L2Out {
        y,
        norms,
        floored_rows,
    })
}

pub fn l2_normalize_rows_backward<T: Real>(y: &Tensor<T>, norms: &[T], dy: &Tensor<T>) -> Tensor<T> {
    let d = y.dim(1);
    let eps = T::lit(L2_EPS);
    let mut dx = Tensor::zeros(y.shape());
    for (i, ((row, g), out)) in y
        .data()
        .chunks(d)
        .zip(dy.data().chunks(d))
        .zip(dx.data_mut().chunks_mut(d))
        .enumerate()
    {
        let n = norms[i];
        if n <= eps {
            out.iter_mut().zip(g).for_each(|(o, &gv)| *o = gv / n);
            continue;
        }
        let dot: T = row.iter().zip(g).map(|(&a, &b)| a * b).sum();
        for ((o, &yv), &gv) in out.iter_mut().zip(row).zip(g) {
            *o = (gv - yv * dot) / n;
        }
    }
    dx
}

/// Mean softmax cross-entropy of `logits: [N, K]`; returns `(loss, probs)`.
pub fn softmax_cross_entropy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Vec<T>)> {
    if logits.ndim() != 2 || logits.dim(0) != labels.len() {
        return Err(shape_err!(
            "cross entropy: logits {:?} vs {} labels",
            logits.shape(),
            labels.len()
        ));
    }
    let (n, k) = (logits.dim(0), logits.dim(1));
    if n == 0 {
        return Err(invalid!("cross entropy over an empty batch"));
    }
    let mut probs = vec![T::zero(); n * k];
    let mut total = T::zero();
    for (i, (row, p)) in logits.data().chunks(k).zip(probs.chunks_mut(k)).enumerate() {
        let label = labels[i];
        if label >= k {
            return Err(invalid!("label {label} out of range for {k} classes"));
        }
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for (pv, &l) in p.iter_mut().zip(row) {
            *pv = (l - m).exp();
            z += *pv;
        }
        p.iter_mut().for_each(|v| *v = *v / z);
        total += m + z.ln() - row[label];
    }
    Ok((total / T::from_usize(n).unwrap(), probs))
}

pub(crate) fn log_sum_exp<T: Real>(xs: &[T]) -> T {
    let m = xs.iter().copied().fold(T::neg_infinity(), T::max);
    if m == T::neg_infinity() {
        return m;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<T>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Direct six-nested-loop cross-correlation (plus the batch loop).
    fn conv_oracle(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        b: &Tensor<f64>,
        stride: usize,
        pad: usize,
    ) -> Tensor<f64> {
        let (bs, cin, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let (cout, _, kh, kw) = (w.dim(0), w.dim(1), w.dim(2), w.dim(3));
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let mut out = Tensor::zeros(&[bs, cout, oh, ow]);
        for n in 0..bs {
            for co in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = b.data()[co];
                        for ci in 0..cin {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        s += x.at(&[n, ci, iy as usize, ix as usize])
                                            * w.at(&[co, ci, ky, kx]);
                                    }
                                }
                            }
                        }
                        out.set(&[n, co, oy, ox], s);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_identity_kernel() {
        let x = rand_tensor(&[2, 3, 4, 5], 1);
        let w = Tensor::from_fn(&[3, 3, 1, 1], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
        let y = conv2d(&x, &w, Some(&Tensor::zeros(&[3])), 1, 0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_counts_ones() {
        let x = Tensor::<f64>::ones(&[1, 2, 5, 5]);
        let w = Tensor::ones(&[1, 2, 3, 3]);
        let y = conv2d(&x, &w, None, 1, 0).unwrap();
        assert!(y.data().iter().all(|&v| v == 18.0));
    }

    #[test]
    fn conv_matches_loop_oracle() {
        let x = rand_tensor(&[1, 2, 5, 5], 2);
        let w = rand_tensor(&[3, 2, 3, 3], 3);
        let b = rand_tensor(&[3], 4);
        let y = conv2d(&x, &w, Some(&b), 1, 0).unwrap();
        let o = conv_oracle(&x, &w, &b, 1, 0);
        for (a, b) in y.data().iter().zip(o.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn conv_exhaustive_small_sweep() {
        let mut seed = 10;
        for h in 1..=6 {
            for k in 1..=3 {
                for pad in 0..=1 {
                    if k > h + 2 * pad {
                        continue;
                    }
                    for stride in 1..=2 {
                        for (cin, cout) in [(1, 1), (2, 3), (3, 2)] {
                            seed += 1;
                            let x = rand_tensor(&[2, cin, h, h + 1], seed);
                            let w = rand_tensor(&[cout, cin, k, k], seed + 1000);
                            let b = rand_tensor(&[cout], seed + 2000);
                            let y = conv2d(&x, &w, Some(&b), stride, pad).unwrap();
                            let o = conv_oracle(&x, &w, &b, stride, pad);
                            assert_eq!(y.shape(), o.shape());
                            for (a, b) in y.data().iter().zip(o.data()) {
                                assert!((a - b).abs() < 1e-10, "h={h} k={k} pad={pad} s={stride}");
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::<f32>::zeros(&[1, 2, 4, 4]);
        let w = Tensor::zeros(&[1, 3, 3, 3]);
        let err = conv2d(&x, &w, None, 1, 0).unwrap_err().to_string();
        assert!(err.contains("2 channels"), "{err}");
    }

    #[test]
    fn batchnorm_hand_batch() {
        let x = Tensor::<f64>::from_f64(&[4, 1], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = batchnorm_train(&x, &Tensor::ones(&[1]), &Tensor::zeros(&[1]), 0.0).unwrap();
        let want = [-1.3416, -0.4472, 0.4472, 1.3416];
        for (a, b) in out.y.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn batchnorm_standardizes() {
        let x = rand_tensor(&[3, 2, 4, 4], 5).map(|v| 3.0 * v + 1.0);
        let y = batchnorm_train(&x, &Tensor::ones(&[2]), &Tensor::zeros(&[2]), 1e-5)
            .unwrap()
            .y;
        for ch in 0..2 {
            let vals: Vec<f64> = (0..3)
                .flat_map(|n| (0..16).map(move |j| (n, j)))
                .map(|(n, j)| y.data()[(n * 2 + ch) * 16 + j])
                .collect();
            let m = vals.iter().sum::<f64>() / 48.0;
            let v = vals.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 48.0;
            assert!(m.abs() < 1e-9);
            assert!((v - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn batchnorm_eval_requires_stats() {
        let x = Tensor::<f32>::zeros(&[2, 1]);
        let mut none = None;
        let r = batchnorm2d(&x, &Tensor::ones(&[1]), &Tensor::zeros(&[1]), 1e-5, BnMode::Eval, &mut none, 0.1);
        assert!(matches!(r, Err(crate::error::Error::UninitializedStats(_))));
    }

    #[test]
    fn batchnorm_train_updates_running_stats() {
        let x = Tensor::<f64>::from_f64(&[4, 1], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut stats = Some(RunningStats::fresh(1));
        batchnorm2d(&x, &Tensor::ones(&[1]), &Tensor::zeros(&[1]), 1e-5, BnMode::Train, &mut stats, 0.1)
            .unwrap();
        let s = stats.unwrap();
        assert!((s.mean[0] - 0.25).abs() < 1e-12);
        // unbiased var of {1,2,3,4} is 5/3
        assert!((s.var[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn batchnorm_rejects_single_value() {
        let x = Tensor::<f64>::zeros(&[1, 2, 1, 1]);
        assert!(batchnorm_train(&x, &Tensor::ones(&[2]), &Tensor::zeros(&[2]), 1e-5).is_err());
    }

    #[test]
    fn resize_identity_is_bit_exact() {
        let x = rand_tensor(&[2, 3, 5, 7], 6).cast::<f32>();
        assert_eq!(bilinear_resize(&x, 5, 7).unwrap(), x);
    }

    #[test]
    fn resize_hand_value() {
        let x = Tensor::<f64>::from_f64(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(bilinear_resize(&x, 1, 1).unwrap().item(), 2.5);
    }

    #[test]
    fn resize_constant_stays_constant() {
        let x = Tensor::<f64>::full(&[1, 2, 6, 4], 0.3);
        for (h, w) in [(1, 1), (3, 2), (12, 9), (7, 7)] {
            let y = bilinear_resize(&x, h, w).unwrap();
            assert!(y.data().iter().all(|v| (v - 0.3).abs() < 1e-15));
        }
    }

    #[test]
    fn halving_is_box_average() {
        let x = rand_tensor(&[1, 1, 4, 4], 7);
        let y = bilinear_resize(&x, 2, 2).unwrap();
        let want = (x.at(&[0, 0, 0, 0]) + x.at(&[0, 0, 0, 1]) + x.at(&[0, 0, 1, 0]) + x.at(&[0, 0, 1, 1])) / 4.0;
        assert!((y.at(&[0, 0, 0, 0]) - want).abs() < 1e-12);
    }

    #[test]
    fn region_pool_cases() {
        let m = Tensor::<f64>::from_fn(&[1, 4, 4], |i| i as f64);
        assert_eq!(region_avg_pool(&m, (0, 0, 2, 2)).unwrap().item(), 2.5);
        assert_eq!(region_avg_pool(&m, (0, 0, 4, 4)).unwrap().item(), 7.5);
        let c = Tensor::<f64>::full(&[3, 4, 4], 1.25);
        let p = region_avg_pool(&c, (1, 2, 3, 4)).unwrap();
        assert!(p.data().iter().all(|&v| v == 1.25));
        assert!(region_avg_pool(&m, (2, 0, 2, 2)).is_err());
        assert!(region_avg_pool(&m, (0, 0, 5, 2)).is_err());
    }

    #[test]
    fn l2_cases() {
        let x = Tensor::<f64>::from_f64(&[2, 2], &[3.0, 4.0, 0.6, 0.8]).unwrap();
        let out = l2_normalize_rows(&x).unwrap();
        assert_eq!(out.y.data(), &[0.6, 0.8, 0.6, 0.8]);
        let r = rand_tensor(&[1, 8], 9);
        let n = l2_normalize_rows(&r).unwrap().y.norm();
        assert!((n - 1.0).abs() < 1e-6);
        let z = Tensor::<f64>::zeros(&[1, 3]);
        let out = l2_normalize_rows(&z).unwrap();
        assert_eq!(out.floored_rows, 1);
        assert!(out.y.is_finite());
    }

    #[test]
    fn cross_entropy_uniform_is_log_k() {
        let logits = Tensor::<f64>::zeros(&[3, 5]);
        let (l, _) = softmax_cross_entropy(&logits, &[0, 1, 4]).unwrap();
        assert!((l - 5f64.ln()).abs() < 1e-12);
        assert!(softmax_cross_entropy(&logits, &[0, 1, 5]).is_err());
    }
}
