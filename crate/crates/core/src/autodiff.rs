//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an append-only record of operations. Every node's inputs
//! precede it, so the backward pass is a single sweep in reverse append order.
//! A graph built with [`Graph::no_grad`] keeps values only; nothing is saved
//! for backward and [`Graph::backward`] refuses to run on it.

use crate::error::{shape_err, Error, Result};
use crate::ops::{self, BnMode, Roi, RunningStats};
use crate::tensor::{gemm, Mat, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Const,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    BnTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    BnEval {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    Relu(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Resize(Var),
    Upsample2x(Var),
    RoiPool {
        x: Var,
        rois: Vec<Roi>,
    },
    L2Norm {
        x: Var,
        norms: Vec<T>,
    },
    Exp(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    WeightedSum(Vec<(Var, T)>),
    Reshape(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Non-fatal conditions noticed during the forward pass.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Diagnostics {
    /// Rows whose norm hit the floor in `l2_normalize`.
    pub floored_l2_rows: usize,
    /// InfoNCE terms evaluated without any negatives.
    pub empty_negative_sets: usize,
}

/// Batch statistics produced by a train-mode batch norm, for folding into
/// running statistics by the caller.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var_unbiased: Vec<T>,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
    pub diagnostics: Diagnostics,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(acc) => acc
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .for_each(|(a, &b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            diagnostics: Diagnostics::default(),
        }
    }

    /// A graph that only evaluates values.
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Nodes that carry backward state (anything but constants).
    pub fn tracked_nodes(&self) -> usize {
        self.nodes.iter().filter(|n| n.requires_grad).count()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Const };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.grad_enabled;
        self.nodes.push(Node {
            value,
            op: if requires_grad { Op::Leaf } else { Op::Const },
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let y = ops::conv2d(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(y, Op::Conv2d { x, w, b, stride, pad }, &inputs))
    }

    /// Batch norm over `[N, C, ...]`. Train mode returns the batch statistics;
    /// eval mode needs `stats`.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
        mode: BnMode,
        stats: Option<&RunningStats<T>>,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        match mode {
            BnMode::Train => {
                let out = ops::batchnorm_train(self.value(x), self.value(gamma), self.value(beta), eps)?;
                let batch = BatchStats {
                    var_unbiased: ops::unbiased_var(&out.var, out.count),
                    mean: out.mean,
                };
                let v = self.push(
                    out.y,
                    Op::BnTrain {
                        x,
                        gamma,
                        beta,
                        xhat: out.xhat,
                        inv_std: out.inv_std,
                    },
                    &[x, gamma, beta],
                );
                Ok((v, Some(batch)))
            }
            BnMode::Eval => {
                let stats = stats.ok_or_else(|| Error::UninitializedStats("graph batchnorm".into()))?;
                let (y, inv_std) =
                    ops::batchnorm_eval(self.value(x), self.value(gamma), self.value(beta), stats, eps)?;
                let v = self.push(
                    y,
                    Op::BnEval {
                        x,
                        gamma,
                        beta,
                        mean: stats.mean.clone(),
                        inv_std,
                    },
                    &[x, gamma, beta],
                );
                Ok((v, None))
            }
        }
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v.max(T::zero()));
        self.push(y, Op::Relu(x), &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |p, q| p + q)?;
        Ok(self.push(y, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |p, q| p * q)?;
        Ok(self.push(y, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let y = self.value(x).map(|v| v * c);
        self.push(y, Op::Scale(x, c), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v.exp());
        self.push(y, Op::Exp(x), &[x])
    }

    pub fn log(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v.ln());
        self.push(y, Op::Log(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).sum());
        self.push(y, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let y = Tensor::scalar(t.sum() / T::from_usize(t.numel().max(1)).unwrap());
        self.push(y, Op::Mean(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape)?;
        Ok(self.push(y, Op::Reshape(x), &[x]))
    }

    /// `x: [N, in]`, `w: [out, in]` (torch layout), `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.ndim() != 2 || wv.ndim() != 2 || xv.dim(1) != wv.dim(1) {
            return Err(shape_err!("linear: input {:?}, weight {:?}", xv.shape(), wv.shape()));
        }
        let (n, k, m) = (xv.dim(0), xv.dim(1), wv.dim(0));
        let mut y = Tensor::zeros(&[n, m]);
        gemm(Mat::new(xv.data(), n, k), Mat::new(wv.data(), m, k).t(), y.data_mut(), false);
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.shape() != [m] {
                return Err(shape_err!("linear bias {:?}, want [{m}]", bv.shape()));
            }
            for row in y.data_mut().chunks_mut(m) {
                row.iter_mut().zip(bv.data()).for_each(|(r, &b)| *r += b);
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(y, Op::Linear { x, w, b }, &inputs))
    }

    /// `a: [M, K]` times `b: [K, N]`, or `b: [N, K]` when `trans_b`.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ndim() != 2 || bv.ndim() != 2 {
            return Err(shape_err!("matmul wants matrices, got {:?} {:?}", av.shape(), bv.shape()));
        }
        let (m, k) = (av.dim(0), av.dim(1));
        let bm = Mat::new(bv.data(), bv.dim(0), bv.dim(1));
        let (bm, kb, n) = if trans_b {
            (bm.t(), bv.dim(1), bv.dim(0))
        } else {
            (bm, bv.dim(0), bv.dim(1))
        };
        if k != kb {
            return Err(shape_err!(
                "matmul inner dims: {:?} x {:?} (trans_b={trans_b})",
                av.shape(),
                bv.shape()
            ));
        }
        let mut y = Tensor::zeros(&[m, n]);
        gemm(Mat::new(av.data(), m, k), bm, y.data_mut(), false);
        Ok(self.push(y, Op::MatMul { a, b, trans_b }, &[a, b]))
    }

    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let y = ops::bilinear_resize(self.value(x), out_h, out_w)?;
        Ok(self.push(y, Op::Resize(x), &[x]))
    }

    pub fn upsample_nearest2x(&mut self, x: Var) -> Result<Var> {
        let y = ops::upsample_nearest2x(self.value(x))?;
        Ok(self.push(y, Op::Upsample2x(x), &[x]))
    }

    pub fn roi_avg_pool(&mut self, x: Var, rois: Vec<Roi>) -> Result<Var> {
        let y = ops::roi_avg_pool(self.value(x), &rois)?;
        Ok(self.push(y, Op::RoiPool { x, rois }, &[x]))
    }

    /// Global average pooling `[N,C,h,w] -> [N,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 4 {
            return Err(shape_err!("global pooling wants [N,C,h,w], got {s:?}"));
        }
        let rois = (0..s[0])
            .map(|image| Roi {
                image,
                x0: 0,
                y0: 0,
                x1: s[3],
                y1: s[2],
            })
            .collect();
        self.roi_avg_pool(x, rois)
    }

    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let out = ops::l2_normalize_rows(self.value(x))?;
        if out.floored_rows > 0 {
            log::warn!("l2_normalize: {} all-zero rows floored", out.floored_rows);
        }
        self.diagnostics.floored_l2_rows += out.floored_rows;
        Ok(self.push(out.y, Op::L2Norm { x, norms: out.norms }, &[x]))
    }

    /// Mean softmax cross-entropy of `logits: [N, K]` against `labels`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = ops::softmax_cross_entropy(self.value(logits), labels)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// `sum_i w_i x_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let mut total = T::zero();
        for &(v, w) in terms {
            let t = self.value(v);
            if t.numel() != 1 {
                return Err(shape_err!("weighted_sum term has shape {:?}", t.shape()));
            }
            total += w * t.item();
        }
        let inputs: Vec<Var> = terms.iter().map(|t| t.0).collect();
        Ok(self.push(Tensor::scalar(total), Op::WeightedSum(terms.to_vec()), &inputs))
    }

    /// Reverse sweep from a scalar `loss`. Gradients are kept for leaves.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if !self.grad_enabled {
            return Err(Error::GradDisabled);
        }
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        if !lv.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::ones(lv.shape()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.backward_node(node, &dy, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, node: &Node<T>, dy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        match &node.op {
            Op::Leaf | Op::Const => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                let g = ops::conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    *stride,
                    *pad,
                    dy,
                    self.needs(*x),
                    self.needs(*w),
                )?;
                if let Some(dx) = g.dx {
                    accumulate(grads, *x, dx);
                }
                if let Some(dw) = g.dw {
                    accumulate(grads, *w, dw);
                }
                if let Some(b) = b.filter(|b| self.needs(*b)) {
                    let n = g.db.len();
                    accumulate(grads, b, Tensor::new(vec![n], g.db)?);
                }
            }
            Op::BnTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (dx, dg, db) = ops::batchnorm_train_backward(
                    self.value(*x).shape(),
                    self.value(*gamma).data(),
                    xhat,
                    inv_std,
                    dy.data(),
                );
                self.bn_accumulate(grads, (*x, dx), (*gamma, dg), (*beta, db))?;
            }
            Op::BnEval {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let xs = self.value(*x);
                let (n, c) = (xs.dim(0), xs.dim(1));
                let l = xs.numel() / (n * c);
                let gv = self.value(*gamma).data();
                let mut dx = vec![T::zero(); xs.numel()];
                let mut dg = vec![T::zero(); c];
                let mut db = vec![T::zero(); c];
                for i in 0..n {
                    for ch in 0..c {
                        for j in (i * c + ch) * l..(i * c + ch + 1) * l {
                            let g = dy.data()[j];
                            dx[j] = g * gv[ch] * inv_std[ch];
                            dg[ch] += g * (xs.data()[j] - mean[ch]) * inv_std[ch];
                            db[ch] += g;
                        }
                    }
                }
                self.bn_accumulate(grads, (*x, dx), (*gamma, dg), (*beta, db))?;
            }
            Op::Relu(x) => {
                let dx = dy.zip_map(&node.value, |g, y| if y > T::zero() { g } else { T::zero() })?;
                accumulate(grads, *x, dx);
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    accumulate(grads, *a, dy.clone());
                }
                if self.needs(*b) {
                    accumulate(grads, *b, dy.clone());
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    accumulate(grads, *a, dy.zip_map(self.value(*b), |g, v| g * v)?);
                }
                if self.needs(*b) {
                    accumulate(grads, *b, dy.zip_map(self.value(*a), |g, v| g * v)?);
                }
            }
            Op::Scale(x, c) => accumulate(grads, *x, dy.map(|g| g * *c)),
            Op::Exp(x) => accumulate(grads, *x, dy.zip_map(&node.value, |g, y| g * y)?),
            Op::Log(x) => accumulate(grads, *x, dy.zip_map(self.value(*x), |g, v| g / v)?),
            Op::Sum(x) => {
                let s = self.value(*x).shape().to_vec();
                accumulate(grads, *x, Tensor::full(&s, dy.item()));
            }
            Op::Mean(x) => {
                let t = self.value(*x);
                let g = dy.item() / T::from_usize(t.numel().max(1)).unwrap();
                accumulate(grads, *x, Tensor::full(t.shape(), g));
            }
            Op::Reshape(x) => {
                let s = self.value(*x).shape().to_vec();
                accumulate(grads, *x, dy.clone().reshape(&s)?);
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, k, m) = (xv.dim(0), xv.dim(1), wv.dim(0));
                if self.needs(*x) {
                    let mut dx = Tensor::zeros(xv.shape());
                    gemm(Mat::new(dy.data(), n, m), Mat::new(wv.data(), m, k), dx.data_mut(), false);
                    accumulate(grads, *x, dx);
                }
                if self.needs(*w) {
                    let mut dw = Tensor::zeros(wv.shape());
                    gemm(Mat::new(dy.data(), n, m).t(), Mat::new(xv.data(), n, k), dw.data_mut(), false);
                    accumulate(grads, *w, dw);
                }
                if let Some(b) = b.filter(|b| self.needs(*b)) {
                    let mut db = Tensor::zeros(&[m]);
                    for row in dy.data().chunks(m) {
                        db.data_mut().iter_mut().zip(row).for_each(|(d, &g)| *d += g);
                    }
                    accumulate(grads, b, db);
                }
            }
            Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.dim(0), av.dim(1));
                let n = dy.dim(1);
                let bm = Mat::new(bv.data(), bv.dim(0), bv.dim(1));
                if self.needs(*a) {
                    // da = dy b^T  (or dy b when b was used transposed)
                    let bt = if *trans_b { bm } else { bm.t() };
                    let mut da = Tensor::zeros(av.shape());
                    gemm(Mat::new(dy.data(), m, n), bt, da.data_mut(), false);
                    accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    let mut db = Tensor::zeros(bv.shape());
                    if *trans_b {
                        gemm(Mat::new(dy.data(), m, n).t(), Mat::new(av.data(), m, k), db.data_mut(), false);
                    } else {
                        gemm(Mat::new(av.data(), m, k).t(), Mat::new(dy.data(), m, n), db.data_mut(), false);
                    }
                    accumulate(grads, *b, db);
                }
            }
            Op::Resize(x) => {
                let s = self.value(*x).shape().to_vec();
                accumulate(grads, *x, ops::bilinear_resize_backward(&s, dy));
            }
            Op::Upsample2x(x) => {
                let s = self.value(*x).shape().to_vec();
                accumulate(grads, *x, ops::upsample_nearest2x_backward(&s, dy));
            }
            Op::RoiPool { x, rois } => {
                let s = self.value(*x).shape().to_vec();
                accumulate(grads, *x, ops::roi_avg_pool_backward(&s, rois, dy));
            }
            Op::L2Norm { x, norms } => {
                accumulate(grads, *x, ops::l2_normalize_rows_backward(&node.value, norms, dy));
            }
            Op::SoftmaxCe { logits, labels, probs } => {
                let k = self.value(*logits).dim(1);
                let n = labels.len();
                let scale = dy.item() / T::from_usize(n).unwrap();
                let mut d = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * k + l] -= T::one();
                }
                d.iter_mut().for_each(|v| *v *= scale);
                accumulate(grads, *logits, Tensor::new(vec![n, k], d)?);
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    if self.needs(v) {
                        let s = self.value(v).shape().to_vec();
                        accumulate(grads, v, Tensor::full(&s, dy.item() * w));
                    }
                }
            }
        }
        Ok(())
    }

    fn bn_accumulate(
        &self,
        grads: &mut [Option<Tensor<T>>],
        (x, dx): (Var, Vec<T>),
        (gamma, dg): (Var, Vec<T>),
        (beta, db): (Var, Vec<T>),
    ) -> Result<()> {
        if self.needs(x) {
            accumulate(grads, x, Tensor::new(self.value(x).shape().to_vec(), dx)?);
        }
        let c = dg.len();
        if self.needs(gamma) {
            accumulate(grads, gamma, Tensor::new(vec![c], dg)?);
        }
        if self.needs(beta) {
            accumulate(grads, beta, Tensor::new(vec![c], db)?);
        }
        Ok(())
    }
}

/// Validates that `t` has no NaN/Inf, naming `what` on failure.
pub fn ensure_finite<T: Real>(t: &Tensor<T>, what: &str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}
