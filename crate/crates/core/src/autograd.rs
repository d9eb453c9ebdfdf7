//! Tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records one forward pass. Nodes are appended in evaluation
//! order, so walking the node list backwards is a reverse topological
//! traversal and every node is visited exactly once. The tape is meant to be
//! dropped after the step that built it.

use crate::conv::ConvGeometry;
use crate::error::{Error, Result};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, lit, Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch-norm statistics source for a forward pass.
#[derive(Debug, Clone, Copy)]
pub enum BnMode<'a, T> {
    /// Normalize with batch statistics.
    Train { eps: T },
    /// Normalize with fixed running statistics.
    Eval { mean: &'a [T], var: &'a [T], eps: T },
}

/// Per-channel batch statistics produced by a training-mode batch norm:
/// mean and biased variance, plus the element count per channel.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub count: usize,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        training: bool,
    },
    Relu {
        x: Var,
    },
    GlobalAvgPool {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        s: T,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Sum {
        x: Var,
    },
    SoftmaxCe {
        logits: Var,
        probs: Vec<T>,
        labels: Vec<usize>,
        rows: Vec<usize>,
    },
    RowDistance {
        a: Var,
        b: Var,
        rows: Vec<usize>,
        squared: bool,
        dists: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar with respect to every node that required one.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn dims2(t: &Tensor<impl Real>, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [a, b] => Ok((*a, *b)),
        s => Err(Error::shape(op, s, &[0, 0])),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a tensor as an input. It participates in differentiation iff
    /// `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        let needs_grad = t.requires_grad();
        self.nodes.push(Node {
            value: t.detached(),
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let value = if t.requires_grad() { t.detached() } else { t };
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// First element of a node's value; intended for scalar losses.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = dims2(ta, "matmul")?;
        let (k2, n) = dims2(tb, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", ta.shape(), tb.shape()));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nn(m, k, n, ta.data(), tb.data(), &mut out);
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b }, &[a, b]))
    }

    /// Affine map `x·wᵀ + b` with `x: [N,D]`, `w: [K,D]`, `b: [K]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (n, d) = dims2(tx, "linear")?;
        let (k, d2) = dims2(tw, "linear")?;
        if d != d2 {
            return Err(Error::shape("linear", tx.shape(), tw.shape()));
        }
        let mut out = vec![T::zero(); n * k];
        gemm_nt(n, d, k, tx.data(), tw.data(), &mut out);
        if let Some(b) = b {
            let tb = self.value(b);
            if tb.shape() != [k] {
                return Err(Error::shape("linear bias", tb.shape(), &[k]));
            }
            for row in out.chunks_mut(k) {
                row.iter_mut().zip(tb.data()).for_each(|(o, &bv)| *o += bv);
            }
        }
        let value = Tensor::new(&[n, k], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Linear { x, w, b }, &inputs))
    }

    /// Cross-correlation of `x: [N,C,H,W]` with `w: [O,C,k,k]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let &[n, c, h, wd] = tx.shape() else {
            return Err(Error::shape("conv2d input", tx.shape(), &[0, 0, 0, 0]));
        };
        let &[o, c2, kh, kw] = tw.shape() else {
            return Err(Error::shape("conv2d weight", tw.shape(), &[0, 0, 0, 0]));
        };
        if c != c2 || kh != kw {
            return Err(Error::shape("conv2d", tx.shape(), tw.shape()));
        }
        let geom = ConvGeometry::new(c, h, wd, kh, stride, padding)?;
        let bias = match b {
            Some(b) => {
                let tb = self.value(b);
                if tb.shape() != [o] {
                    return Err(Error::shape("conv2d bias", tb.shape(), &[o]));
                }
                Some(tb.data())
            }
            None => None,
        };
        let (kk, p) = (geom.patch_len(), geom.out_pixels());
        let mut out = vec![T::zero(); n * o * p];
        let mut cols = vec![T::zero(); kk * p];
        let img = c * h * wd;
        for i in 0..n {
            geom.im2col(&tx.data()[i * img..(i + 1) * img], &mut cols);
            let dst = &mut out[i * o * p..(i + 1) * o * p];
            gemm_nn(o, kk, p, tw.data(), &cols, dst);
            if let Some(bias) = bias {
                for (plane, &bv) in dst.chunks_mut(p).zip(bias) {
                    plane.iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        let value = Tensor::new(&[n, o, geom.out_height, geom.out_width], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }, &inputs))
    }

    /// Per-channel batch normalization over `[N,C,...]`. In training mode
    /// also returns the batch statistics so the caller can update running
    /// estimates.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_, T>,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let tx = self.value(x);
        let shape = tx.shape().to_vec();
        if shape.len() < 2 {
            return Err(Error::shape("batch_norm", &shape, &[0, 0]));
        }
        let (n, c) = (shape[0], shape[1]);
        let spatial: usize = shape[2..].iter().product();
        let (tg, tb) = (self.value(gamma), self.value(beta));
        if tg.shape() != [c] || tb.shape() != [c] {
            return Err(Error::shape("batch_norm affine", tg.shape(), &[c]));
        }
        let count = n * spatial;
        let xs = tx.data();
        let at = |i: usize, ch: usize, s: usize| (i * c + ch) * spatial + s;

        let (mean, var, eps, training) = match mode {
            BnMode::Train { eps } => {
                if count == 0 {
                    return Err(Error::Data(
                        "batch_norm: empty batch in training mode".into(),
                    ));
                }
                let m = lit::<T>(count as f64);
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut acc = T::zero();
                    for i in 0..n {
                        for s in 0..spatial {
                            acc += xs[at(i, ch, s)];
                        }
                    }
                    let mu = acc / m;
                    let mut sq = T::zero();
                    for i in 0..n {
                        for s in 0..spatial {
                            let d = xs[at(i, ch, s)] - mu;
                            sq += d * d;
                        }
                    }
                    mean[ch] = mu;
                    var[ch] = sq / m;
                }
                (mean, var, eps, true)
            }
            BnMode::Eval { mean, var, eps } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape("batch_norm stats", &[mean.len()], &[c]));
                }
                (mean.to_vec(), var.to_vec(), eps, false)
            }
        };
        if eps <= T::zero() && training {
            return Err(Error::Config("batch_norm: eps must be positive".into()));
        }
        let mut inv_std = vec![T::zero(); c];
        for ch in 0..c {
            let denom = var[ch] + eps;
            if denom <= T::zero() {
                return Err(Error::Numeric(format!(
                    "batch_norm: var + eps = {denom:?} on channel {ch}"
                )));
            }
            inv_std[ch] = T::one() / denom.sqrt();
        }
        let (g, bt) = (tg.data(), tb.data());
        let mut xhat = vec![T::zero(); xs.len()];
        let mut out = vec![T::zero(); xs.len()];
        for i in 0..n {
            for ch in 0..c {
                for s in 0..spatial {
                    let idx = at(i, ch, s);
                    let h = (xs[idx] - mean[ch]) * inv_std[ch];
                    xhat[idx] = h;
                    out[idx] = g[ch] * h + bt[ch];
                }
            }
        }
        let value = Tensor::new(&shape, out)?;
        let stats = training.then_some(BatchStats { mean, var, count });
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            training,
        };
        Ok((self.push(value, op, &[x, gamma, beta]), stats))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| v.max(T::zero())).collect();
        let value = Tensor::new(tx.shape(), data).expect("same shape");
        self.push(value, Op::Relu { x }, &[x])
    }

    /// Mean over all spatial positions: `[N,C,H,W] → [N,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let &[n, c, h, w] = tx.shape() else {
            return Err(Error::shape("global_avg_pool", tx.shape(), &[0, 0, 0, 0]));
        };
        let hw = h * w;
        let scale = lit::<T>(hw as f64);
        let data = tx
            .data()
            .chunks(hw)
            .map(|plane| plane.iter().copied().sum::<T>() / scale)
            .collect();
        let value = Tensor::new(&[n, c], data)?;
        Ok(self.push(value, Op::GlobalAvgPool { x }, &[x]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("add", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(ta.shape(), data)?;
        Ok(self.push(value, Op::Add { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| v * s).collect();
        let value = Tensor::new(tx.shape(), data).expect("same shape");
        self.push(value, Op::Scale { x, s }, &[x])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("mul", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(ta.shape(), data)?;
        Ok(self.push(value, Op::Mul { a, b }, &[a, b]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(total), Op::Sum { x }, &[x])
    }

    /// Mean softmax cross-entropy over the rows selected by `mask` (all rows
    /// when `None`). With no rows selected the loss is zero and carries no
    /// gradient.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        labels: &[usize],
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        let tl = self.value(logits);
        let (n, k) = dims2(tl, "softmax_cross_entropy")?;
        if labels.len() != n {
            return Err(Error::shape("softmax_cross_entropy labels", tl.shape(), &[labels.len()]));
        }
        if let Some(m) = mask {
            if m.len() != n {
                return Err(Error::shape("softmax_cross_entropy mask", tl.shape(), &[m.len()]));
            }
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= k) {
            return Err(Error::Data(format!(
                "label {l} at row {i} out of range for {k} classes"
            )));
        }
        let rows: Vec<usize> = (0..n).filter(|&i| mask.is_none_or(|m| m[i])).collect();
        let mut probs = vec![T::zero(); rows.len() * k];
        let mut total = T::zero();
        for (r, &i) in rows.iter().enumerate() {
            let z = tl.row(i);
            let zmax = z.iter().copied().fold(T::neg_infinity(), T::max);
            let p = &mut probs[r * k..(r + 1) * k];
            let mut denom = T::zero();
            for (pv, &zv) in p.iter_mut().zip(z) {
                *pv = (zv - zmax).exp();
                denom += *pv;
            }
            p.iter_mut().for_each(|v| *v /= denom);
            total += denom.ln() - (z[labels[i]] - zmax);
        }
        let loss = if rows.is_empty() {
            T::zero()
        } else {
            total / lit(rows.len() as f64)
        };
        let op = Op::SoftmaxCe {
            logits,
            probs,
            labels: labels.to_vec(),
            rows,
        };
        Ok(self.push(Tensor::scalar(loss), op, &[logits]))
    }

    /// Mean over selected rows of the (optionally squared) Euclidean distance
    /// between `a[i]` and `b[i]`.
    pub fn row_distance(
        &mut self,
        a: Var,
        b: Var,
        mask: Option<&[bool]>,
        squared: bool,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("row_distance", ta.shape(), tb.shape()));
        }
        let (n, _) = dims2(ta, "row_distance")?;
        if let Some(m) = mask {
            if m.len() != n {
                return Err(Error::shape("row_distance mask", ta.shape(), &[m.len()]));
            }
        }
        let rows: Vec<usize> = (0..n).filter(|&i| mask.is_none_or(|m| m[i])).collect();
        let dists: Vec<T> = rows
            .iter()
            .map(|&i| {
                let sq: T = ta
                    .row(i)
                    .iter()
                    .zip(tb.row(i))
                    .map(|(&x, &y)| (x - y) * (x - y))
                    .sum();
                if squared {
                    sq
                } else {
                    sq.sqrt()
                }
            })
            .collect();
        let loss = if rows.is_empty() {
            T::zero()
        } else {
            dists.iter().copied().sum::<T>() / lit(rows.len() as f64)
        };
        let op = Op::RowDistance {
            a,
            b,
            rows,
            squared,
            dists,
        };
        Ok(self.push(Tensor::scalar(loss), op, &[a, b]))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward", self.value(loss).shape(), &[1]));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        let mut send = |v: Var, contrib: Vec<T>| {
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, &c)| *a += c),
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                if wants(*a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm_nt(m, n, k, g, tb.data(), &mut da);
                    send(*a, da);
                }
                if wants(*b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm_tn(k, m, n, ta.data(), g, &mut db);
                    send(*b, db);
                }
            }
            Op::Linear { x, w, b } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (n, d) = (tx.shape()[0], tx.shape()[1]);
                let k = tw.shape()[0];
                if wants(*x) {
                    let mut dx = vec![T::zero(); n * d];
                    gemm_nn(n, k, d, g, tw.data(), &mut dx);
                    send(*x, dx);
                }
                if wants(*w) {
                    let mut dw = vec![T::zero(); k * d];
                    gemm_tn(k, n, d, g, tx.data(), &mut dw);
                    send(*w, dw);
                }
                if let Some(b) = b {
                    if wants(*b) {
                        let mut db = vec![T::zero(); k];
                        for row in g.chunks(k) {
                            db.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                        }
                        send(*b, db);
                    }
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let n = tx.shape()[0];
                let o = tw.shape()[0];
                let (kk, p) = (geom.patch_len(), geom.out_pixels());
                let img = geom.in_channels * geom.height * geom.width;
                let mut cols = vec![T::zero(); kk * p];
                let mut dcols = vec![T::zero(); kk * p];
                let mut dx = wants(*x).then(|| vec![T::zero(); tx.numel()]);
                let mut dw = wants(*w).then(|| vec![T::zero(); tw.numel()]);
                for i in 0..n {
                    let gi = &g[i * o * p..(i + 1) * o * p];
                    if let Some(dw) = dw.as_mut() {
                        geom.im2col(&tx.data()[i * img..(i + 1) * img], &mut cols);
                        gemm_nt(o, p, kk, gi, &cols, dw);
                    }
                    if let Some(dx) = dx.as_mut() {
                        dcols.iter_mut().for_each(|v| *v = T::zero());
                        gemm_tn(kk, o, p, tw.data(), gi, &mut dcols);
                        geom.col2im(&dcols, &mut dx[i * img..(i + 1) * img]);
                    }
                }
                if let Some(dx) = dx {
                    send(*x, dx);
                }
                if let Some(dw) = dw {
                    send(*w, dw);
                }
                if let Some(b) = b {
                    if wants(*b) {
                        let mut db = vec![T::zero(); o];
                        for (ch, plane) in g.chunks(p).enumerate() {
                            db[ch % o] += plane.iter().copied().sum::<T>();
                        }
                        send(*b, db);
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            } => {
                let shape = node.value.shape();
                let (n, c) = (shape[0], shape[1]);
                let spatial: usize = shape[2..].iter().product();
                let at = |i: usize, ch: usize, s: usize| (i * c + ch) * spatial + s;
                let mut sum_dy = vec![T::zero(); c];
                let mut sum_dy_xhat = vec![T::zero(); c];
                for i in 0..n {
                    for ch in 0..c {
                        for s in 0..spatial {
                            let idx = at(i, ch, s);
                            sum_dy[ch] += g[idx];
                            sum_dy_xhat[ch] += g[idx] * xhat[idx];
                        }
                    }
                }
                if wants(*x) {
                    let gm = self.value(*gamma).data();
                    let m = lit::<T>((n * spatial) as f64);
                    let mut dx = vec![T::zero(); g.len()];
                    for i in 0..n {
                        for ch in 0..c {
                            let scale = gm[ch] * inv_std[ch];
                            for s in 0..spatial {
                                let idx = at(i, ch, s);
                                dx[idx] = if *training {
                                    scale / m
                                        * (m * g[idx] - sum_dy[ch] - xhat[idx] * sum_dy_xhat[ch])
                                } else {
                                    scale * g[idx]
                                };
                            }
                        }
                    }
                    send(*x, dx);
                }
                if wants(*gamma) {
                    send(*gamma, sum_dy_xhat);
                }
                if wants(*beta) {
                    send(*beta, sum_dy);
                }
            }
            Op::Relu { x } => {
                if wants(*x) {
                    let dx = self
                        .value(*x)
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
                        .collect();
                    send(*x, dx);
                }
            }
            Op::GlobalAvgPool { x } => {
                if wants(*x) {
                    let s = self.value(*x).shape();
                    let hw = s[2] * s[3];
                    let scale = lit::<T>(hw as f64);
                    let mut dx = Vec::with_capacity(s.iter().product());
                    for &gv in g {
                        let v = gv / scale;
                        dx.extend(std::iter::repeat_n(v, hw));
                    }
                    send(*x, dx);
                }
            }
            Op::Add { a, b } => {
                if wants(*a) {
                    send(*a, g.to_vec());
                }
                if wants(*b) {
                    send(*b, g.to_vec());
                }
            }
            Op::Scale { x, s } => {
                if wants(*x) {
                    send(*x, g.iter().map(|&v| v * *s).collect());
                }
            }
            Op::Mul { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if wants(*a) {
                    send(*a, g.iter().zip(tb.data()).map(|(&gv, &y)| gv * y).collect());
                }
                if wants(*b) {
                    send(*b, g.iter().zip(ta.data()).map(|(&gv, &x)| gv * x).collect());
                }
            }
            Op::Sum { x } => {
                if wants(*x) {
                    send(*x, vec![g[0]; self.value(*x).numel()]);
                }
            }
            Op::SoftmaxCe {
                logits,
                probs,
                labels,
                rows,
            } => {
                if wants(*logits) && !rows.is_empty() {
                    let tl = self.value(*logits);
                    let k = tl.shape()[1];
                    let scale = g[0] / lit(rows.len() as f64);
                    let mut dl = vec![T::zero(); tl.numel()];
                    for (r, &i) in rows.iter().enumerate() {
                        let dst = &mut dl[i * k..(i + 1) * k];
                        for (j, d) in dst.iter_mut().enumerate() {
                            let onehot = if j == labels[i] { T::one() } else { T::zero() };
                            *d = (probs[r * k + j] - onehot) * scale;
                        }
                    }
                    send(*logits, dl);
                }
            }
            Op::RowDistance {
                a,
                b,
                rows,
                squared,
                dists,
            } => {
                if rows.is_empty() || !(wants(*a) || wants(*b)) {
                    return;
                }
                let (ta, tb) = (self.value(*a), self.value(*b));
                let d = ta.shape()[1];
                let scale = g[0] / lit(rows.len() as f64);
                let mut da = vec![T::zero(); ta.numel()];
                for (r, &i) in rows.iter().enumerate() {
                    let factor = if *squared {
                        lit::<T>(2.0) * scale
                    } else if dists[r] > T::zero() {
                        scale / dists[r]
                    } else {
                        T::zero()
                    };
                    let (ra, rb) = (ta.row(i), tb.row(i));
                    for j in 0..d {
                        da[i * d + j] = factor * (ra[j] - rb[j]);
                    }
                }
                if wants(*b) {
                    send(*b, da.iter().map(|&v| -v).collect());
                }
                if wants(*a) {
                    send(*a, da);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_small_cases() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.leaf(&t(&[2, 1], &[5.0, 6.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[17.0, 39.0]);

        let eye = tape.leaf(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let bb = tape.leaf(&t(&[2, 3], &[1.0, -2.0, 3.5, 0.25, 9.0, -1.0]));
        let c = tape.matmul(eye, bb).unwrap();
        assert_eq!(tape.value(c).data(), tape.value(bb).data());

        let z = tape.leaf(&Tensor::zeros(&[2, 3]));
        let any = tape.leaf(&Tensor::full(&[3, 4], 7.0));
        let c = tape.matmul(z, any).unwrap();
        assert_eq!(tape.value(c).shape(), &[2, 4]);
        assert!(tape.value(c).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(&Tensor::zeros(&[2, 3]));
        let b = tape.leaf(&Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn matmul_backward_closed_form() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).into_param());
        let b = tape.leaf(&t(&[2, 1], &[5.0, 6.0]).into_param());
        let c = tape.matmul(a, b).unwrap();
        let s = tape.sum(c);
        let g = tape.backward(s).unwrap();
        // dA = 1·Bᵀ per row, dB = Aᵀ·1
        assert_eq!(g.get(a).unwrap(), &[5.0, 6.0, 5.0, 6.0]);
        assert_eq!(g.get(b).unwrap(), &[4.0, 6.0]);
    }

    #[test]
    fn conv_identity_and_sum() {
        let mut tape = Tape::new();
        let x = t(&[1, 1, 2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let xv = tape.leaf(&x);
        let w = tape.leaf(&t(&[1, 1, 1, 1], &[1.0]));
        let b = tape.leaf(&t(&[1], &[0.0]));
        let y = tape.conv2d(xv, w, Some(b), 1, 0).unwrap();
        assert_eq!(tape.value(y), &x);

        let ones = tape.leaf(&Tensor::full(&[1, 1, 3, 3], 1.0));
        let k = tape.leaf(&Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = tape.conv2d(ones, k, None, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[9.0]);
    }

    #[test]
    fn conv_rejects_empty_output() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&Tensor::zeros(&[1, 1, 2, 2]));
        let w = tape.leaf(&Tensor::zeros(&[1, 1, 3, 3]));
        assert!(matches!(tape.conv2d(x, w, None, 1, 0), Err(Error::Config(_))));
    }

    #[test]
    fn batch_norm_eval_cases() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1, 1, 1, 1], &[2.0]));
        let g = tape.leaf(&t(&[1], &[3.0]));
        let b = tape.leaf(&t(&[1], &[1.0]));
        let mode = BnMode::Eval {
            mean: &[0.5],
            var: &[4.0],
            eps: 0.0,
        };
        let (y, stats) = tape.batch_norm(x, g, b, mode).unwrap();
        assert!(stats.is_none());
        assert_eq!(tape.value(y).data(), &[3.25]);

        let xs = t(&[2, 1, 1, 2], &[-1.0, 0.5, 7.0, 2.0]);
        let xv = tape.leaf(&xs);
        let g = tape.leaf(&t(&[1], &[1.0]));
        let b = tape.leaf(&t(&[1], &[0.0]));
        let mode = BnMode::Eval {
            mean: &[0.0],
            var: &[1.0],
            eps: 0.0,
        };
        let (y, _) = tape.batch_norm(xv, g, b, mode).unwrap();
        assert_eq!(tape.value(y), &xs);
    }

    #[test]
    fn batch_norm_constant_batch_gives_beta() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::full(&[4, 2, 3, 3], 5.0));
        let g = tape.leaf(&t(&[2], &[2.0, -1.0]));
        let b = tape.leaf(&t(&[2], &[0.5, 0.25]));
        let (y, stats) = tape.batch_norm(x, g, b, BnMode::Train { eps: 1e-5 }).unwrap();
        let stats = stats.unwrap();
        assert_eq!(stats.mean, vec![5.0, 5.0]);
        assert_eq!(stats.var, vec![0.0, 0.0]);
        for (i, &v) in tape.value(y).data().iter().enumerate() {
            let ch = (i / 9) % 2;
            assert_eq!(v, [0.5, 0.25][ch]);
        }
    }

    #[test]
    fn batch_norm_zero_batch_errors() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[0, 2, 3, 3]));
        let g = tape.leaf(&Tensor::full(&[2], 1.0));
        let b = tape.leaf(&Tensor::zeros(&[2]));
        assert!(tape.batch_norm(x, g, b, BnMode::Train { eps: 1e-5 }).is_err());
    }

    #[test]
    fn cross_entropy_uniform_is_ln_k() {
        let mut tape = Tape::new();
        let z = tape.leaf(&Tensor::full(&[3, 4], 0.7));
        let l = tape.softmax_cross_entropy(z, &[0, 3, 2], None).unwrap();
        assert!((tape.scalar(l) - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_monotone_in_margin() {
        let mut prev = f64::INFINITY;
        for mag in [0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0] {
            let mut tape = Tape::new();
            let z = tape.leaf(&t(&[1, 3], &[0.0, mag, 0.0]));
            let lv = tape_ce(&mut tape, z, &[1]);
            let l = tape.scalar(lv);
            assert!(l < prev);
            prev = l;
        }
        assert!(prev < 1e-20);
    }

    fn tape_ce(tape: &mut Tape<f64>, z: Var, labels: &[usize]) -> Var {
        tape.softmax_cross_entropy(z, labels, None).unwrap()
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let mut tape = Tape::<f64>::new();
        let z = tape.leaf(&Tensor::zeros(&[2, 3]));
        assert!(tape.softmax_cross_entropy(z, &[0, 3], None).is_err());
    }

    #[test]
    fn masked_cross_entropy_empty_has_no_gradient() {
        let mut tape = Tape::new();
        let z = tape.leaf(&t(&[2, 2], &[1.0, -1.0, 0.5, 2.0]).into_param());
        let l = tape.softmax_cross_entropy(z, &[0, 1], Some(&[false, false])).unwrap();
        assert_eq!(tape.scalar(l), 0.0);
        let g = tape.backward(l).unwrap();
        assert!(g.get(z).is_none());
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[2], &[1.0, 2.0]));
        let b = tape.leaf(&t(&[2], &[3.0, 4.0]).into_param());
        let c = tape.mul(a, b).unwrap();
        let s = tape.sum(c);
        let g = tape.backward(s).unwrap();
        assert!(g.get(a).is_none());
        assert_eq!(g.get(b).unwrap(), &[1.0, 2.0]);
    }
}
