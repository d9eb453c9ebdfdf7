//! Expandable convolution blocks.
//!
//! A [`ConvBlock`] is a 3×3 convolution (optionally followed by batch norm)
//! that can be widened with a parallel residual adapter while its own
//! weights are frozen, and later collapsed back into a single 3×3 kernel
//! with identical input/output behaviour:
//!
//! ```text
//!   expand:  y = BN(conv3x3(x))                ->  y = BN(conv3x3(x)) + A(x)
//!   fuse:    y = BN(conv3x3(x)) + A(x)         ->  y = conv3x3'(x)
//! ```
//!
//! Fusion folds each branch's batch norm into its kernel, zero-pads a 1×1
//! adapter kernel to 3×3 and adds kernels and biases.

use serde::{Deserialize, Serialize};

use crate::autograd::{BatchStats, BnMode, Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{lit, Real, Tensor};

pub const DEFAULT_BN_EPS: f64 = 1e-5;
pub const DEFAULT_BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterKind {
    #[default]
    Conv1x1,
    Conv1x1WithBn,
    Conv3x3,
}

impl AdapterKind {
    pub const ALL: [AdapterKind; 3] = [
        AdapterKind::Conv1x1,
        AdapterKind::Conv1x1WithBn,
        AdapterKind::Conv3x3,
    ];

    pub fn kernel(self) -> usize {
        match self {
            AdapterKind::Conv1x1 | AdapterKind::Conv1x1WithBn => 1,
            AdapterKind::Conv3x3 => 3,
        }
    }

    pub fn has_bn(self) -> bool {
        matches!(self, AdapterKind::Conv1x1WithBn)
    }
}

/// Batch-norm affine parameters plus running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub eps: T,
    pub momentum: T,
}

impl<T: Real> BatchNorm<T> {
    /// gamma = 1, beta = 0, mean = 0, var = 1.
    pub fn identity(channels: usize) -> Self {
        BatchNorm {
            gamma: Tensor::full(&[channels], T::one()).into_param(),
            beta: Tensor::zeros(&[channels]).into_param(),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
            eps: lit(DEFAULT_BN_EPS),
            momentum: lit(DEFAULT_BN_MOMENTUM),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    fn mode(&self, training: bool) -> BnMode<'_, T> {
        if training {
            BnMode::Train { eps: self.eps }
        } else {
            BnMode::Eval {
                mean: self.running_mean.data(),
                var: self.running_var.data(),
                eps: self.eps,
            }
        }
    }

    /// Momentum update of the running estimates; the variance estimate uses
    /// the unbiased batch variance.
    pub fn update_running(&mut self, stats: &BatchStats<T>) {
        let m = self.momentum;
        let keep = T::one() - m;
        let n = stats.count;
        let correction = if n > 1 {
            lit::<T>(n as f64) / lit::<T>((n - 1) as f64)
        } else {
            T::one()
        };
        for (r, &b) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in self.running_var.data_mut().iter_mut().zip(&stats.var) {
            *r = keep * *r + m * b * correction;
        }
    }

    fn set_trainable(&mut self, on: bool) {
        self.gamma.set_requires_grad(on);
        self.beta.set_requires_grad(on);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adapter<T> {
    pub kind: AdapterKind,
    pub weight: Tensor<T>,
    /// Present when the adapter has no batch norm of its own.
    pub bias: Option<Tensor<T>>,
    pub bn: Option<BatchNorm<T>>,
    pub stride: usize,
    pub padding: usize,
    /// Freeze the adapter batch-norm statistics during training.
    pub bn_stats_frozen: bool,
}

impl<T: Real> Adapter<T> {
    pub fn param_count(&self) -> usize {
        self.weight.numel()
            + self.bias.as_ref().map_or(0, Tensor::numel)
            + self.bn.as_ref().map_or(0, |bn| 2 * bn.channels())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock<T> {
    pub main_weight: Tensor<T>,
    pub main_bias: Tensor<T>,
    pub main_bn: Option<BatchNorm<T>>,
    pub adapter: Option<Adapter<T>>,
    pub frozen_main: bool,
    pub stride: usize,
    pub padding: usize,
}

/// Tape handles of a block's parameters for one forward pass.
#[derive(Debug, Clone)]
pub struct BlockVars {
    pub main_weight: Var,
    pub main_bias: Var,
    pub main_bn: Option<(Var, Var)>,
    pub adapter_weight: Option<Var>,
    pub adapter_bias: Option<Var>,
    pub adapter_bn: Option<(Var, Var)>,
}

#[derive(Debug, Clone)]
pub struct BlockForward<T> {
    pub out: Var,
    pub vars: BlockVars,
    pub main_stats: Option<BatchStats<T>>,
    pub adapter_stats: Option<BatchStats<T>>,
}

/// Folds an eval-mode batch norm into the preceding convolution:
/// `s = γ/√(v+ε)`, `w' = s·w`, `b' = β + s·(b − μ)`, per output channel.
pub fn fuse_conv_bn<T: Real>(
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    bn: &BatchNorm<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let out_ch = weight.shape()[0];
    if bias.numel() != out_ch || bn.channels() != out_ch {
        return Err(Error::shape("fuse_conv_bn", weight.shape(), bn.gamma.shape()));
    }
    let per_out = weight.numel() / out_ch;
    let mut w = weight.detached();
    let mut b = bias.detached();
    for o in 0..out_ch {
        let denom = bn.running_var.data()[o] + bn.eps;
        if denom <= T::zero() {
            return Err(Error::Numeric(format!(
                "fuse_conv_bn: running_var + eps = {denom:?} on channel {o}"
            )));
        }
        let s = bn.gamma.data()[o] / denom.sqrt();
        w.data_mut()[o * per_out..(o + 1) * per_out]
            .iter_mut()
            .for_each(|v| *v = s * *v);
        let bo = &mut b.data_mut()[o];
        *bo = bn.beta.data()[o] + s * (*bo - bn.running_mean.data()[o]);
    }
    Ok((w, b))
}

/// Zero-pads a `[O,I,k,k]` kernel to `[O,I,size,size]`, centred.
pub fn pad_kernel_centered<T: Real>(w: &Tensor<T>, size: usize) -> Result<Tensor<T>> {
    let &[o, i, k, k2] = w.shape() else {
        return Err(Error::shape("pad_kernel", w.shape(), &[0, 0, size, size]));
    };
    if k != k2 || k > size || !(size - k).is_multiple_of(2) {
        return Err(Error::shape("pad_kernel", w.shape(), &[o, i, size, size]));
    }
    let off = (size - k) / 2;
    let mut out = Tensor::zeros(&[o, i, size, size]);
    for oc in 0..o {
        for ic in 0..i {
            for y in 0..k {
                for x in 0..k {
                    let src = ((oc * i + ic) * k + y) * k + x;
                    let dst = ((oc * i + ic) * size + y + off) * size + x + off;
                    out.data_mut()[dst] = w.data()[src];
                }
            }
        }
    }
    Ok(out)
}

/// Places each 1×1 tap at the centre of an otherwise zero 3×3 kernel.
pub fn pad_1x1_to_3x3<T: Real>(w: &Tensor<T>) -> Result<Tensor<T>> {
    match w.shape() {
        [_, _, 1, 1] => pad_kernel_centered(w, 3),
        s => Err(Error::shape("pad_1x1_to_3x3", s, &[s[0], s[1], 1, 1])),
    }
}

impl<T: Real> ConvBlock<T> {
    /// A block with the given main kernel and zero bias; no batch norm.
    pub fn new(weight: Tensor<T>, stride: usize, padding: usize) -> Result<Self> {
        let &[out_ch, _, k, k2] = weight.shape() else {
            return Err(Error::shape("conv block", weight.shape(), &[0, 0, 3, 3]));
        };
        if k != k2 {
            return Err(Error::shape("conv block", weight.shape(), &[out_ch, 0, k, k]));
        }
        Ok(ConvBlock {
            main_weight: weight.into_param(),
            main_bias: Tensor::zeros(&[out_ch]).into_param(),
            main_bn: None,
            adapter: None,
            frozen_main: false,
            stride,
            padding,
        })
    }

    pub fn with_bn(mut self) -> Self {
        self.main_bn = Some(BatchNorm::identity(self.out_channels()));
        self
    }

    pub fn out_channels(&self) -> usize {
        self.main_weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.main_weight.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.main_weight.shape()[2]
    }

    pub fn is_expanded(&self) -> bool {
        self.adapter.is_some()
    }

    /// Learnable scalars, excluding batch-norm running statistics.
    pub fn param_count(&self) -> usize {
        self.main_weight.numel()
            + self.main_bias.numel()
            + self.main_bn.as_ref().map_or(0, |bn| 2 * bn.channels())
            + self.adapter.as_ref().map_or(0, Adapter::param_count)
    }

    /// Names and shapes of every tensor the block holds, buffers included.
    pub fn fingerprint(&self, prefix: &str) -> Vec<(String, Vec<usize>)> {
        let mut out = vec![
            (format!("{prefix}.weight"), self.main_weight.shape().to_vec()),
            (format!("{prefix}.bias"), self.main_bias.shape().to_vec()),
        ];
        let bn_entries = |out: &mut Vec<(String, Vec<usize>)>, p: String, bn: &BatchNorm<T>| {
            for (name, t) in [
                ("gamma", &bn.gamma),
                ("beta", &bn.beta),
                ("running_mean", &bn.running_mean),
                ("running_var", &bn.running_var),
            ] {
                out.push((format!("{p}.{name}"), t.shape().to_vec()));
            }
        };
        if let Some(bn) = &self.main_bn {
            bn_entries(&mut out, format!("{prefix}.bn"), bn);
        }
        if let Some(a) = &self.adapter {
            out.push((format!("{prefix}.adapter.weight"), a.weight.shape().to_vec()));
            if let Some(b) = &a.bias {
                out.push((format!("{prefix}.adapter.bias"), b.shape().to_vec()));
            }
            if let Some(bn) = &a.bn {
                bn_entries(&mut out, format!("{prefix}.adapter.bn"), bn);
            }
        }
        out
    }

    fn set_main_trainable(&mut self, on: bool) {
        self.main_weight.set_requires_grad(on);
        self.main_bias.set_requires_grad(on);
        if let Some(bn) = &mut self.main_bn {
            bn.set_trainable(on);
        }
    }

    /// Freezes or unfreezes the main branch (weights, bias, batch norm).
    pub fn set_frozen_main(&mut self, frozen: bool) {
        self.frozen_main = frozen;
        self.set_main_trainable(!frozen);
    }

    /// Attaches a zero-initialized adapter and freezes the main branch, so the
    /// block computes exactly what it did before.
    pub fn expand(&mut self, kind: AdapterKind) -> Result<()> {
        if self.adapter.is_some() {
            return Err(Error::State("block already carries an adapter".into()));
        }
        let k = kind.kernel();
        let main_k = self.kernel();
        if k > main_k || !(main_k - k).is_multiple_of(2) || self.padding < (main_k - k) / 2 {
            return Err(Error::State(format!(
                "cannot align a {k}x{k} adapter with a {main_k}x{main_k} kernel at padding {}",
                self.padding
            )));
        }
        let (o, i) = (self.out_channels(), self.in_channels());
        let bn = kind.has_bn().then(|| BatchNorm::identity(o));
        let bias = (!kind.has_bn()).then(|| Tensor::zeros(&[o]).into_param());
        self.adapter = Some(Adapter {
            kind,
            weight: Tensor::zeros(&[o, i, k, k]).into_param(),
            bias,
            bn,
            stride: self.stride,
            padding: self.padding - (main_k - k) / 2,
            bn_stats_frozen: false,
        });
        self.set_frozen_main(true);
        Ok(())
    }

    /// Folds the main batch norm (running statistics) into the kernel and
    /// bias, leaving a plain biased convolution.
    pub fn fold_main_bn(&mut self) -> Result<()> {
        if let Some(bn) = self.main_bn.take() {
            let (w, b) = fuse_conv_bn(&self.main_weight, &self.main_bias, &bn)?;
            let trainable = !self.frozen_main;
            self.main_weight = w;
            self.main_bias = b;
            self.set_main_trainable(trainable);
        }
        Ok(())
    }

    /// Collapses the adapter into the main kernel. The resulting block has no
    /// batch norm and no adapter, and its main branch is trainable again.
    pub fn fuse(&mut self) -> Result<()> {
        let Some(adapter) = self.adapter.as_ref() else {
            return Err(Error::State("fuse called on a block without an adapter".into()));
        };
        let main_k = self.kernel();
        let ak = adapter.kind.kernel();
        if adapter.stride != self.stride
            || ak > main_k
            || adapter.padding + (main_k - ak) / 2 != self.padding
        {
            return Err(Error::State(format!(
                "branch geometry mismatch: main stride {} padding {}, adapter stride {} padding {}",
                self.stride, self.padding, adapter.stride, adapter.padding
            )));
        }
        let (main_w, main_b) = match &self.main_bn {
            Some(bn) => fuse_conv_bn(&self.main_weight, &self.main_bias, bn)?,
            None => (self.main_weight.detached(), self.main_bias.detached()),
        };
        let (ad_w, ad_b) = match (&adapter.bn, &adapter.bias) {
            (Some(bn), _) => {
                let zero = Tensor::zeros(&[self.out_channels()]);
                fuse_conv_bn(&adapter.weight, &zero, bn)?
            }
            (None, Some(b)) => (adapter.weight.detached(), b.detached()),
            (None, None) => (
                adapter.weight.detached(),
                Tensor::zeros(&[self.out_channels()]),
            ),
        };
        let ad_w = if ak == main_k {
            ad_w
        } else {
            pad_kernel_centered(&ad_w, main_k)?
        };
        let mut w = main_w;
        w.data_mut()
            .iter_mut()
            .zip(ad_w.data())
            .for_each(|(a, &b)| *a += b);
        let mut b = main_b;
        b.data_mut()
            .iter_mut()
            .zip(ad_b.data())
            .for_each(|(a, &v)| *a += v);
        self.main_weight = w;
        self.main_bias = b;
        self.main_bn = None;
        self.adapter = None;
        self.set_frozen_main(false);
        Ok(())
    }

    /// Records `conv(+BN) [+ adapter]` on the tape. Batch norms run on batch
    /// statistics only when `train` is set and their parameters are not
    /// frozen.
    pub fn forward(&self, tape: &mut Tape<T>, x: Var, train: bool) -> Result<BlockForward<T>> {
        let main_weight = tape.leaf(&self.main_weight);
        let main_bias = tape.leaf(&self.main_bias);
        let mut out = tape.conv2d(x, main_weight, Some(main_bias), self.stride, self.padding)?;
        let mut main_stats = None;
        let mut main_bn = None;
        if let Some(bn) = &self.main_bn {
            let g = tape.leaf(&bn.gamma);
            let b = tape.leaf(&bn.beta);
            let (y, stats) = tape.batch_norm(out, g, b, bn.mode(train && !self.frozen_main))?;
            out = y;
            main_stats = stats;
            main_bn = Some((g, b));
        }
        let mut vars = BlockVars {
            main_weight,
            main_bias,
            main_bn,
            adapter_weight: None,
            adapter_bias: None,
            adapter_bn: None,
        };
        let mut adapter_stats = None;
        if let Some(a) = &self.adapter {
            let w = tape.leaf(&a.weight);
            let b = a.bias.as_ref().map(|b| tape.leaf(b));
            let mut side = tape.conv2d(x, w, b, a.stride, a.padding)?;
            if let Some(bn) = &a.bn {
                let g = tape.leaf(&bn.gamma);
                let be = tape.leaf(&bn.beta);
                let (y, stats) = tape.batch_norm(side, g, be, bn.mode(train && !a.bn_stats_frozen))?;
                side = y;
                adapter_stats = stats;
                vars.adapter_bn = Some((g, be));
            }
            vars.adapter_weight = Some(w);
            vars.adapter_bias = b;
            out = tape.add(out, side)?;
        }
        Ok(BlockForward {
            out,
            vars,
            main_stats,
            adapter_stats,
        })
    }

    /// Applies the running-statistics update for a training forward pass.
    pub fn update_running_stats(&mut self, fwd: &BlockForward<T>) {
        if let (Some(bn), Some(stats)) = (&mut self.main_bn, &fwd.main_stats) {
            bn.update_running(stats);
        }
        if let Some(a) = &mut self.adapter {
            if let (Some(bn), Some(stats)) = (&mut a.bn, &fwd.adapter_stats) {
                bn.update_running(stats);
            }
        }
    }

    /// Moves tape gradients into the parameters' gradient buffers.
    pub fn accumulate_grads(&mut self, vars: &BlockVars, grads: &Gradients<T>) {
        let put = |t: &mut Tensor<T>, v: Var| {
            if let Some(g) = grads.get(v) {
                t.accumulate_grad(g);
            }
        };
        put(&mut self.main_weight, vars.main_weight);
        put(&mut self.main_bias, vars.main_bias);
        if let (Some(bn), Some((g, b))) = (&mut self.main_bn, vars.main_bn) {
            put(&mut bn.gamma, g);
            put(&mut bn.beta, b);
        }
        if let Some(a) = &mut self.adapter {
            if let Some(v) = vars.adapter_weight {
                put(&mut a.weight, v);
            }
            if let (Some(bias), Some(v)) = (&mut a.bias, vars.adapter_bias) {
                put(bias, v);
            }
            if let (Some(bn), Some((g, b))) = (&mut a.bn, vars.adapter_bn) {
                put(&mut bn.gamma, g);
                put(&mut bn.beta, b);
            }
        }
    }

    /// All learnable tensors in a fixed order (trainable or not).
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.main_weight, &mut self.main_bias];
        if let Some(bn) = &mut self.main_bn {
            out.push(&mut bn.gamma);
            out.push(&mut bn.beta);
        }
        if let Some(a) = &mut self.adapter {
            out.push(&mut a.weight);
            if let Some(b) = &mut a.bias {
                out.push(b);
            }
            if let Some(bn) = &mut a.bn {
                out.push(&mut bn.gamma);
                out.push(&mut bn.beta);
            }
        }
        out
    }

    /// Makes every tensor non-trainable; used for distillation teachers.
    pub fn freeze_all(&mut self) {
        for p in self.params_mut() {
            p.set_requires_grad(false);
        }
        self.frozen_main = true;
    }
}
