//! Block-structured feature extractor and the growing linear classifier.

use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::reparam::{AdapterKind, BlockForward, ConvBlock};
use crate::tensor::{lit, Real, Tensor};

/// Half-width of the uniform initialization of new classifier rows.
pub const NEW_ROW_INIT: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
    /// Batch norm in the main branch while the first phase trains.
    pub batch_norm: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            in_channels: 3,
            channels: vec![16, 32, 64],
            strides: vec![1, 2, 2],
            batch_norm: true,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.len() != self.strides.len() {
            return Err(Error::Config(format!(
                "backbone needs one stride per stage: {} channels, {} strides",
                self.channels.len(),
                self.strides.len()
            )));
        }
        if self.in_channels == 0 || self.channels.contains(&0) || self.strides.contains(&0) {
            return Err(Error::Config("backbone sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        *self.channels.last().expect("validated")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone<T> {
    pub config: BackboneConfig,
    pub blocks: Vec<ConvBlock<T>>,
}

#[derive(Debug, Clone)]
pub struct BackboneForward<T> {
    pub features: Var,
    pub blocks: Vec<BlockForward<T>>,
}

impl<T: Real> Backbone<T> {
    /// He-normal main kernels, zero biases, identity batch norm.
    pub fn new(config: BackboneConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut blocks = Vec::with_capacity(config.channels.len());
        let mut in_ch = config.in_channels;
        for (&out_ch, &stride) in config.channels.iter().zip(&config.strides) {
            let fan_in = (in_ch * 9) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
            let w = Tensor::from_fn(&[out_ch, in_ch, 3, 3], |_| lit(normal.sample(rng)));
            let mut block = ConvBlock::new(w, stride, 1)?;
            if config.batch_norm {
                block = block.with_bn();
            }
            blocks.push(block);
            in_ch = out_ch;
        }
        Ok(Backbone { config, blocks })
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim()
    }

    /// `relu(block(x))` for every block, then global average pooling.
    pub fn forward(&self, tape: &mut Tape<T>, x: Var, train: bool) -> Result<BackboneForward<T>> {
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 4 || shape[1] != self.config.in_channels {
            return Err(Error::shape(
                "backbone input",
                &shape,
                &[0, self.config.in_channels, 0, 0],
            ));
        }
        let mut h = x;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let f = block.forward(tape, h, train)?;
            h = tape.relu(f.out);
            blocks.push(f);
        }
        let features = tape.global_avg_pool(h)?;
        Ok(BackboneForward { features, blocks })
    }

    /// Features of a batch with no gradient tracking (eval-mode batch norm).
    pub fn features(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let f = self.forward(&mut tape, xv, false)?;
        Ok(tape.value(f.features).clone())
    }

    pub fn update_running_stats(&mut self, fwd: &BackboneForward<T>) {
        for (block, f) in self.blocks.iter_mut().zip(&fwd.blocks) {
            block.update_running_stats(f);
        }
    }

    pub fn accumulate_grads(&mut self, fwd: &BackboneForward<T>, grads: &Gradients<T>) {
        for (block, f) in self.blocks.iter_mut().zip(&fwd.blocks) {
            block.accumulate_grads(&f.vars, grads);
        }
    }

    pub fn expand(&mut self, kind: AdapterKind) -> Result<()> {
        self.blocks.iter_mut().try_for_each(|b| b.expand(kind))
    }

    pub fn fuse(&mut self) -> Result<()> {
        self.blocks.iter_mut().try_for_each(ConvBlock::fuse)
    }

    pub fn fold_batch_norm(&mut self) -> Result<()> {
        self.blocks.iter_mut().try_for_each(ConvBlock::fold_main_bn)
    }

    pub fn is_expanded(&self) -> bool {
        self.blocks.iter().any(ConvBlock::is_expanded)
    }

    pub fn set_adapter_bn_frozen(&mut self, frozen: bool) {
        for a in self.blocks.iter_mut().filter_map(|b| b.adapter.as_mut()) {
            a.bn_stats_frozen = frozen;
        }
    }

    pub fn param_count(&self) -> usize {
        self.blocks.iter().map(ConvBlock::param_count).sum()
    }

    /// Names and shapes of every tensor in the extractor.
    pub fn fingerprint(&self) -> Vec<(String, Vec<usize>)> {
        self.blocks
            .iter()
            .enumerate()
            .flat_map(|(i, b)| b.fingerprint(&format!("block{i}")))
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.blocks.iter_mut().flat_map(ConvBlock::params_mut).collect()
    }

    /// A non-trainable copy for use as a distillation teacher.
    pub fn frozen_copy(&self) -> Self {
        let mut copy = self.clone();
        copy.blocks.iter_mut().for_each(ConvBlock::freeze_all);
        copy
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classifier<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    /// Leading rows excluded from optimizer updates.
    pub frozen_rows: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct ClassifierVars {
    pub weight: Var,
    pub bias: Var,
}

impl<T: Real> Classifier<T> {
    pub fn empty(dim: usize) -> Self {
        Classifier {
            weight: Tensor::zeros(&[0, dim]).into_param(),
            bias: Tensor::zeros(&[0]).into_param(),
            frozen_rows: 0,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.weight.shape()[1]
    }

    /// Appends `k_new` rows drawn uniformly from ±[`NEW_ROW_INIT`] with zero
    /// bias; existing rows are untouched.
    pub fn extend(&mut self, k_new: usize, rng: &mut impl Rng) -> Result<()> {
        if k_new == 0 {
            return Err(Error::Config("classifier extension needs k_new >= 1".into()));
        }
        let (k, d) = (self.num_classes(), self.dim());
        let mut w = self.weight.data().to_vec();
        w.extend((0..k_new * d).map(|_| lit::<T>(rng.random_range(-NEW_ROW_INIT..NEW_ROW_INIT))));
        let mut b = self.bias.data().to_vec();
        b.extend(std::iter::repeat_n(T::zero(), k_new));
        self.weight = Tensor::new(&[k + k_new, d], w)?.into_param();
        self.bias = Tensor::new(&[k + k_new], b)?.into_param();
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> ClassifierVars {
        ClassifierVars {
            weight: tape.leaf(&self.weight),
            bias: tape.leaf(&self.bias),
        }
    }

    pub fn logits(tape: &mut Tape<T>, vars: ClassifierVars, r: Var) -> Result<Var> {
        tape.linear(r, vars.weight, Some(vars.bias))
    }

    /// Logits for a feature batch with no gradient tracking.
    pub fn apply(&self, r: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars = ClassifierVars {
            weight: tape.constant(self.weight.detached()),
            bias: tape.constant(self.bias.detached()),
        };
        let rv = tape.constant(r.clone());
        let out = Self::logits(&mut tape, vars, rv)?;
        Ok(tape.value(out).clone())
    }

    pub fn accumulate_grads(&mut self, vars: ClassifierVars, grads: &Gradients<T>) {
        if let Some(g) = grads.get(vars.weight) {
            self.weight.accumulate_grad(g);
        }
        if let Some(g) = grads.get(vars.bias) {
            self.bias.accumulate_grad(g);
        }
    }

    /// Weight and bias with the element ranges the optimizer may update.
    pub fn params_mut(&mut self) -> Vec<(&mut Tensor<T>, Range<usize>)> {
        let d = self.dim();
        let k = self.num_classes();
        let from = self.frozen_rows.min(k);
        vec![
            (&mut self.weight, from * d..k * d),
            (&mut self.bias, from..k),
        ]
    }
}

/// Extractor plus classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub backbone: Backbone<T>,
    pub classifier: Classifier<T>,
}

impl<T: Real> Model<T> {
    pub fn new(config: BackboneConfig, rng: &mut impl Rng) -> Result<Self> {
        let backbone = Backbone::new(config, rng)?;
        let classifier = Classifier::empty(backbone.feature_dim());
        Ok(Model {
            backbone,
            classifier,
        })
    }

    /// Eval-mode logits for a batch.
    pub fn predict_logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let r = self.backbone.features(x)?;
        self.classifier.apply(&r)
    }

    /// Every tensor the optimizer may touch, with its updatable range.
    pub fn trainable_params_mut(&mut self) -> Vec<(&mut Tensor<T>, Range<usize>)> {
        let mut out: Vec<(&mut Tensor<T>, Range<usize>)> = self
            .backbone
            .params_mut()
            .into_iter()
            .map(|t| {
                let n = t.numel();
                (t, 0..n)
            })
            .collect();
        out.extend(self.classifier.params_mut());
        out.retain(|(t, _)| t.requires_grad());
        out
    }

    pub fn zero_grad(&mut self) {
        for p in self.backbone.params_mut() {
            p.zero_grad();
        }
        self.classifier.weight.zero_grad();
        self.classifier.bias.zero_grad();
    }
}
