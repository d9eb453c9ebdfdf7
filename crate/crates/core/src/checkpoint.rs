//! Versioned JSON checkpoints. Tensor data is stored as base64 of the
//! little-endian bytes, so a save/load round trip is bit-exact.

use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, Classifier, Model};
use crate::error::{Error, Result};
use crate::protomem::PrototypeStore;
use crate::reparam::{Adapter, AdapterKind, BatchNorm, ConvBlock};
use crate::tensor::{Real, Tensor};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub phase: usize,
    /// Class ids in learning order; classifier row `r` is `class_order[r]`.
    pub class_order: Vec<usize>,
    /// Input image height and width.
    pub input_size: [usize; 2],
    pub model: Model<T>,
    pub prototypes: PrototypeStore<T>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorRecord {
    shape: Vec<usize>,
    requires_grad: bool,
    data: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BnRecord {
    gamma: TensorRecord,
    beta: TensorRecord,
    running_mean: TensorRecord,
    running_var: TensorRecord,
    eps: f64,
    momentum: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdapterRecord {
    kind: AdapterKind,
    weight: TensorRecord,
    bias: Option<TensorRecord>,
    bn: Option<BnRecord>,
    stride: usize,
    padding: usize,
    bn_stats_frozen: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlockRecord {
    main_weight: TensorRecord,
    main_bias: TensorRecord,
    main_bn: Option<BnRecord>,
    adapter: Option<AdapterRecord>,
    frozen_main: bool,
    stride: usize,
    padding: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PrototypeRecord {
    class: usize,
    phase: usize,
    centroid: TensorRecord,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointRecord {
    version: u32,
    precision: String,
    phase: usize,
    class_order: Vec<usize>,
    input_size: [usize; 2],
    backbone_config: BackboneConfig,
    blocks: Vec<BlockRecord>,
    classifier_weight: TensorRecord,
    classifier_bias: TensorRecord,
    prototype_dim: usize,
    prototypes: Vec<PrototypeRecord>,
}

fn enc<T: Real>(t: &Tensor<T>) -> TensorRecord {
    let mut bytes = Vec::with_capacity(t.numel() * T::BYTES);
    t.data().iter().for_each(|v| v.write_le(&mut bytes));
    TensorRecord {
        shape: t.shape().to_vec(),
        requires_grad: t.requires_grad(),
        data: STANDARD.encode(bytes),
    }
}

fn dec<T: Real>(r: &TensorRecord) -> Result<Tensor<T>> {
    let bytes = STANDARD
        .decode(&r.data)
        .map_err(|e| Error::Checkpoint(format!("bad tensor encoding: {e}")))?;
    if bytes.len() % T::BYTES != 0 {
        return Err(Error::Checkpoint(format!(
            "{} bytes is not a whole number of {} values",
            bytes.len(),
            T::NAME
        )));
    }
    let data = bytes.chunks_exact(T::BYTES).map(T::read_le).collect();
    let mut t = Tensor::new(&r.shape, data).map_err(|e| Error::Checkpoint(e.to_string()))?;
    t.set_requires_grad(r.requires_grad);
    Ok(t)
}

fn scalar<T: Real>(v: T) -> f64 {
    v.to_f64().expect("finite scalar")
}

fn enc_bn<T: Real>(bn: &BatchNorm<T>) -> BnRecord {
    BnRecord {
        gamma: enc(&bn.gamma),
        beta: enc(&bn.beta),
        running_mean: enc(&bn.running_mean),
        running_var: enc(&bn.running_var),
        eps: scalar(bn.eps),
        momentum: scalar(bn.momentum),
    }
}

fn dec_bn<T: Real>(r: &BnRecord) -> Result<BatchNorm<T>> {
    Ok(BatchNorm {
        gamma: dec(&r.gamma)?,
        beta: dec(&r.beta)?,
        running_mean: dec(&r.running_mean)?,
        running_var: dec(&r.running_var)?,
        eps: T::from_f64_lossy(r.eps),
        momentum: T::from_f64_lossy(r.momentum),
    })
}

fn enc_block<T: Real>(b: &ConvBlock<T>) -> BlockRecord {
    BlockRecord {
        main_weight: enc(&b.main_weight),
        main_bias: enc(&b.main_bias),
        main_bn: b.main_bn.as_ref().map(enc_bn),
        adapter: b.adapter.as_ref().map(|a| AdapterRecord {
            kind: a.kind,
            weight: enc(&a.weight),
            bias: a.bias.as_ref().map(enc),
            bn: a.bn.as_ref().map(enc_bn),
            stride: a.stride,
            padding: a.padding,
            bn_stats_frozen: a.bn_stats_frozen,
        }),
        frozen_main: b.frozen_main,
        stride: b.stride,
        padding: b.padding,
    }
}

fn dec_block<T: Real>(r: &BlockRecord) -> Result<ConvBlock<T>> {
    let adapter = match &r.adapter {
        Some(a) => Some(Adapter {
            kind: a.kind,
            weight: dec(&a.weight)?,
            bias: a.bias.as_ref().map(dec).transpose()?,
            bn: a.bn.as_ref().map(dec_bn).transpose()?,
            stride: a.stride,
            padding: a.padding,
            bn_stats_frozen: a.bn_stats_frozen,
        }),
        None => None,
    };
    Ok(ConvBlock {
        main_weight: dec(&r.main_weight)?,
        main_bias: dec(&r.main_bias)?,
        main_bn: r.main_bn.as_ref().map(dec_bn).transpose()?,
        adapter,
        frozen_main: r.frozen_main,
        stride: r.stride,
        padding: r.padding,
    })
}

impl<T: Real> Checkpoint<T> {
    pub fn to_json(&self) -> Result<String> {
        let record = CheckpointRecord {
            version: FORMAT_VERSION,
            precision: T::NAME.to_string(),
            phase: self.phase,
            class_order: self.class_order.clone(),
            input_size: self.input_size,
            backbone_config: self.model.backbone.config.clone(),
            blocks: self.model.backbone.blocks.iter().map(enc_block).collect(),
            classifier_weight: enc(&self.model.classifier.weight),
            classifier_bias: enc(&self.model.classifier.bias),
            prototype_dim: self.prototypes.dim(),
            prototypes: self
                .prototypes
                .iter()
                .map(|(class, p)| PrototypeRecord {
                    class,
                    phase: p.phase,
                    centroid: enc(&Tensor::new(&[p.centroid.len()], p.centroid.clone()).expect("1-d")),
                })
                .collect(),
        };
        Ok(serde_json::to_string(&record)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: CheckpointRecord =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("malformed checkpoint: {e}")))?;
        if r.version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {} (expected {FORMAT_VERSION})",
                r.version
            )));
        }
        if r.precision != T::NAME {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} values, requested {}",
                r.precision,
                T::NAME
            )));
        }
        r.backbone_config.validate()?;
        let blocks = r.blocks.iter().map(dec_block).collect::<Result<Vec<_>>>()?;
        if blocks.len() != r.backbone_config.channels.len() {
            return Err(Error::Checkpoint(format!(
                "{} blocks stored for a {}-block configuration",
                blocks.len(),
                r.backbone_config.channels.len()
            )));
        }
        let weight: Tensor<T> = dec(&r.classifier_weight)?;
        let bias = dec(&r.classifier_bias)?;
        let dim = r.backbone_config.feature_dim();
        if weight.shape().len() != 2 || weight.shape()[1] != dim || bias.shape() != [weight.shape()[0]] {
            return Err(Error::Checkpoint(format!(
                "classifier shapes {:?}/{:?} do not match feature size {dim}",
                weight.shape(),
                bias.shape()
            )));
        }
        let mut prototypes = PrototypeStore::new(r.prototype_dim);
        for p in &r.prototypes {
            prototypes
                .insert(p.class, dec::<T>(&p.centroid)?.into_data(), p.phase)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
        Ok(Checkpoint {
            phase: r.phase,
            class_order: r.class_order,
            input_size: r.input_size,
            model: Model {
                backbone: Backbone {
                    config: r.backbone_config,
                    blocks,
                },
                classifier: Classifier {
                    weight,
                    bias,
                    frozen_rows: 0,
                },
            },
            prototypes,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Precision tag of a serialized checkpoint, without decoding it.
pub fn peek_precision(text: &str) -> Result<String> {
    #[derive(Deserialize)]
    struct Head {
        precision: String,
    }
    let head: Head =
        serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("malformed checkpoint: {e}")))?;
    Ok(head.precision)
}
