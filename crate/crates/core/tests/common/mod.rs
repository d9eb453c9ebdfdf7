#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ssre::autograd::Tape;
use ssre::backbone::BackboneConfig;
use ssre::data::{make_synthetic, Dataset, IncrementalSplit, SyntheticConfig};
use ssre::reparam::{AdapterKind, BatchNorm, ConvBlock};
use ssre::trainer::TrainConfig;
use ssre::{Real, Tensor};

pub fn uniform<T: Real>(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.random_range(lo..hi)))
}

fn randomize_bn<T: Real>(bn: &mut BatchNorm<T>, rng: &mut ChaCha8Rng) {
    let c = bn.gamma.numel();
    bn.gamma.data_mut().copy_from_slice(uniform::<T>(&[c], 0.5, 1.5, rng).data());
    bn.beta.data_mut().copy_from_slice(uniform::<T>(&[c], -0.5, 0.5, rng).data());
    bn.running_mean = uniform(&[c], -0.5, 0.5, rng);
    bn.running_var = uniform(&[c], 0.5, 2.0, rng);
}

/// A 3×3 block with random main weights, optional random main BN, and a
/// random (non-zero) adapter of the given kind.
pub fn random_expanded_block<T: Real>(
    seed: u64,
    kind: AdapterKind,
    stride: usize,
    main_bn: bool,
    in_ch: usize,
    out_ch: usize,
) -> ConvBlock<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut block = ConvBlock::new(uniform(&[out_ch, in_ch, 3, 3], -1.0, 1.0, &mut rng), stride, 1).unwrap();
    block.main_bias = uniform(&[out_ch], -0.5, 0.5, &mut rng);
    if main_bn {
        block = block.with_bn();
        randomize_bn(block.main_bn.as_mut().unwrap(), &mut rng);
    }
    block.expand(kind).unwrap();
    let adapter = block.adapter.as_mut().unwrap();
    let shape = adapter.weight.shape().to_vec();
    adapter.weight = uniform(&shape, -1.0, 1.0, &mut rng);
    if let Some(b) = adapter.bias.as_mut() {
        *b = uniform(&[out_ch], -0.5, 0.5, &mut rng);
    }
    if let Some(bn) = adapter.bn.as_mut() {
        randomize_bn(bn, &mut rng);
    }
    block
}

pub fn eval_block<T: Real>(block: &ConvBlock<T>, x: &Tensor<T>) -> Tensor<T> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let f = block.forward(&mut tape, xv, false).unwrap();
    tape.value(f.out).clone()
}

pub fn max_abs_diff<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    a.max_abs_diff(b).unwrap().to_f64().unwrap()
}

/// Desk-scale synthetic problem: 10 classes, base 4, three phases of 2.
pub fn desk_data(seed: u64) -> (Dataset, Dataset, IncrementalSplit) {
    let cfg = SyntheticConfig {
        seed: 7 + seed,
        ..Default::default()
    };
    let (train, test) = make_synthetic(&cfg).unwrap();
    let split = IncrementalSplit::build(10, 4, 3, seed).unwrap();
    (train, test, split)
}

/// A small problem for protocol tests that must run in seconds.
pub fn small_data(seed: u64) -> (Dataset, Dataset, IncrementalSplit) {
    let cfg = SyntheticConfig {
        classes: 6,
        train_per_class: 24,
        test_per_class: 10,
        size: 8,
        seed,
        ..Default::default()
    };
    let (train, test) = make_synthetic(&cfg).unwrap();
    let split = IncrementalSplit::build(6, 2, 2, seed).unwrap();
    (train, test, split)
}

pub fn small_backbone() -> BackboneConfig {
    BackboneConfig {
        channels: vec![4, 8],
        strides: vec![1, 2],
        ..Default::default()
    }
}

pub fn small_train(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 8,
        ..Default::default()
    }
}
