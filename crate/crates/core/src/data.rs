//! Datasets, the CIFAR-100 binary format, a seeded synthetic generator, and
//! class-incremental splits with phase-restricted access.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const CIFAR_RECORD_LEN: usize = 3074;
pub const CIFAR_SIDE: usize = 32;
pub const CIFAR100_CLASSES: usize = 100;
const CIFAR100_COARSE: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    /// `C·H·W` values in [0, 1], channel-major.
    pub pixels: Vec<f32>,
    pub label: usize,
    pub coarse_label: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub images: Vec<LabeledImage>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Stacks the selected images into `[N,C,H,W]`.
    pub fn batch<T: Real>(&self, indices: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let img = self
                .images
                .get(i)
                .ok_or_else(|| Error::Data(format!("sample index {i} out of range")))?;
            data.extend(img.pixels.iter().map(|&p| T::from_f32(p).expect("finite pixel")));
            labels.push(img.label);
        }
        let shape = [indices.len(), self.channels, self.height, self.width];
        Ok((Tensor::new(&shape, data)?, labels))
    }
}

/// Parses the CIFAR-100 binary layout: per record one coarse-label byte,
/// one fine-label byte, then 1024 red, 1024 green and 1024 blue bytes in
/// row-major order.
pub fn parse_cifar100(bytes: &[u8]) -> Result<Vec<LabeledImage>> {
    let whole = bytes.len() / CIFAR_RECORD_LEN * CIFAR_RECORD_LEN;
    if whole != bytes.len() {
        return Err(Error::Parse {
            offset: whole,
            msg: format!(
                "truncated record: {} trailing bytes, records are {CIFAR_RECORD_LEN} bytes",
                bytes.len() - whole
            ),
        });
    }
    bytes
        .chunks_exact(CIFAR_RECORD_LEN)
        .enumerate()
        .map(|(r, rec)| {
            let offset = r * CIFAR_RECORD_LEN;
            let (coarse, fine) = (rec[0] as usize, rec[1] as usize);
            if coarse >= CIFAR100_COARSE {
                return Err(Error::Parse {
                    offset,
                    msg: format!("coarse label {coarse} out of range"),
                });
            }
            if fine >= CIFAR100_CLASSES {
                return Err(Error::Parse {
                    offset: offset + 1,
                    msg: format!("fine label {fine} out of range"),
                });
            }
            Ok(LabeledImage {
                pixels: rec[2..].iter().map(|&p| p as f32 / 255.0).collect(),
                label: fine,
                coarse_label: Some(coarse),
            })
        })
        .collect()
}

/// Inverse of [`parse_cifar100`].
pub fn serialize_cifar100(images: &[LabeledImage]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(images.len() * CIFAR_RECORD_LEN);
    for (i, img) in images.iter().enumerate() {
        if img.pixels.len() != CIFAR_RECORD_LEN - 2 {
            return Err(Error::Data(format!(
                "image {i} has {} values, expected {}",
                img.pixels.len(),
                CIFAR_RECORD_LEN - 2
            )));
        }
        let coarse = img.coarse_label.unwrap_or(0);
        if coarse >= CIFAR100_COARSE || img.label >= CIFAR100_CLASSES {
            return Err(Error::Data(format!("image {i} has out-of-range labels")));
        }
        out.push(coarse as u8);
        out.push(img.label as u8);
        out.extend(img.pixels.iter().map(|&p| (p * 255.0).round().clamp(0.0, 255.0) as u8));
    }
    Ok(out)
}

pub fn load_cifar100(path: &std::path::Path) -> Result<Dataset> {
    let bytes = std::fs::read(path)?;
    Ok(Dataset {
        channels: 3,
        height: CIFAR_SIDE,
        width: CIFAR_SIDE,
        num_classes: CIFAR100_CLASSES,
        images: parse_cifar100(&bytes)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub channels: usize,
    pub size: usize,
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise: f64,
    /// Maximum per-sample translation of the template, in pixels.
    pub jitter: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            classes: 10,
            train_per_class: 200,
            test_per_class: 50,
            channels: 3,
            size: 16,
            noise: 0.15,
            jitter: 2,
            seed: 7,
        }
    }
}

/// Smooth per-class pattern: a Gaussian blob plus an oriented grating in
/// every channel.
#[derive(Debug, Clone)]
struct Template {
    pixels: Vec<f64>,
}

fn make_template(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Template {
    let s = cfg.size as f64;
    let mut pixels = Vec::with_capacity(cfg.channels * cfg.size * cfg.size);
    for _ in 0..cfg.channels {
        let (cx, cy) = (rng.random_range(0.2..0.8) * s, rng.random_range(0.2..0.8) * s);
        let width = rng.random_range(0.12..0.3) * s;
        let blob_amp = rng.random_range(-0.35..0.35);
        let freq = rng.random_range(0.5..2.5) / s;
        let theta = rng.random_range(0.0..PI);
        let phase = rng.random_range(0.0..2.0 * PI);
        let grating_amp = rng.random_range(0.05..0.25);
        for y in 0..cfg.size {
            for x in 0..cfg.size {
                let (fx, fy) = (x as f64, y as f64);
                let d2 = (fx - cx).powi(2) + (fy - cy).powi(2);
                let blob = blob_amp * (-d2 / (2.0 * width * width)).exp();
                let proj = fx * theta.cos() + fy * theta.sin();
                let grating = grating_amp * (2.0 * PI * freq * proj + phase).sin();
                pixels.push(0.5 + blob + grating);
            }
        }
    }
    Template { pixels }
}

fn render_sample(
    cfg: &SyntheticConfig,
    template: &Template,
    label: usize,
    rng: &mut ChaCha8Rng,
    noise: &Normal<f64>,
) -> LabeledImage {
    let n = cfg.size as isize;
    let j = cfg.jitter as i64;
    let (dx, dy) = if j > 0 {
        (rng.random_range(-j..=j) as isize, rng.random_range(-j..=j) as isize)
    } else {
        (0, 0)
    };
    let contrast = rng.random_range(0.8..1.2);
    let mut pixels = Vec::with_capacity(template.pixels.len());
    for c in 0..cfg.channels {
        let plane = &template.pixels[c * cfg.size * cfg.size..(c + 1) * cfg.size * cfg.size];
        for y in 0..n {
            for x in 0..n {
                let sy = (y - dy).rem_euclid(n) as usize;
                let sx = (x - dx).rem_euclid(n) as usize;
                let base = plane[sy * cfg.size + sx];
                let v = 0.5 + contrast * (base - 0.5) + noise.sample(rng);
                pixels.push(v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    LabeledImage {
        pixels,
        label,
        coarse_label: None,
    }
}

/// Seeded train/test pair of synthetic image datasets.
pub fn make_synthetic(cfg: &SyntheticConfig) -> Result<(Dataset, Dataset)> {
    if cfg.classes == 0 || cfg.train_per_class == 0 || cfg.channels == 0 || cfg.size == 0 {
        return Err(Error::Config(format!("degenerate synthetic config {cfg:?}")));
    }
    let noise = Normal::new(0.0, cfg.noise.max(0.0))
        .map_err(|e| Error::Config(format!("synthetic noise: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let templates: Vec<Template> = (0..cfg.classes).map(|_| make_template(cfg, &mut rng)).collect();
    let mut split = |per_class: usize| Dataset {
        channels: cfg.channels,
        height: cfg.size,
        width: cfg.size,
        num_classes: cfg.classes,
        images: templates
            .iter()
            .enumerate()
            .flat_map(|(label, t)| (0..per_class).map(move |_| (label, t)))
            .map(|(label, t)| render_sample(cfg, t, label, &mut rng, &noise))
            .collect(),
    };
    let train = split(cfg.train_per_class);
    let test = split(cfg.test_per_class);
    Ok((train, test))
}

/// Assignment of classes to phases. Classes are referred to by their
/// position in `order` ("rank"); phase `p` owns a contiguous rank range.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IncrementalSplit {
    pub order: Vec<usize>,
    pub phases: Vec<Vec<usize>>,
    pub seed: u64,
}

impl IncrementalSplit {
    /// Shuffles `0..num_classes` with `seed`, gives `base` classes to the
    /// first phase and splits the rest evenly over `increments` phases.
    pub fn build(num_classes: usize, base: usize, increments: usize, seed: u64) -> Result<Self> {
        if base == 0 || base > num_classes {
            return Err(Error::Config(format!(
                "base class count {base} must be in 1..={num_classes}"
            )));
        }
        let rest = num_classes - base;
        if increments == 0 {
            if rest != 0 {
                return Err(Error::Config(format!("{rest} classes left without a phase")));
            }
        } else if !rest.is_multiple_of(increments) || rest == 0 {
            return Err(Error::Config(format!(
                "{rest} remaining classes cannot be split evenly over {increments} phases"
            )));
        }
        let mut order: Vec<usize> = (0..num_classes).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut phases = vec![order[..base].to_vec()];
        if let Some(step) = rest.checked_div(increments) {
            phases.extend(order[base..].chunks(step).map(<[usize]>::to_vec));
        }
        Ok(IncrementalSplit {
            order,
            phases,
            seed,
        })
    }

    pub fn num_phases(&self) -> usize {
        self.phases.len()
    }

    pub fn phase_sizes(&self) -> Vec<usize> {
        self.phases.iter().map(Vec::len).collect()
    }

    /// Position of `class` in the class order.
    pub fn rank(&self, class: usize) -> Option<usize> {
        self.order.iter().position(|&c| c == class)
    }

    /// Rank range owned by `phase`.
    pub fn rank_range(&self, phase: usize) -> std::ops::Range<usize> {
        let start: usize = self.phases[..phase].iter().map(Vec::len).sum();
        start..start + self.phases[phase].len()
    }

    /// Number of classes seen up to and including `phase`.
    pub fn seen_after(&self, phase: usize) -> usize {
        self.rank_range(phase).end
    }

    /// Phase that owns `class`.
    pub fn phase_of(&self, class: usize) -> Option<usize> {
        self.phases.iter().position(|p| p.contains(&class))
    }
}

/// Read access to the training samples of exactly one phase. Any attempt to
/// read a sample of another phase's classes is an error; every sample read
/// is recorded.
#[derive(Debug)]
pub struct PhaseView<'a> {
    dataset: &'a Dataset,
    allowed: BTreeSet<usize>,
    indices: Vec<usize>,
    touched: BTreeSet<usize>,
}

impl<'a> PhaseView<'a> {
    pub fn new(dataset: &'a Dataset, classes: &[usize]) -> Result<Self> {
        let allowed: BTreeSet<usize> = classes.iter().copied().collect();
        let indices: Vec<usize> = dataset
            .images
            .iter()
            .enumerate()
            .filter(|(_, img)| allowed.contains(&img.label))
            .map(|(i, _)| i)
            .collect();
        if indices.is_empty() {
            return Err(Error::Data(format!("no training samples for classes {classes:?}")));
        }
        Ok(PhaseView {
            dataset,
            allowed,
            indices,
            touched: BTreeSet::new(),
        })
    }

    /// Dataset indices of this phase's samples.
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn classes(&self) -> &BTreeSet<usize> {
        &self.allowed
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn touched(&self) -> &BTreeSet<usize> {
        &self.touched
    }

    pub fn batch<T: Real>(&mut self, indices: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        for &i in indices {
            let img = self
                .dataset
                .images
                .get(i)
                .ok_or_else(|| Error::Data(format!("sample index {i} out of range")))?;
            if !self.allowed.contains(&img.label) {
                return Err(Error::ExemplarViolation(format!(
                    "sample {i} of class {} requested in a phase owning {:?}",
                    img.label, self.allowed
                )));
            }
        }
        self.touched.extend(indices.iter().copied());
        self.dataset.batch(indices)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(coarse: u8, fine: u8, fill: impl Fn(usize) -> u8) -> Vec<u8> {
        let mut r = vec![coarse, fine];
        r.extend((0..3072).map(fill));
        r
    }

    #[test]
    fn parses_channel_planes() {
        let bytes = record(3, 42, |i| (i / 1024) as u8 * 100);
        let imgs = parse_cifar100(&bytes).unwrap();
        assert_eq!(imgs.len(), 1);
        assert_eq!(imgs[0].label, 42);
        assert_eq!(imgs[0].coarse_label, Some(3));
        assert_eq!(imgs[0].pixels[0], 0.0);
        assert_eq!(imgs[0].pixels[1024], 100.0 / 255.0);
        assert_eq!(imgs[0].pixels[2048], 200.0 / 255.0);
    }

    #[test]
    fn truncated_file_reports_offset() {
        match parse_cifar100(&vec![0u8; 3073]) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("{other:?}"),
        }
        match parse_cifar100(&vec![0u8; 2 * 3074 + 10]) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 2 * 3074),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn two_records_keep_order() {
        let mut bytes = record(0, 1, |_| 7);
        bytes.extend(record(1, 2, |_| 9));
        let imgs = parse_cifar100(&bytes).unwrap();
        assert_eq!(imgs.iter().map(|i| i.label).collect::<Vec<_>>(), vec![1, 2]);
    }

    #[test]
    fn every_byte_value_survives_normalization() {
        let bytes = record(19, 99, |i| (i % 256) as u8);
        let imgs = parse_cifar100(&bytes).unwrap();
        assert_eq!(serialize_cifar100(&imgs).unwrap(), bytes);
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let bytes = record(0, 100, |_| 0);
        assert!(matches!(parse_cifar100(&bytes), Err(Error::Parse { offset: 1, .. })));
    }

    #[test]
    fn split_sizes_and_disjointness() {
        let s = IncrementalSplit::build(10, 4, 3, 11).unwrap();
        assert_eq!(s.phase_sizes(), vec![4, 2, 2, 2]);
        let all: BTreeSet<usize> = s.phases.iter().flatten().copied().collect();
        assert_eq!(all.len(), 10);
        assert_eq!(s.rank_range(2), 6..8);
        assert_eq!(s.seen_after(3), 10);
        assert!(IncrementalSplit::build(10, 4, 4, 0).is_err());
        assert_eq!(
            IncrementalSplit::build(10, 4, 3, 5).unwrap(),
            IncrementalSplit::build(10, 4, 3, 5).unwrap()
        );
    }

    #[test]
    fn synthetic_contract() {
        let cfg = SyntheticConfig {
            classes: 4,
            train_per_class: 5,
            test_per_class: 3,
            size: 8,
            ..Default::default()
        };
        let (train, test) = make_synthetic(&cfg).unwrap();
        assert_eq!(train.len(), 20);
        assert_eq!(test.len(), 12);
        assert_eq!(train.image_len(), 3 * 64);
        assert!(train.images.iter().all(|i| i.label < 4));
        assert!(train.images.iter().flat_map(|i| &i.pixels).all(|p| (0.0..=1.0).contains(p)));
        let (again, _) = make_synthetic(&cfg).unwrap();
        assert_eq!(train, again);
        let (other, _) = make_synthetic(&SyntheticConfig { seed: 8, ..cfg }).unwrap();
        assert_ne!(train, other);
    }

    #[test]
    fn phase_view_blocks_foreign_classes() {
        let cfg = SyntheticConfig {
            classes: 3,
            train_per_class: 2,
            test_per_class: 1,
            size: 4,
            ..Default::default()
        };
        let (train, _) = make_synthetic(&cfg).unwrap();
        let mut view = PhaseView::new(&train, &[1]).unwrap();
        assert_eq!(view.indices(), &[2, 3]);
        let (x, y) = view.batch::<f32>(&[3, 2]).unwrap();
        assert_eq!(x.shape(), &[2, 3, 4, 4]);
        assert_eq!(y, vec![1, 1]);
        assert!(matches!(view.batch::<f32>(&[0]), Err(Error::ExemplarViolation(_))));
        assert_eq!(view.touched().iter().copied().collect::<Vec<_>>(), vec![2, 3]);
    }
}
