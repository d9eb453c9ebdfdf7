//! End-to-end runs: configuration, dataset selection, the phase loop and
//! the run directory (`metrics.json`, `metrics.csv`, checkpoints).

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backbone::{BackboneConfig, Model};
use crate::checkpoint::{peek_precision, Checkpoint};
use crate::data::{load_cifar100, make_synthetic, Dataset, IncrementalSplit, SyntheticConfig};
use crate::error::{Error, Result};
use crate::metrics::avg_forgetting;
use crate::trainer::{ClassAccuracy, Methods, NoObserver, Observer, PhaseOutcome, TrainConfig, Trainer};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    Synthetic(SyntheticConfig),
    /// CIFAR-100 binary files (`train.bin`, `test.bin`).
    Cifar100 { train: PathBuf, test: PathBuf },
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Synthetic(SyntheticConfig::default())
    }
}

impl DatasetConfig {
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        match self {
            DatasetConfig::Synthetic(cfg) => make_synthetic(cfg),
            DatasetConfig::Cifar100 { train, test } => Ok((load_cifar100(train)?, load_cifar100(test)?)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    /// Classes in the first phase.
    pub base: usize,
    /// Number of incremental phases after the first.
    pub increments: usize,
    /// Seed of the class-order shuffle.
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            base: 4,
            increments: 3,
            seed: 0,
        }
    }
}

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub precision: Precision,
    /// Run directory; nothing is written when absent.
    pub output_dir: Option<PathBuf>,
    pub save_checkpoints: bool,
    pub dataset: DatasetConfig,
    pub split: SplitConfig,
    pub model: BackboneConfig,
    pub train: TrainConfig,
    pub methods: Methods,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            precision: Precision::F32,
            output_dir: None,
            save_checkpoints: true,
            dataset: DatasetConfig::default(),
            split: SplitConfig::default(),
            model: BackboneConfig::default(),
            train: TrainConfig::default(),
            methods: Methods::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.methods.validate()
    }

    /// Applies `key=value` overrides, where `key` is a dotted path such as
    /// `train.sigma` and `value` is JSON (bare words are taken as strings).
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut doc = serde_json::to_value(self)?;
        for item in overrides {
            let item = item.as_ref();
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{item}` is not key=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut doc, key, value)?;
        }
        let cfg: RunConfig = serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// The `k`-th repeat: every seed shifted by `k`.
    pub fn reseeded(&self, k: u64) -> Self {
        let mut cfg = self.clone();
        cfg.train.seed += k;
        cfg.split.seed += k;
        if let DatasetConfig::Synthetic(s) = &mut cfg.dataset {
            s.seed += k;
        }
        cfg
    }
}

fn set_path(doc: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("`{}` is not a table", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            if !obj.contains_key(*part) {
                return Err(Error::Config(format!("unknown configuration key `{key}`")));
            }
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj
            .get_mut(*part)
            .ok_or_else(|| Error::Config(format!("unknown configuration key `{key}`")))?;
    }
    unreachable!("split yields at least one part")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub train: u64,
    pub split: u64,
    pub data: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseReport {
    pub phase: usize,
    pub classes: Vec<usize>,
    pub overall_acc: f64,
    pub task_acc: Vec<f64>,
    pub param_count: usize,
    pub final_loss: f64,
    pub per_class: Vec<ClassAccuracy>,
}

/// Contents of `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: RunConfig,
    pub seeds: Seeds,
    pub class_order: Vec<usize>,
    pub acc_matrix: Vec<Vec<f64>>,
    pub overall: Vec<f64>,
    pub avg_incremental_accuracy: f64,
    /// Absent for single-phase runs.
    pub avg_forgetting: Option<f64>,
    pub phases: Vec<PhaseReport>,
}

impl RunReport {
    /// One row per phase: phase, overall accuracy, per-task accuracies, and
    /// the running average incremental accuracy and forgetting.
    pub fn to_csv(&self) -> String {
        let n = self.acc_matrix.len();
        let mut out = String::from("phase,overall_acc");
        (0..n).for_each(|j| out.push_str(&format!(",task{j}_acc")));
        out.push_str(",avg_inc_acc,avg_forgetting\n");
        for (k, row) in self.acc_matrix.iter().enumerate() {
            out.push_str(&format!("{k},{}", self.overall[k]));
            for j in 0..n {
                out.push(',');
                if let Some(a) = row.get(j) {
                    out.push_str(&a.to_string());
                }
            }
            let aia = self.overall[..=k].iter().sum::<f64>() / (k + 1) as f64;
            out.push_str(&format!(",{aia},"));
            if let Ok(f) = avg_forgetting(&self.acc_matrix[..=k]) {
                out.push_str(&f.to_string());
            }
            out.push('\n');
        }
        out
    }
}

fn seeds(cfg: &RunConfig) -> Seeds {
    Seeds {
        train: cfg.train.seed,
        split: cfg.split.seed,
        data: match &cfg.dataset {
            DatasetConfig::Synthetic(s) => Some(s.seed),
            DatasetConfig::Cifar100 { .. } => None,
        },
    }
}

/// Runs the whole protocol and writes the run directory if one is set.
pub fn run(cfg: &RunConfig) -> Result<RunReport> {
    cfg.validate()?;
    let (train, test) = cfg.dataset.load()?;
    let split = IncrementalSplit::build(train.num_classes, cfg.split.base, cfg.split.increments, cfg.split.seed)?;
    match cfg.precision {
        Precision::F32 => run_typed::<f32>(cfg, split, &train, &test, &mut NoObserver),
        Precision::F64 => run_typed::<f64>(cfg, split, &train, &test, &mut NoObserver),
    }
}

/// [`run`] with preloaded data and an observer.
pub fn run_typed<T: Real>(
    cfg: &RunConfig,
    split: IncrementalSplit,
    train: &Dataset,
    test: &Dataset,
    obs: &mut dyn Observer<T>,
) -> Result<RunReport> {
    let mut trainer = Trainer::<T>::new(cfg.train.clone(), cfg.methods, cfg.model.clone(), split, train, test)?;
    let ckpt_dir = match &cfg.output_dir {
        Some(dir) if cfg.save_checkpoints => {
            let d = dir.join("checkpoints");
            std::fs::create_dir_all(&d)?;
            Some(d)
        }
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            None
        }
        None => None,
    };
    let mut phases = Vec::new();
    while !trainer.is_finished() {
        let outcome = trainer.step_phase(obs)?;
        if let Some(dir) = &ckpt_dir {
            save_phase_checkpoints(&trainer, &outcome, [train.height, train.width], dir)?;
        }
        phases.push(phase_report(&trainer, outcome));
    }
    let report = RunReport {
        config: cfg.clone(),
        seeds: seeds(cfg),
        class_order: trainer.split.order.clone(),
        acc_matrix: trainer.log.acc.clone(),
        overall: trainer.log.overall.clone(),
        avg_incremental_accuracy: trainer.log.avg_incremental_accuracy()?,
        avg_forgetting: trainer.log.avg_forgetting().ok(),
        phases,
    };
    if let Some(dir) = &cfg.output_dir {
        std::fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(&report)?)?;
        std::fs::write(dir.join("metrics.csv"), report.to_csv())?;
    }
    Ok(report)
}

fn phase_report<T: Real>(trainer: &Trainer<'_, T>, o: PhaseOutcome<T>) -> PhaseReport {
    PhaseReport {
        phase: o.phase,
        classes: trainer.split.phases[o.phase].clone(),
        overall_acc: o.eval.overall,
        task_acc: o.eval.per_task,
        param_count: o.param_count,
        final_loss: o.final_loss.to_f64().unwrap_or(f64::NAN),
        per_class: o.eval.per_class,
    }
}

fn save_phase_checkpoints<T: Real>(
    trainer: &Trainer<'_, T>,
    outcome: &PhaseOutcome<T>,
    input_size: [usize; 2],
    dir: &Path,
) -> Result<()> {
    let make = |model: &Model<T>| Checkpoint {
        phase: outcome.phase,
        class_order: trainer.split.order.clone(),
        input_size,
        model: model.clone(),
        prototypes: trainer.prototypes.clone(),
    };
    make(&trainer.model).save(&dir.join(format!("phase{}.json", outcome.phase)))?;
    if let Some(expanded) = &outcome.expanded {
        make(expanded).save(&dir.join(format!("phase{}_expanded.json", outcome.phase)))?;
    }
    Ok(())
}

/// One point per σ: average incremental accuracy averaged over `repeats`
/// reseeded runs. Output order follows `sigmas`.
pub fn sweep_sigma(cfg: &RunConfig, sigmas: &[f64], repeats: u64) -> Result<Vec<(f64, f64)>> {
    if repeats == 0 {
        return Err(Error::Config("at least one repeat is required".into()));
    }
    sigmas
        .iter()
        .map(|&sigma| {
            let mut total = 0.0;
            for k in 0..repeats {
                let mut c = cfg.reseeded(k);
                c.train.sigma = sigma;
                c.output_dir = None;
                total += run(&c)?.avg_incremental_accuracy;
            }
            Ok((sigma, total / repeats as f64))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FuseReport {
    pub precision: String,
    pub trials: usize,
    pub max_abs_diff: f64,
}

/// Compares the logits of an expanded checkpoint with its fused form on
/// `trials` uniform random inputs.
pub fn fuse_check(path: &Path, trials: usize, seed: u64) -> Result<FuseReport> {
    let text = std::fs::read_to_string(path)?;
    match peek_precision(&text)?.as_str() {
        "f32" => fuse_check_typed(&Checkpoint::<f32>::from_json(&text)?, trials, seed),
        "f64" => fuse_check_typed(&Checkpoint::<f64>::from_json(&text)?, trials, seed),
        other => Err(Error::Checkpoint(format!("unknown precision `{other}`"))),
    }
}

pub fn fuse_check_typed<T: Real>(ckpt: &Checkpoint<T>, trials: usize, seed: u64) -> Result<FuseReport> {
    let expanded = &ckpt.model;
    if !expanded.backbone.is_expanded() {
        return Err(Error::State("checkpoint has no adapters to fuse".into()));
    }
    let mut fused = expanded.clone();
    fused.backbone.fuse()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [h, w] = ckpt.input_size;
    let c = expanded.backbone.config.in_channels;
    let mut max_abs_diff = 0.0f64;
    for _ in 0..trials {
        let x = Tensor::from_fn(&[1, c, h, w], |_| T::from_f64_lossy(rng.random::<f64>()));
        let a = expanded.predict_logits(&x)?;
        let b = fused.predict_logits(&x)?;
        max_abs_diff = max_abs_diff.max(a.max_abs_diff(&b)?.to_f64().unwrap_or(f64::INFINITY));
    }
    Ok(FuseReport {
        precision: T::NAME.to_string(),
        trials,
        max_abs_diff,
    })
}
