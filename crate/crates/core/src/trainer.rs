//! The class-incremental phase protocol.
//!
//! Phase 0 trains the whole network with cross-entropy on the base classes,
//! folds batch norm into the kernels and stores one prototype per class.
//! Every later phase:
//!
//! 1. snapshots the current extractor as a frozen distillation teacher;
//! 2. expands every block with a zero adapter and freezes the main branch;
//! 3. grows the classifier by the new classes;
//! 4. trains adapters and classifier with
//!    `masked CE + λ·masked KD + γ·prototype CE`, routing each sample by its
//!    cosine similarity to the stored prototypes;
//! 5. fuses the adapters back into the main kernels;
//! 6. stores prototypes for the new classes using the fused network;
//! 7. evaluates on the test samples of every class seen so far.
//!
//! Each stage can be switched off through [`Methods`] for ablations.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::backbone::{Backbone, BackboneConfig, Classifier, Model};
use crate::data::{Dataset, IncrementalSplit, PhaseView};
use crate::error::{Error, Result};
use crate::losses::{kd_loss, masked_ce, proto_loss, total_loss, KdDistance, LossWeights};
use crate::metrics::MetricsLog;
use crate::optim::{Adam, AdamConfig};
use crate::protomem::{partition, PrototypeStore, SelectionMasks, DEFAULT_SIGMA};
use crate::reparam::AdapterKind;
use crate::tensor::{lit, Real, Tensor};

/// Samples per forward pass when evaluating or extracting prototypes.
const EVAL_CHUNK: usize = 256;

/// When prototype-similarity scores are computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreSchedule {
    /// From the student features of the current batch.
    #[default]
    PerStep,
    /// Once per epoch for every sample, with the eval-mode student.
    PerEpoch,
}

/// Method components, individually switchable for ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Methods {
    /// Expand with adapters, freeze the main branch, fuse after the phase.
    pub dsr: bool,
    /// Feature distillation against the previous phase's extractor.
    pub mbd: bool,
    /// Route samples to CE or KD by prototype similarity.
    pub psm: bool,
    /// Classifier calibration with over-sampled prototypes.
    pub proto: bool,
}

impl Default for Methods {
    fn default() -> Self {
        Methods {
            dsr: true,
            mbd: true,
            psm: true,
            proto: true,
        }
    }
}

impl Methods {
    /// Plain fine-tuning: cross-entropy on the current phase only.
    pub fn finetune() -> Self {
        Methods {
            dsr: false,
            mbd: false,
            psm: false,
            proto: false,
        }
    }

    /// The five component combinations of the ablation table, in order:
    /// none, DSR, MBD, DSR+MBD, DSR+MBD+PSM (prototype calibration on in all).
    pub fn ablation_rows() -> [(&'static str, Methods); 5] {
        let m = |dsr, mbd, psm| Methods {
            dsr,
            mbd,
            psm,
            proto: true,
        };
        [
            ("base", m(false, false, false)),
            ("dsr", m(true, false, false)),
            ("mbd", m(false, true, false)),
            ("dsr_mbd", m(true, true, false)),
            ("dsr_mbd_psm", m(true, true, true)),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.psm && !self.mbd {
            return Err(Error::Config(
                "prototype selection routes samples into distillation and requires mbd".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Over-sampled prototype batch; defaults to `batch_size`.
    pub proto_batch: Option<usize>,
    pub optimizer: AdamConfig,
    pub loss: LossWeights,
    pub sigma: f64,
    pub adapter: AdapterKind,
    pub kd_distance: KdDistance,
    pub score_schedule: ScoreSchedule,
    pub old_rows_trainable: bool,
    /// Keep adapter batch-norm running statistics fixed while training.
    pub adapter_bn_frozen: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 32,
            proto_batch: None,
            optimizer: AdamConfig::default(),
            loss: LossWeights::default(),
            sigma: DEFAULT_SIGMA,
            adapter: AdapterKind::Conv1x1,
            kd_distance: KdDistance::Squared,
            score_schedule: ScoreSchedule::PerStep,
            old_rows_trainable: true,
            adapter_bn_frozen: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Full-scale schedule: 100 epochs per phase, batch 128.
    pub fn full_scale() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 128,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.proto_batch == Some(0) {
            return Err(Error::Config("epochs and batch sizes must be positive".into()));
        }
        if !(-1.0..=1.0).contains(&self.sigma) {
            return Err(Error::Config(format!("sigma {} outside [-1, 1]", self.sigma)));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.weight_decay >= 0.0 && o.eps > 0.0)
            || !(0.0..1.0).contains(&o.beta1)
            || !(0.0..1.0).contains(&o.beta2)
        {
            return Err(Error::Config(format!("invalid optimizer settings {o:?}")));
        }
        self.loss.validate()
    }

    pub fn proto_batch(&self) -> usize {
        self.proto_batch.unwrap_or(self.batch_size)
    }
}

/// What happened in one optimizer step.
#[derive(Debug, Clone)]
pub struct StepRecord<T> {
    pub phase: usize,
    pub epoch: usize,
    pub step: usize,
    pub batch: Vec<usize>,
    pub loss: T,
    pub ce: T,
    pub kd: Option<T>,
    pub proto: Option<T>,
    pub masks: SelectionMasks<T>,
    /// Largest |student − teacher| feature difference on the batch.
    pub feature_gap: Option<T>,
}

/// Hooks into the training loop for instrumentation.
pub trait Observer<T: Real> {
    /// After the phase's model surgery (expansion, classifier growth), before
    /// the first step.
    fn phase_start(&mut self, _phase: usize, _model: &Model<T>, _teacher: Option<&Backbone<T>>) {}

    fn after_step(&mut self, _record: &StepRecord<T>, _model: &Model<T>) {}
}

/// Observer that ignores everything.
pub struct NoObserver;

impl<T: Real> Observer<T> for NoObserver {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub class: usize,
    pub correct: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseEval {
    pub overall: f64,
    pub per_task: Vec<f64>,
    pub per_class: Vec<ClassAccuracy>,
    /// Predicted class id for each evaluated test sample, in test-set order.
    #[serde(skip)]
    pub predictions: Vec<(usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct PhaseOutcome<T> {
    pub phase: usize,
    /// The network just before fusion (incremental phases with expansion).
    pub expanded: Option<Model<T>>,
    pub eval: PhaseEval,
    pub fingerprint: Vec<(String, Vec<usize>)>,
    pub param_count: usize,
    pub final_loss: T,
    /// Training samples read during the phase.
    pub touched: BTreeSet<usize>,
}

/// Training state carried across phases.
pub struct Trainer<'d, T> {
    pub config: TrainConfig,
    pub methods: Methods,
    pub split: IncrementalSplit,
    pub model: Model<T>,
    pub teacher: Option<Backbone<T>>,
    pub prototypes: PrototypeStore<T>,
    pub log: MetricsLog,
    train_set: &'d Dataset,
    test_set: &'d Dataset,
    /// Class id → classifier row.
    rank: BTreeMap<usize, usize>,
    next_phase: usize,
    shuffle_rng: ChaCha8Rng,
    proto_rng: ChaCha8Rng,
    head_rng: ChaCha8Rng,
}

/// Independent generator streams derived from one seed.
fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

impl<'d, T: Real> Trainer<'d, T> {
    pub fn new(
        config: TrainConfig,
        methods: Methods,
        backbone: BackboneConfig,
        split: IncrementalSplit,
        train_set: &'d Dataset,
        test_set: &'d Dataset,
    ) -> Result<Self> {
        config.validate()?;
        methods.validate()?;
        if backbone.in_channels != train_set.channels || test_set.channels != train_set.channels {
            return Err(Error::Config(format!(
                "backbone expects {} input channels, data has {}",
                backbone.in_channels, train_set.channels
            )));
        }
        if split.order.len() != train_set.num_classes {
            return Err(Error::Config(format!(
                "split covers {} classes, dataset has {}",
                split.order.len(),
                train_set.num_classes
            )));
        }
        let model = Model::new(backbone, &mut stream(config.seed, 1))?;
        let prototypes = PrototypeStore::new(model.backbone.feature_dim());
        let rank = split.order.iter().enumerate().map(|(r, &c)| (c, r)).collect();
        Ok(Trainer {
            shuffle_rng: stream(config.seed, 2),
            proto_rng: stream(config.seed, 3),
            head_rng: stream(config.seed, 4),
            config,
            methods,
            split,
            model,
            teacher: None,
            prototypes,
            log: MetricsLog::new(),
            train_set,
            test_set,
            rank,
            next_phase: 0,
        })
    }

    pub fn next_phase(&self) -> usize {
        self.next_phase
    }

    pub fn is_finished(&self) -> bool {
        self.next_phase >= self.split.num_phases()
    }

    /// Runs the next phase of the split.
    pub fn step_phase(&mut self, obs: &mut dyn Observer<T>) -> Result<PhaseOutcome<T>> {
        if self.is_finished() {
            return Err(Error::State("all phases already trained".into()));
        }
        let classes = self.split.phases[self.next_phase].clone();
        if self.next_phase == 0 {
            self.train_phase1(obs)
        } else {
            self.train_incremental_phase(&classes, obs)
        }
    }

    pub fn run(&mut self, obs: &mut dyn Observer<T>) -> Result<Vec<PhaseOutcome<T>>> {
        let mut out = Vec::new();
        while !self.is_finished() {
            out.push(self.step_phase(obs)?);
        }
        Ok(out)
    }

    fn ranks(&self, labels: &[usize]) -> Vec<usize> {
        labels.iter().map(|l| self.rank[l]).collect()
    }

    /// Supervised training of the whole network on the base classes.
    pub fn train_phase1(&mut self, obs: &mut dyn Observer<T>) -> Result<PhaseOutcome<T>> {
        if self.next_phase != 0 {
            return Err(Error::State("the base phase has already been trained".into()));
        }
        let classes = self.split.phases[0].clone();
        let mut view = PhaseView::new(self.train_set, &classes)?;
        self.model.classifier.extend(classes.len(), &mut self.head_rng)?;
        obs.phase_start(0, &self.model, None);

        let final_loss = self.train_epochs(0, &mut view, obs)?;
        self.model.backbone.fold_batch_norm()?;
        self.finish_phase(0, view, None, final_loss)
    }

    /// One incremental phase on `classes`, which must be exactly the next
    /// phase's label set of the split.
    pub fn train_incremental_phase(
        &mut self,
        classes: &[usize],
        obs: &mut dyn Observer<T>,
    ) -> Result<PhaseOutcome<T>> {
        let phase = self.next_phase;
        if phase == 0 {
            return Err(Error::State("incremental phases follow the base phase".into()));
        }
        if phase >= self.split.num_phases() {
            return Err(Error::State("all phases already trained".into()));
        }
        let expected: BTreeSet<usize> = self.split.phases[phase].iter().copied().collect();
        let requested: BTreeSet<usize> = classes.iter().copied().collect();
        if let Some(old) = requested.iter().find(|c| self.split.phase_of(**c).is_some_and(|p| p < phase)) {
            return Err(Error::ExemplarViolation(format!(
                "phase {phase} asked for samples of class {old}, learned in an earlier phase"
            )));
        }
        if requested != expected {
            return Err(Error::State(format!(
                "phase {phase} owns classes {expected:?}, got {requested:?}"
            )));
        }
        let mut view = PhaseView::new(self.train_set, classes)?;

        self.teacher = Some(self.model.backbone.frozen_copy());
        if self.methods.dsr {
            self.model.backbone.expand(self.config.adapter)?;
            self.model.backbone.set_adapter_bn_frozen(self.config.adapter_bn_frozen);
        }
        let old_rows = self.model.classifier.num_classes();
        self.model.classifier.extend(classes.len(), &mut self.head_rng)?;
        self.model.classifier.frozen_rows = if self.config.old_rows_trainable { 0 } else { old_rows };
        obs.phase_start(phase, &self.model, self.teacher.as_ref());

        let final_loss = self.train_epochs(phase, &mut view, obs)?;
        self.model.classifier.frozen_rows = 0;

        let expanded = if self.methods.dsr {
            let snapshot = self.model.clone();
            self.model.backbone.fuse()?;
            Some(snapshot)
        } else {
            None
        };
        self.finish_phase(phase, view, expanded, final_loss)
    }

    fn finish_phase(
        &mut self,
        phase: usize,
        view: PhaseView<'_>,
        expanded: Option<Model<T>>,
        final_loss: T,
    ) -> Result<PhaseOutcome<T>> {
        let classes: Vec<usize> = self.split.phases[phase].clone();
        let (features, labels) = self.extract_features(view.indices())?;
        let ranks: Vec<usize> = classes.iter().map(|c| self.rank[c]).collect();
        self.prototypes.compute(&features, &labels, &ranks, phase)?;

        let eval = self.evaluate(phase)?;
        self.log.record(eval.per_task.clone(), eval.overall)?;
        self.next_phase = phase + 1;
        Ok(PhaseOutcome {
            phase,
            expanded,
            eval,
            fingerprint: self.model.backbone.fingerprint(),
            param_count: self.model.backbone.param_count(),
            final_loss,
            touched: view.touched().clone(),
        })
    }

    /// Eval-mode features and classifier ranks for the given training samples.
    fn extract_features(&self, indices: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        let d = self.model.backbone.feature_dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for chunk in indices.chunks(EVAL_CHUNK) {
            let (x, l) = self.train_set.batch::<T>(chunk)?;
            data.extend_from_slice(self.model.backbone.features(&x)?.data());
            labels.extend(self.ranks(&l));
        }
        Ok((Tensor::new(&[indices.len(), d], data)?, labels))
    }

    fn train_epochs(
        &mut self,
        phase: usize,
        view: &mut PhaseView<'_>,
        obs: &mut dyn Observer<T>,
    ) -> Result<T> {
        let mut adam = Adam::new(self.config.optimizer);
        let mut order = view.indices().to_vec();
        let mut last = T::zero();
        let mut step = 0;
        for epoch in 0..self.config.epochs {
            order.shuffle(&mut self.shuffle_rng);
            let epoch_scores = self.epoch_scores(phase, view.indices())?;
            for batch in order.chunks(self.config.batch_size) {
                let record = self.train_step(phase, epoch, step, batch, view, epoch_scores.as_ref(), &mut adam)?;
                last = record.loss;
                obs.after_step(&record, &self.model);
                step += 1;
            }
        }
        Ok(last)
    }

    /// Per-sample scores for the per-epoch schedule.
    fn epoch_scores(&self, phase: usize, indices: &[usize]) -> Result<Option<BTreeMap<usize, T>>> {
        if phase == 0 || !self.methods.psm || self.config.score_schedule != ScoreSchedule::PerEpoch {
            return Ok(None);
        }
        let (features, _) = self.extract_features(indices)?;
        let scores = self.prototypes.cosine_scores(&features)?;
        Ok(Some(indices.iter().copied().zip(scores).collect()))
    }

    #[allow(clippy::too_many_arguments)]
    fn train_step(
        &mut self,
        phase: usize,
        epoch: usize,
        step: usize,
        batch: &[usize],
        view: &mut PhaseView<'_>,
        epoch_scores: Option<&BTreeMap<usize, T>>,
        adam: &mut Adam<T>,
    ) -> Result<StepRecord<T>> {
        let (x, raw_labels) = view.batch::<T>(batch)?;
        let labels = self.ranks(&raw_labels);
        let incremental = phase > 0;

        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let fwd = self.model.backbone.forward(&mut tape, xv, true)?;
        let cls = self.model.classifier.bind(&mut tape);
        let logits = Classifier::logits(&mut tape, cls, fwd.features)?;

        let use_psm = incremental && self.methods.psm;
        let masks = if use_psm {
            let scores = match epoch_scores {
                Some(map) => batch.iter().map(|i| map[i]).collect(),
                None => self.prototypes.cosine_scores(tape.value(fwd.features))?,
            };
            partition(&scores, lit(self.config.sigma))
        } else {
            SelectionMasks::all_ce(vec![T::zero(); batch.len()])
        };
        let ce = masked_ce(&mut tape, logits, &labels, &masks.ce)?;

        let mut feature_gap = None;
        let kd = match (&self.teacher, incremental && self.methods.mbd) {
            (Some(teacher), true) => {
                let target = teacher.features(&x)?;
                feature_gap = Some(tape.value(fwd.features).max_abs_diff(&target)?);
                let all = vec![true; batch.len()];
                let mask = if use_psm { &masks.kd } else { &all };
                Some(kd_loss(&mut tape, fwd.features, &target, mask, self.config.kd_distance)?)
            }
            _ => None,
        };
        let proto = if incremental && self.methods.proto && !self.prototypes.is_empty() {
            let (p, y) = self.prototypes.oversample(self.config.proto_batch(), &mut self.proto_rng)?;
            Some(proto_loss(&mut tape, cls, &p, &y)?)
        } else {
            None
        };
        let total = total_loss(&mut tape, ce, kd, proto, &self.config.loss)?;
        let loss = tape.scalar(total);
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss {loss:?} at phase {phase} step {step}"
            )));
        }
        let grads = tape.backward(total)?;

        self.model.backbone.accumulate_grads(&fwd, &grads);
        self.model.classifier.accumulate_grads(cls, &grads);
        self.model.backbone.update_running_stats(&fwd);
        adam.step(&mut self.model.trainable_params_mut());
        self.model.zero_grad();

        Ok(StepRecord {
            phase,
            epoch,
            step,
            batch: batch.to_vec(),
            loss,
            ce: tape.scalar(ce),
            kd: kd.map(|v| tape.scalar(v)),
            proto: proto.map(|v| tape.scalar(v)),
            masks,
            feature_gap,
        })
    }

    /// Top-1 accuracy on the test samples of every class seen up to `phase`.
    pub fn evaluate(&self, phase: usize) -> Result<PhaseEval> {
        evaluate(&self.model, self.test_set, &self.split, phase)
    }
}

/// Accuracy of `model` on the cumulative test set after `phase`: overall,
/// per task, and per class. Predictions range over all classes seen so far.
pub fn evaluate<T: Real>(
    model: &Model<T>,
    test_set: &Dataset,
    split: &IncrementalSplit,
    phase: usize,
) -> Result<PhaseEval> {
    let seen = split.seen_after(phase);
    if model.classifier.num_classes() < seen {
        return Err(Error::State(format!(
            "classifier has {} rows, {seen} classes seen",
            model.classifier.num_classes()
        )));
    }
    let indices: Vec<usize> = test_set
        .images
        .iter()
        .enumerate()
        .filter(|(_, img)| split.phase_of(img.label).is_some_and(|p| p <= phase))
        .map(|(i, _)| i)
        .collect();
    let mut per_class: BTreeMap<usize, (usize, usize)> = split.order[..seen].iter().map(|&c| (c, (0, 0))).collect();
    let mut predictions = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(EVAL_CHUNK) {
        let (x, labels) = test_set.batch::<T>(chunk)?;
        let logits = model.predict_logits(&x)?;
        for (i, &label) in labels.iter().enumerate() {
            let row = &logits.row(i)[..seen];
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (j, &v)| if v > row[b] { j } else { b });
            let predicted = split.order[best];
            let entry = per_class.get_mut(&label).expect("seen class");
            entry.1 += 1;
            if predicted == label {
                entry.0 += 1;
            }
            predictions.push((chunk[i], predicted));
        }
    }
    let mut per_task = Vec::with_capacity(phase + 1);
    for task in 0..=phase {
        let (c, t) = split.phases[task]
            .iter()
            .map(|c| per_class[c])
            .fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
        if t == 0 {
            return Err(Error::Data(format!("task {task} has no test samples")));
        }
        per_task.push(c as f64 / t as f64);
    }
    let (correct, total) = per_class.values().fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    Ok(PhaseEval {
        overall: correct as f64 / total as f64,
        per_task,
        per_class: per_class
            .into_iter()
            .map(|(class, (correct, total))| ClassAccuracy { class, correct, total })
            .collect(),
        predictions,
    })
}
