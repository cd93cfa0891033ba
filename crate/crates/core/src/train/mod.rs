//! Training recipes: teacher, sequence-level distillation, hinted student.
//!
//! Every batch item gets its own graph, so sentences are never padded. Item
//! gradients are summed in batch order and divided by the batch size, which
//! keeps the reduction order fixed. Batches and dropout masks are drawn from
//! streams keyed by `(seed, epoch)` and `(seed, step, item)`, so a run resumed
//! from a checkpoint continues exactly where it left off.

mod checkpoint;
mod optim;

use std::fmt;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{Checkpoint, CheckpointError, DType, ModelKind, MAGIC, VERSION};
pub use optim::{clip_global_norm, learning_rate, Adam, AdamState};

use crate::data::EncodedCorpus;
use crate::error::{Error, Result};
use crate::losses::{align_loss, hid_loss, l2_hidden_loss, nll_loss, HintConfig, LossBreakdown};
use crate::nn::{special, Dropout, ModelConfig};
use crate::rng::{stream, Purpose};
use crate::student::{SoftCopyConfig, Student};
use crate::teacher::{DecoderTrace, Teacher};
use crate::tensor::{Grads, Graph, ParamStore, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at step {step}: {breakdown:?}")]
    NonFiniteLoss { step: u64, breakdown: LossBreakdown },
    #[error("training diverged at step {step}; last good checkpoint is at step {}", last_good.step)]
    Diverged { step: u64, last_good: Box<Checkpoint> },
}

/// Which loss terms the student optimizes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationMode {
    /// NLL only; the teacher is never consulted.
    Nll,
    NllAlign,
    #[default]
    NllAlignHid,
    /// NLL plus `λ · ‖h_student − h_teacher‖²`, a negative control.
    NllL2,
}

impl AblationMode {
    pub fn needs_teacher(self) -> bool {
        self != AblationMode::Nll
    }

    pub fn name(self) -> &'static str {
        match self {
            AblationMode::Nll => "nll",
            AblationMode::NllAlign => "nll-align",
            AblationMode::NllAlignHid => "nll-align-hid",
            AblationMode::NllL2 => "nll-l2",
        }
    }
}

impl std::str::FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nll" => Ok(Self::Nll),
            "nll-align" => Ok(Self::NllAlign),
            "nll-align-hid" => Ok(Self::NllAlignHid),
            "nll-l2" => Ok(Self::NllL2),
            other => Err(Error::config(format!(
                "unknown ablation {other:?}; expected nll, nll-align, nll-align-hid or nll-l2"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    /// Sentence pairs per step.
    pub batch_size: usize,
    pub warmup: u64,
    pub lr_scale: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub dropout: f64,
    pub seed: u64,
    /// Global gradient-norm cap; `None` disables clipping.
    pub max_grad_norm: Option<f64>,
    pub hints: HintConfig,
    pub soft_copy: SoftCopyConfig,
    pub ablation: AblationMode,
    /// Keep teacher hint traces in memory instead of recomputing them.
    pub cache_hints: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 16,
            warmup: 400,
            lr_scale: 1.0,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            dropout: 0.1,
            seed: 1,
            max_grad_norm: Some(1.0),
            hints: HintConfig::default(),
            soft_copy: SoftCopyConfig::default(),
            ablation: AblationMode::NllAlignHid,
            cache_hints: false,
        }
    }
}

impl TrainConfig {
    // Negated comparisons reject NaN as well.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("steps must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return Err(Error::config("invalid Adam hyperparameters"));
        }
        if !(self.lr_scale > 0.0) {
            return Err(Error::config("lr_scale must be positive"));
        }
        if matches!(self.max_grad_norm, Some(n) if !(n > 0.0)) {
            return Err(Error::config("max_grad_norm must be positive"));
        }
        self.hints.validate()?;
        self.soft_copy.validate()
    }
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub lr: f64,
    pub loss: LossBreakdown,
    pub grad_norm: f64,
}

impl fmt::Display for StepLog {
    /// `step  lr  nll  hid  align  total`, tab-separated.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{:.6e}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            self.step, self.lr, self.loss.nll, self.loss.hid, self.loss.align, self.loss.total
        )
    }
}

/// Deterministic length-grouped batch order.
///
/// Each epoch shuffles the corpus, sorts pools of 8 batches by target length,
/// cuts them into batches and shuffles the batch order.
#[derive(Clone, Debug)]
struct Batcher {
    seed: u64,
    batch_size: usize,
    lengths: Vec<usize>,
    epoch: Option<u64>,
    batches: Vec<Vec<usize>>,
}

impl Batcher {
    fn new(seed: u64, batch_size: usize, lengths: Vec<usize>) -> Self {
        Self {
            seed,
            batch_size,
            lengths,
            epoch: None,
            batches: Vec::new(),
        }
    }

    fn per_epoch(&self) -> u64 {
        self.lengths.len().div_ceil(self.batch_size) as u64
    }

    /// Item indices for the 0-based step `k`.
    fn batch(&mut self, k: u64) -> &[usize] {
        let epoch = k / self.per_epoch();
        if self.epoch != Some(epoch) {
            self.batches = self.schedule(epoch);
            self.epoch = Some(epoch);
        }
        &self.batches[(k % self.per_epoch()) as usize]
    }

    fn schedule(&self, epoch: u64) -> Vec<Vec<usize>> {
        let mut rng = stream(self.seed, Purpose::Batching, epoch);
        let mut order: Vec<usize> = (0..self.lengths.len()).collect();
        order.shuffle(&mut rng);
        let mut batches = Vec::new();
        for pool in order.chunks_mut(self.batch_size * 8) {
            pool.sort_by_key(|&i| self.lengths[i]);
            batches.extend(pool.chunks(self.batch_size).map(<[usize]>::to_vec));
        }
        batches.shuffle(&mut rng);
        batches
    }
}

/// Adam plus the schedule and clipping shared by both trainers.
#[derive(Clone, Debug)]
struct Optimizer {
    adam: Adam,
    d_model: usize,
}

impl Optimizer {
    fn new(params: &ParamStore, d_model: usize, cfg: &TrainConfig) -> Self {
        Self {
            adam: Adam::new(params, cfg.beta1, cfg.beta2, cfg.eps),
            d_model,
        }
    }

    /// Averages, clips and applies `grads`; returns `(lr, pre-clip norm)`.
    fn apply(&mut self, params: &mut ParamStore, mut grads: Grads, items: usize, cfg: &TrainConfig) -> (f64, f64) {
        grads.scale(1.0 / items as f64);
        let norm = match cfg.max_grad_norm {
            Some(max) => clip_global_norm(&mut grads, max),
            None => grads.global_norm(),
        };
        let lr = learning_rate(self.adam.state.step + 1, self.d_model, cfg.warmup, cfg.lr_scale);
        self.adam.update(params, &grads, lr);
        (lr, norm)
    }
}

fn dropout_for(cfg: &TrainConfig, step: u64, item: usize) -> Dropout {
    if cfg.dropout == 0.0 {
        return Dropout::off();
    }
    let index = step * cfg.batch_size as u64 + item as u64;
    Dropout::new(cfg.dropout, stream(cfg.seed, Purpose::Dropout, index))
}

fn is_non_finite(e: &Error) -> bool {
    matches!(
        e,
        Error::Tensor(TensorError::NonFinite(_)) | Error::Training(TrainError::NonFiniteLoss { .. })
    )
}

fn check_corpus(corpus: &EncodedCorpus) -> Result<()> {
    if corpus.is_empty() {
        return Err(Error::input("training corpus is empty"));
    }
    if let Some(i) = corpus.pairs.iter().position(|(s, t)| s.is_empty() || t.is_empty()) {
        return Err(Error::input(format!("training pair {i} has an empty side")));
    }
    Ok(())
}

fn mean_breakdown(parts: &[LossBreakdown]) -> LossBreakdown {
    let n = parts.len() as f64;
    let mut m = LossBreakdown::default();
    for p in parts {
        m.nll += p.nll;
        m.hid += p.hid;
        m.align += p.align;
        m.total += p.total;
    }
    LossBreakdown {
        nll: m.nll / n,
        hid: m.hid / n,
        align: m.align / n,
        total: m.total / n,
    }
}

/// Autoregressive teacher under label-smoothed teacher forcing.
#[derive(Clone, Debug)]
pub struct TeacherTrainer {
    model: Teacher,
    opt: Optimizer,
    cfg: TrainConfig,
    data: EncodedCorpus,
    batcher: Batcher,
    vocab: Vec<String>,
}

impl TeacherTrainer {
    pub fn new(model_cfg: ModelConfig, data: EncodedCorpus, cfg: TrainConfig) -> Result<Self> {
        let model = Teacher::new(model_cfg, cfg.seed)?;
        Self::with_model(model, None, data, cfg)
    }

    fn with_model(model: Teacher, adam: Option<AdamState>, data: EncodedCorpus, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        check_corpus(&data)?;
        let mut opt = Optimizer::new(model.params(), model.config().d_model, &cfg);
        if let Some(state) = adam {
            opt.adam.state = state;
        }
        let lengths = data.pairs.iter().map(|(_, t)| t.len()).collect();
        let batcher = Batcher::new(cfg.seed, cfg.batch_size, lengths);
        Ok(Self {
            model,
            opt,
            cfg,
            data,
            batcher,
            vocab: Vec::new(),
        })
    }

    /// Resumes from a checkpoint written by [`TeacherTrainer::checkpoint`].
    /// The checkpoint's seed replaces `cfg.seed`.
    pub fn from_checkpoint(ck: &Checkpoint, data: EncodedCorpus, mut cfg: TrainConfig) -> Result<Self> {
        let model = ck.teacher()?;
        let state = ck
            .optimizer
            .clone()
            .ok_or_else(|| Error::config("checkpoint carries no optimizer state"))?;
        cfg.seed = ck.seed;
        let mut t = Self::with_model(model, Some(state), data, cfg)?;
        t.vocab = ck.vocab.clone();
        Ok(t)
    }

    pub fn with_vocab(mut self, vocab: Vec<String>) -> Self {
        self.vocab = vocab;
        self
    }

    pub fn model(&self) -> &Teacher {
        &self.model
    }

    pub fn into_model(self) -> Teacher {
        self.model
    }

    pub fn step_count(&self) -> u64 {
        self.opt.adam.state.step
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            optimizer: Some(self.opt.adam.state.clone()),
            step: self.step_count(),
            seed: self.cfg.seed,
            ..Checkpoint::from_teacher(&self.model, &self.vocab)
        }
    }

    fn item_loss(&self, step: u64, item: usize, idx: usize, grads: &mut Grads) -> Result<LossBreakdown> {
        let (src, y) = &self.data.pairs[idx];
        let tgt: Vec<usize> = y.iter().copied().chain([special::EOS]).collect();
        let mut g = Graph::new();
        let mut dropout = dropout_for(&self.cfg, step, item);
        let vars = self.model.forward_graph(&mut g, src, &tgt, &mut dropout)?;
        let loss = nll_loss(&mut g, vars.logits, &tgt, self.cfg.hints.label_smoothing)?;
        let nll = g.value(loss).item();
        g.backward(loss)?;
        grads.absorb(&g);
        Ok(LossBreakdown {
            nll,
            hid: 0.0,
            align: 0.0,
            total: nll,
        })
    }

    pub fn step(&mut self) -> Result<StepLog> {
        let k = self.step_count();
        let batch = self.batcher.batch(k).to_vec();
        let mut grads = Grads::zeros_like(self.model.params());
        let mut parts = Vec::with_capacity(batch.len());
        for (item, &idx) in batch.iter().enumerate() {
            match self.item_loss(k, item, idx, &mut grads) {
                Ok(b) => parts.push(b),
                Err(e) if is_non_finite(&e) => return Err(self.diverged(k + 1)),
                Err(e) => return Err(e),
            }
        }
        let loss = mean_breakdown(&parts);
        if !loss.total.is_finite() {
            return Err(self.diverged(k + 1));
        }
        let (lr, grad_norm) = self.opt.apply(self.model.params_mut(), grads, batch.len(), &self.cfg);
        Ok(StepLog {
            step: k + 1,
            lr,
            loss,
            grad_norm,
        })
    }

    fn diverged(&self, step: u64) -> Error {
        TrainError::Diverged {
            step,
            last_good: Box::new(self.checkpoint()),
        }
        .into()
    }

    /// Runs until `cfg.steps` optimizer steps have been taken in total.
    pub fn run(&mut self, log: &mut dyn FnMut(&StepLog)) -> Result<()> {
        while self.step_count() < self.cfg.steps {
            let entry = self.step()?;
            log(&entry);
        }
        Ok(())
    }
}

/// Trains a teacher from scratch for `cfg.steps` steps.
pub fn train_teacher(
    model_cfg: ModelConfig,
    corpus: EncodedCorpus,
    cfg: TrainConfig,
    log: &mut dyn FnMut(&StepLog),
) -> Result<TeacherTrainer> {
    let mut trainer = TeacherTrainer::new(model_cfg, corpus, cfg)?;
    trainer.run(log)?;
    Ok(trainer)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DistilledPair {
    pub source: Vec<usize>,
    /// Teacher greedy decode without the end-of-sequence marker.
    pub target: Vec<usize>,
    /// Reference target, kept for evaluation only.
    pub original: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DistilledCorpus {
    pub pairs: Vec<DistilledPair>,
    /// Sources whose decode was empty.
    pub dropped: usize,
}

impl DistilledCorpus {
    /// Source and teacher-decoded target, as used for student training.
    pub fn training_pairs(&self) -> EncodedCorpus {
        EncodedCorpus {
            pairs: self.pairs.iter().map(|p| (p.source.clone(), p.target.clone())).collect(),
        }
    }
}

/// Replaces every target by the teacher's greedy decode.
pub fn distill_corpus(teacher: &Teacher, corpus: &EncodedCorpus) -> Result<DistilledCorpus> {
    let max_len = teacher.config().max_len;
    let mut out = DistilledCorpus::default();
    for (src, tgt) in &corpus.pairs {
        let decoded = teacher.greedy_decode(src, max_len)?;
        if decoded.tokens().is_empty() {
            out.dropped += 1;
            continue;
        }
        out.pairs.push(DistilledPair {
            source: src.clone(),
            target: decoded.tokens().to_vec(),
            original: tgt.clone(),
        });
    }
    Ok(out)
}

/// Non-autoregressive student trained against a frozen teacher.
#[derive(Clone, Debug)]
pub struct StudentTrainer {
    model: Student,
    teacher: Option<Teacher>,
    opt: Optimizer,
    cfg: TrainConfig,
    data: EncodedCorpus,
    batcher: Batcher,
    cache: Vec<Option<DecoderTrace>>,
    vocab: Vec<String>,
}

impl StudentTrainer {
    /// `teacher` may be `None` only in [`AblationMode::Nll`].
    pub fn new(model_cfg: ModelConfig, teacher: Option<Teacher>, data: EncodedCorpus, cfg: TrainConfig) -> Result<Self> {
        let model = Student::new(model_cfg, cfg.soft_copy, cfg.seed)?;
        Self::with_model(model, None, teacher, data, cfg)
    }

    fn with_model(
        model: Student,
        adam: Option<AdamState>,
        teacher: Option<Teacher>,
        data: EncodedCorpus,
        cfg: TrainConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        check_corpus(&data)?;
        match &teacher {
            Some(t) => t.config().check_hint_compatible(model.config())?,
            None if cfg.ablation.needs_teacher() => {
                return Err(Error::config(format!(
                    "ablation {} needs a teacher checkpoint",
                    cfg.ablation.name()
                )))
            }
            None => {}
        }
        let mut opt = Optimizer::new(model.params(), model.config().d_model, &cfg);
        if let Some(state) = adam {
            opt.adam.state = state;
        }
        let lengths = data.pairs.iter().map(|(_, t)| t.len()).collect();
        let batcher = Batcher::new(cfg.seed, cfg.batch_size, lengths);
        let cache = vec![None; data.len()];
        Ok(Self {
            model,
            teacher,
            opt,
            cfg,
            data,
            batcher,
            cache,
            vocab: Vec::new(),
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint, teacher: Option<Teacher>, data: EncodedCorpus, mut cfg: TrainConfig) -> Result<Self> {
        let model = ck.student()?;
        let state = ck
            .optimizer
            .clone()
            .ok_or_else(|| Error::config("checkpoint carries no optimizer state"))?;
        cfg.seed = ck.seed;
        cfg.soft_copy = model.soft_copy();
        let mut t = Self::with_model(model, Some(state), teacher, data, cfg)?;
        t.vocab = ck.vocab.clone();
        Ok(t)
    }

    pub fn with_vocab(mut self, vocab: Vec<String>) -> Self {
        self.vocab = vocab;
        self
    }

    pub fn model(&self) -> &Student {
        &self.model
    }

    pub fn into_model(self) -> Student {
        self.model
    }

    pub fn teacher(&self) -> Option<&Teacher> {
        self.teacher.as_ref()
    }

    pub fn step_count(&self) -> u64 {
        self.opt.adam.state.step
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            optimizer: Some(self.opt.adam.state.clone()),
            step: self.step_count(),
            seed: self.cfg.seed,
            ..Checkpoint::from_student(&self.model, &self.vocab)
        }
    }

    fn hints_for(&mut self, idx: usize) -> Result<DecoderTrace> {
        if let Some(t) = &self.cache[idx] {
            return Ok(t.clone());
        }
        let teacher = self.teacher.as_ref().expect("checked at construction");
        let (src, y) = &self.data.pairs[idx];
        let trace = teacher.hint_trace(src, y)?;
        if self.cfg.cache_hints {
            self.cache[idx] = Some(trace.clone());
        }
        Ok(trace)
    }

    fn item_loss(&mut self, step: u64, item: usize, idx: usize, grads: &mut Grads) -> Result<LossBreakdown> {
        let hints = if self.cfg.ablation.needs_teacher() {
            Some(self.hints_for(idx)?)
        } else {
            None
        };
        let (src, y) = &self.data.pairs[idx];
        let h = &self.cfg.hints;
        let mut g = Graph::new();
        let mut dropout = dropout_for(&self.cfg, step, item);
        let vars = self.model.forward_graph(&mut g, src, y.len(), &mut dropout)?;
        let nll = nll_loss(&mut g, vars.logits, y, h.label_smoothing)?;
        let (hid, align) = match (self.cfg.ablation, &hints) {
            (AblationMode::Nll, _) | (_, None) => (None, None),
            (AblationMode::NllAlign, Some(t)) => (None, Some(align_loss(&mut g, &vars.attn, &t.attn)?)),
            (AblationMode::NllAlignHid, Some(t)) => (
                Some(hid_loss(&mut g, &vars.hidden, &t.hidden, h)?),
                Some(align_loss(&mut g, &vars.attn, &t.attn)?),
            ),
            (AblationMode::NllL2, Some(t)) => (Some(l2_hidden_loss(&mut g, &vars.hidden, &t.hidden)?), None),
        };
        let mut total = nll;
        let mut b = LossBreakdown {
            nll: g.value(nll).item(),
            ..LossBreakdown::default()
        };
        if let Some(v) = hid {
            b.hid = g.value(v).item();
            let w = g.scale(v, h.lambda)?;
            total = g.add(total, w)?;
        }
        if let Some(v) = align {
            b.align = g.value(v).item();
            let w = g.scale(v, h.mu)?;
            total = g.add(total, w)?;
        }
        b.total = g.value(total).item();
        g.backward(total)?;
        grads.absorb(&g);
        Ok(b)
    }

    pub fn step(&mut self) -> Result<StepLog> {
        let k = self.step_count();
        let batch = self.batcher.batch(k).to_vec();
        let mut grads = Grads::zeros_like(self.model.params());
        let mut parts = Vec::with_capacity(batch.len());
        for (item, &idx) in batch.iter().enumerate() {
            match self.item_loss(k, item, idx, &mut grads) {
                Ok(b) => parts.push(b),
                Err(e) if is_non_finite(&e) => return Err(self.diverged(k + 1)),
                Err(e) => return Err(e),
            }
        }
        let loss = mean_breakdown(&parts);
        if ![loss.nll, loss.hid, loss.align, loss.total].iter().all(|v| v.is_finite()) {
            return Err(self.diverged(k + 1));
        }
        let (lr, grad_norm) = self.opt.apply(self.model.params_mut(), grads, batch.len(), &self.cfg);
        Ok(StepLog {
            step: k + 1,
            lr,
            loss,
            grad_norm,
        })
    }

    fn diverged(&self, step: u64) -> Error {
        TrainError::Diverged {
            step,
            last_good: Box::new(self.checkpoint()),
        }
        .into()
    }

    pub fn run(&mut self, log: &mut dyn FnMut(&StepLog)) -> Result<()> {
        while self.step_count() < self.cfg.steps {
            let entry = self.step()?;
            log(&entry);
        }
        Ok(())
    }
}

/// Trains a student on a distilled corpus for `cfg.steps` steps.
pub fn train_student(
    model_cfg: ModelConfig,
    teacher: Option<Teacher>,
    distilled: EncodedCorpus,
    cfg: TrainConfig,
    log: &mut dyn FnMut(&StepLog),
) -> Result<StudentTrainer> {
    let mut trainer = StudentTrainer::new(model_cfg, teacher, distilled, cfg)?;
    trainer.run(log)?;
    Ok(trainer)
}
