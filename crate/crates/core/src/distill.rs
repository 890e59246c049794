//! Distillation of a frozen teacher into parameter-shared candidates.
//!
//! Every candidate is a mask over one shared [`ParameterStore`]. A joint
//! step runs the teacher once, runs each candidate's masked forward on the
//! same tape, sums
//! `CE(y, l_i) + α·KL(softmax(l_t/γ) ‖ softmax(l_i/γ)) + β·MSE(H_t, H_i)`
//! over candidates and back-propagates once. Pairwise distillation, the
//! plain-KD baseline and the manual sweep are single-candidate runs of the
//! same machinery.
//!
//! Weights of units outside every trained mask are frozen in the optimizer
//! (no gradient step, no weight decay), so they stay bit-identical to their
//! inherited values.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::{epoch_order, num_batches, Batch, PatchedSplit};
use crate::error::{Error, Result};
use crate::model::{self, frozen_entries, ModelConfig, ParameterStore, StructuralMask};
use crate::optim::{cosine_warmup_lr, AdamW, AdamWConfig};
use crate::pruning::CandidateFamily;
use crate::selection::ChainHooks;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Loss weights, temperature, schedule and term toggles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub use_ce: bool,
    pub use_logit: bool,
    pub use_feat: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            alpha: 0.2,
            beta: 100.0,
            gamma: 1.0,
            epochs: 30,
            warmup_epochs: 3,
            batch_size: 32,
            base_lr: 0.003,
            weight_decay: 0.01,
            seed: 0,
            use_ce: true,
            use_logit: true,
            use_feat: true,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::Contract(format!(
                "loss weights must be non-negative (alpha {}, beta {})",
                self.alpha, self.beta
            )));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::Domain(format!("temperature must be positive, got {}", self.gamma)));
        }
        if self.epochs > 0 && self.warmup_epochs >= self.epochs {
            return Err(Error::Contract(format!(
                "warmup_epochs {} must be below epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        if self.batch_size == 0 || !(self.base_lr >= 0.0) {
            return Err(Error::Contract("batch_size and base_lr must be positive".into()));
        }
        if !(self.use_ce || self.use_logit || self.use_feat) {
            return Err(Error::Contract("at least one loss term must be enabled".into()));
        }
        Ok(())
    }

    /// Plain cross-entropy training, used to pre-train a teacher.
    pub fn ce_only(self) -> Self {
        DistillConfig {
            use_ce: true,
            use_logit: false,
            use_feat: false,
            ..self
        }
    }

    pub fn needs_teacher(&self) -> bool {
        self.use_logit || self.use_feat
    }

    pub fn active_terms(&self) -> LossTerms {
        LossTerms {
            ce: self.use_ce,
            logit: self.use_logit,
            feat: self.use_feat,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossTerms {
    pub ce: bool,
    pub logit: bool,
    pub feat: bool,
}

/// Exact counts of model executions.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassLedger {
    /// Forwards of the frozen teacher-role model during training.
    pub teacher_forward: u64,
    pub candidate_forward: u64,
    pub candidate_backward: u64,
    /// Forwards spent on accuracy evaluation; not part of the training cost.
    pub eval_forward: u64,
}

impl PassLedger {
    pub fn training_passes(&self) -> u64 {
        self.teacher_forward + self.candidate_forward + self.candidate_backward
    }

    pub fn candidate_passes(&self) -> u64 {
        self.candidate_forward + self.candidate_backward
    }

    pub fn absorb(&mut self, other: &PassLedger) {
        self.teacher_forward += other.teacher_forward;
        self.candidate_forward += other.candidate_forward;
        self.candidate_backward += other.candidate_backward;
        self.eval_forward += other.eval_forward;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub candidate: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// Validation accuracy of every candidate after the last epoch.
    pub final_accuracy: Vec<f64>,
    pub ledger: PassLedger,
    pub terms: LossTerms,
}

/// Loss components of one candidate on one batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CandidateLoss {
    pub ce: f64,
    pub logit: f64,
    pub feat: f64,
    pub total: f64,
}

/// Result of one joint step, before the optimizer update.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub loss: f64,
    pub per_candidate: Vec<CandidateLoss>,
    /// Gradient of `loss` for every tensor of the shared store, in order.
    pub grads: Vec<Tensor>,
}

/// A frozen model used as the distillation target: a store plus an
/// optional mask (`None` runs the full, ungated network).
#[derive(Debug, Clone, Copy)]
pub struct TeacherRef<'a> {
    pub store: &'a ParameterStore,
    pub mask: Option<&'a StructuralMask>,
}

impl<'a> TeacherRef<'a> {
    pub fn full(store: &'a ParameterStore) -> Self {
        TeacherRef { store, mask: None }
    }

    pub fn masked(store: &'a ParameterStore, mask: &'a StructuralMask) -> Self {
        TeacherRef {
            store,
            mask: Some(mask),
        }
    }
}

/// Training and validation splits, already patchified.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub train: &'a PatchedSplit,
    pub val: &'a PatchedSplit,
}

/// Teacher logits and hidden states for a batch, without gradient tracking.
pub fn teacher_outputs(config: &ModelConfig, teacher: TeacherRef<'_>, batch: &Batch) -> Result<(Tensor, Tensor)> {
    model::forward_rows(config, teacher.store, teacher.mask, batch.patches.clone(), batch.size())
}

/// One parameter-shared step: loss summed over `masks`, gradients for the
/// whole store from a single backward pass.
pub fn joint_step(
    config: &ModelConfig,
    teacher: TeacherRef<'_>,
    store: &ParameterStore,
    masks: &[&StructuralMask],
    batch: &Batch,
    cfg: &DistillConfig,
) -> Result<StepOutput> {
    let outputs = if cfg.needs_teacher() {
        Some(teacher_outputs(config, teacher, batch)?)
    } else {
        None
    };
    joint_step_with_teacher(config, outputs.as_ref(), store, masks, batch, cfg)
}

/// [`joint_step`] with precomputed teacher logits and hidden states, which
/// may be omitted when neither distillation term is enabled.
pub fn joint_step_with_teacher(
    config: &ModelConfig,
    teacher: Option<&(Tensor, Tensor)>,
    store: &ParameterStore,
    masks: &[&StructuralMask],
    batch: &Batch,
    cfg: &DistillConfig,
) -> Result<StepOutput> {
    if masks.is_empty() {
        return Err(Error::Contract("joint step needs at least one candidate".into()));
    }
    if batch.size() == 0 {
        return Err(Error::Data("empty batch".into()));
    }
    let heads = vec![config.num_heads; config.num_layers];
    let mut tape = Tape::new();
    let bound = model::bind(&mut tape, store, &heads, true);
    let x = tape.constant(batch.patches.clone());
    let targets = match teacher {
        Some((l, h)) => Some((tape.constant(l.clone()), tape.constant(h.clone()))),
        None if cfg.needs_teacher() => {
            return Err(Error::Contract("distillation terms need teacher outputs".into()));
        }
        None => None,
    };
    let mut total = None;
    let mut per_candidate = Vec::with_capacity(masks.len());
    for (i, mask) in masks.iter().enumerate() {
        mask.validate(config)?;
        let gates = model::mask_gates(&mut tape, mask);
        let out = model::forward_patches(&mut tape, config, &bound, Some(&gates), x, batch.size())?;
        let mut parts = CandidateLoss {
            ce: 0.0,
            logit: 0.0,
            feat: 0.0,
            total: 0.0,
        };
        let mut loss = None;
        if cfg.use_ce {
            let ce = tape.cross_entropy(out.logits, &batch.labels)?;
            parts.ce = tape.value(ce).item()?;
            loss = Some(ce);
        }
        if let (true, Some((tl, _))) = (cfg.use_logit, targets) {
            let kl = tape.kl_soft_logits(tl, out.logits, cfg.gamma)?;
            parts.logit = tape.value(kl).item()?;
            let kl = tape.scale(kl, cfg.alpha)?;
            loss = Some(match loss {
                Some(l) => tape.add(l, kl)?,
                None => kl,
            });
        }
        if let (true, Some((_, th))) = (cfg.use_feat, targets) {
            let mse = tape.mse_hidden(th, out.hidden)?;
            parts.feat = tape.value(mse).item()?;
            let mse = tape.scale(mse, cfg.beta)?;
            loss = Some(match loss {
                Some(l) => tape.add(l, mse)?,
                None => mse,
            });
        }
        let loss = loss.ok_or_else(|| Error::Contract("no loss term enabled".into()))?;
        parts.total = tape.value(loss).item()?;
        if !parts.total.is_finite() {
            return Err(Error::Training(format!("non-finite loss for candidate {i}")));
        }
        per_candidate.push(parts);
        total = Some(match total {
            Some(t) => tape.add(t, loss)?,
            None => loss,
        });
    }
    let total = total.expect("at least one candidate");
    let loss = tape.value(total).item()?;
    let mut grads = tape.backward(total)?;
    let grads = bound
        .vars
        .iter()
        .map(|&v| grads.take(v).expect("trainable leaf"))
        .collect();
    Ok(StepOutput {
        loss,
        per_candidate,
        grads,
    })
}

/// Top-1 accuracy of a masked store on a split.
pub fn evaluate(
    config: &ModelConfig,
    store: &ParameterStore,
    mask: Option<&StructuralMask>,
    split: &PatchedSplit,
    batch_size: usize,
    ledger: Option<&mut PassLedger>,
) -> Result<f64> {
    if split.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty split".into()));
    }
    let mut correct = 0usize;
    let mut batches = 0u64;
    for batch in split.sequential(batch_size) {
        let (logits, _) = model::forward_rows(config, store, mask, batch.patches, batch.labels.len())?;
        let pred = logits.argmax_rows()?;
        correct += pred.iter().zip(&batch.labels).filter(|(p, l)| p == l).count();
        batches += 1;
    }
    if let Some(l) = ledger {
        l.eval_forward += batches;
    }
    Ok(correct as f64 / split.len() as f64)
}

/// Union of a set of masks (the region any candidate can touch).
pub fn mask_union(config: &ModelConfig, masks: &[&StructuralMask]) -> StructuralMask {
    let mut out = StructuralMask::full(config);
    for (l, layer) in out.layers.iter_mut().enumerate() {
        for (h, b) in layer.heads.iter_mut().enumerate() {
            *b = masks.iter().any(|m| m.layers[l].heads[h]);
        }
        for (u, b) in layer.units.iter_mut().enumerate() {
            *b = masks.iter().any(|m| m.layers[l].units[u]);
        }
    }
    out
}

/// Trains `masks` over a copy of `init` against a frozen `teacher` for
/// `cfg.epochs` epochs and reports per-epoch losses and accuracies.
pub fn train_candidates(
    config: &ModelConfig,
    teacher: TeacherRef<'_>,
    init: &ParameterStore,
    masks: &[&StructuralMask],
    data: TrainData<'_>,
    cfg: &DistillConfig,
) -> Result<(ParameterStore, TrainReport)> {
    cfg.validate()?;
    config.validate()?;
    init.check_layout(config)?;
    if masks.is_empty() {
        return Err(Error::Contract("no candidates to train".into()));
    }
    for m in masks {
        m.validate(config)?;
    }
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::Data("training and validation splits must be non-empty".into()));
    }
    let mut store = init.clone();
    let frozen = frozen_entries(config, &mask_union(config, masks));
    let frozen_refs: Vec<Option<&[bool]>> = frozen.iter().map(|f| f.as_deref()).collect();
    let names = store.names().to_vec();
    let name_refs: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
    let mut opt = AdamW::new(
        AdamWConfig {
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
        store.tensors().iter().map(Tensor::len),
    );
    let mut ledger = PassLedger::default();
    let mut epochs = Vec::with_capacity(cfg.epochs * masks.len());
    let n = data.train.len();
    let nb = num_batches(n, cfg.batch_size);
    let m = masks.len() as u64;
    for epoch in 0..cfg.epochs {
        let order = epoch_order(n, cfg.seed, epoch);
        let mut loss_sums = vec![0.0; masks.len()];
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch = data.train.batch(idx);
            let outputs = if cfg.needs_teacher() {
                ledger.teacher_forward += 1;
                Some(teacher_outputs(config, teacher, &batch)?)
            } else {
                None
            };
            let step = joint_step_with_teacher(config, outputs.as_ref(), &store, masks, &batch, cfg)?;
            ledger.candidate_forward += m;
            ledger.candidate_backward += m;
            for (s, c) in loss_sums.iter_mut().zip(&step.per_candidate) {
                *s += c.total;
            }
            let lr = cosine_warmup_lr(
                epoch as f64 + b as f64 / nb as f64,
                cfg.epochs as f64,
                cfg.warmup_epochs as f64,
                cfg.base_lr,
            )?;
            let grads: Vec<&Tensor> = step.grads.iter().collect();
            let mut params: Vec<&mut Tensor> = store.tensors_mut().iter_mut().collect();
            opt.step(&name_refs, &mut params, &grads, &frozen_refs, lr)?;
        }
        for (i, mask) in masks.iter().enumerate() {
            let acc = evaluate(config, &store, Some(mask), data.val, cfg.batch_size.max(64), Some(&mut ledger))?;
            epochs.push(EpochRecord {
                epoch,
                candidate: i,
                train_loss: loss_sums[i] / nb as f64,
                val_accuracy: acc,
            });
        }
    }
    let final_accuracy = if cfg.epochs == 0 {
        masks
            .iter()
            .map(|mask| evaluate(config, &store, Some(mask), data.val, 64, Some(&mut ledger)))
            .collect::<Result<Vec<_>>>()?
    } else {
        epochs[epochs.len() - masks.len()..]
            .iter()
            .map(|r| r.val_accuracy)
            .collect()
    };
    Ok((
        store,
        TrainReport {
            epochs,
            final_accuracy,
            ledger,
            terms: cfg.active_terms(),
        },
    ))
}

/// Distills the frozen teacher into every candidate of `family` in one run,
/// starting from the teacher's own weights.
pub fn train_joint(
    config: &ModelConfig,
    teacher: &ParameterStore,
    family: &CandidateFamily,
    data: TrainData<'_>,
    cfg: &DistillConfig,
) -> Result<(ParameterStore, TrainReport)> {
    let masks = family.masks();
    train_candidates(config, TeacherRef::full(teacher), teacher, &masks, data, cfg)
}

/// Single-candidate distillation: the student is `student_mask` over a copy
/// of `init` (usually the teacher-like model's own store).
pub fn distill_pair(
    config: &ModelConfig,
    teacher: TeacherRef<'_>,
    init: &ParameterStore,
    student_mask: &StructuralMask,
    data: TrainData<'_>,
    cfg: &DistillConfig,
) -> Result<(ParameterStore, TrainReport)> {
    train_candidates(config, teacher, init, &[student_mask], data, cfg)
}

/// Plain cross-entropy training of the full network from `init`.
pub fn pretrain(
    config: &ModelConfig,
    init: &ParameterStore,
    data: TrainData<'_>,
    cfg: &DistillConfig,
) -> Result<(ParameterStore, TrainReport)> {
    let full = StructuralMask::full(config);
    train_candidates(config, TeacherRef::full(init), init, &[&full], data, &cfg.ce_only())
}

/// Single-step distillation straight from the teacher to the student.
pub fn kd_baseline(
    config: &ModelConfig,
    teacher: &ParameterStore,
    student_mask: &StructuralMask,
    data: TrainData<'_>,
    cfg: &DistillConfig,
) -> Result<(ParameterStore, TrainReport)> {
    distill_pair(config, TeacherRef::full(teacher), teacher, student_mask, data, cfg)
}

/// One assistant of the manual sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub candidate: usize,
    pub scale: f64,
    pub assistant_accuracy: f64,
    pub student_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub ledger: PassLedger,
}

/// Manual multi-step distillation over every candidate above the student
/// scale: each assistant is distilled from the teacher with its own copy of
/// the weights, then the student (the family's smallest member) is
/// distilled from it. Student accuracy is measured on `eval`.
pub fn sweep_manual(
    config: &ModelConfig,
    teacher: &ParameterStore,
    family: &CandidateFamily,
    data: TrainData<'_>,
    eval: &PatchedSplit,
    cfg: &DistillConfig,
    student_scale: f64,
) -> Result<SweepReport> {
    let student = &family.smallest().mask;
    let mut rows = Vec::new();
    let mut ledger = PassLedger::default();
    for (i, cand) in family.candidates.iter().enumerate() {
        if !(cand.target > student_scale) {
            continue;
        }
        let (ta_store, ta_report) = distill_pair(config, TeacherRef::full(teacher), teacher, &cand.mask, data, cfg)?;
        ledger.absorb(&ta_report.ledger);
        let (s_store, s_report) = distill_pair(
            config,
            TeacherRef::masked(&ta_store, &cand.mask),
            &ta_store,
            student,
            data,
            cfg,
        )?;
        ledger.absorb(&s_report.ledger);
        let student_accuracy = evaluate(config, &s_store, Some(student), eval, 64, Some(&mut ledger))?;
        rows.push(SweepRow {
            candidate: i,
            scale: cand.realized,
            assistant_accuracy: ta_report.final_accuracy[0],
            student_accuracy,
        });
    }
    if rows.is_empty() {
        return Err(Error::Selection(format!(
            "no candidate above the student scale {student_scale}"
        )));
    }
    Ok(SweepReport { rows, ledger })
}

/// [`ChainHooks`] that re-runs joint distillation on a shared store, with
/// the previous assistant as the frozen teacher.
pub struct JointChain<'a> {
    pub config: &'a ModelConfig,
    pub family: &'a CandidateFamily,
    pub data: TrainData<'a>,
    pub cfg: DistillConfig,
    /// Shared weights after the most recent joint stage.
    pub store: ParameterStore,
    pub reports: Vec<TrainReport>,
    pub ledger: PassLedger,
}

impl ChainHooks for JointChain<'_> {
    fn rerun_joint(&mut self, teacher: usize, candidates: &[usize]) -> Result<Vec<(usize, f64, f64)>> {
        let t_mask = self.family.candidates[teacher].mask.clone();
        let masks: Vec<&StructuralMask> = candidates.iter().map(|&i| &self.family.candidates[i].mask).collect();
        let snapshot = self.store.clone();
        let (store, report) = train_candidates(
            self.config,
            TeacherRef::masked(&snapshot, &t_mask),
            &snapshot,
            &masks,
            self.data,
            &self.cfg,
        )?;
        self.ledger.absorb(&report.ledger);
        let out = candidates
            .iter()
            .zip(&report.final_accuracy)
            .map(|(&i, &acc)| (i, self.family.candidates[i].realized, acc))
            .collect();
        self.store = store;
        self.reports.push(report);
        Ok(out)
    }
}

#[cfg(test)]
mod tests;
