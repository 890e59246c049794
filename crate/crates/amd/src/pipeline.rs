//! Stage sequencing: teacher, pruning, joint distillation, selection and
//! the final distillation, plus the manual sweep and the direct-KD baseline.

use std::path::Path;

use amd_core::distill::{
    self, EpochRecord, JointChain, PassLedger, SweepReport, TeacherRef, TrainData, TrainReport,
};
use amd_core::model::scale_of;
use amd_core::pruning::{self, prune_to_grid, Candidate, CandidateFamily, ImportanceScores, ScaleGrid, SCALE_TOLERANCE};
use amd_core::selection::{chain_select, select_optimal, ChainLink, LambdaTerms, NpsdRecord, SelectionInput};
use amd_core::{ModelConfig, ParameterStore, StructuralMask, Tensor};
use amd_core::data::PatchedSplit;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint, write_atomic, Checkpoint};
use crate::config::{DataSource, FinalInit, RunConfig};
use crate::data::{gen_synth, load_cifar10_dir, split_off, Provenance};
use crate::error::{HarnessError, Result, StageExt};
use crate::metrics::{export_metrics, MetricRow};
use crate::stats::{descending_rank, spearman};

/// Offsets of the per-purpose random streams derived from the run seed.
const TEST_SEED_OFFSET: u64 = 0x7e57;
const INIT_SEED_OFFSET: u64 = 0x1417;

pub const EVAL_BATCH: usize = 128;

/// Patchified train, validation and test splits.
pub struct Prepared {
    pub train: PatchedSplit,
    pub val: PatchedSplit,
    pub test: PatchedSplit,
    pub provenance: Provenance,
}

impl Prepared {
    pub fn data(&self) -> TrainData<'_> {
        TrainData {
            train: &self.train,
            val: &self.val,
        }
    }
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let (pool, test, provenance) = match cfg.source()? {
        DataSource::Synth => {
            let pool = gen_synth(cfg.seed, cfg.data.train_samples, &cfg.data.synth)?;
            let test = gen_synth(cfg.seed.wrapping_add(TEST_SEED_OFFSET), cfg.data.test_samples, &cfg.data.synth)?;
            (pool.set, test.set, pool.provenance)
        }
        DataSource::Cifar10(path) => {
            let (train, test) = load_cifar10_dir(&path)?;
            match test {
                Some(t) => (train.set, t.set, train.provenance),
                None => {
                    let (rest, held) = split_off(&train.set, cfg.data.val_fraction, cfg.seed.wrapping_add(TEST_SEED_OFFSET))?;
                    (rest, held, train.provenance)
                }
            }
        }
    };
    let (train, val) = split_off(&pool, cfg.data.val_fraction, cfg.seed)?;
    let patch = |set| PatchedSplit::new(&cfg.model, set).stage("data");
    Ok(Prepared {
        train: patch(&train)?,
        val: patch(&val)?,
        test: patch(&test)?,
        provenance,
    })
}

/// Per-stage training record inside a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub ledger: PassLedger,
    pub epochs: Vec<EpochRecord>,
    /// Realized scale of each candidate trained in this stage, by position.
    pub scales: Vec<f64>,
}

impl StageRecord {
    pub fn new(name: &str, report: &TrainReport, scales: Vec<f64>) -> Self {
        StageRecord {
            name: name.into(),
            ledger: report.ledger,
            epochs: report.epochs.clone(),
            scales,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Teacher {
    pub store: ParameterStore,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
    pub record: Option<StageRecord>,
}

/// Loads the teacher checkpoint named in the configuration, or trains one.
pub fn stage_teacher(cfg: &RunConfig, data: &Prepared) -> Result<Teacher> {
    let m = &cfg.model;
    let (store, record) = match &cfg.teacher.checkpoint {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            if ck.config != *m {
                return Err(HarnessError::Config(format!(
                    "teacher checkpoint {} has a different model configuration",
                    path.display()
                )));
            }
            ck.store.check_layout(m).stage("teacher")?;
            (ck.store, None)
        }
        None if cfg.teacher.pretrain => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(INIT_SEED_OFFSET));
            let init = ParameterStore::init(m, &mut rng).stage("teacher")?;
            let (store, report) = distill::pretrain(m, &init, data.data(), &cfg.teacher_distill()).stage("teacher")?;
            (store, Some(StageRecord::new("teacher", &report, vec![1.0])))
        }
        None => {
            return Err(HarnessError::Config(
                "no teacher checkpoint and teacher pre-training disabled".into(),
            ))
        }
    };
    let val_accuracy = distill::evaluate(m, &store, None, &data.val, EVAL_BATCH, None).stage("teacher")?;
    let test_accuracy = distill::evaluate(m, &store, None, &data.test, EVAL_BATCH, None).stage("teacher")?;
    Ok(Teacher {
        store,
        val_accuracy,
        test_accuracy,
        record,
    })
}

pub fn stage_importance(cfg: &RunConfig, teacher: &ParameterStore, data: &Prepared) -> Result<ImportanceScores> {
    let bs = cfg.distill.batch_size;
    pruning::compute_importance(&cfg.model, teacher, data.train.sequential(bs), cfg.teacher.importance_batches)
        .stage("importance")
}

pub fn stage_grid(cfg: &RunConfig, scores: &ImportanceScores) -> Result<CandidateFamily> {
    let grid = ScaleGrid::build(1.0, cfg.grid.student_scale, cfg.grid.m).stage("grid")?;
    let family = prune_to_grid(scores, &grid, &cfg.model).stage("grid")?;
    family.validate(&cfg.model, Some(SCALE_TOLERANCE)).stage("grid")?;
    Ok(family)
}

/// Teacher, importance scores and candidate family: the part shared by the
/// pipeline, the baseline and the sweep.
pub struct Foundation {
    pub data: Prepared,
    pub teacher: Teacher,
    pub scores: ImportanceScores,
    pub family: CandidateFamily,
}

pub fn build_foundation(cfg: &RunConfig, out: Option<&Path>) -> Result<Foundation> {
    cfg.validate()?;
    let data = prepare(cfg)?;
    let teacher = stage_teacher(cfg, &data)?;
    let scores = stage_importance(cfg, &teacher.store, &data)?;
    let family = stage_grid(cfg, &scores)?;
    if let Some(dir) = out {
        save_checkpoint(&dir.join(TEACHER_FILE), &teacher_checkpoint(cfg, &teacher))?;
        save_checkpoint(&dir.join(IMPORTANCE_FILE), &importance_checkpoint(&cfg.model, &scores))?;
        save_checkpoint(&dir.join(FAMILY_FILE), &family_checkpoint(&cfg.model, &family))?;
    }
    Ok(Foundation {
        data,
        teacher,
        scores,
        family,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRow {
    pub index: usize,
    pub target: f64,
    pub realized: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub seed: u64,
    pub provenance: Provenance,
    pub teacher_val_accuracy: f64,
    pub teacher_test_accuracy: f64,
    /// Joint-stage validation accuracy of every candidate, smallest first.
    pub candidates: Vec<CandidateRow>,
    /// First-step scores of the eligible candidates.
    pub npsd_table: Vec<NpsdRecord>,
    pub chain: Vec<ChainLink>,
    /// Family index of the assistant the student was distilled from.
    pub assistant: Option<usize>,
    pub student_scale: f64,
    pub student_val_accuracy: f64,
    pub student_test_accuracy: f64,
    pub stages: Vec<StageRecord>,
    /// Training cost of everything after the teacher: joint stages and the
    /// final distillation.
    pub ledger: PassLedger,
}

fn selection_input(cfg: &RunConfig, teacher_acc: f64, family: &CandidateFamily, acc: &[f64]) -> SelectionInput {
    let student = family.smallest();
    let mut input = SelectionInput::new(
        teacher_acc,
        1.0,
        family
            .candidates
            .iter()
            .enumerate()
            .map(|(i, c)| (i, c.realized, acc[i]))
            .collect(),
        student.realized,
    );
    input.lambda = cfg.selection.lambda.map(|lambda| LambdaTerms {
        lambda,
        student_performance: acc[0],
        student_scale: student.realized,
    });
    input
}

fn candidate_rows(family: &CandidateFamily, acc: &[f64]) -> Vec<CandidateRow> {
    family
        .candidates
        .iter()
        .zip(acc)
        .enumerate()
        .map(|(index, (c, &accuracy))| CandidateRow {
            index,
            target: c.target,
            realized: c.realized,
            accuracy,
        })
        .collect()
}

/// Artifacts of the staged pipeline besides the report.
pub struct PipelineOutput {
    pub report: PipelineReport,
    pub joint_store: Option<ParameterStore>,
    pub student_store: ParameterStore,
}

/// AMD on a prepared foundation: joint distillation, selection (or a chain
/// of selections) and the final assistant → student distillation. A chain
/// length of 0 distills the student straight from the teacher.
pub fn amd_from(cfg: &RunConfig, f: &Foundation) -> Result<PipelineOutput> {
    let m = &cfg.model;
    let d = cfg.distill();
    let student = &f.family.smallest().mask;
    let mut stages: Vec<StageRecord> = f.teacher.record.iter().cloned().collect();
    let mut ledger = PassLedger::default();
    if cfg.selection.chain_length == 0 {
        let (s_store, s_report) = distill::kd_baseline(m, &f.teacher.store, student, f.data.data(), &d).stage("final-distill")?;
        ledger.absorb(&s_report.ledger);
        stages.push(StageRecord::new("final", &s_report, vec![f.family.smallest().realized]));
        let test = distill::evaluate(m, &s_store, Some(student), &f.data.test, EVAL_BATCH, None).stage("final-distill")?;
        return Ok(PipelineOutput {
            report: PipelineReport {
                seed: cfg.seed,
                provenance: f.data.provenance.clone(),
                teacher_val_accuracy: f.teacher.val_accuracy,
                teacher_test_accuracy: f.teacher.test_accuracy,
                candidates: Vec::new(),
                npsd_table: Vec::new(),
                chain: Vec::new(),
                assistant: None,
                student_scale: f.family.smallest().realized,
                student_val_accuracy: s_report.final_accuracy[0],
                student_test_accuracy: test,
                stages,
                ledger,
            },
            joint_store: None,
            student_store: s_store,
        });
    }
    let (joint_store, joint_report) = distill::train_joint(m, &f.teacher.store, &f.family, f.data.data(), &d).stage("joint-distill")?;
    ledger.absorb(&joint_report.ledger);
    let scales: Vec<f64> = f.family.candidates.iter().map(|c| c.realized).collect();
    stages.push(StageRecord::new("joint", &joint_report, scales));
    let input = selection_input(cfg, f.teacher.val_accuracy, &f.family, &joint_report.final_accuracy);
    let npsd_table = input.records().stage("select")?;
    let mut hooks = JointChain {
        config: m,
        family: &f.family,
        data: f.data.data(),
        cfg: d,
        store: joint_store.clone(),
        reports: Vec::new(),
        ledger: PassLedger::default(),
    };
    let chain = chain_select(&input, cfg.selection.chain_length, &mut hooks).stage("select")?;
    for (k, r) in hooks.reports.iter().enumerate() {
        let band = f
            .family
            .candidates
            .iter()
            .filter(|c| c.realized < chain[k].record.scale && c.realized > input.min_scale)
            .map(|c| c.realized)
            .collect();
        stages.push(StageRecord::new(&format!("chain{}", k + 2), r, band));
    }
    ledger.absorb(&hooks.ledger);
    let last = chain.last().expect("chain length at least 1").record;
    let ta_mask = &f.family.candidates[last.index].mask;
    let ta_store = &hooks.store;
    let init = match cfg.selection.final_init {
        FinalInit::Assistant => ta_store,
        FinalInit::Joint => &joint_store,
    };
    let (s_store, s_report) =
        distill::distill_pair(m, TeacherRef::masked(ta_store, ta_mask), init, student, f.data.data(), &d).stage("final-distill")?;
    ledger.absorb(&s_report.ledger);
    stages.push(StageRecord::new("final", &s_report, vec![f.family.smallest().realized]));
    let test = distill::evaluate(m, &s_store, Some(student), &f.data.test, EVAL_BATCH, None).stage("final-distill")?;
    Ok(PipelineOutput {
        report: PipelineReport {
            seed: cfg.seed,
            provenance: f.data.provenance.clone(),
            teacher_val_accuracy: f.teacher.val_accuracy,
            teacher_test_accuracy: f.teacher.test_accuracy,
            candidates: candidate_rows(&f.family, &joint_report.final_accuracy),
            npsd_table,
            chain,
            assistant: Some(last.index),
            student_scale: f.family.smallest().realized,
            student_val_accuracy: s_report.final_accuracy[0],
            student_test_accuracy: test,
            stages,
            ledger,
        },
        joint_store: Some(joint_store),
        student_store: s_store,
    })
}

pub const TEACHER_FILE: &str = "teacher.amdc";
pub const IMPORTANCE_FILE: &str = "importance.amdc";
pub const FAMILY_FILE: &str = "family.amdc";
pub const JOINT_FILE: &str = "joint.amdc";
pub const STUDENT_FILE: &str = "student.amdc";
pub const REPORT_FILE: &str = "report.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SWEEP_FILE: &str = "sweep.json";
pub const SWEEP_METRICS_FILE: &str = "sweep_metrics.csv";
pub const JOINT_REPORT_FILE: &str = "joint_report.json";
pub const SELECTION_FILE: &str = "selection.json";

/// Runs every stage and writes checkpoints, the report and the metrics CSV
/// into `cfg.out_dir`.
pub fn run_pipeline(cfg: &RunConfig) -> Result<PipelineReport> {
    let out = cfg.out_dir.as_path();
    let f = build_foundation(cfg, Some(out))?;
    let o = amd_from(cfg, &f)?;
    if let Some(joint) = &o.joint_store {
        let mut ck = Checkpoint::new(cfg.model, joint.clone());
        ck.masks = family_masks(&f.family);
        save_checkpoint(&out.join(JOINT_FILE), &ck)?;
    }
    save_checkpoint(&out.join(STUDENT_FILE), &student_checkpoint(cfg, &o.student_store, &f.family))?;
    write_json(&out.join(REPORT_FILE), &o.report)?;
    export_metrics(&report_metrics(&o.report), &out.join(METRICS_FILE))?;
    Ok(o.report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub candidate: usize,
    pub scale: f64,
    pub assistant_accuracy: f64,
    pub npsd: f64,
    pub student_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub seed: u64,
    pub teacher_val_accuracy: f64,
    pub rows: Vec<SweepRow>,
    /// Rank correlation between NPSD and student accuracy; `None` when
    /// undefined (a constant column).
    pub spearman: Option<f64>,
    /// Family index of the highest-NPSD assistant.
    pub argmax_npsd: usize,
    /// Competition rank of that assistant's student accuracy (1 = best).
    pub argmax_student_rank: usize,
    pub ledger: PassLedger,
}

pub fn sweep_table(seed: u64, teacher_acc: f64, sweep: &SweepReport) -> Result<SweepTable> {
    let mut rows = Vec::with_capacity(sweep.rows.len());
    for r in &sweep.rows {
        rows.push(SweepRow {
            candidate: r.candidate,
            scale: r.scale,
            assistant_accuracy: r.assistant_accuracy,
            npsd: amd_core::selection::npsd(teacher_acc, 1.0, r.assistant_accuracy, r.scale).stage("sweep")?,
            student_accuracy: r.student_accuracy,
        });
    }
    let input = SelectionInput::new(
        teacher_acc,
        1.0,
        rows.iter().map(|r| (r.candidate, r.scale, r.assistant_accuracy)).collect(),
        0.0,
    );
    let best = select_optimal(&input).stage("sweep")?;
    let pos = rows.iter().position(|r| r.candidate == best.index).expect("selected row");
    let students: Vec<f64> = rows.iter().map(|r| r.student_accuracy).collect();
    let npsd: Vec<f64> = rows.iter().map(|r| r.npsd).collect();
    Ok(SweepTable {
        seed,
        teacher_val_accuracy: teacher_acc,
        spearman: spearman(&npsd, &students),
        argmax_npsd: best.index,
        argmax_student_rank: descending_rank(&students, pos),
        rows,
        ledger: sweep.ledger,
    })
}

pub fn sweep_from(cfg: &RunConfig, f: &Foundation) -> Result<SweepTable> {
    let sweep = distill::sweep_manual(
        &cfg.model,
        &f.teacher.store,
        &f.family,
        f.data.data(),
        &f.data.test,
        &cfg.distill(),
        f.family.smallest().target,
    )
    .stage("sweep")?;
    sweep_table(cfg.seed, f.teacher.val_accuracy, &sweep)
}

pub fn run_sweep(cfg: &RunConfig) -> Result<SweepTable> {
    let out = cfg.out_dir.as_path();
    let f = build_foundation(cfg, Some(out))?;
    let table = sweep_from(cfg, &f)?;
    write_json(&out.join(SWEEP_FILE), &table)?;
    export_metrics(&sweep_metrics(&table), &out.join(SWEEP_METRICS_FILE))?;
    Ok(table)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| HarnessError::Format(format!("{}: {e}", path.display())))
}

fn row(stage: &str, epoch: Option<usize>, candidate: Option<usize>, scale: Option<f64>, metric: &str, value: f64, seed: u64) -> MetricRow {
    MetricRow {
        stage: stage.into(),
        epoch,
        candidate,
        candidate_scale: scale,
        metric: metric.into(),
        value,
        seed,
    }
}

fn ledger_rows(out: &mut Vec<MetricRow>, stage: &str, l: &PassLedger, seed: u64) {
    for (name, v) in [
        ("teacher_forward", l.teacher_forward),
        ("candidate_forward", l.candidate_forward),
        ("candidate_backward", l.candidate_backward),
    ] {
        out.push(row(stage, None, None, None, name, v as f64, seed));
    }
}

/// Flattens a report into CSV rows: per-epoch loss and accuracy for each
/// training stage and candidate, stage ledgers, the NPSD table and a
/// summary.
pub fn report_metrics(r: &PipelineReport) -> Vec<MetricRow> {
    let seed = r.seed;
    let mut out = Vec::new();
    for s in &r.stages {
        for e in &s.epochs {
            let scale = s.scales.get(e.candidate).copied();
            out.push(row(&s.name, Some(e.epoch), Some(e.candidate), scale, "train_loss", e.train_loss, seed));
            out.push(row(&s.name, Some(e.epoch), Some(e.candidate), scale, "val_accuracy", e.val_accuracy, seed));
        }
        ledger_rows(&mut out, &s.name, &s.ledger, seed);
    }
    for c in &r.candidates {
        out.push(row("select", None, Some(c.index), Some(c.realized), "candidate_accuracy", c.accuracy, seed));
    }
    for n in &r.npsd_table {
        out.push(row("select", None, Some(n.index), Some(n.scale), "npsd", n.npsd, seed));
    }
    for (k, link) in r.chain.iter().enumerate() {
        out.push(row("select", None, Some(link.record.index), Some(link.record.scale), &format!("chain_step_{}", k + 1), link.record.npsd, seed));
    }
    let summary = [
        ("teacher_val_accuracy", r.teacher_val_accuracy),
        ("teacher_test_accuracy", r.teacher_test_accuracy),
        ("student_val_accuracy", r.student_val_accuracy),
        ("student_test_accuracy", r.student_test_accuracy),
        ("training_passes", r.ledger.training_passes() as f64),
    ];
    for (name, v) in summary {
        out.push(row("summary", None, None, Some(r.student_scale), name, v, seed));
    }
    out
}

pub fn sweep_metrics(t: &SweepTable) -> Vec<MetricRow> {
    let mut out = Vec::new();
    for (i, r) in t.rows.iter().enumerate() {
        for (name, v) in [
            ("assistant_accuracy", r.assistant_accuracy),
            ("npsd", r.npsd),
            ("student_accuracy", r.student_accuracy),
        ] {
            out.push(row("sweep", None, Some(i), Some(r.scale), name, v, t.seed));
        }
    }
    if let Some(rho) = t.spearman {
        out.push(row("summary", None, None, None, "spearman", rho, t.seed));
    }
    out.push(row("summary", None, None, None, "argmax_student_rank", t.argmax_student_rank as f64, t.seed));
    ledger_rows(&mut out, "summary", &t.ledger, t.seed);
    out
}

fn family_masks(family: &CandidateFamily) -> Vec<(String, StructuralMask)> {
    family
        .candidates
        .iter()
        .enumerate()
        .map(|(i, c)| (format!("candidate.{i}"), c.mask.clone()))
        .collect()
}

pub fn teacher_checkpoint(cfg: &RunConfig, t: &Teacher) -> Checkpoint {
    let mut ck = Checkpoint::new(cfg.model, t.store.clone());
    ck.meta.insert("stage".into(), "teacher".into());
    ck.meta.insert("seed".into(), cfg.seed.to_string());
    ck
}

pub fn importance_checkpoint(m: &ModelConfig, s: &ImportanceScores) -> Checkpoint {
    let flat = |rows: &[Vec<f64>], width: usize| {
        Tensor::new(&[rows.len(), width], rows.concat()).expect("rectangular scores")
    };
    let store = ParameterStore::from_parts(vec![
        ("importance.heads".into(), flat(&s.heads, m.num_heads)),
        ("importance.units".into(), flat(&s.units, m.mlp_hidden)),
    ])
    .expect("distinct names");
    let mut ck = Checkpoint::new(*m, store);
    ck.meta.insert("stage".into(), "importance".into());
    ck
}

pub fn importance_from_checkpoint(ck: &Checkpoint) -> Result<ImportanceScores> {
    let m = &ck.config;
    let get = |name: &str, width: usize| -> Result<Vec<Vec<f64>>> {
        let t = ck
            .store
            .get(name)
            .ok_or_else(|| HarnessError::Format(format!("importance checkpoint lacks {name}")))?;
        if t.shape() != [m.num_layers, width] {
            return Err(HarnessError::Format(format!("{name} has shape {:?}", t.shape())));
        }
        Ok(t.data().chunks(width).map(<[f64]>::to_vec).collect())
    };
    let mut s = ImportanceScores::zeros(m);
    s.heads = get("importance.heads", m.num_heads)?;
    s.units = get("importance.units", m.mlp_hidden)?;
    s.validate(m).stage("importance")?;
    Ok(s)
}

pub fn family_checkpoint(m: &ModelConfig, family: &CandidateFamily) -> Checkpoint {
    let mut ck = Checkpoint::new(*m, ParameterStore::from_parts(Vec::new()).expect("empty store"));
    ck.masks = family_masks(family);
    let targets: Vec<f64> = family.candidates.iter().map(|c| c.target).collect();
    ck.meta.insert("stage".into(), "grid".into());
    ck.meta
        .insert("targets".into(), serde_json::to_string(&targets).expect("floats serialize"));
    ck.meta
        .insert("order".into(), serde_json::to_string(&family.order).expect("units serialize"));
    ck
}

pub fn family_from_checkpoint(ck: &Checkpoint) -> Result<CandidateFamily> {
    let targets: Vec<f64> = ck
        .meta
        .get("targets")
        .ok_or_else(|| HarnessError::Format("family checkpoint lacks targets".into()))
        .and_then(|t| serde_json::from_str(t).map_err(|e| HarnessError::Format(e.to_string())))?;
    let order = ck
        .meta
        .get("order")
        .map(|o| serde_json::from_str(o).map_err(|e| HarnessError::Format(e.to_string())))
        .transpose()?
        .unwrap_or_default();
    if targets.len() != ck.masks.len() {
        return Err(HarnessError::Format("family checkpoint: targets and masks disagree".into()));
    }
    let candidates = targets
        .iter()
        .zip(&ck.masks)
        .map(|(&target, (_, mask))| Candidate {
            target,
            realized: scale_of(&ck.config, mask),
            mask: mask.clone(),
        })
        .collect();
    let family = CandidateFamily { candidates, order };
    family.validate(&ck.config, None).stage("grid")?;
    Ok(family)
}

pub fn student_checkpoint(cfg: &RunConfig, store: &ParameterStore, family: &CandidateFamily) -> Checkpoint {
    let mut ck = Checkpoint::new(cfg.model, store.clone());
    ck.masks.push(("student".into(), family.smallest().mask.clone()));
    ck.meta.insert("stage".into(), "final".into());
    ck.meta.insert("seed".into(), cfg.seed.to_string());
    ck
}
