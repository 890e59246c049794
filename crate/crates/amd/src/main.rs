use std::path::{Path, PathBuf};
use std::process::ExitCode;

use amd::checkpoint::{load_checkpoint, save_checkpoint, write_atomic, Checkpoint};
use amd::config::{DataSource, RunConfig};
use amd::error::{exit, HarnessError, Result, StageExt};
use amd::metrics::{export_metrics, MetricRow};
use amd::pipeline::{self as p, Prepared, StageRecord};
use amd_core::distill::{self, JointChain, PassLedger, TeacherRef, TrainReport};
use amd_core::selection::{chain_select, ChainLink, NpsdRecord};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

/// Automatic multi-step distillation of a mini vision transformer.
#[derive(Parser, Debug)]
#[command(name = "amd", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// `synth` or `cifar10:<path>`.
    #[arg(long)]
    data: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the teacher with cross-entropy and save teacher.amdc.
    PretrainTeacher(Common),
    /// Score heads and MLP units on the teacher; saves importance.amdc.
    Importance(Common),
    /// Build the scale grid and the nested candidate family; saves family.amdc.
    Grid(Common),
    /// Jointly distill the teacher into every candidate; saves joint.amdc.
    JointDistill(Common),
    /// Score candidates by NPSD and pick the assistant (or a chain of them).
    Select(Common),
    /// Distill the student from the selected assistant; saves student.amdc.
    FinalDistill(Common),
    /// Run every stage.
    Pipeline(Common),
    /// Manual sweep over every assistant scale.
    Sweep(Common),
    /// Accuracy of a checkpoint on the validation and test splits.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Mask stored in the checkpoint; the full network when omitted.
        #[arg(long)]
        mask: Option<String>,
    },
    /// Convert a report.json or sweep.json into the metrics CSV.
    ExportMetrics {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        csv: PathBuf,
    },
}

fn run_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &c.out {
        cfg.out_dir = out.clone();
    }
    if let Some(data) = &c.data {
        DataSource::parse(data)?;
        cfg.data.source = data.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Kernels run on one thread; the cap is validated so a bad value fails fast.
fn thread_cap() -> Result<Option<usize>> {
    match std::env::var("AMD_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(HarnessError::Config(format!("AMD_THREADS must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(None),
    }
}

fn print_json<T: Serialize>(v: &T) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializes"));
}

fn load_teacher(cfg: &RunConfig, data: &Prepared) -> Result<p::Teacher> {
    let path = cfg
        .teacher
        .checkpoint
        .clone()
        .unwrap_or_else(|| cfg.out_dir.join(p::TEACHER_FILE));
    let mut c = cfg.clone();
    c.teacher.checkpoint = Some(path);
    p::stage_teacher(&c, data)
}

fn load_family(cfg: &RunConfig) -> Result<amd_core::CandidateFamily> {
    let ck = load_checkpoint(&cfg.out_dir.join(p::FAMILY_FILE))?;
    if ck.config != cfg.model {
        return Err(HarnessError::Config("family was built for a different model".into()));
    }
    p::family_from_checkpoint(&ck)
}

#[derive(Debug, Serialize, Deserialize)]
struct Selection {
    teacher_val_accuracy: f64,
    npsd_table: Vec<NpsdRecord>,
    chain: Vec<ChainLink>,
    assistant: Option<usize>,
    stages: Vec<StageRecord>,
    ledger: PassLedger,
}

const ASSISTANT_FILE: &str = "assistant.amdc";

fn cmd_select(cfg: &RunConfig) -> Result<Selection> {
    let data = p::prepare(cfg)?;
    let teacher = load_teacher(cfg, &data)?;
    let family = load_family(cfg)?;
    let joint: TrainReport = p::read_json(&cfg.out_dir.join(p::JOINT_REPORT_FILE))?;
    let joint_ck = load_checkpoint(&cfg.out_dir.join(p::JOINT_FILE))?;
    let student = family.smallest();
    let mut input = amd_core::SelectionInput::new(
        teacher.val_accuracy,
        1.0,
        family
            .candidates
            .iter()
            .enumerate()
            .map(|(i, c)| (i, c.realized, joint.final_accuracy[i]))
            .collect(),
        student.realized,
    );
    input.lambda = cfg.selection.lambda.map(|lambda| amd_core::selection::LambdaTerms {
        lambda,
        student_performance: joint.final_accuracy[0],
        student_scale: student.realized,
    });
    let npsd_table = input.records().stage("select")?;
    let mut hooks = JointChain {
        config: &cfg.model,
        family: &family,
        data: data.data(),
        cfg: cfg.distill(),
        store: joint_ck.store,
        reports: Vec::new(),
        ledger: PassLedger::default(),
    };
    let chain = chain_select(&input, cfg.selection.chain_length, &mut hooks).stage("select")?;
    let assistant = chain.last().map(|l| l.record.index);
    let mut ck = Checkpoint::new(cfg.model, hooks.store.clone());
    ck.masks = match assistant {
        Some(i) => vec![("assistant".into(), family.candidates[i].mask.clone())],
        None => Vec::new(),
    };
    save_checkpoint(&cfg.out_dir.join(ASSISTANT_FILE), &ck)?;
    let stages = hooks
        .reports
        .iter()
        .enumerate()
        .map(|(k, r)| StageRecord::new(&format!("chain{}", k + 2), r, Vec::new()))
        .collect();
    let sel = Selection {
        teacher_val_accuracy: teacher.val_accuracy,
        npsd_table,
        chain,
        assistant,
        stages,
        ledger: hooks.ledger,
    };
    p::write_json(&cfg.out_dir.join(p::SELECTION_FILE), &sel)?;
    Ok(sel)
}

#[derive(Debug, Serialize)]
struct FinalSummary {
    assistant: Option<usize>,
    student_scale: f64,
    student_val_accuracy: f64,
    student_test_accuracy: f64,
    ledger: PassLedger,
}

fn cmd_final(cfg: &RunConfig) -> Result<FinalSummary> {
    let data = p::prepare(cfg)?;
    let family = load_family(cfg)?;
    let student = &family.smallest().mask;
    let sel: Selection = p::read_json(&cfg.out_dir.join(p::SELECTION_FILE))?;
    let d = cfg.distill();
    let (store, report) = match sel.assistant {
        None => {
            let teacher = load_teacher(cfg, &data)?;
            distill::kd_baseline(&cfg.model, &teacher.store, student, data.data(), &d).stage("final-distill")?
        }
        Some(i) => {
            let ck = load_checkpoint(&cfg.out_dir.join(ASSISTANT_FILE))?;
            let ta_mask = &family.candidates[i].mask;
            let init = match cfg.selection.final_init {
                amd::config::FinalInit::Assistant => ck.store.clone(),
                amd::config::FinalInit::Joint => load_checkpoint(&cfg.out_dir.join(p::JOINT_FILE))?.store,
            };
            distill::distill_pair(&cfg.model, TeacherRef::masked(&ck.store, ta_mask), &init, student, data.data(), &d)
                .stage("final-distill")?
        }
    };
    let test = distill::evaluate(&cfg.model, &store, Some(student), &data.test, p::EVAL_BATCH, None).stage("final-distill")?;
    save_checkpoint(&cfg.out_dir.join(p::STUDENT_FILE), &p::student_checkpoint(cfg, &store, &family))?;
    Ok(FinalSummary {
        assistant: sel.assistant,
        student_scale: family.smallest().realized,
        student_val_accuracy: report.final_accuracy[0],
        student_test_accuracy: test,
        ledger: report.ledger,
    })
}

#[derive(Debug, Serialize)]
struct EvalSummary {
    mask: Option<String>,
    val_accuracy: f64,
    test_accuracy: f64,
}

fn cmd_eval(cfg: &RunConfig, path: &Path, mask: Option<&str>) -> Result<EvalSummary> {
    let data = p::prepare(cfg)?;
    let ck = load_checkpoint(path)?;
    if ck.config != cfg.model {
        return Err(HarnessError::Config("checkpoint was saved for a different model".into()));
    }
    ck.store.check_layout(&cfg.model).stage("eval")?;
    let m = match mask {
        Some(name) => Some(
            ck.mask(name)
                .ok_or_else(|| HarnessError::Config(format!("checkpoint has no mask named {name:?}")))?,
        ),
        None => None,
    };
    let eval = |split| distill::evaluate(&cfg.model, &ck.store, m, split, p::EVAL_BATCH, None).stage("eval");
    Ok(EvalSummary {
        mask: mask.map(str::to_string),
        val_accuracy: eval(&data.val)?,
        test_accuracy: eval(&data.test)?,
    })
}

fn cmd_export(report: &Path, csv: &Path) -> Result<usize> {
    let text = std::fs::read_to_string(report).map_err(|e| HarnessError::io(report, e))?;
    let rows: Vec<MetricRow> = if let Ok(r) = serde_json::from_str::<p::PipelineReport>(&text) {
        p::report_metrics(&r)
    } else if let Ok(t) = serde_json::from_str::<p::SweepTable>(&text) {
        p::sweep_metrics(&t)
    } else {
        return Err(HarnessError::Format(format!(
            "{} is neither a pipeline report nor a sweep table",
            report.display()
        )));
    };
    export_metrics(&rows, csv)?;
    Ok(rows.len())
}

fn dispatch(cmd: Command) -> Result<()> {
    thread_cap()?;
    match cmd {
        Command::PretrainTeacher(c) => {
            let mut cfg = run_config(&c)?;
            cfg.teacher.checkpoint = None;
            cfg.teacher.pretrain = true;
            let data = p::prepare(&cfg)?;
            let t = p::stage_teacher(&cfg, &data)?;
            save_checkpoint(&cfg.out_dir.join(p::TEACHER_FILE), &p::teacher_checkpoint(&cfg, &t))?;
            println!("teacher val_accuracy {} test_accuracy {}", t.val_accuracy, t.test_accuracy);
        }
        Command::Importance(c) => {
            let cfg = run_config(&c)?;
            let data = p::prepare(&cfg)?;
            let t = load_teacher(&cfg, &data)?;
            let s = p::stage_importance(&cfg, &t.store, &data)?;
            save_checkpoint(&cfg.out_dir.join(p::IMPORTANCE_FILE), &p::importance_checkpoint(&cfg.model, &s))?;
            print_json(&s);
        }
        Command::Grid(c) => {
            let cfg = run_config(&c)?;
            let ck = load_checkpoint(&cfg.out_dir.join(p::IMPORTANCE_FILE))?;
            let scores = p::importance_from_checkpoint(&ck)?;
            let family = p::stage_grid(&cfg, &scores)?;
            save_checkpoint(&cfg.out_dir.join(p::FAMILY_FILE), &p::family_checkpoint(&cfg.model, &family))?;
            for c in &family.candidates {
                println!("target {} realized {}", c.target, c.realized);
            }
        }
        Command::JointDistill(c) => {
            let cfg = run_config(&c)?;
            let data = p::prepare(&cfg)?;
            let t = load_teacher(&cfg, &data)?;
            let family = load_family(&cfg)?;
            let (store, report) =
                distill::train_joint(&cfg.model, &t.store, &family, data.data(), &cfg.distill()).stage("joint-distill")?;
            let mut ck = Checkpoint::new(cfg.model, store);
            ck.masks = family
                .candidates
                .iter()
                .enumerate()
                .map(|(i, c)| (format!("candidate.{i}"), c.mask.clone()))
                .collect();
            save_checkpoint(&cfg.out_dir.join(p::JOINT_FILE), &ck)?;
            p::write_json(&cfg.out_dir.join(p::JOINT_REPORT_FILE), &report)?;
            println!("candidate accuracies {:?}", report.final_accuracy);
        }
        Command::Select(c) => {
            let cfg = run_config(&c)?;
            let sel = cmd_select(&cfg)?;
            print_json(&sel);
        }
        Command::FinalDistill(c) => {
            let cfg = run_config(&c)?;
            print_json(&cmd_final(&cfg)?);
        }
        Command::Pipeline(c) => {
            let cfg = run_config(&c)?;
            write_atomic(&cfg.out_dir.join("config.toml"), cfg.to_toml().as_bytes())?;
            let r = p::run_pipeline(&cfg)?;
            println!(
                "teacher {:.4} student {:.4} (test) via assistant {:?}; training passes {}",
                r.teacher_test_accuracy,
                r.student_test_accuracy,
                r.assistant,
                r.ledger.training_passes()
            );
        }
        Command::Sweep(c) => {
            let cfg = run_config(&c)?;
            write_atomic(&cfg.out_dir.join("config.toml"), cfg.to_toml().as_bytes())?;
            let t = p::run_sweep(&cfg)?;
            for r in &t.rows {
                println!(
                    "scale {:.4} assistant {:.4} npsd {:.4} student {:.4}",
                    r.scale, r.assistant_accuracy, r.npsd, r.student_accuracy
                );
            }
            match t.spearman {
                Some(rho) => println!("spearman {rho:.4}"),
                None => println!("spearman undefined"),
            }
        }
        Command::Eval {
            common,
            checkpoint,
            mask,
        } => {
            let cfg = run_config(&common)?;
            print_json(&cmd_eval(&cfg, &checkpoint, mask.as_deref())?);
        }
        Command::ExportMetrics { report, csv } => {
            let n = cmd_export(&report, &csv)?;
            println!("{n} rows");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::from(exit::OK as u8),
        Err(e) => {
            eprintln!("amd: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
