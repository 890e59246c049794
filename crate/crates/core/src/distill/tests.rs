use super::*;
use crate::data::LabeledImages;
use crate::model::unit_entries;
use crate::pruning::{prune_to_grid, ImportanceScores, ScaleGrid};
use crate::selection::{chain_select, SelectionInput};
use alloc::vec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cfg() -> ModelConfig {
    ModelConfig {
        image_size: 8,
        patch_size: 4,
        channels: 3,
        embed_dim: 16,
        num_layers: 2,
        num_heads: 4,
        mlp_hidden: 32,
        num_classes: 3,
    }
}

fn split(c: &ModelConfig, n: usize, seed: u64) -> PatchedSplit {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = Tensor::uniform(&[n, c.channels, c.image_size, c.image_size], -1.0, 1.0, &mut rng);
    let labels = (0..n).map(|_| rng.random_range(0..c.num_classes)).collect();
    PatchedSplit::new(c, &LabeledImages::new(images, labels, c.num_classes).unwrap()).unwrap()
}

fn random_mask(c: &ModelConfig, rng: &mut ChaCha8Rng) -> StructuralMask {
    let mut m = StructuralMask::full(c);
    for layer in &mut m.layers {
        for b in layer.heads.iter_mut().chain(layer.units.iter_mut()) {
            *b = rng.random_bool(0.5);
        }
        layer.heads[rng.random_range(0..c.num_heads)] = true;
        layer.units[rng.random_range(0..c.mlp_hidden)] = true;
    }
    m
}

fn family(c: &ModelConfig, targets: Vec<f64>) -> CandidateFamily {
    let mut scores = ImportanceScores::zeros(c);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for v in scores.heads.iter_mut().chain(scores.units.iter_mut()).flat_map(|l| l.iter_mut()) {
        *v = rng.random_range(0.0..1.0);
    }
    prune_to_grid(&scores, &ScaleGrid::from_targets(targets).unwrap(), c).unwrap()
}

fn small_cfg(epochs: usize) -> DistillConfig {
    DistillConfig {
        epochs,
        warmup_epochs: 0,
        batch_size: 8,
        ..DistillConfig::default()
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

#[test]
fn defaults_and_validation() {
    let d = DistillConfig::default();
    assert_eq!((d.alpha, d.beta, d.gamma, d.base_lr), (0.2, 100.0, 1.0, 0.003));
    assert_eq!(d.warmup_epochs, 3);
    d.validate().unwrap();
    assert!(DistillConfig { gamma: 0.0, ..d }.validate().is_err());
    assert!(DistillConfig { alpha: -1.0, ..d }.validate().is_err());
    assert!(DistillConfig { epochs: 3, ..d }.validate().is_err());
    assert!(DistillConfig { epochs: 0, ..d }.validate().is_ok());
}

#[test]
fn joint_loss_is_sum_of_isolated_losses() {
    let c = cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let teacher = ParameterStore::init(&c, &mut rng).unwrap();
    let student = ParameterStore::init(&c, &mut rng).unwrap();
    let data = split(&c, 6, 2);
    let batch = data.batch(&[0, 1, 2, 3, 4, 5]);
    let masks: Vec<StructuralMask> = (0..3).map(|_| random_mask(&c, &mut rng)).collect();
    let refs: Vec<&StructuralMask> = masks.iter().collect();
    let d = DistillConfig::default();
    let joint = joint_step(&c, TeacherRef::full(&teacher), &student, &refs, &batch, &d).unwrap();
    let mut sum = 0.0;
    let mut grad_sum: Vec<Tensor> = student.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
    for m in &masks {
        let one = joint_step(&c, TeacherRef::full(&teacher), &student, &[m], &batch, &d).unwrap();
        sum += one.loss;
        for (acc, g) in grad_sum.iter_mut().zip(&one.grads) {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
    }
    assert!(rel(joint.loss, sum) <= 1e-10, "{} vs {}", joint.loss, sum);
    for (a, b) in joint.grads.iter().zip(&grad_sum) {
        assert!(a.max_abs_diff(b).unwrap() <= 1e-9);
    }
}

#[test]
fn zero_weights_leave_cross_entropy_only() {
    let c = cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let teacher = ParameterStore::init(&c, &mut rng).unwrap();
    let student = ParameterStore::init(&c, &mut rng).unwrap();
    let data = split(&c, 5, 4);
    let batch = data.batch(&[0, 1, 2, 3, 4]);
    let masks = [random_mask(&c, &mut rng), random_mask(&c, &mut rng)];
    let d = DistillConfig {
        alpha: 0.0,
        beta: 0.0,
        ..DistillConfig::default()
    };
    let out = joint_step(&c, TeacherRef::full(&teacher), &student, &[&masks[0], &masks[1]], &batch, &d).unwrap();
    let mut expected = 0.0;
    for m in &masks {
        let (logits, _) = model::forward_rows(&c, &student, Some(m), batch.patches.clone(), 5).unwrap();
        let mut ce = 0.0;
        for (i, &y) in batch.labels.iter().enumerate() {
            let row = logits.row(i);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            ce += lse - row[y];
        }
        expected += ce / 5.0;
    }
    assert!(rel(out.loss, expected) <= 1e-12);
}

#[test]
fn identical_architecture_starts_with_zero_distillation_terms() {
    let c = cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let store = ParameterStore::init(&c, &mut rng).unwrap();
    let mask = random_mask(&c, &mut rng);
    let data = split(&c, 4, 6);
    let batch = data.batch(&[0, 1, 2, 3]);
    let out = joint_step(&c, TeacherRef::masked(&store, &mask), &store, &[&mask], &batch, &DistillConfig::default()).unwrap();
    assert!(out.per_candidate[0].logit.abs() < 1e-14);
    assert_eq!(out.per_candidate[0].feat, 0.0);
}

#[test]
fn non_finite_loss_names_the_candidate() {
    let c = cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let teacher = ParameterStore::init(&c, &mut rng).unwrap();
    let mut student = teacher.clone();
    let good = StructuralMask::full(&c);
    // only unit 1 of layer 0 carries the poison
    student.get_mut("blocks.0.mlp.fc2.weight").unwrap().data_mut()[c.embed_dim] = f64::INFINITY;
    let data = split(&c, 2, 8);
    let batch = data.batch(&[0, 1]);
    let err = joint_step(&c, TeacherRef::full(&teacher), &student, &[&StructuralMask::minimal(&c), &good], &batch, &DistillConfig::default())
        .unwrap_err();
    assert!(matches!(&err, Error::Training(m) if m.contains("candidate 1")), "{err}");
}

#[test]
fn ledger_counts_and_sharing_invariants() {
    let c = cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let teacher = ParameterStore::init(&c, &mut rng).unwrap();
    let before = teacher.clone();
    let fam = family(&c, vec![0.3, 0.5, 0.7]);
    let train = split(&c, 20, 10);
    let val = split(&c, 6, 11);
    let data = TrainData { train: &train, val: &val };
    let d = small_cfg(2);
    let (store, report) = train_joint(&c, &teacher, &fam, data, &d).unwrap();
    // 20 samples at batch 8 → 3 batches per epoch
    assert_eq!(report.ledger.teacher_forward, 2 * 3);
    assert_eq!(report.ledger.candidate_forward, 2 * 3 * 3);
    assert_eq!(report.ledger.candidate_backward, 2 * 3 * 3);
    assert_eq!(report.epochs.len(), 2 * 3);
    assert_eq!(report.final_accuracy.len(), 3);
    assert!(report.final_accuracy.iter().all(|a| (0.0..=1.0).contains(a)));
    assert!(teacher.bit_eq(&before));
    let largest = &fam.largest().mask;
    let mut outside = 0;
    for unit in StructuralMask::units(&c) {
        let moved = unit_entries(&c, unit)
            .iter()
            .any(|&(t, e)| store.tensors()[t].data()[e].to_bits() != teacher.tensors()[t].data()[e].to_bits());
        if largest.is_active(unit) {
            assert!(moved, "{unit:?} never trained");
        } else {
            assert!(!moved, "{unit:?} changed outside the largest mask");
            outside += 1;
        }
    }
    assert!(outside > 0);
}

#[test]
fn masked_candidate_contributes_no_gradient_outside_its_mask() {
    let c = cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let teacher = ParameterStore::init(&c, &mut rng).unwrap();
    let data = split(&c, 4, 13);
    let batch = data.batch(&[0, 1, 2, 3]);
    let mask = random_mask(&c, &mut rng);
    let out = joint_step(&c, TeacherRef::full(&teacher), &teacher, &[&mask], &batch, &DistillConfig::default()).unwrap();
    for unit in StructuralMask::units(&c) {
        if !mask.is_active(unit) {
            for (t, e) in unit_entries(&c, unit) {
                assert_eq!(out.grads[t].data()[e], 0.0, "{unit:?}");
            }
        }
    }
}

#[test]
fn zero_epochs_reports_inherited_accuracy() {
    let c = cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let teacher = ParameterStore::init(&c, &mut rng).unwrap();
    let fam = family(&c, vec![0.4, 0.8]);
    let train = split(&c, 8, 15);
    let val = split(&c, 9, 16);
    let (store, report) = train_joint(&c, &teacher, &fam, TrainData { train: &train, val: &val }, &small_cfg(0)).unwrap();
    assert!(store.bit_eq(&teacher));
    assert_eq!(report.ledger.training_passes(), 0);
    for (cand, acc) in fam.candidates.iter().zip(&report.final_accuracy) {
        assert_eq!(*acc, evaluate(&c, &teacher, Some(&cand.mask), &val, 4, None).unwrap());
    }
}

#[test]
fn training_is_deterministic() {
    let c = cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let teacher = ParameterStore::init(&c, &mut rng).unwrap();
    let fam = family(&c, vec![0.5, 0.9]);
    let train = split(&c, 12, 18);
    let val = split(&c, 5, 19);
    let data = TrainData { train: &train, val: &val };
    let a = train_joint(&c, &teacher, &fam, data, &small_cfg(2)).unwrap();
    let b = train_joint(&c, &teacher, &fam, data, &small_cfg(2)).unwrap();
    assert!(a.0.bit_eq(&b.0));
    assert_eq!(a.1, b.1);
}

#[test]
fn single_candidate_joint_run_equals_distill_pair() {
    let c = cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let teacher = ParameterStore::init(&c, &mut rng).unwrap();
    let fam = family(&c, vec![0.6]);
    let train = split(&c, 10, 21);
    let val = split(&c, 4, 22);
    let data = TrainData { train: &train, val: &val };
    let a = train_joint(&c, &teacher, &fam, data, &small_cfg(1)).unwrap();
    let b = distill_pair(&c, TeacherRef::full(&teacher), &teacher, &fam.candidates[0].mask, data, &small_cfg(1)).unwrap();
    assert!(a.0.bit_eq(&b.0));
    assert_eq!(a.1, b.1);
}

#[test]
fn toggles_are_reported() {
    let c = cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let teacher = ParameterStore::init(&c, &mut rng).unwrap();
    let mask = random_mask(&c, &mut rng);
    let train = split(&c, 8, 24);
    let val = split(&c, 4, 25);
    let data = TrainData { train: &train, val: &val };
    for (ce, logit, feat) in [(true, false, false), (true, true, false), (false, true, true), (true, true, true)] {
        let d = DistillConfig {
            use_ce: ce,
            use_logit: logit,
            use_feat: feat,
            ..small_cfg(1)
        };
        let (_, r) = distill_pair(&c, TeacherRef::full(&teacher), &teacher, &mask, data, &d).unwrap();
        assert_eq!(r.terms, LossTerms { ce, logit, feat });
    }
}

#[test]
fn sweep_with_one_eligible_candidate_is_two_pair_runs() {
    let c = cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    let teacher = ParameterStore::init(&c, &mut rng).unwrap();
    let fam = family(&c, vec![0.3, 0.7]);
    let train = split(&c, 10, 27);
    let val = split(&c, 4, 28);
    let data = TrainData { train: &train, val: &val };
    let d = small_cfg(1);
    let sweep = sweep_manual(&c, &teacher, &fam, data, &val, &d, 0.3).unwrap();
    assert_eq!(sweep.rows.len(), 1);
    let ta_mask = &fam.candidates[1].mask;
    let (ta, ta_r) = distill_pair(&c, TeacherRef::full(&teacher), &teacher, ta_mask, data, &d).unwrap();
    let student = &fam.candidates[0].mask;
    let (s, _) = distill_pair(&c, TeacherRef::masked(&ta, ta_mask), &ta, student, data, &d).unwrap();
    assert_eq!(sweep.rows[0].assistant_accuracy, ta_r.final_accuracy[0]);
    assert_eq!(sweep.rows[0].student_accuracy, evaluate(&c, &s, Some(student), &val, 8, None).unwrap());
    // 2 runs × 2 batches × (1 teacher + 1 forward + 1 backward)
    assert_eq!(sweep.ledger.training_passes(), 12);
    assert!(sweep_manual(&c, &teacher, &fam, data, &val, &d, 0.7).is_err());
}

#[test]
fn joint_chain_reruns_a_smaller_band() {
    let c = cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let teacher = ParameterStore::init(&c, &mut rng).unwrap();
    let fam = family(&c, vec![0.2, 0.4, 0.6, 0.8]);
    let train = split(&c, 8, 30);
    let val = split(&c, 4, 31);
    let data = TrainData { train: &train, val: &val };
    let d = small_cfg(1);
    let (store, report) = train_joint(&c, &teacher, &fam, data, &d).unwrap();
    let input = SelectionInput::new(
        1.0,
        1.0,
        fam.candidates
            .iter()
            .enumerate()
            .map(|(i, cand)| (i, cand.realized, report.final_accuracy[i]))
            .collect(),
        fam.candidates[0].realized,
    );
    let mut hooks = JointChain {
        config: &c,
        family: &fam,
        data,
        cfg: d,
        store,
        reports: Vec::new(),
        ledger: PassLedger::default(),
    };
    let chain = chain_select(&input, 1, &mut hooks).unwrap();
    assert!(hooks.reports.is_empty());
    let first = chain[0].record.index;
    if first >= 2 {
        let chain = chain_select(&input, 2, &mut hooks).unwrap();
        assert_eq!(hooks.reports.len(), 1);
        assert!(chain[1].record.scale < chain[0].record.scale);
        assert_eq!(hooks.ledger.candidate_forward, (first - 1) as u64);
    }
}

#[test]
fn pretraining_skips_the_teacher_and_reduces_loss() {
    let c = cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let init = ParameterStore::init(&c, &mut rng).unwrap();
    let train = split(&c, 16, 33);
    let val = split(&c, 4, 34);
    let d = DistillConfig {
        base_lr: 0.01,
        ..small_cfg(6)
    };
    let (_, r) = pretrain(&c, &init, TrainData { train: &train, val: &val }, &d).unwrap();
    assert_eq!(r.ledger.teacher_forward, 0);
    assert_eq!(r.terms, LossTerms { ce: true, logit: false, feat: false });
    assert!(r.epochs.last().unwrap().train_loss < r.epochs[0].train_loss);
}
