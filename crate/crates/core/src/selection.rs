//! Teacher-assistant selection by the negative performance-scale derivative.
//!
//! `npsd = −(P_t − P_ta)/(S_t − S_ta)`: the accuracy given up per unit of
//! scale removed, negated so that higher is better.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub fn npsd(p_t: f64, s_t: f64, p_ta: f64, s_ta: f64) -> Result<f64> {
    if !(s_ta < s_t) {
        return Err(Error::Domain(format!(
            "NPSD needs S_ta < S_t, got S_ta={s_ta}, S_t={s_t}"
        )));
    }
    Ok(-(p_t - p_ta) / (s_t - s_ta))
}

/// Adds `λ` times the assistant-to-student slope to the NPSD slope.
pub fn lambda_npsd(p_t: f64, s_t: f64, p_ta: f64, s_ta: f64, p_s: f64, s_s: f64, lambda: f64) -> Result<f64> {
    if !(s_s < s_ta && s_ta < s_t) {
        return Err(Error::Domain(format!(
            "lambda-NPSD needs S_s < S_ta < S_t, got {s_s}, {s_ta}, {s_t}"
        )));
    }
    let upper = (p_t - p_ta) / (s_t - s_ta);
    Ok(-(upper + lambda * ((p_ta - p_s) / (s_ta - s_s))))
}

/// Scale and accuracy of one candidate plus its score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NpsdRecord {
    pub index: usize,
    pub scale: f64,
    pub performance: f64,
    pub npsd: f64,
}

/// Optional student terms for the λ-generalized score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaTerms {
    pub lambda: f64,
    pub student_performance: f64,
    pub student_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionInput {
    pub teacher_performance: f64,
    pub teacher_scale: f64,
    /// `(candidate index, scale, performance)`; the score is recomputed.
    pub candidates: Vec<(usize, f64, f64)>,
    /// Only candidates with scale strictly above this floor are eligible.
    pub min_scale: f64,
    pub lambda: Option<LambdaTerms>,
}

impl SelectionInput {
    pub fn new(teacher_performance: f64, teacher_scale: f64, candidates: Vec<(usize, f64, f64)>, min_scale: f64) -> Self {
        SelectionInput {
            teacher_performance,
            teacher_scale,
            candidates,
            min_scale,
            lambda: None,
        }
    }

    /// Scores every eligible candidate, in input order.
    pub fn records(&self) -> Result<Vec<NpsdRecord>> {
        let mut scales: Vec<f64> = self.candidates.iter().map(|c| c.1).collect();
        scales.sort_by(f64::total_cmp);
        if scales.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Selection("candidate scales must be distinct".into()));
        }
        self.candidates
            .iter()
            .filter(|&&(_, s, _)| s > self.min_scale && s < self.teacher_scale)
            .map(|&(index, scale, performance)| {
                let score = match self.lambda {
                    None => npsd(self.teacher_performance, self.teacher_scale, performance, scale)?,
                    Some(l) => lambda_npsd(
                        self.teacher_performance,
                        self.teacher_scale,
                        performance,
                        scale,
                        l.student_performance,
                        l.student_scale,
                        l.lambda,
                    )?,
                };
                Ok(NpsdRecord {
                    index,
                    scale,
                    performance,
                    npsd: score,
                })
            })
            .collect()
    }
}

/// The eligible record with the highest score; ties go to the smaller scale.
pub fn select_optimal(input: &SelectionInput) -> Result<NpsdRecord> {
    let records = input.records()?;
    best_of(&records).ok_or_else(|| {
        Error::Selection(format!(
            "no candidate with scale in ({}, {})",
            input.min_scale, input.teacher_scale
        ))
    })
}

fn best_of(records: &[NpsdRecord]) -> Option<NpsdRecord> {
    records.iter().copied().reduce(|best, r| {
        if r.npsd > best.npsd || (r.npsd == best.npsd && r.scale < best.scale) {
            r
        } else {
            best
        }
    })
}

/// Callback used by [`chain_select`] to obtain fresh assistant accuracies
/// after the previous assistant takes over as teacher.
pub trait ChainHooks {
    /// Re-runs joint distillation with candidate `teacher` (by family index)
    /// as the teacher over `candidates`, returning `(index, scale, accuracy)`
    /// for each.
    fn rerun_joint(&mut self, teacher: usize, candidates: &[usize]) -> Result<Vec<(usize, f64, f64)>>;
}

/// One link of a teacher-assistant chain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChainLink {
    pub record: NpsdRecord,
    /// Accuracy and scale of the model this assistant was selected against.
    pub teacher_performance: f64,
    pub teacher_scale: f64,
}

/// Picks `num_steps` assistants of decreasing scale.
///
/// Step 1 selects from `input`. Each later step asks `hooks` to re-distill
/// the candidates strictly between the student floor and the previous
/// assistant, with that assistant as teacher, and selects among them with
/// the previous assistant's accuracy and scale as `P_t` and `S_t`.
pub fn chain_select<H: ChainHooks>(input: &SelectionInput, num_steps: usize, hooks: &mut H) -> Result<Vec<ChainLink>> {
    let mut chain = Vec::with_capacity(num_steps);
    let mut current = input.clone();
    for step in 0..num_steps {
        if step > 0 {
            let prev: &ChainLink = chain.last().expect("previous link");
            let band: Vec<usize> = input
                .candidates
                .iter()
                .filter(|&&(_, s, _)| s < prev.record.scale && s > input.min_scale)
                .map(|c| c.0)
                .collect();
            if band.is_empty() {
                return Err(Error::Selection(format!(
                    "chain step {}: no candidate with scale in ({}, {})",
                    step + 1,
                    input.min_scale,
                    prev.record.scale
                )));
            }
            let rerun = hooks.rerun_joint(prev.record.index, &band)?;
            current = SelectionInput {
                teacher_performance: prev.record.performance,
                teacher_scale: prev.record.scale,
                candidates: rerun,
                min_scale: input.min_scale,
                lambda: input.lambda,
            };
        }
        let record = select_optimal(&current).map_err(|e| match e {
            Error::Selection(msg) => Error::Selection(format!("chain step {}: {msg}", step + 1)),
            other => other,
        })?;
        chain.push(ChainLink {
            record,
            teacher_performance: current.teacher_performance,
            teacher_scale: current.teacher_scale,
        });
    }
    Ok(chain)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn npsd_hand_values() {
        assert_eq!(npsd(0.9, 1.0, 0.9, 0.3).unwrap(), 0.0);
        assert_eq!(npsd(0.0, 1.0, 0.0, 0.7).unwrap(), 0.0);
        // −(0.9 − 0.8)/(1 − 0.5); 0.9 − 0.8 is not exactly 0.1 in binary
        assert_eq!(npsd(0.9, 1.0, 0.8, 0.5).unwrap(), -(0.9f64 - 0.8) / 0.5);
        assert!((npsd(0.9, 1.0, 0.8, 0.5).unwrap() + 0.2).abs() < 1e-15);
        assert_eq!(npsd(1.0, 1.0, 0.5, 0.5).unwrap(), -1.0);
        assert!(matches!(npsd(0.9, 1.0, 0.8, 1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn npsd_decreases_towards_teacher_scale() {
        let mut prev = f64::INFINITY;
        for k in 1..100 {
            let s = k as f64 / 100.0;
            let v = npsd(0.9, 1.0, 0.7, s).unwrap();
            assert!(v < prev);
            prev = v;
        }
    }

    #[test]
    fn lambda_npsd_values() {
        let v = lambda_npsd(0.9, 1.0, 0.8, 0.5, 0.7, 0.1, 1.0).unwrap();
        assert!((v + 0.45).abs() < 1e-12);
        let base = npsd(0.9, 1.0, 0.8, 0.5).unwrap();
        assert_eq!(lambda_npsd(0.9, 1.0, 0.8, 0.5, 0.7, 0.1, 0.0).unwrap(), base);
        assert_eq!(lambda_npsd(0.9, 1.0, 0.8, 0.5, 0.8, 0.1, 3.5).unwrap(), base);
        assert!(lambda_npsd(0.9, 1.0, 0.8, 0.1, 0.7, 0.1, 1.0).is_err());
    }

    #[test]
    fn selection_singleton_and_ties() {
        let input = SelectionInput::new(0.9, 1.0, vec![(0, 0.1, 0.2), (3, 0.4, 0.1)], 0.1);
        assert_eq!(select_optimal(&input).unwrap().index, 3);
        // both slopes are exactly -0.5
        let input = SelectionInput::new(1.0, 1.0, vec![(1, 0.5, 0.75), (0, 0.75, 0.875)], 0.1);
        assert_eq!(npsd(1.0, 1.0, 0.75, 0.5).unwrap(), npsd(1.0, 1.0, 0.875, 0.75).unwrap());
        assert_eq!(select_optimal(&input).unwrap().scale, 0.5);
    }

    #[test]
    fn no_eligible_candidate_is_a_selection_error() {
        let input = SelectionInput::new(0.9, 1.0, vec![(0, 0.1, 0.5)], 0.1);
        assert!(matches!(select_optimal(&input), Err(Error::Selection(_))));
    }

    struct NoHooks;
    impl ChainHooks for NoHooks {
        fn rerun_joint(&mut self, _: usize, _: &[usize]) -> Result<Vec<(usize, f64, f64)>> {
            panic!("not expected")
        }
    }

    #[test]
    fn chain_of_zero_and_one() {
        let input = SelectionInput::new(0.9, 1.0, vec![(0, 0.1, 0.4), (1, 0.5, 0.8), (2, 0.9, 0.85)], 0.1);
        assert!(chain_select(&input, 0, &mut NoHooks).unwrap().is_empty());
        let chain = chain_select(&input, 1, &mut NoHooks).unwrap();
        assert_eq!(chain.len(), 1);
        assert_eq!(chain[0].record, select_optimal(&input).unwrap());
    }

    struct Fixed;
    impl ChainHooks for Fixed {
        fn rerun_joint(&mut self, teacher: usize, candidates: &[usize]) -> Result<Vec<(usize, f64, f64)>> {
            assert_eq!(teacher, 2);
            Ok(candidates.iter().map(|&i| (i, 0.1 * (i as f64 + 1.0), 0.6)).collect())
        }
    }

    #[test]
    fn chain_narrows_the_band() {
        let input = SelectionInput::new(
            0.9,
            1.0,
            vec![(0, 0.1, 0.4), (1, 0.2, 0.5), (2, 0.3, 0.89)],
            0.1,
        );
        let chain = chain_select(&input, 2, &mut Fixed).unwrap();
        assert_eq!(chain[0].record.index, 2);
        assert_eq!(chain[1].record.index, 1);
        assert_eq!(chain[1].teacher_scale, 0.3);
        // a third step has an empty band
        assert!(matches!(chain_select(&input, 3, &mut Fixed), Err(Error::Selection(_))));
    }
}
