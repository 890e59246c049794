//! Structural pruning: unit importance on the teacher, scale gridding, and a
//! nested family of candidate masks.
//!
//! Importance of a head or MLP unit is `Σ_batches |∂L_ce/∂g|` for a
//! multiplicative gate `g` held at 1 on that unit's output. Units are removed
//! in ascending order of importance per parameter, so that a cheap MLP unit
//! and an expensive head compete on equal terms, and a snapshot is taken the
//! first time the kept fraction of the prunable pool drops to each target.
//! Because removal only ever clears bits, every smaller candidate's mask is
//! a subset of every larger one's.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::math;
use crate::model::{self, ModelConfig, ParameterStore, StructuralMask, UnitId, UnitKind};
use crate::tape::Tape;

/// Absolute realized-scale tolerance around each grid target.
pub const SCALE_TOLERANCE: f64 = 0.02;

/// Non-negative sensitivity score for every prunable unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceScores {
    pub heads: Vec<Vec<f64>>,
    pub units: Vec<Vec<f64>>,
    pub params_per_head: usize,
    pub params_per_unit: usize,
}

impl ImportanceScores {
    pub fn zeros(config: &ModelConfig) -> Self {
        ImportanceScores {
            heads: vec![vec![0.0; config.num_heads]; config.num_layers],
            units: vec![vec![0.0; config.mlp_hidden]; config.num_layers],
            params_per_head: config.params_per_head(),
            params_per_unit: config.params_per_unit(),
        }
    }

    pub fn score(&self, unit: UnitId) -> f64 {
        match unit.kind {
            UnitKind::Head => self.heads[unit.layer][unit.index],
            UnitKind::Mlp => self.units[unit.layer][unit.index],
        }
    }

    /// Score divided by the number of parameters the unit owns.
    pub fn density(&self, unit: UnitId) -> f64 {
        match unit.kind {
            UnitKind::Head => self.score(unit) / self.params_per_head as f64,
            UnitKind::Mlp => self.score(unit) / self.params_per_unit as f64,
        }
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let shape_ok = self.heads.len() == config.num_layers
            && self.units.len() == config.num_layers
            && self.heads.iter().all(|h| h.len() == config.num_heads)
            && self.units.iter().all(|u| u.len() == config.mlp_hidden)
            && self.params_per_head == config.params_per_head()
            && self.params_per_unit == config.params_per_unit();
        if !shape_ok {
            return Err(Error::Contract("importance scores do not cover the model's units".into()));
        }
        let bad = self
            .heads
            .iter()
            .chain(&self.units)
            .flatten()
            .any(|&v| !v.is_finite() || v < 0.0);
        if bad {
            return Err(Error::Domain("importance scores must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// Units sorted ascending by density; ties by (layer, kind, index).
    pub fn ranking(&self, config: &ModelConfig) -> Vec<UnitId> {
        let mut units: Vec<UnitId> = StructuralMask::units(config).collect();
        units.sort_by(|a, b| match self.density(*a).total_cmp(&self.density(*b)) {
            Ordering::Equal => a.cmp(b),
            o => o,
        });
        units
    }
}

/// Accumulates gate sensitivities over up to `num_batches` batches of
/// `data`. The teacher store is only read.
pub fn compute_importance<I>(
    config: &ModelConfig,
    teacher: &ParameterStore,
    data: I,
    num_batches: usize,
) -> Result<ImportanceScores>
where
    I: IntoIterator<Item = Batch>,
{
    if num_batches == 0 {
        return Err(Error::Contract("num_batches must be at least 1".into()));
    }
    config.validate()?;
    teacher.check_layout(config)?;
    let heads = vec![config.num_heads; config.num_layers];
    let mut scores = ImportanceScores::zeros(config);
    let mut seen = 0;
    for batch in data.into_iter().take(num_batches) {
        let mut tape = Tape::new();
        let bound = model::bind(&mut tape, teacher, &heads, false);
        let gates = model::probe_gates(&mut tape, config);
        let size = batch.size();
        let x = tape.constant(batch.patches);
        let out = model::forward_patches(&mut tape, config, &bound, Some(&gates), x, size)?;
        let loss = tape.cross_entropy(out.logits, &batch.labels)?;
        let grads = tape.backward(loss)?;
        for (l, g) in gates.iter().enumerate() {
            let gh = grads.get(g.heads).expect("probe gate gradient");
            let gu = grads.get(g.units).expect("probe gate gradient");
            for (s, v) in scores.heads[l].iter_mut().zip(gh.data()) {
                *s += math::abs(*v);
            }
            for (s, v) in scores.units[l].iter_mut().zip(gu.data()) {
                *s += math::abs(*v);
            }
        }
        seen += 1;
    }
    if seen == 0 {
        return Err(Error::Data("importance estimation got an empty batch stream".into()));
    }
    Ok(scores)
}

/// Evenly spaced target scales between the student and teacher scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleGrid {
    pub teacher_scale: f64,
    pub student_scale: f64,
    pub m: usize,
    pub delta: f64,
    /// Strictly increasing.
    pub targets: Vec<f64>,
}

/// Rounds to 12 decimals so that decimal grids such as 0.1, 0.2, … land
/// exactly on the nearest `f64` of each decimal value.
fn snap(x: f64) -> f64 {
    math::round(x * 1e12) / 1e12
}

impl ScaleGrid {
    /// `δ = (S_t − S_s)/m` and targets `S_s + k·δ` for `k = 0..m`.
    pub fn build(teacher_scale: f64, student_scale: f64, m: usize) -> Result<Self> {
        if m == 0 {
            return Err(Error::Domain("grid size m must be at least 1".into()));
        }
        if !(student_scale > 0.0 && student_scale < teacher_scale && teacher_scale <= 1.0) {
            return Err(Error::Domain(format!(
                "grid needs 0 < S_s < S_t <= 1, got S_s={student_scale}, S_t={teacher_scale}"
            )));
        }
        let delta = (teacher_scale - student_scale) / m as f64;
        let targets = (0..m).map(|k| snap(student_scale + k as f64 * delta)).collect();
        Ok(ScaleGrid {
            teacher_scale,
            student_scale,
            m,
            delta,
            targets,
        })
    }

    /// An explicit grid. Targets must be strictly increasing within (0, 1].
    pub fn from_targets(targets: Vec<f64>) -> Result<Self> {
        let first = *targets
            .first()
            .ok_or_else(|| Error::Domain("empty target list".into()))?;
        let increasing = targets.windows(2).all(|w| w[0] < w[1]);
        if !increasing || !(first > 0.0) || targets.iter().any(|&t| t > 1.0) {
            return Err(Error::Domain(format!("invalid grid targets {targets:?}")));
        }
        let m = targets.len();
        Ok(ScaleGrid {
            teacher_scale: 1.0,
            student_scale: first,
            m,
            delta: (1.0 - first) / m as f64,
            targets,
        })
    }
}

/// One nested candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub target: f64,
    pub realized: f64,
    pub mask: StructuralMask,
}

/// Candidates ordered from smallest to largest; masks are nested.
///
/// The weights the masks apply to live in a separate [`ParameterStore`]
/// shared by every candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateFamily {
    pub candidates: Vec<Candidate>,
    /// Global removal order used to build the family.
    pub order: Vec<UnitId>,
}

impl CandidateFamily {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn masks(&self) -> Vec<&StructuralMask> {
        self.candidates.iter().map(|c| &c.mask).collect()
    }

    pub fn largest(&self) -> &Candidate {
        self.candidates.last().expect("non-empty family")
    }

    pub fn smallest(&self) -> &Candidate {
        &self.candidates[0]
    }

    /// Keeps the listed candidates, in the given order.
    pub fn select(&self, indices: &[usize]) -> CandidateFamily {
        CandidateFamily {
            candidates: indices.iter().map(|&i| self.candidates[i].clone()).collect(),
            order: self.order.clone(),
        }
    }

    /// Checks nesting, strictly increasing realized scales, the per-layer
    /// guard, and (when given) the distance of each realized scale from its
    /// target.
    pub fn validate(&self, config: &ModelConfig, tolerance: Option<f64>) -> Result<()> {
        if self.candidates.is_empty() {
            return Err(Error::Pruning("empty candidate family".into()));
        }
        for (i, c) in self.candidates.iter().enumerate() {
            c.mask.validate(config)?;
            let realized = model::scale_of(config, &c.mask);
            if realized.to_bits() != c.realized.to_bits() {
                return Err(Error::Pruning(format!(
                    "candidate {i} records scale {} but its mask keeps {realized}",
                    c.realized
                )));
            }
            if let Some(tol) = tolerance {
                if math::abs(c.realized - c.target) > tol {
                    return Err(Error::Pruning(format!(
                        "candidate {i} realized {} is more than {tol} from target {}",
                        c.realized, c.target
                    )));
                }
            }
        }
        for (i, w) in self.candidates.windows(2).enumerate() {
            if !w[0].mask.is_subset_of(&w[1].mask) {
                return Err(Error::Pruning(format!("candidate {i} is not nested in {}", i + 1)));
            }
            if !(w[0].realized < w[1].realized) {
                return Err(Error::Pruning(format!(
                    "realized scales not strictly increasing at {i}"
                )));
            }
        }
        Ok(())
    }
}

/// Prunes the full model down through every grid target, largest first.
pub fn prune_to_grid(scores: &ImportanceScores, grid: &ScaleGrid, config: &ModelConfig) -> Result<CandidateFamily> {
    config.validate()?;
    scores.validate(config)?;
    let order = scores.ranking(config);
    let total = config.total_prunable();
    let mut active = total;
    let mut mask = StructuralMask::full(config);
    let mut heads_left = vec![config.num_heads; config.num_layers];
    let mut units_left = vec![config.mlp_hidden; config.num_layers];

    // (target index, mask, realized), collected largest target first
    let mut snapshots: Vec<(usize, StructuralMask, f64)> = Vec::with_capacity(grid.targets.len());
    let mut pending = grid.targets.len();
    let take_ready = |pending: &mut usize, mask: &StructuralMask, active: usize, snaps: &mut Vec<_>| {
        let realized = active as f64 / total as f64;
        while *pending > 0 && realized <= grid.targets[*pending - 1] {
            *pending -= 1;
            snaps.push((*pending, mask.clone(), realized));
        }
    };
    take_ready(&mut pending, &mask, active, &mut snapshots);
    for &unit in &order {
        if pending == 0 {
            break;
        }
        let left = match unit.kind {
            UnitKind::Head => &mut heads_left[unit.layer],
            UnitKind::Mlp => &mut units_left[unit.layer],
        };
        if *left == 1 {
            continue;
        }
        *left -= 1;
        mask.set(unit, false);
        active -= match unit.kind {
            UnitKind::Head => config.params_per_head(),
            UnitKind::Mlp => config.params_per_unit(),
        };
        take_ready(&mut pending, &mask, active, &mut snapshots);
    }
    if pending > 0 {
        let minimum = model::scale_of(config, &StructuralMask::minimal(config));
        return Err(Error::Pruning(format!(
            "target scale {} is unreachable; minimum reachable scale is {minimum}",
            grid.targets[pending - 1]
        )));
    }
    snapshots.reverse();
    let candidates: Vec<Candidate> = snapshots
        .into_iter()
        .map(|(k, mask, realized)| Candidate {
            target: grid.targets[k],
            realized,
            mask,
        })
        .collect();
    for w in candidates.windows(2) {
        if !(w[0].realized < w[1].realized) {
            return Err(Error::Pruning(format!(
                "targets {} and {} collapse onto the same mask; the grid is finer than one unit",
                w[0].target, w[1].target
            )));
        }
    }
    Ok(CandidateFamily { candidates, order })
}
