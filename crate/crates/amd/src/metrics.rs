//! Metrics CSV export.
//!
//! Header `stage,epoch,candidate_scale,metric,value,seed`; empty fields mark
//! values that do not apply (no epoch for end-of-stage metrics). Reals are
//! printed with 9 significant digits in the shortest of fixed and
//! exponential notation, like C's `%.9g`.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::write_atomic;
use crate::error::Result;

pub const HEADER: &str = "stage,epoch,candidate_scale,metric,value,seed";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub stage: String,
    pub epoch: Option<usize>,
    /// Position of the candidate inside its stage, used for ordering only.
    pub candidate: Option<usize>,
    pub candidate_scale: Option<f64>,
    pub metric: String,
    pub value: f64,
    pub seed: u64,
}

/// `%.9g` formatting.
pub fn fmt_g9(v: f64) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if v == 0.0 {
        return if v.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    let sci = format!("{v:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..9).contains(&exp) {
        let decimals = (8 - exp) as usize;
        trim_zeros(&format!("{v:.decimals$}")).to_string()
    } else {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim_zeros(mantissa), exp.abs())
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Rows in stage order (first appearance), then epoch (end-of-stage rows
/// last), then candidate index. The sort is stable.
pub fn ordered(rows: &[MetricRow]) -> Vec<MetricRow> {
    let mut stages: Vec<&str> = Vec::new();
    for r in rows {
        if !stages.contains(&r.stage.as_str()) {
            stages.push(&r.stage);
        }
    }
    let mut out = rows.to_vec();
    out.sort_by_key(|r| {
        (
            stages.iter().position(|s| *s == r.stage),
            r.epoch.map_or(usize::MAX, |e| e),
            r.candidate.map_or(usize::MAX, |c| c),
        )
    });
    out
}

pub fn to_csv(rows: &[MetricRow]) -> String {
    let mut out = String::with_capacity(64 * (rows.len() + 1));
    out.push_str(HEADER);
    out.push('\n');
    for r in ordered(rows) {
        let epoch = r.epoch.map(|e| e.to_string()).unwrap_or_default();
        let scale = r.candidate_scale.map(fmt_g9).unwrap_or_default();
        writeln!(out, "{},{epoch},{scale},{},{},{}", r.stage, r.metric, fmt_g9(r.value), r.seed).expect("write to string");
    }
    out
}

pub fn export_metrics(rows: &[MetricRow], path: &Path) -> Result<()> {
    write_atomic(path, to_csv(rows).as_bytes())
}
