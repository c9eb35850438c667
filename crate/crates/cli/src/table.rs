//! Verification-rate table: one row per model with single-shot and
//! feedback success percentages and deltas against a baseline model.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use p2s_core::episode::{EpisodeMode, EpisodeRecord};

use crate::format_pct;

#[derive(Debug, Error, PartialEq)]
pub enum TableError {
    #[error("groups cover different task sets: `{0}` vs `{1}`")]
    MismatchedTaskSets(String, String),
    #[error("baseline `{0}` has no records")]
    UnknownBaseline(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateRow {
    pub model: String,
    pub without_feedback_pct: Option<f64>,
    pub with_feedback_pct: Option<f64>,
    pub delta_without: Option<f64>,
    pub delta_with: Option<f64>,
}

/// `100 · verified / tasks`, rounded to one decimal place.
pub fn rate_pct(verified: usize, tasks: usize) -> f64 {
    if tasks == 0 {
        return 0.0;
    }
    (1000.0 * verified as f64 / tasks as f64).round() / 10.0
}

fn with_feedback(mode: EpisodeMode) -> bool {
    mode != EpisodeMode::BaselineNoFeedback
}

#[derive(Default)]
struct Group {
    tasks: Vec<String>,
    verified: usize,
}

/// Builds the table from `(model label, record)` pairs. Single-shot records
/// fill the "without feedback" column; feedback and policy records fill the
/// other. Every (model, column) group must cover the same task set. Deltas
/// are taken against `baseline`'s row when given.
pub fn verification_rate_table(
    records: &[(String, EpisodeRecord)],
    baseline: Option<&str>,
) -> Result<Vec<RateRow>, TableError> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<(String, bool), Group> = BTreeMap::new();
    for (model, rec) in records {
        if !order.contains(model) {
            order.push(model.clone());
        }
        let g = groups.entry((model.clone(), with_feedback(rec.mode))).or_default();
        g.tasks.push(rec.task_id.clone());
        g.verified += usize::from(rec.verified());
    }
    let mut reference: Option<(String, Vec<String>)> = None;
    for ((model, fb), g) in groups.iter_mut() {
        g.tasks.sort();
        let name = format!("{model}/{}", if *fb { "with" } else { "without" });
        match &reference {
            None => reference = Some((name, g.tasks.clone())),
            Some((ref_name, ref_tasks)) if *ref_tasks != g.tasks => {
                return Err(TableError::MismatchedTaskSets(ref_name.clone(), name));
            }
            Some(_) => {}
        }
    }
    let pct = |model: &str, fb: bool| {
        groups
            .get(&(model.to_string(), fb))
            .map(|g| rate_pct(g.verified, g.tasks.len()))
    };
    let base = match baseline {
        Some(b) if !order.iter().any(|m| m == b) => return Err(TableError::UnknownBaseline(b.to_string())),
        Some(b) => Some((pct(b, false), pct(b, true))),
        None => None,
    };
    let delta = |x: Option<f64>, b: Option<f64>| match (x, b) {
        (Some(x), Some(b)) => Some(((x - b) * 10.0).round() / 10.0),
        _ => None,
    };
    Ok(order
        .iter()
        .map(|m| {
            let (wo, w) = (pct(m, false), pct(m, true));
            let (dwo, dw) = match base {
                Some((bwo, bw)) => (delta(wo, bwo), delta(w, bw)),
                None => (None, None),
            };
            RateRow {
                model: m.clone(),
                without_feedback_pct: wo,
                with_feedback_pct: w,
                delta_without: dwo,
                delta_with: dw,
            }
        })
        .collect())
}

fn cell(v: Option<f64>) -> String {
    v.map(format_pct).unwrap_or_default()
}

fn signed(v: Option<f64>) -> String {
    v.map(|d| format!("{d:+.1}")).unwrap_or_default()
}

pub const TABLE_HEADER: &str = "model,without_feedback_pct,with_feedback_pct,delta_without,delta_with";

pub fn to_csv(rows: &[RateRow]) -> String {
    let mut s = format!("{TABLE_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.model,
            cell(r.without_feedback_pct),
            cell(r.with_feedback_pct),
            signed(r.delta_without),
            signed(r.delta_with)
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use p2s_core::episode::Outcome;
    use p2s_core::verifier::CandidateSource;

    fn rec(id: usize, mode: EpisodeMode, ok: bool) -> EpisodeRecord {
        EpisodeRecord {
            task_id: format!("t{id:03}"),
            mode,
            steps: vec![],
            outcome: if ok { Outcome::Verified } else { Outcome::Exhausted },
            iterations_used: 1,
            final_source: CandidateSource::empty(),
            failure: None,
        }
    }

    fn group(model: &str, mode: EpisodeMode, n: usize, ok: usize) -> Vec<(String, EpisodeRecord)> {
        (0..n).map(|i| (model.to_string(), rec(i, mode, i < ok))).collect()
    }

    #[test]
    fn rates_and_deltas() {
        let mut rs = group("base", EpisodeMode::BaselineNoFeedback, 100, 25);
        rs.extend(group("base", EpisodeMode::BaselineWithFeedback, 100, 36));
        rs.extend(group("slm", EpisodeMode::BaselineNoFeedback, 100, 23));
        rs.extend(group("slm", EpisodeMode::RlPolicy, 100, 50));
        let t = verification_rate_table(&rs, Some("base")).unwrap();
        assert_eq!(t[0].delta_with, Some(0.0));
        assert_eq!(t[1].with_feedback_pct, Some(50.0));
        assert_eq!(t[1].delta_with, Some(14.0));
        assert_eq!(t[1].delta_without, Some(-2.0));
        let csv = to_csv(&t);
        assert!(csv.contains("slm,23.0,50.0,-2.0,+14.0"), "{csv}");
    }

    #[test]
    fn zero_and_partial_rates() {
        let t = verification_rate_table(&group("m", EpisodeMode::RlPolicy, 100, 0), None).unwrap();
        assert_eq!(t[0].with_feedback_pct, Some(0.0));
        assert_eq!(t[0].without_feedback_pct, None);
        assert_eq!(rate_pct(55, 100), 55.0);
        assert_eq!(rate_pct(1, 3), 33.3);
    }

    #[test]
    fn mismatched_task_sets() {
        let mut rs = group("a", EpisodeMode::BaselineNoFeedback, 10, 1);
        rs.extend(group("b", EpisodeMode::BaselineNoFeedback, 9, 1));
        assert!(matches!(
            verification_rate_table(&rs, None),
            Err(TableError::MismatchedTaskSets(..))
        ));
        assert!(matches!(
            verification_rate_table(&group("a", EpisodeMode::RlPolicy, 3, 1), Some("zzz")),
            Err(TableError::UnknownBaseline(_))
        ));
    }
}
