//! Per-case metric kernels. Rankings are ordered id lists, best first.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HitsMode {
    /// A round counts once the target has appeared in the top k at any
    /// round so far.
    #[default]
    Cumulative,
    PerRound,
}

fn gt_set<S: AsRef<str>>(ground_truth: &[S]) -> HashSet<&str> {
    ground_truth.iter().map(AsRef::as_ref).collect()
}

/// 1.0 if any ground-truth id is among the first `k`, else 0.0.
pub fn recall_at_k<R: AsRef<str>, G: AsRef<str>>(ranking: &[R], ground_truth: &[G], k: usize) -> f64 {
    let gt = gt_set(ground_truth);
    let hit = ranking.iter().take(k).any(|id| gt.contains(id.as_ref()));
    if hit {
        1.0
    } else {
        0.0
    }
}

/// Recall after restricting the ranking to `subset` members, order kept.
pub fn recall_subset_at_k<R: AsRef<str>, S: AsRef<str>, G: AsRef<str>>(
    ranking: &[R],
    subset: Option<&[S]>,
    ground_truth: &[G],
    k: usize,
) -> Result<f64> {
    let subset = subset.ok_or(Error::MissingSubset)?;
    let members = gt_set(subset);
    if !ground_truth.iter().any(|g| members.contains(g.as_ref())) {
        return Err(Error::MissingSubset);
    }
    let filtered: Vec<&str> = ranking
        .iter()
        .map(AsRef::as_ref)
        .filter(|id| members.contains(id))
        .collect();
    Ok(recall_at_k(&filtered, ground_truth, k))
}

/// Average precision over the first `k` positions, normalized by
/// `min(|GT|, k)`. Positions past the end of the ranking are irrelevant.
pub fn average_precision_at_k<R: AsRef<str>, G: AsRef<str>>(
    ranking: &[R],
    ground_truth: &[G],
    k: usize,
) -> f64 {
    let gt = gt_set(ground_truth);
    if gt.is_empty() || k == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, id) in ranking.iter().take(k).enumerate() {
        if gt.contains(id.as_ref()) {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    sum / gt.len().min(k) as f64
}

/// One value per round.
pub fn hits_at_k<R: AsRef<str>, G: AsRef<str>>(
    per_round: &[Vec<R>],
    ground_truth: &[G],
    k: usize,
    mode: HitsMode,
) -> Vec<f64> {
    let mut seen = false;
    per_round
        .iter()
        .map(|ranking| {
            let hit = recall_at_k(ranking, ground_truth, k) == 1.0;
            seen |= hit;
            match mode {
                HitsMode::Cumulative if seen => 1.0,
                HitsMode::PerRound if hit => 1.0,
                _ => 0.0,
            }
        })
        .collect()
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}
