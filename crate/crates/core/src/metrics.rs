//! Ranking metrics. Rankings are candidate indices in display order; labels
//! are per-candidate gains (0 = irrelevant).

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use alloc::format;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Display order: score descending, then intent id ascending.
pub fn rank_order(scores: &[f64], ids: &[u64]) -> Result<Vec<usize>> {
    if scores.len() != ids.len() {
        return Err(Error::LengthMismatch(format!("{} scores for {} ids", scores.len(), ids.len())));
    }
    if scores.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::NonFinite(format!("score {s}")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(ids[a].cmp(&ids[b])));
    Ok(order)
}

fn check(ranking: &[usize], labels: &[f64]) -> Result<usize> {
    if ranking.len() != labels.len() {
        return Err(Error::LengthMismatch(format!(
            "ranking of {} for {} labels",
            ranking.len(),
            labels.len()
        )));
    }
    if let Some(&i) = ranking.iter().find(|&&i| i >= labels.len()) {
        return Err(Error::LengthMismatch(format!("ranking index {i} out of range")));
    }
    let n_rel = labels.iter().filter(|l| **l > 0.0).count();
    if n_rel == 0 {
        return Err(Error::NoRelevant);
    }
    Ok(n_rel)
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    Ok(())
}

pub fn recall_at_k(ranking: &[usize], labels: &[f64], k: usize) -> Result<f64> {
    check_k(k)?;
    let n_rel = check(ranking, labels)?;
    let hits = ranking.iter().take(k).filter(|&&i| labels[i] > 0.0).count();
    Ok(hits as f64 / n_rel as f64)
}

fn discount(pos: usize) -> f64 {
    1.0 / libm::log2(pos as f64 + 2.0)
}

pub fn ndcg_at_k(ranking: &[usize], labels: &[f64], k: usize) -> Result<f64> {
    check_k(k)?;
    check(ranking, labels)?;
    let dcg: f64 = ranking.iter().take(k).enumerate().map(|(p, &i)| labels[i] * discount(p)).sum();
    let mut ideal = labels.to_vec();
    ideal.sort_by(|a, b| b.total_cmp(a));
    let idcg: f64 = ideal.iter().take(k).enumerate().map(|(p, g)| g * discount(p)).sum();
    Ok(dcg / idcg)
}

pub fn mrr(ranking: &[usize], labels: &[f64]) -> Result<f64> {
    check(ranking, labels)?;
    Ok(ranking
        .iter()
        .position(|&i| labels[i] > 0.0)
        .map_or(0.0, |p| 1.0 / (p as f64 + 1.0)))
}

/// Pairwise AUC with ties counted one half, via average ranks. `None` when
/// the labels are single-class.
pub fn auc(scores: &[f64], labels: &[f64]) -> Result<Option<f64>> {
    if scores.len() != labels.len() {
        return Err(Error::LengthMismatch(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    let n_pos = labels.iter().filter(|l| **l > 0.0).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Ok(None);
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their average
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum_pos += avg * idx[i..=j].iter().filter(|&&k| labels[k] > 0.0).count() as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok(Some((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaucResult {
    pub value: f64,
    pub n_users: usize,
    pub n_excluded: usize,
}

/// Impression-weighted mean of per-user AUC. Each element is
/// `(user, scores, labels)`; a user's impressions are pooled.
pub fn gauc(impressions: &[(u64, &[f64], &[f64])]) -> Result<GaucResult> {
    let mut per_user: BTreeMap<u64, (Vec<f64>, Vec<f64>, usize)> = BTreeMap::new();
    for (u, s, l) in impressions {
        if s.len() != l.len() {
            return Err(Error::LengthMismatch(format!("{} scores for {} labels", s.len(), l.len())));
        }
        let e = per_user.entry(*u).or_default();
        e.0.extend_from_slice(s);
        e.1.extend_from_slice(l);
        e.2 += 1;
    }
    let (mut num, mut den, mut n_users, mut n_excluded) = (0.0, 0.0, 0, 0);
    for (s, l, n) in per_user.values() {
        match auc(s, l)? {
            Some(a) => {
                num += *n as f64 * a;
                den += *n as f64;
                n_users += 1;
            }
            None => n_excluded += 1,
        }
    }
    if n_users == 0 {
        return Err(Error::NoEligibleUser);
    }
    Ok(GaucResult {
        value: num / den,
        n_users,
        n_excluded,
    })
}

/// Fraction of sessions whose true intent is among the first three shown.
pub fn ihr(top3: &[Vec<u64>], truth: &[u64]) -> Result<f64> {
    if top3.len() != truth.len() {
        return Err(Error::LengthMismatch(format!("{} lists for {} true intents", top3.len(), truth.len())));
    }
    if truth.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    let hits = top3
        .iter()
        .zip(truth)
        .filter(|(l, t)| l.iter().take(3).any(|x| x == *t))
        .count();
    Ok(hits as f64 / truth.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub gauc: f64,
    pub recall_at_3: f64,
    pub recall_at_5: f64,
    pub ndcg_at_3: f64,
    pub ndcg_at_5: f64,
    pub mrr: f64,
    pub ihr: Option<f64>,
    pub n_impressions: usize,
    pub n_users: usize,
    /// Impressions skipped because nothing in them was relevant.
    pub n_no_relevant: usize,
    /// Users left out of GAUC for having single-class labels.
    pub n_gauc_excluded: usize,
    pub seed: u64,
    pub label: String,
}

pub const CSV_HEADER: &str = "gauc,r3,r5,n3,n5,mrr,ihr,n_impressions,n_users,seed,label";

impl MetricReport {
    pub fn csv_row(&self) -> String {
        let ihr = self.ihr.map(|v| format!("{v:.10}")).unwrap_or_default();
        format!(
            "{:.10},{:.10},{:.10},{:.10},{:.10},{:.10},{},{},{},{},{}",
            self.gauc,
            self.recall_at_3,
            self.recall_at_5,
            self.ndcg_at_3,
            self.ndcg_at_5,
            self.mrr,
            ihr,
            self.n_impressions,
            self.n_users,
            self.seed,
            self.label
        )
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        match name {
            "gauc" => Some(self.gauc),
            "r3" => Some(self.recall_at_3),
            "r5" => Some(self.recall_at_5),
            "n3" => Some(self.ndcg_at_3),
            "n5" => Some(self.ndcg_at_5),
            "mrr" => Some(self.mrr),
            "ihr" => self.ihr,
            _ => None,
        }
    }
}

pub const METRIC_COLUMNS: [&str; 7] = ["gauc", "r3", "r5", "n3", "n5", "mrr", "ihr"];

/// One scored impression ready for evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredImpression {
    pub user_id: u64,
    pub candidates: Vec<u64>,
    pub scores: Vec<f64>,
    pub labels: Vec<f64>,
    pub true_intent: Option<u64>,
}

/// Aggregates ranking metrics in input order, so results are bitwise
/// reproducible for a fixed impression order.
pub fn evaluate(items: &[ScoredImpression], seed: u64, label: &str) -> Result<MetricReport> {
    if items.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    let mut sums = [0.0; 5];
    let mut n = 0usize;
    let mut n_no_relevant = 0usize;
    let mut tops = Vec::new();
    let mut truths = Vec::new();
    let mut all_truth = true;
    for it in items {
        let order = rank_order(&it.scores, &it.candidates)?;
        match it.true_intent {
            Some(t) => {
                tops.push(order.iter().take(3).map(|&i| it.candidates[i]).collect::<Vec<_>>());
                truths.push(t);
            }
            None => all_truth = false,
        }
        let vals = [
            recall_at_k(&order, &it.labels, 3),
            recall_at_k(&order, &it.labels, 5),
            ndcg_at_k(&order, &it.labels, 3),
            ndcg_at_k(&order, &it.labels, 5),
            mrr(&order, &it.labels),
        ];
        if matches!(vals[0], Err(Error::NoRelevant)) {
            n_no_relevant += 1;
            continue;
        }
        for (s, v) in sums.iter_mut().zip(vals) {
            *s += v?;
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::NoRelevant);
    }
    let groups: Vec<(u64, &[f64], &[f64])> = items
        .iter()
        .map(|it| (it.user_id, it.scores.as_slice(), it.labels.as_slice()))
        .collect();
    let g = gauc(&groups)?;
    let mut users: Vec<u64> = items.iter().map(|i| i.user_id).collect();
    users.sort_unstable();
    users.dedup();
    let m = n as f64;
    Ok(MetricReport {
        gauc: g.value,
        recall_at_3: sums[0] / m,
        recall_at_5: sums[1] / m,
        ndcg_at_3: sums[2] / m,
        ndcg_at_5: sums[3] / m,
        mrr: sums[4] / m,
        ihr: if all_truth { Some(ihr(&tops, &truths)?) } else { None },
        n_impressions: n,
        n_users: users.len(),
        n_no_relevant,
        n_gauc_excluded: g.n_excluded,
        seed,
        label: label.into(),
    })
}

/// Per-impression NDCG@k for a single scored list.
pub fn list_ndcg(scores: &[f64], ids: &[u64], labels: &[f64], k: usize) -> Result<f64> {
    let order = rank_order(scores, ids)?;
    ndcg_at_k(&order, labels, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn lab(v: &[u8]) -> Vec<f64> {
        v.iter().map(|x| f64::from(*x)).collect()
    }

    #[test]
    fn recall_examples() {
        let order: Vec<usize> = (0..6).collect();
        assert_eq!(recall_at_k(&order, &lab(&[0, 1, 0, 0, 0, 0]), 3).unwrap(), 1.0);
        assert_eq!(recall_at_k(&order, &lab(&[0, 0, 0, 1, 0, 0]), 3).unwrap(), 0.0);
        assert_eq!(recall_at_k(&order, &lab(&[0, 1, 0, 0, 1, 0]), 3).unwrap(), 0.5);
        assert_eq!(recall_at_k(&order, &lab(&[0; 6]), 3), Err(Error::NoRelevant));
    }

    #[test]
    fn ndcg_examples() {
        let order: Vec<usize> = (0..5).collect();
        assert_eq!(ndcg_at_k(&order, &lab(&[1, 0, 0, 0, 0]), 3).unwrap(), 1.0);
        assert!((ndcg_at_k(&order, &lab(&[0, 0, 1, 0, 0]), 3).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(ndcg_at_k(&order, &lab(&[0, 0, 0, 1, 0]), 3).unwrap(), 0.0);
    }

    #[test]
    fn mrr_examples() {
        let order: Vec<usize> = (0..5).collect();
        assert_eq!(mrr(&order, &lab(&[1, 0, 0, 0, 0])).unwrap(), 1.0);
        assert_eq!(mrr(&order, &lab(&[0, 1, 0, 0, 0])).unwrap(), 0.5);
        assert!((mrr(&order, &lab(&[0, 0, 1, 0, 1])).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn gauc_examples() {
        let s = [0.9, 0.8, 0.1];
        let l = lab(&[1, 1, 0]);
        assert_eq!(gauc(&[(1, &s, &l)]).unwrap().value, 1.0);
        let inv = lab(&[0, 0, 1]);
        assert_eq!(gauc(&[(1, &s, &inv)]).unwrap().value, 0.0);
        let tied = [0.5, 0.5];
        let l2 = lab(&[1, 0]);
        let r = gauc(&[(1, &s, &l), (1, &s, &l), (2, &tied, &l2)]).unwrap();
        assert!((r.value - 5.0 / 6.0).abs() < 1e-15);
        let single = lab(&[1, 1, 1]);
        assert_eq!(gauc(&[(3, &s, &single)]), Err(Error::NoEligibleUser));
        let r = gauc(&[(1, &s, &l), (3, &s, &single)]).unwrap();
        assert_eq!(r.n_excluded, 1);
    }

    #[test]
    fn ihr_examples() {
        let lists = vec![vec![1, 2, 3]; 5];
        assert_eq!(ihr(&lists, &[1, 2, 3, 1, 2]).unwrap(), 1.0);
        assert_eq!(ihr(&lists, &[9; 5]).unwrap(), 0.0);
        assert!((ihr(&lists, &[1, 2, 3, 9, 9]).unwrap() - 0.6).abs() < 1e-15);
        assert!(ihr(&lists, &[1]).is_err());
    }

    #[test]
    fn tie_break_by_id() {
        assert_eq!(rank_order(&[0.5, 0.5, 0.9], &[7, 3, 10]).unwrap(), vec![2, 1, 0]);
        assert_eq!(rank_order(&[], &[]), Err(Error::EmptyCandidates));
    }

    #[test]
    fn csv_row_has_every_column() {
        let r = MetricReport {
            gauc: 0.5,
            recall_at_3: 1.0,
            recall_at_5: 1.0,
            ndcg_at_3: 0.5,
            ndcg_at_5: 0.5,
            mrr: 0.5,
            ihr: None,
            n_impressions: 2,
            n_users: 2,
            n_no_relevant: 0,
            n_gauc_excluded: 0,
            seed: 4,
            label: "x".into(),
        };
        assert_eq!(r.csv_row().split(',').count(), CSV_HEADER.split(',').count());
    }
}
