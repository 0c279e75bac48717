//! Reward scoring of candidate queries and Best-of-N selection.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::diffcore::ops::cosine_sim;
use crate::error::{Error, Result};
use crate::metrics::ndcg_at_k;
use crate::qerec::Scorer;
use crate::reasoner::{QueryCandidate, TeacherName};
use crate::synthgen::ImpressionRecord;

/// Strict-improvement margin for preference pairs.
pub const PAIR_EPSILON: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    V1,
    V2,
    V3,
    V4,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::V1, Strategy::V2, Strategy::V3, Strategy::V4];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::V1 => "v1",
            Strategy::V2 => "v2",
            Strategy::V3 => "v3",
            Strategy::V4 => "v4",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "v1" | "V1" => Ok(Strategy::V1),
            "v2" | "V2" => Ok(Strategy::V2),
            "v3" | "V3" => Ok(Strategy::V3),
            "v4" | "V4" => Ok(Strategy::V4),
            other => Err(Error::InvalidConfig(format!("unknown strategy {other}"))),
        }
    }
}

/// Which candidate V4 keeps when the diversity and accuracy picks differ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum V4Preference {
    #[default]
    Cosine,
    Diversity,
}

/// One training sample with a candidate from every source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub user_id: u64,
    pub context: Vec<u32>,
    pub golden_intent: u64,
    pub golden_embedding: Vec<f64>,
    pub candidates: Vec<QueryCandidate>,
}

impl CandidateSet {
    /// Checks that every source appears exactly once and is scored.
    pub fn validate(&self) -> Result<()> {
        for name in TeacherName::PRIORITY {
            let n = self.candidates.iter().filter(|c| c.source == name).count();
            if n != 1 {
                return Err(Error::MissingTeacher(format!(
                    "{} appears {n} times for user {}",
                    name.as_str(),
                    self.user_id
                )));
            }
        }
        if self.candidates.len() != TeacherName::PRIORITY.len() {
            return Err(Error::MissingTeacher(format!("{} candidates", self.candidates.len())));
        }
        if let Some(c) = self.candidates.iter().find(|c| c.ndcg.is_none()) {
            return Err(Error::MissingTeacher(format!("{} is unscored", c.source.as_str())));
        }
        Ok(())
    }

    pub fn get(&self, name: TeacherName) -> Result<&QueryCandidate> {
        self.candidates
            .iter()
            .find(|c| c.source == name)
            .ok_or_else(|| Error::MissingTeacher(String::from(name.as_str())))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionOutcome {
    pub kept: bool,
    pub winner: Option<QueryCandidate>,
    pub losers: Vec<QueryCandidate>,
    pub strategy: Strategy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub user_id: u64,
    pub context: Vec<u32>,
    pub winner_tokens: Vec<u32>,
    pub winner_embedding: Vec<f64>,
    pub loser_tokens: Vec<u32>,
    pub loser_embedding: Vec<f64>,
    pub ndcg_w: f64,
    pub ndcg_l: f64,
    pub strategy: Strategy,
}

/// Levenshtein distance over token ids.
pub fn edit_distance(a: &[u32], b: &[u32]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        core::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// NDCG@k of the ranking induced by feeding `embedding` through the query
/// tower. `z_u` is the user-tower output for the impression's user.
pub fn reward_score(scorer: &Scorer, z_u: &[f64], impression: &ImpressionRecord, embedding: &[f64], k: usize) -> Result<f64> {
    let z_q = scorer.model().query_tower(embedding)?;
    let list = scorer.rank_vectors(impression.user_id, z_u, Some(&z_q), &impression.candidates)?;
    let labels: Vec<f64> = impression.labels.iter().map(|l| f64::from(*l)).collect();
    ndcg_at_k(&list.ranking, &labels, k)
}

fn ndcg(c: &QueryCandidate) -> f64 {
    c.ndcg.unwrap_or(f64::NEG_INFINITY)
}

/// Highest key wins; ties go to the higher-priority source.
fn argmax_by_priority<'a, F>(cands: impl Iterator<Item = &'a QueryCandidate>, key: F) -> Option<&'a QueryCandidate>
where
    F: Fn(&QueryCandidate) -> f64,
{
    let mut best: Option<(&QueryCandidate, f64)> = None;
    for c in cands {
        let k = key(c);
        best = match best {
            None => Some((c, k)),
            Some((b, bk)) if k > bk || (k == bk && c.source.rank() < b.source.rank()) => Some((c, k)),
            keep => keep,
        };
    }
    best.map(|(c, _)| c)
}

fn outcome(set: &CandidateSet, winner: Option<&QueryCandidate>, kept: bool, strategy: Strategy) -> SelectionOutcome {
    match (kept, winner) {
        (true, Some(w)) => {
            let losers = set
                .candidates
                .iter()
                .filter(|c| c.source != w.source && ndcg(c) < ndcg(w))
                .cloned()
                .collect();
            SelectionOutcome {
                kept: true,
                winner: Some(w.clone()),
                losers,
                strategy,
            }
        }
        _ => SelectionOutcome {
            kept: false,
            winner: None,
            losers: Vec::new(),
            strategy,
        },
    }
}

/// The diversity pick (largest edit distance from the baseline) and the
/// accuracy pick (largest cosine to the golden intent), both over the
/// non-baseline candidates.
pub fn diversity_and_accuracy(set: &CandidateSet) -> Result<(&QueryCandidate, &QueryCandidate)> {
    let base = set.get(TeacherName::Qwen3Baseline)?;
    let others = || set.candidates.iter().filter(|c| c.source != TeacherName::Qwen3Baseline);
    let mut cos = BTreeMap::new();
    for c in others() {
        cos.insert(c.source, cosine_sim(&c.embedding, &set.golden_embedding)?);
    }
    let d = argmax_by_priority(others(), |c| edit_distance(&c.tokens, &base.tokens) as f64)
        .ok_or_else(|| Error::MissingTeacher("no external teacher".into()))?;
    let c = argmax_by_priority(others(), |c| cos[&c.source]).ok_or_else(|| Error::MissingTeacher("no external teacher".into()))?;
    Ok((d, c))
}

pub fn select(set: &CandidateSet, strategy: Strategy, v4: V4Preference) -> Result<SelectionOutcome> {
    set.validate()?;
    let best = argmax_by_priority(set.candidates.iter(), ndcg);
    Ok(match strategy {
        Strategy::V1 => outcome(set, best, true, strategy),
        Strategy::V2 => {
            let kept = best.is_some_and(|b| b.source != TeacherName::Qwen3Baseline);
            outcome(set, best, kept, strategy)
        }
        Strategy::V3 => {
            let (d, c) = diversity_and_accuracy(set)?;
            outcome(set, Some(c), d.source == c.source, strategy)
        }
        Strategy::V4 => {
            let (d, c) = diversity_and_accuracy(set)?;
            let w = if d.source == c.source {
                d
            } else {
                match v4 {
                    V4Preference::Cosine => c,
                    V4Preference::Diversity => d,
                }
            };
            outcome(set, Some(w), true, strategy)
        }
    })
}

/// One pair per (winner, loser) whose reward gap exceeds [`PAIR_EPSILON`].
pub fn build_preference_dataset(selected: &[(CandidateSet, SelectionOutcome)]) -> Vec<PreferencePair> {
    let mut out = Vec::new();
    for (set, sel) in selected {
        let Some(w) = sel.winner.as_ref().filter(|_| sel.kept) else {
            continue;
        };
        for l in &sel.losers {
            if ndcg(w) - ndcg(l) > PAIR_EPSILON {
                out.push(PreferencePair {
                    user_id: set.user_id,
                    context: set.context.clone(),
                    winner_tokens: w.tokens.clone(),
                    winner_embedding: w.embedding.clone(),
                    loser_tokens: l.tokens.clone(),
                    loser_embedding: l.embedding.clone(),
                    ndcg_w: ndcg(w),
                    ndcg_l: ndcg(l),
                    strategy: sel.strategy,
                });
            }
        }
    }
    out
}

/// Kept/discarded counts and how often each source won.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SelectionStats {
    pub kept: usize,
    pub discarded: usize,
    pub wins: BTreeMap<String, usize>,
    pub mean_reward: BTreeMap<String, f64>,
}

pub fn selection_stats(sets: &[CandidateSet], outcomes: &[SelectionOutcome]) -> SelectionStats {
    let mut s = SelectionStats::default();
    for o in outcomes {
        if o.kept {
            s.kept += 1;
            if let Some(w) = &o.winner {
                *s.wins.entry(String::from(w.source.as_str())).or_default() += 1;
            }
        } else {
            s.discarded += 1;
        }
    }
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for c in sets.iter().flat_map(|s| &s.candidates) {
        if let Some(r) = c.ndcg {
            let key = String::from(c.source.as_str());
            *s.mean_reward.entry(key.clone()).or_default() += r;
            *counts.entry(key).or_default() += 1;
        }
    }
    for (k, v) in s.mean_reward.iter_mut() {
        *v /= counts[k] as f64;
    }
    s
}

#[cfg(test)]
mod tests;
