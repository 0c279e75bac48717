//! Brute-force reference implementations of the ranking metrics, written
//! independently of the library (selection ranking, pair counting and
//! exhaustive ideal orderings).

#![allow(dead_code)]

use std::collections::BTreeMap;

use rgalign_core::metrics::ScoredImpression;
use rgalign_core::rng::Rng;

/// Repeatedly takes the highest remaining score, lowest id on ties.
pub fn rank(scores: &[f64], ids: &[u64]) -> Vec<usize> {
    let mut left: Vec<usize> = (0..scores.len()).collect();
    let mut out = Vec::new();
    while !left.is_empty() {
        let mut best = 0;
        for j in 1..left.len() {
            let (a, b) = (left[j], left[best]);
            if scores[a] > scores[b] || (scores[a] == scores[b] && ids[a] < ids[b]) {
                best = j;
            }
        }
        out.push(left.remove(best));
    }
    out
}

pub fn recall(order: &[usize], labels: &[f64], k: usize) -> f64 {
    let total = labels.iter().filter(|l| **l > 0.0).count();
    let mut hits = 0;
    for (p, i) in order.iter().enumerate() {
        if p < k && labels[*i] > 0.0 {
            hits += 1;
        }
    }
    hits as f64 / total as f64
}

fn dcg(gains: &[f64], k: usize) -> f64 {
    let mut s = 0.0;
    for (p, g) in gains.iter().enumerate().take(k) {
        s += g / ((p + 2) as f64).log2();
    }
    s
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

/// The ideal DCG is the maximum over every ordering of the list.
pub fn ndcg(order: &[usize], labels: &[f64], k: usize, perms: &[Vec<usize>]) -> f64 {
    let got: Vec<f64> = order.iter().map(|&i| labels[i]).collect();
    let ideal = perms
        .iter()
        .map(|p| dcg(&p.iter().map(|&i| labels[i]).collect::<Vec<_>>(), k))
        .fold(f64::MIN, f64::max);
    dcg(&got, k) / ideal
}

pub fn mrr(order: &[usize], labels: &[f64]) -> f64 {
    for (p, i) in order.iter().enumerate() {
        if labels[*i] > 0.0 {
            return 1.0 / (p + 1) as f64;
        }
    }
    0.0
}

/// Fraction of (positive, negative) pairs ordered correctly, ties half.
pub fn auc(scores: &[f64], labels: &[f64]) -> Option<f64> {
    let (mut good, mut pairs) = (0.0, 0.0);
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] > 0.0 && labels[j] <= 0.0 {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    good += 1.0;
                } else if scores[i] == scores[j] {
                    good += 0.5;
                }
            }
        }
    }
    (pairs > 0.0).then(|| good / pairs)
}

/// Per-user AUC over the user's pooled impressions, weighted by the
/// user's impression count.
pub fn gauc(items: &[ScoredImpression]) -> Option<f64> {
    let mut by_user: BTreeMap<u64, (Vec<f64>, Vec<f64>, f64)> = BTreeMap::new();
    for it in items {
        let e = by_user.entry(it.user_id).or_default();
        e.0.extend(&it.scores);
        e.1.extend(&it.labels);
        e.2 += 1.0;
    }
    let (mut num, mut den) = (0.0, 0.0);
    for (s, l, n) in by_user.values() {
        if let Some(a) = auc(s, l) {
            num += n * a;
            den += n;
        }
    }
    (den > 0.0).then(|| num / den)
}

pub fn ihr(items: &[ScoredImpression]) -> f64 {
    let mut hits = 0.0;
    for it in items {
        let order = rank(&it.scores, &it.candidates);
        let t = it.true_intent.unwrap();
        if order.iter().take(3).any(|&i| it.candidates[i] == t) {
            hits += 1.0;
        }
    }
    hits / items.len() as f64
}

/// Oracle values in the report's column order: gauc, r3, r5, n3, n5, mrr,
/// ihr. Impressions without a relevant label are skipped for the list
/// metrics, as in the library.
pub fn report(items: &[ScoredImpression], perms: &[Vec<Vec<usize>>]) -> [f64; 7] {
    let mut sums = [0.0; 5];
    let mut n = 0.0;
    for it in items {
        if !it.labels.iter().any(|l| *l > 0.0) {
            continue;
        }
        let order = rank(&it.scores, &it.candidates);
        let p = &perms[it.labels.len()];
        sums[0] += recall(&order, &it.labels, 3);
        sums[1] += recall(&order, &it.labels, 5);
        sums[2] += ndcg(&order, &it.labels, 3, p);
        sums[3] += ndcg(&order, &it.labels, 5, p);
        sums[4] += mrr(&order, &it.labels);
        n += 1.0;
    }
    [
        gauc(items).unwrap(),
        sums[0] / n,
        sums[1] / n,
        sums[2] / n,
        sums[3] / n,
        sums[4] / n,
        ihr(items),
    ]
}

/// All orderings for list lengths 0..=8, indexed by length.
pub fn all_permutations() -> Vec<Vec<Vec<usize>>> {
    (0..=8).map(permutations).collect()
}

/// A random evaluation instance: up to 6 impressions over up to 3 users,
/// lists of length 1..=8. Scores are drawn from a coarse grid half the time
/// so ties occur; labels are binary or graded. The first impression always
/// mixes classes so every instance is evaluable.
pub fn instance(seed: u64) -> Vec<ScoredImpression> {
    let mut rng = Rng::new(seed);
    let n_imp = 1 + rng.below(6);
    let coarse = rng.bernoulli(0.5);
    let graded = rng.bernoulli(0.3);
    (0..n_imp)
        .map(|k| {
            let len = if k == 0 { 2 + rng.below(7) } else { 1 + rng.below(8) };
            let mut ids: Vec<u64> = (0..40).collect();
            rng.shuffle(&mut ids);
            let candidates: Vec<u64> = ids[..len].to_vec();
            let scores: Vec<f64> = (0..len)
                .map(|_| if coarse { rng.below(4) as f64 * 0.25 } else { rng.uniform_range(-1.0, 1.0) })
                .collect();
            let mut labels: Vec<f64> = (0..len)
                .map(|_| {
                    if !rng.bernoulli(0.35) {
                        0.0
                    } else if graded {
                        1.0 + rng.below(3) as f64
                    } else {
                        1.0
                    }
                })
                .collect();
            if k == 0 {
                labels[0] = 1.0;
                labels[1] = 0.0;
            }
            let true_intent = Some(candidates[rng.below(len)]);
            ScoredImpression {
                user_id: if k == 0 { 0 } else { rng.below(3) as u64 },
                candidates,
                scores,
                labels,
                true_intent,
            }
        })
        .collect()
}
