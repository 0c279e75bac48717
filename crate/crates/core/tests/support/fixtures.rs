//! Constructed candidate sets for the selection strategies, with the
//! expected outcomes derived independently of the library.

#![allow(dead_code)]

use rgalign_core::bestofn::{build_preference_dataset, select, CandidateSet, SelectionOutcome, Strategy, V4Preference};
use rgalign_core::reasoner::{QueryCandidate, TeacherName};
use rgalign_core::rng::Rng;

const PRIORITY: [TeacherName; 4] = [
    TeacherName::CompassMax,
    TeacherName::Gemini,
    TeacherName::GPT5,
    TeacherName::Qwen3Baseline,
];

/// Few directions, so cosine ties with the golden vector are common.
const DIRS: [[f64; 3]; 4] = [[1.0, 0.0, 0.0], [0.6, 0.8, 0.0], [0.0, 1.0, 0.0], [0.6, 0.0, 0.8]];

fn set_from(id: u64, ndcgs: [f64; 4], tokens: [Vec<u32>; 4], dirs: [usize; 4]) -> CandidateSet {
    CandidateSet {
        user_id: id,
        context: vec![3, 4, 5],
        golden_intent: 0,
        golden_embedding: DIRS[0].to_vec(),
        candidates: (0..4)
            .map(|k| QueryCandidate {
                source: PRIORITY[k],
                tokens: tokens[k].clone(),
                embedding: DIRS[dirs[k]].to_vec(),
                ndcg: Some(ndcgs[k]),
            })
            .collect(),
    }
}

/// 50 sets: ten hand-built edge cases (all tied, baseline best, ties at the
/// top between each pair of sources, agreeing and disagreeing V3 picks),
/// then 40 drawn from coarse grids so ties stay frequent.
pub fn fixtures() -> Vec<CandidateSet> {
    let t = |v: &[u32]| v.to_vec();
    let base = t(&[1, 2, 3]);
    let mut out = vec![
        set_from(0, [0.5; 4], [t(&[1, 2, 3]), t(&[1, 2, 3]), t(&[1, 2, 3]), base.clone()], [0, 0, 0, 0]),
        set_from(1, [0.2, 0.4, 0.6, 0.9], [t(&[4]), t(&[1, 2]), t(&[1, 2, 4]), base.clone()], [1, 2, 0, 3]),
        set_from(2, [0.8, 0.8, 0.3, 0.1], [t(&[7, 8, 9, 10]), t(&[1, 2, 4]), t(&[2]), base.clone()], [0, 1, 2, 0]),
        set_from(3, [0.3, 0.8, 0.8, 0.1], [t(&[1, 2]), t(&[5, 6, 7]), t(&[5, 6, 7]), base.clone()], [2, 1, 1, 0]),
        set_from(4, [0.3, 0.1, 0.8, 0.8], [t(&[1]), t(&[2]), t(&[9, 9, 9, 9]), base.clone()], [3, 2, 0, 0]),
        set_from(5, [0.8, 0.2, 0.2, 0.8], [t(&[9, 9]), t(&[9, 9]), t(&[9, 9]), base.clone()], [1, 1, 1, 0]),
        set_from(6, [0.9, 0.6, 0.7, 0.5], [t(&[7, 8, 9, 10]), t(&[1, 2, 4]), t(&[1, 2, 3, 4]), base.clone()], [1, 1, 0, 2]),
        set_from(7, [0.9, 0.6, 0.7, 0.5], [t(&[7, 8, 9, 10]), t(&[1, 2, 4]), t(&[1, 2, 3, 4]), base.clone()], [0, 1, 1, 2]),
        set_from(8, [0.0, 0.0, 0.0, 1.0], [t(&[4, 5, 6]), t(&[4, 5, 6]), t(&[4, 5, 6]), base.clone()], [2, 2, 2, 2]),
        set_from(9, [1.0, 0.0, 1.0, 0.0], [t(&[1, 2, 3, 4, 5]), t(&[3]), t(&[6, 6, 6, 6, 6]), base],
            [3, 0, 3, 1]),
    ];
    let mut rng = Rng::new(0xF1C5);
    let grid = [0.2, 0.5, 0.8];
    for id in 10..50u64 {
        let ndcgs = [0; 4].map(|_| grid[rng.below(3)]);
        let tokens = [0; 4].map(|_| (0..1 + rng.below(5)).map(|_| 1 + rng.below(6) as u32).collect::<Vec<_>>());
        let dirs = [0; 4].map(|_| rng.below(4));
        out.push(set_from(id, ndcgs, tokens, dirs));
    }
    out
}

fn levenshtein(a: &[u32], b: &[u32]) -> usize {
    if a.is_empty() || b.is_empty() {
        return a.len() + b.len();
    }
    let sub = levenshtein(&a[1..], &b[1..]) + usize::from(a[0] != b[0]);
    sub.min(levenshtein(&a[1..], b) + 1).min(levenshtein(a, &b[1..]) + 1)
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let n = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (n(a) * n(b))
}

/// First source in priority order that attains the maximum of `key`.
fn first_max(set: &CandidateSet, sources: &[TeacherName], key: impl Fn(&QueryCandidate) -> f64) -> TeacherName {
    let get = |s: TeacherName| set.candidates.iter().find(|c| c.source == s).unwrap();
    let top = sources.iter().map(|s| key(get(*s))).fold(f64::MIN, f64::max);
    *sources.iter().find(|s| key(get(**s)) == top).unwrap()
}

fn winner(o: &SelectionOutcome) -> Option<TeacherName> {
    o.winner.as_ref().filter(|_| o.kept).map(|w| w.source)
}

/// Every rule the strategies must satisfy on `set`, one message per broken
/// rule.
pub fn violations(set: &CandidateSet) -> Vec<String> {
    let mut bad = Vec::new();
    let run = |s| select(set, s, V4Preference::Cosine).unwrap();
    let (o1, o2, o3, o4) = (run(Strategy::V1), run(Strategy::V2), run(Strategy::V3), run(Strategy::V4));
    let id = set.user_id;

    let best = first_max(set, &PRIORITY, |c| c.ndcg.unwrap());
    if winner(&o1) != Some(best) {
        bad.push(format!("set {id}: V1 picked {:?}, priority tie-break gives {best:?}", winner(&o1)));
    }
    let v2_expect = (best != TeacherName::Qwen3Baseline).then_some(best);
    if winner(&o2) != v2_expect {
        bad.push(format!("set {id}: V2 kept {:?}, expected {v2_expect:?}", winner(&o2)));
    }

    let teachers = &PRIORITY[..3];
    let base_tokens = &set.candidates[3].tokens;
    let d = first_max(set, teachers, |c| levenshtein(&c.tokens, base_tokens) as f64);
    let a = first_max(set, teachers, |c| cos(&c.embedding, &set.golden_embedding));
    let v3_expect = (d == a).then_some(a);
    if winner(&o3) != v3_expect {
        bad.push(format!("set {id}: V3 kept {:?}, expected {v3_expect:?}", winner(&o3)));
    }
    if winner(&o4) != Some(a) {
        bad.push(format!("set {id}: V4 picked {:?}, expected {a:?}", winner(&o4)));
    }
    if o3.kept && (!o4.kept || winner(&o3) != winner(&o4)) {
        bad.push(format!("set {id}: V3 sample not contained in V4"));
    }

    for o in [o1, o2, o3, o4] {
        let strategy = o.strategy;
        let w = o.winner.clone();
        let pairs = build_preference_dataset(&[(set.clone(), o.clone())]);
        let expected = match (o.kept, &w) {
            (true, Some(w)) => set
                .candidates
                .iter()
                .filter(|c| c.source != w.source && w.ndcg.unwrap() > c.ndcg.unwrap())
                .count(),
            _ => 0,
        };
        if pairs.len() != expected {
            bad.push(format!("set {id}: {strategy:?} built {} pairs, expected {expected}", pairs.len()));
        }
        for p in &pairs {
            if !(p.ndcg_w > p.ndcg_l) {
                bad.push(format!("set {id}: {strategy:?} pair {} vs {} not strict", p.ndcg_w, p.ndcg_l));
            }
        }
    }
    bad
}
