use super::*;
use crate::qerec::{evaluate_model, train_stage1, QERecConfig};
use crate::rng::Rng;
use crate::synthgen::{generate, GeneratorConfig, Split};
use proptest::prelude::{prop_assert, proptest};

fn cand(source: TeacherName, ndcg: f64, tokens: &[u32], embedding: &[f64]) -> QueryCandidate {
    QueryCandidate {
        source,
        tokens: tokens.to_vec(),
        embedding: embedding.to_vec(),
        ndcg: Some(ndcg),
    }
}

fn set(ndcgs: [f64; 4]) -> CandidateSet {
    let e = [1.0, 0.0];
    CandidateSet {
        user_id: 1,
        context: vec![5, 6],
        golden_intent: 3,
        golden_embedding: e.to_vec(),
        candidates: TeacherName::PRIORITY
            .iter()
            .zip(ndcgs)
            .map(|(n, r)| cand(*n, r, &[10, 11], &e))
            .collect(),
    }
}

#[test]
fn v1_priority_tie_break() {
    let s = set([0.8, 0.8, 0.6, 0.5]);
    let o = select(&s, Strategy::V1, V4Preference::Cosine).unwrap();
    assert!(o.kept);
    assert_eq!(o.winner.unwrap().source, TeacherName::CompassMax);
    assert_eq!(o.losers.len(), 2);
    assert!(o.losers.iter().all(|l| l.source != TeacherName::Gemini));
}

#[test]
fn v2_discards_baseline_wins() {
    let s = set([0.8, 0.7, 0.6, 0.9]);
    let o = select(&s, Strategy::V2, V4Preference::Cosine).unwrap();
    assert!(!o.kept);
    let v1 = select(&s, Strategy::V1, V4Preference::Cosine).unwrap();
    assert_eq!(v1.winner.unwrap().source, TeacherName::Qwen3Baseline);
    assert!(build_preference_dataset(&[(s, o)]).is_empty());
}

fn v3_fixture(agree: bool) -> CandidateSet {
    let golden = [1.0, 0.0, 0.0];
    let base = cand(TeacherName::Qwen3Baseline, 0.5, &[1, 2, 3], &[0.0, 0.0, 1.0]);
    // CompassMax is far in edit distance; accuracy goes to CompassMax or GPT5
    let cm = cand(TeacherName::CompassMax, 0.9, &[7, 8, 9, 10], &[0.9, 0.1, 0.0]);
    let gm = cand(TeacherName::Gemini, 0.6, &[1, 2, 4], &[0.5, 0.5, 0.0]);
    let best_cos = if agree { [0.8, 0.6, 0.0] } else { [1.0, 0.0, 0.0] };
    let gp = cand(TeacherName::GPT5, 0.7, &[1, 2, 3, 4], &best_cos);
    CandidateSet {
        user_id: 2,
        context: vec![3],
        golden_intent: 0,
        golden_embedding: golden.to_vec(),
        candidates: vec![cm, gm, gp, base],
    }
}

#[test]
fn v3_agreement_and_disagreement() {
    let s = v3_fixture(true);
    let (d, c) = diversity_and_accuracy(&s).unwrap();
    assert_eq!(d.source, TeacherName::CompassMax);
    assert_eq!(c.source, TeacherName::CompassMax);
    let o = select(&s, Strategy::V3, V4Preference::Cosine).unwrap();
    assert!(o.kept);
    assert_eq!(o.winner.unwrap().source, TeacherName::CompassMax);

    let s = v3_fixture(false);
    let (d, c) = diversity_and_accuracy(&s).unwrap();
    assert_eq!((d.source, c.source), (TeacherName::CompassMax, TeacherName::GPT5));
    assert!(!select(&s, Strategy::V3, V4Preference::Cosine).unwrap().kept);
    let o4 = select(&s, Strategy::V4, V4Preference::Cosine).unwrap();
    assert!(o4.kept);
    assert_eq!(o4.winner.as_ref().unwrap().source, TeacherName::GPT5);
    // the V4 winner here is not the reward maximum; losers are only the
    // strictly worse ones
    assert_eq!(o4.losers.len(), 2);
    let o4d = select(&s, Strategy::V4, V4Preference::Diversity).unwrap();
    assert_eq!(o4d.winner.unwrap().source, TeacherName::CompassMax);
}

#[test]
fn edit_distance_examples() {
    assert_eq!(edit_distance(&[1, 2, 3], &[1, 2, 3]), 0);
    assert_eq!(edit_distance(&[], &[4, 5, 6, 7]), 4);
    // k i t t e n -> s i t t i n g
    let kitten = [11, 9, 20, 20, 5, 14];
    let sitting = [19, 9, 20, 20, 9, 14, 7];
    assert_eq!(edit_distance(&kitten, &sitting), 3);
}

#[test]
fn pair_construction() {
    let s = set([0.7, 0.7, 0.7, 0.7]);
    let o = select(&s, Strategy::V1, V4Preference::Cosine).unwrap();
    assert!(build_preference_dataset(&[(s, o)]).is_empty());
    let s = set([0.9, 0.9, 0.6, 0.5]);
    let o = select(&s, Strategy::V1, V4Preference::Cosine).unwrap();
    let pairs = build_preference_dataset(&[(s, o)]);
    assert_eq!(pairs.len(), 2);
    assert!(pairs.iter().all(|p| p.ndcg_w > p.ndcg_l));
    assert_eq!(pairs[0].context, vec![5, 6]);
}

#[test]
fn invalid_sets_rejected() {
    let mut s = set([0.1, 0.2, 0.3, 0.4]);
    s.candidates.pop();
    assert!(matches!(select(&s, Strategy::V1, V4Preference::Cosine), Err(Error::MissingTeacher(_))));
    let mut s = set([0.1, 0.2, 0.3, 0.4]);
    s.candidates[1].ndcg = None;
    assert!(select(&s, Strategy::V1, V4Preference::Cosine).is_err());
}

fn random_set(rng: &mut Rng) -> CandidateSet {
    let levels = [0.0, 0.5, 0.63, 1.0];
    let golden = rng.unit_vector(4);
    CandidateSet {
        user_id: rng.next_u64() % 100,
        context: vec![3, 4],
        golden_intent: 0,
        golden_embedding: golden,
        candidates: TeacherName::PRIORITY
            .iter()
            .map(|n| {
                let len = 1 + rng.below(5);
                let toks: Vec<u32> = (0..len).map(|_| 3 + rng.below(4) as u32).collect();
                cand(*n, levels[rng.below(4)], &toks, &rng.unit_vector(4))
            })
            .collect(),
    }
}

proptest! {
    #[test]
    fn strategy_containments(seed in 0u64..5000) {
        let mut rng = Rng::new(seed);
        let s = random_set(&mut rng);
        let o1 = select(&s, Strategy::V1, V4Preference::Cosine).unwrap();
        let o2 = select(&s, Strategy::V2, V4Preference::Cosine).unwrap();
        let o3 = select(&s, Strategy::V3, V4Preference::Cosine).unwrap();
        let o4 = select(&s, Strategy::V4, V4Preference::Cosine).unwrap();
        prop_assert!(o1.kept && o4.kept);
        if o2.kept {
            prop_assert!(o2.winner == o1.winner);
            prop_assert!(o2.winner.as_ref().unwrap().source != TeacherName::Qwen3Baseline);
        }
        if o3.kept {
            prop_assert!(o4.kept);
            prop_assert!(o3.winner == o4.winner);
        }
        for o in [&o1, &o2, &o3, &o4] {
            if let Some(w) = &o.winner {
                prop_assert!(o.losers.iter().all(|l| l.source != w.source && l.ndcg.unwrap() < w.ndcg.unwrap()));
            }
        }
        prop_assert!(select(&s, Strategy::V3, V4Preference::Cosine).unwrap() == o3);
        let pairs = build_preference_dataset(&[(s.clone(), o1), (s.clone(), o2), (s.clone(), o3), (s, o4)]);
        prop_assert!(pairs.iter().all(|p| p.ndcg_w - p.ndcg_l > PAIR_EPSILON));
    }
}

#[test]
fn reward_consistency_and_oracle_beats_random() {
    let w = generate(&GeneratorConfig {
        seed: 21,
        ..GeneratorConfig::default()
    })
    .unwrap();
    let qs: BTreeMap<u64, Vec<f64>> = w.users.iter().map(|u| (u.user_id, u.latent_need.clone())).collect();
    let train: Vec<_> = w.impressions.iter().filter(|i| i.split == Split::Train).cloned().collect();
    let cfg = QERecConfig {
        seed: 21,
        ..QERecConfig::default()
    };
    let (m, _) = train_stage1(&cfg, &w.kb, &w.users, &train, Some(&qs)).unwrap();
    let idx = m.build_offline_index(&w.kb).unwrap();
    let sc = Scorer::new(&m, &idx).unwrap();

    let imp = train.iter().find(|i| i.labels.iter().any(|l| *l > 0)).unwrap();
    let user = &w.users[imp.user_id as usize];
    let z_u = m.user_tower(user).unwrap();
    let r = reward_score(&sc, &z_u, imp, &user.latent_need, 3).unwrap();
    let single = evaluate_model(&m, &w.kb, &w.users, core::slice::from_ref(imp), Some(&qs), None, 0, "one").unwrap();
    assert_eq!(r, single.ndcg_at_3);
    assert_eq!(r, reward_score(&sc, &z_u, imp, &user.latent_need, 3).unwrap());

    let mut rng = Rng::new(5);
    let (mut wins, mut n) = (0, 0);
    for imp in train.iter().filter(|i| i.labels.iter().any(|l| *l > 0)).take(1000) {
        n += 1;
        let user = &w.users[imp.user_id as usize];
        let z_u = m.user_tower(user).unwrap();
        let golden = imp.clicked().next().unwrap();
        let oracle = reward_score(&sc, &z_u, imp, &w.kb.get(golden).unwrap().topic_vector, 3).unwrap();
        let random = reward_score(&sc, &z_u, imp, &rng.unit_vector(16), 3).unwrap();
        wins += usize::from(oracle >= random);
    }
    assert_eq!(n, 1000);
    assert!(wins >= 900, "{wins}/{n}");
}


