//! Gradient-check cases for every trained loss on small random models.

#![allow(dead_code)]

use std::collections::BTreeMap;

use rgalign_core::align::{cl_on, dpo_on, joint_on, sft_terms_on, AlignConfig, SftExample};
use rgalign_core::bestofn::{PreferencePair, Strategy};
use rgalign_core::diffcore::{grad_check, GradCheckReport};
use rgalign_core::qerec::{batch_loss_on, QERecConfig, QERecModel, RankingExample};
use rgalign_core::reasoner::ReasonerModel;
use rgalign_core::rng::Rng;
use rgalign_core::synthgen::{generate, GeneratorConfig};

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

/// Loss settings for checks at `H`. tau = 0.05 scales cosine roundoff by
/// 20 in the logits, which swamps gradients below ~1e-6 at h = 1e-5, so the
/// contrastive terms are checked at tau = 0.1 here and at the default tau
/// with h = 1e-4 separately.
pub fn check_config() -> AlignConfig {
    AlignConfig {
        tau: 0.1,
        ..AlignConfig::default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Loss {
    ListNet,
    Sft,
    Dpo,
    Cl,
    Joint,
}

impl Loss {
    pub const ALL: [Loss; 5] = [Loss::ListNet, Loss::Sft, Loss::Dpo, Loss::Cl, Loss::Joint];
}

/// ListNet-KL through the user, intent and query towers plus the
/// confidence predictor, on a reduced-width ranker with dropout off.
fn listnet(seed: u64, h: f64) -> GradCheckReport {
    let w = generate(&GeneratorConfig {
        n_users: 40,
        n_intents: 12,
        list_length: 5,
        dim: 4,
        n_clusters: 4,
        history_max: 3,
        seed: 100 + seed,
        ..GeneratorConfig::default()
    })
    .unwrap();
    let cfg = QERecConfig {
        dim: 4,
        feature_dim: 2,
        hidden: 6,
        conf_hidden: 3,
        dropout: 0.0,
        seed,
        ..QERecConfig::default()
    };
    let m = QERecModel::new(&cfg, &w.kb).unwrap();
    let qs: BTreeMap<u64, Vec<f64>> = w.users.iter().map(|u| (u.user_id, u.latent_need.clone())).collect();
    let exs: Vec<RankingExample> = w
        .impressions
        .iter()
        .filter(|i| i.labels.iter().any(|l| *l > 0) && !w.users[i.user_id as usize].behavior_sequence.is_empty())
        .take(2)
        .map(|imp| RankingExample {
            user: &w.users[imp.user_id as usize],
            impression: imp,
            query: Some(&qs[&imp.user_id]),
        })
        .collect();
    grad_check(m.params(), |t| batch_loss_on(&m, t, &w.kb, &exs, &cfg, None).map(|(l, _)| l), h, TOL).unwrap()
}

fn seq(rng: &mut Rng, lo: usize, hi: usize) -> Vec<u32> {
    let n = lo + rng.below(hi - lo + 1);
    (0..n).map(|_| 3 + rng.below(9) as u32).collect()
}

fn examples(seed: u64, n: usize, dim: usize) -> Vec<SftExample> {
    let mut r = Rng::new(seed);
    (0..n)
        .map(|i| SftExample {
            user_id: i as u64,
            context: seq(&mut r, 3, 6),
            query: seq(&mut r, 2, 4),
            positive: r.unit_vector(dim),
        })
        .collect()
}

fn pairs(seed: u64, n: usize, dim: usize) -> Vec<PreferencePair> {
    let mut r = Rng::new(seed);
    (0..n)
        .map(|i| PreferencePair {
            user_id: i as u64,
            context: seq(&mut r, 3, 6),
            winner_tokens: seq(&mut r, 2, 4),
            winner_embedding: r.unit_vector(dim),
            loser_tokens: seq(&mut r, 2, 4),
            loser_embedding: r.unit_vector(dim),
            ndcg_w: 1.0,
            ndcg_l: 0.5,
            strategy: Strategy::V1,
        })
        .collect()
}

/// Runs one case. Reasoner losses use a vocab-12, width-4 policy with
/// NEFTune off; `cfg` supplies tau, beta and the lambdas.
pub fn check(loss: Loss, seed: u64, cfg: &AlignConfig, h: f64) -> GradCheckReport {
    if loss == Loss::ListNet {
        return listnet(seed, h);
    }
    let dim = 4;
    let m = ReasonerModel::new(12, dim, 100 + seed).unwrap();
    let batch = examples(200 + seed, 3, dim);
    let ctx_q: Vec<(&[u32], &[u32])> = batch.iter().map(|e| (e.context.as_slice(), e.query.as_slice())).collect();
    let positives: Vec<&[f64]> = batch.iter().map(|e| e.positive.as_slice()).collect();
    let refs: Vec<&SftExample> = batch.iter().collect();
    match loss {
        Loss::Sft => grad_check(m.params(), |t| Ok(sft_terms_on(&m, t, &ctx_q, None, 0.0)?.0), h, TOL),
        Loss::Dpo => {
            let reference = ReasonerModel::new(12, dim, 300 + seed).unwrap();
            let ps = pairs(400 + seed, 3, dim);
            let p_refs: Vec<&PreferencePair> = ps.iter().collect();
            let lp: Vec<(f64, f64)> = ps
                .iter()
                .map(|p| {
                    (
                        reference.log_prob(&p.context, &p.winner_tokens).unwrap(),
                        reference.log_prob(&p.context, &p.loser_tokens).unwrap(),
                    )
                })
                .collect();
            grad_check(m.params(), |t| dpo_on(&m, t, &p_refs, &lp, cfg.beta, None, 0.0), h, TOL)
        }
        Loss::Cl => grad_check(
            m.params(),
            |t| {
                let (_, states) = sft_terms_on(&m, t, &ctx_q, None, 0.0)?;
                cl_on(t, &states, &positives, cfg.tau)
            },
            h,
            TOL,
        ),
        Loss::Joint => grad_check(m.params(), |t| Ok(joint_on(&m, t, &refs, cfg, None)?.0), h, TOL),
        Loss::ListNet => unreachable!(),
    }
    .unwrap()
}
