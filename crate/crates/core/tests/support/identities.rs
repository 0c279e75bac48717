//! Closed-form values the losses and the score must reproduce.

#![allow(dead_code)]

use std::f64::consts::LN_2;

use rgalign_core::align::{rg_cl_loss, rg_dpo_loss, ReferencePolicy};
use rgalign_core::bestofn::{PreferencePair, Strategy};
use rgalign_core::diffcore::{kl_divergence, softmax};
use rgalign_core::qerec::score;
use rgalign_core::reasoner::ReasonerModel;
use rgalign_core::rng::Rng;

/// Each identity with whether it held, checked over a few random draws
/// where the identity quantifies over inputs.
pub fn identities() -> Vec<(&'static str, bool)> {
    let mut rng = Rng::new(0x1DE7);
    let mut out = Vec::new();

    let mut kl_ok = kl_divergence(&[0.3, 0.7], &[0.3, 0.7]).unwrap() == 0.0;
    for _ in 0..100 {
        let n = 1 + rng.below(8);
        let p = softmax(&rng.normal_vec(n)).unwrap();
        kl_ok &= kl_divergence(&p, &p).unwrap().abs() <= 1e-15;
    }
    out.push(("KL(p||p) = 0", kl_ok));

    let mut dpo_ok = true;
    for seed in 0..10 {
        let m = ReasonerModel::new(256, 8, seed).unwrap();
        let reference = ReferencePolicy::freeze(&m);
        let pairs: Vec<PreferencePair> = (0..4)
            .map(|i| {
                let toks = |r: &mut Rng, n: usize| (0..n).map(|_| 3 + r.below(250) as u32).collect::<Vec<u32>>();
                PreferencePair {
                    user_id: i,
                    context: toks(&mut rng, 12),
                    winner_tokens: toks(&mut rng, 5),
                    winner_embedding: rng.unit_vector(8),
                    loser_tokens: toks(&mut rng, 7),
                    loser_embedding: rng.unit_vector(8),
                    ndcg_w: 1.0,
                    ndcg_l: 0.0,
                    strategy: Strategy::V1,
                }
            })
            .collect();
        for beta in [0.1, 1.0] {
            dpo_ok &= (rg_dpo_loss(&m, &reference, &pairs, beta).unwrap() - LN_2).abs() <= 1e-9;
        }
    }
    out.push(("DPO loss = ln 2 when policy equals reference", dpo_ok));

    let mut nce_ok = true;
    for tau in [1.0, 0.1, 0.05] {
        let h = vec![rng.normal_vec(16)];
        let p = vec![rng.unit_vector(16)];
        nce_ok &= rg_cl_loss(&h, &p, tau).unwrap() == 0.0;
    }
    out.push(("InfoNCE = 0 at N = 1", nce_ok));

    let mut shift_ok = true;
    for _ in 0..200 {
        let n = 1 + rng.below(10);
        let v = rng.normal_vec(n);
        let c = rng.uniform_range(-50.0, 50.0);
        let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
        let (a, b) = (softmax(&v).unwrap(), softmax(&shifted).unwrap());
        shift_ok &= a.iter().zip(&b).all(|(x, y)| (x - y).abs() <= 1e-12);
    }
    out.push(("softmax shift invariance within 1e-12", shift_ok));

    // 0.62 has no exact binary form; the score must equal the formula
    // evaluated in f64 and sit within one ulp-scale of the decimal value.
    let s = score(0.5, 0.9, 0.7);
    let mut score_ok = s == 0.7 * 0.5 + (1.0 - 0.7) * 0.9 && (s - 0.62).abs() <= 2.0 * f64::EPSILON;
    for _ in 0..100 {
        let (u, q) = (rng.uniform_range(-1.0, 1.0), rng.uniform_range(-1.0, 1.0));
        score_ok &= score(u, q, 1.0) == u;
    }
    out.push(("score reproduces the omega = 0.7 fixture and omega = 1 boundary", score_ok));
    out
}
