//! Forward-only numeric kernels. The tape reuses these so taped and untaped
//! evaluation agree bitwise.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::dense::{matvec_into, Dense};
use crate::error::{shape_err, Error, Result};

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    libm::sqrt(dot(a, a))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// `ln(sigmoid(x))` without overflow for large |x|.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -libm::log1p(libm::exp(-x))
    } else {
        x - libm::log1p(libm::exp(x))
    }
}

pub fn normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::DegenerateVector);
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Max-shifted softmax.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::EmptyLogits);
    }
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return Err(Error::NonFinite(format!("softmax input max {m}")));
    }
    let mut out: Vec<f64> = v.iter().map(|x| libm::exp(x - m)).collect();
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= z);
    Ok(out)
}

pub fn log_softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::EmptyLogits);
    }
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return Err(Error::NonFinite(format!("log_softmax input max {m}")));
    }
    let z: f64 = v.iter().map(|x| libm::exp(x - m)).sum();
    let lz = m + libm::log(z);
    Ok(v.iter().map(|x| x - lz).collect())
}

/// `sum_k p_k ln(p_k / q_k)` with the `0 ln 0 = 0` convention.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(shape_err("kl_divergence", p.len(), q.len()));
    }
    for (name, v) in [("p", p), ("q", q)] {
        let s: f64 = v.iter().sum();
        if (s - 1.0).abs() > 1e-9 || v.iter().any(|x| *x < 0.0 || !x.is_finite()) {
            return Err(Error::InvalidProbability(format!("{name} sums to {s}")));
        }
    }
    let mut acc = 0.0;
    for (pk, qk) in p.iter().zip(q) {
        if *pk == 0.0 {
            continue;
        }
        if *qk <= 0.0 {
            return Err(Error::InvalidProbability(format!(
                "q entry {qk} paired with p entry {pk}"
            )));
        }
        acc += pk * libm::log(pk / qk);
    }
    Ok(acc)
}

/// `KL(p || softmax(logits))` evaluated as
/// `ln(1 + sum_j p_j expm1(u_j) + sum_{p_j = 0} e^{s_j - c})` with
/// `u_j = s_j - ln p_j - c` centred so that `sum_j p_j u_j = 0`. Small
/// divergences keep full relative precision this way.
pub fn softmax_kl(p: &[f64], logits: &[f64]) -> Result<f64> {
    if p.len() != logits.len() {
        return Err(shape_err("softmax_kl", p.len(), logits.len()));
    }
    if p.is_empty() {
        return Err(Error::EmptyLogits);
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-9 || p.iter().any(|x| *x < 0.0 || !x.is_finite()) {
        return Err(Error::InvalidProbability(format!("p sums to {s}")));
    }
    if let Some(x) = logits.iter().find(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("logit {x}")));
    }
    let c: f64 = p
        .iter()
        .zip(logits)
        .filter(|(pk, _)| **pk > 0.0)
        .map(|(pk, sk)| pk * (sk - libm::log(*pk)))
        .sum();
    let mut acc = 0.0;
    for (pk, sk) in p.iter().zip(logits) {
        if *pk > 0.0 {
            acc += pk * libm::expm1(sk - libm::log(*pk) - c);
        } else {
            acc += libm::exp(sk - c);
        }
    }
    Ok(libm::log1p(acc).max(0.0))
}

pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(shape_err("cosine_sim", a.len(), b.len()));
    }
    let na = norm(a);
    let nb = norm(b);
    if !(na > 0.0) || !(nb > 0.0) {
        return Err(Error::DegenerateVector);
    }
    Ok(dot(a, b) / (na * nb))
}

pub fn affine(w: &Dense, b: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != w.cols() {
        return Err(shape_err("affine (x)", w.cols(), x.len()));
    }
    if b.len() != w.rows() {
        return Err(shape_err("affine (b)", w.rows(), b.len()));
    }
    let mut out = vec![0.0; w.rows()];
    matvec_into(w, x, &mut out);
    out.iter_mut().zip(b).for_each(|(o, bi)| *o += bi);
    Ok(out)
}

/// Row-softmaxed attention weights `A[i][j]` for queries `q` over keys `k`,
/// scale `1/sqrt(d)`. Returns a flat `n_q x n_k` buffer.
pub(crate) fn attention_weights(q: &[&[f64]], k: &[&[f64]]) -> Vec<f64> {
    let d = q.first().map_or(1, |v| v.len()).max(1);
    let scale = 1.0 / libm::sqrt(d as f64);
    let nk = k.len();
    let mut w = vec![0.0; q.len() * nk];
    for (i, qi) in q.iter().enumerate() {
        let row = &mut w[i * nk..(i + 1) * nk];
        for (j, kj) in k.iter().enumerate() {
            row[j] = dot(qi, kj) * scale;
        }
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for x in row.iter_mut() {
            *x = libm::exp(*x - m);
            z += *x;
        }
        row.iter_mut().for_each(|x| *x /= z);
    }
    w
}

/// Mean over queries of the attention outputs `sum_j A[i][j] v_j`.
pub(crate) fn attention_pool(weights: &[f64], nq: usize, v: &[&[f64]]) -> Vec<f64> {
    let d = v.first().map_or(0, |x| x.len());
    let nk = v.len();
    let mut out = vec![0.0; d];
    for i in 0..nq {
        for (j, vj) in v.iter().enumerate() {
            let a = weights[i * nk + j];
            for (o, x) in out.iter_mut().zip(vj.iter()) {
                *o += a * x;
            }
        }
    }
    let inv = 1.0 / nq as f64;
    out.iter_mut().for_each(|x| *x *= inv);
    out
}

fn check_seq(op: &'static str, seq: &[Vec<f64>]) -> Result<usize> {
    let d = seq.first().ok_or(Error::EmptySequence(op))?.len();
    if let Some(bad) = seq.iter().find(|v| v.len() != d) {
        return Err(shape_err(op, d, bad.len()));
    }
    Ok(d)
}

/// Single-head scaled dot-product self-attention (queries = keys = values),
/// mean-pooled over positions.
pub fn self_attention(seq: &[Vec<f64>]) -> Result<Vec<f64>> {
    check_seq("self_attention", seq)?;
    let refs: Vec<&[f64]> = seq.iter().map(Vec::as_slice).collect();
    let w = attention_weights(&refs, &refs);
    Ok(attention_pool(&w, refs.len(), &refs))
}

/// Queries from `group_a`, keys and values from `group_b`, mean-pooled.
pub fn cross_attention(group_a: &[Vec<f64>], group_b: &[Vec<f64>]) -> Result<Vec<f64>> {
    let da = check_seq("cross_attention", group_a)?;
    let db = check_seq("cross_attention", group_b)?;
    if group_a.len() != group_b.len() {
        return Err(Error::LengthMismatch(format!(
            "cross_attention groups of {} and {}",
            group_a.len(),
            group_b.len()
        )));
    }
    if da != db {
        return Err(shape_err("cross_attention", da, db));
    }
    let qa: Vec<&[f64]> = group_a.iter().map(Vec::as_slice).collect();
    let kb: Vec<&[f64]> = group_b.iter().map(Vec::as_slice).collect();
    let w = attention_weights(&qa, &kb);
    Ok(attention_pool(&w, qa.len(), &kb))
}
