//! Reverse-mode differentiation over vector-valued nodes.
//!
//! Every node holds a flat `f64` vector. Matrices only appear as parameters,
//! referenced by [`ParamId`] and read straight from the borrowed
//! [`ParamStore`]. A forward pass records nodes in evaluation order, so a
//! single reverse sweep computes all gradients.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::dense::{matvec_into, matvec_t_acc, outer_acc};
use super::ops;
use super::params::{Gradients, ParamId, ParamStore};
use crate::error::{shape_err, Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    ParamRow(ParamId, usize),
    Affine {
        w: ParamId,
        b: Option<ParamId>,
        x: Var,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Ln(Var),
    Concat(Vec<Var>),
    Mean(Vec<Var>),
    Sum(Var),
    Index(Var, usize),
    Dot(Var, Var),
    Cosine {
        a: Var,
        b: Var,
        na: f64,
        nb: f64,
    },
    Softmax(Var),
    Kl(Var, Var),
    SoftmaxKl {
        s: Var,
        p: Vec<f64>,
        q: Vec<f64>,
    },
    Attention {
        q: Vec<Var>,
        kv: Vec<Var>,
        weights: Vec<f64>,
    },
    RnnCell {
        input: ParamId,
        recur: ParamId,
        x: Var,
        h: Option<Var>,
        bias: Var,
    },
    TokenLogProb {
        proj: ParamId,
        h: Var,
        token: usize,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Vec<f64>,
    op: Op,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    /// First entry of a node; meant for scalar nodes.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    fn push(&mut self, value: Vec<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn dim(&self, v: Var) -> usize {
        self.nodes[v.0].value.len()
    }

    fn same_len(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.dim(a) != self.dim(b) {
            return Err(shape_err(op, self.dim(a), self.dim(b)));
        }
        Ok(())
    }

    pub fn constant(&mut self, value: Vec<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let v = self.params.value(id).as_slice().to_vec();
        self.push(v, Op::Param(id))
    }

    /// One row of a parameter matrix (embedding lookup).
    pub fn param_row(&mut self, id: ParamId, row: usize) -> Result<Var> {
        let m = self.params.value(id);
        if row >= m.rows() {
            return Err(shape_err("param_row", format!("row < {}", m.rows()), row));
        }
        let v = m.row(row).to_vec();
        Ok(self.push(v, Op::ParamRow(id, row)))
    }

    pub fn affine(&mut self, w: ParamId, b: Option<ParamId>, x: Var) -> Result<Var> {
        let wm = self.params.value(w);
        if wm.cols() != self.dim(x) {
            return Err(shape_err("affine", wm.cols(), self.dim(x)));
        }
        let mut out = vec![0.0; wm.rows()];
        matvec_into(wm, self.value(x), &mut out);
        if let Some(b) = b {
            let bv = self.params.value(b);
            if bv.len() != out.len() {
                return Err(shape_err("affine bias", out.len(), bv.len()));
            }
            out.iter_mut().zip(bv.as_slice()).for_each(|(o, bi)| *o += bi);
        }
        Ok(self.push(out, Op::Affine { w, b, x }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len("add", a, b)?;
        let v = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len("sub", a, b)?;
        let v = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        Ok(self.push(v, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len("mul", a, b)?;
        let v = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).iter().map(|x| x * c).collect();
        self.push(v, Op::Scale(a, c))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().map(|x| libm::tanh(*x)).collect();
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().map(|x| ops::sigmoid(*x)).collect();
        self.push(v, Op::Sigmoid(a))
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().map(|x| ops::log_sigmoid(*x)).collect();
        self.push(v, Op::LogSigmoid(a))
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        if self.value(a).iter().any(|x| !(*x > 0.0)) {
            return Err(Error::NonFinite("ln of non-positive value".into()));
        }
        let v = self.value(a).iter().map(|x| libm::log(*x)).collect();
        Ok(self.push(v, Op::Ln(a)))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut v = Vec::new();
        for p in parts {
            v.extend_from_slice(self.value(*p));
        }
        self.push(v, Op::Concat(parts.to_vec()))
    }

    /// Elementwise mean of equal-length vectors.
    pub fn mean(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::EmptySequence("mean"))?;
        let d = self.dim(first);
        let mut v = vec![0.0; d];
        for p in parts {
            if self.dim(*p) != d {
                return Err(shape_err("mean", d, self.dim(*p)));
            }
            v.iter_mut().zip(self.value(*p)).for_each(|(o, x)| *o += x);
        }
        let inv = 1.0 / parts.len() as f64;
        v.iter_mut().for_each(|x| *x *= inv);
        Ok(self.push(v, Op::Mean(parts.to_vec())))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        self.push(vec![s], Op::Sum(a))
    }

    pub fn index(&mut self, a: Var, i: usize) -> Result<Var> {
        let x = *self
            .value(a)
            .get(i)
            .ok_or_else(|| shape_err("index", format!("index < {}", self.dim(a)), i))?;
        Ok(self.push(vec![x], Op::Index(a, i)))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len("dot", a, b)?;
        let s = ops::dot(self.value(a), self.value(b));
        Ok(self.push(vec![s], Op::Dot(a, b)))
    }

    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len("cosine", a, b)?;
        let na = ops::norm(self.value(a));
        let nb = ops::norm(self.value(b));
        if !(na > 0.0) || !(nb > 0.0) {
            return Err(Error::DegenerateVector);
        }
        let c = ops::dot(self.value(a), self.value(b)) / (na * nb);
        Ok(self.push(vec![c], Op::Cosine { a, b, na, nb }))
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let v = ops::softmax(self.value(a))?;
        Ok(self.push(v, Op::Softmax(a)))
    }

    /// `KL(p || q)` for probability vectors held in nodes.
    pub fn kl(&mut self, p: Var, q: Var) -> Result<Var> {
        self.same_len("kl", p, q)?;
        let mut acc = 0.0;
        for (pk, qk) in self.value(p).iter().zip(self.value(q)) {
            if *pk == 0.0 {
                continue;
            }
            if !(*qk > 0.0) {
                return Err(Error::InvalidProbability(format!("q entry {qk}")));
            }
            acc += pk * libm::log(pk / qk);
        }
        Ok(self.push(vec![acc], Op::Kl(p, q)))
    }

    /// `KL(p || softmax(s))` for a constant target `p`, fused for accuracy.
    pub fn softmax_kl(&mut self, p: Vec<f64>, s: Var) -> Result<Var> {
        let v = ops::softmax_kl(&p, self.value(s))?;
        let q = ops::softmax(self.value(s))?;
        Ok(self.push(vec![v], Op::SoftmaxKl { s, p, q }))
    }

    /// Scaled dot-product attention, queries `q` over keys = values `kv`,
    /// mean-pooled over queries.
    pub fn attention(&mut self, q: &[Var], kv: &[Var]) -> Result<Var> {
        if q.is_empty() || kv.is_empty() {
            return Err(Error::EmptySequence("attention"));
        }
        let d = self.dim(q[0]);
        if let Some(bad) = q.iter().chain(kv).find(|v| self.dim(**v) != d) {
            return Err(shape_err("attention", d, self.dim(*bad)));
        }
        let qs: Vec<&[f64]> = q.iter().map(|v| self.value(*v)).collect();
        let ks: Vec<&[f64]> = kv.iter().map(|v| self.value(*v)).collect();
        let weights = ops::attention_weights(&qs, &ks);
        let out = ops::attention_pool(&weights, qs.len(), &ks);
        Ok(self.push(
            out,
            Op::Attention {
                q: q.to_vec(),
                kv: kv.to_vec(),
                weights,
            },
        ))
    }

    pub fn self_attention(&mut self, seq: &[Var]) -> Result<Var> {
        self.attention(seq, seq)
    }

    pub fn cross_attention(&mut self, group_a: &[Var], group_b: &[Var]) -> Result<Var> {
        if group_a.len() != group_b.len() {
            return Err(Error::LengthMismatch(format!(
                "cross_attention groups of {} and {}",
                group_a.len(),
                group_b.len()
            )));
        }
        self.attention(group_a, group_b)
    }

    /// `tanh(W_in x + W_rec h + bias)`; `h = None` means a zero state.
    pub fn rnn_cell(
        &mut self,
        input: ParamId,
        recur: ParamId,
        x: Var,
        h: Option<Var>,
        bias: Var,
    ) -> Result<Var> {
        let wi = self.params.value(input);
        let wr = self.params.value(recur);
        let d = wi.rows();
        if wi.cols() != self.dim(x) || self.dim(bias) != d {
            return Err(shape_err("rnn_cell", d, self.dim(x)));
        }
        let mut pre = vec![0.0; d];
        matvec_into(wi, self.value(x), &mut pre);
        if let Some(h) = h {
            if wr.cols() != self.dim(h) || wr.rows() != d {
                return Err(shape_err("rnn_cell (state)", wr.cols(), self.dim(h)));
            }
            let mut rh = vec![0.0; d];
            matvec_into(wr, self.value(h), &mut rh);
            pre.iter_mut().zip(&rh).for_each(|(p, r)| *p += r);
        }
        pre.iter_mut()
            .zip(self.value(bias))
            .for_each(|(p, b)| *p = libm::tanh(*p + b));
        Ok(self.push(
            pre,
            Op::RnnCell {
                input,
                recur,
                x,
                h,
                bias,
            },
        ))
    }

    /// `log softmax(W h)[token]` as a scalar node.
    pub fn token_log_prob(&mut self, proj: ParamId, h: Var, token: usize) -> Result<Var> {
        let w = self.params.value(proj);
        if w.cols() != self.dim(h) {
            return Err(shape_err("token_log_prob", w.cols(), self.dim(h)));
        }
        if token >= w.rows() {
            return Err(Error::TokenOutOfVocab {
                token: token as u32,
                vocab: w.rows(),
            });
        }
        let mut logits = vec![0.0; w.rows()];
        matvec_into(w, self.value(h), &mut logits);
        let lp = ops::log_softmax(&logits)?;
        let out = lp[token];
        let probs = lp.iter().map(|x| libm::exp(*x)).collect();
        Ok(self.push(
            vec![out],
            Op::TokenLogProb {
                proj,
                h,
                token,
                probs,
            },
        ))
    }

    /// Inverted dropout with a seeded mask. Rate 0 is the identity.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut Rng) -> Result<Var> {
        if rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let mask: Vec<f64> = (0..self.dim(x))
            .map(|_| if rng.uniform() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let m = self.constant(mask);
        self.mul(x, m)
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.dim(loss) != 1 {
            return Err(shape_err("backward", "scalar loss", self.dim(loss)));
        }
        if !self.scalar(loss).is_finite() {
            return Err(Error::NonFinite(format!("loss {}", self.scalar(loss))));
        }
        let mut out = Gradients::for_store(self.params);
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        fn acc<'g>(grads: &'g mut [Option<Vec<f64>>], v: Var, len: usize) -> &'g mut [f64] {
            grads[v.0].get_or_insert_with(|| vec![0.0; len])
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    let slot = out.slot(*id, self.params.value(*id));
                    slot.as_mut_slice().iter_mut().zip(&g).for_each(|(s, x)| *s += x);
                }
                Op::ParamRow(id, row) => {
                    let slot = out.slot(*id, self.params.value(*id));
                    slot.row_mut(*row).iter_mut().zip(&g).for_each(|(s, x)| *s += x);
                }
                Op::Affine { w, b, x } => {
                    let wm = self.params.value(*w);
                    let xv = self.value(*x);
                    outer_acc(out.slot(*w, wm), &g, xv);
                    if let Some(b) = b {
                        let slot = out.slot(*b, self.params.value(*b));
                        slot.as_mut_slice().iter_mut().zip(&g).for_each(|(s, x)| *s += x);
                    }
                    matvec_t_acc(wm, &g, acc(&mut grads, *x, xv.len()));
                }
                Op::Add(a, b) => {
                    for v in [*a, *b] {
                        acc(&mut grads, v, g.len()).iter_mut().zip(&g).for_each(|(s, x)| *s += x);
                    }
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, g.len()).iter_mut().zip(&g).for_each(|(s, x)| *s += x);
                    acc(&mut grads, *b, g.len()).iter_mut().zip(&g).for_each(|(s, x)| *s -= x);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let ga = acc(&mut grads, *a, g.len());
                    for k in 0..g.len() {
                        ga[k] += g[k] * bv[k];
                    }
                    let gb = acc(&mut grads, *b, g.len());
                    for k in 0..g.len() {
                        gb[k] += g[k] * av[k];
                    }
                }
                Op::Scale(a, c) => {
                    acc(&mut grads, *a, g.len()).iter_mut().zip(&g).for_each(|(s, x)| *s += c * x);
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let ga = acc(&mut grads, *a, g.len());
                    for k in 0..g.len() {
                        ga[k] += g[k] * (1.0 - y[k] * y[k]);
                    }
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let ga = acc(&mut grads, *a, g.len());
                    for k in 0..g.len() {
                        ga[k] += g[k] * y[k] * (1.0 - y[k]);
                    }
                }
                Op::LogSigmoid(a) => {
                    let xv = self.value(*a);
                    let ga = acc(&mut grads, *a, g.len());
                    for k in 0..g.len() {
                        ga[k] += g[k] * ops::sigmoid(-xv[k]);
                    }
                }
                Op::Ln(a) => {
                    let xv = self.value(*a);
                    let ga = acc(&mut grads, *a, g.len());
                    for k in 0..g.len() {
                        ga[k] += g[k] / xv[k];
                    }
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let n = self.dim(*p);
                        acc(&mut grads, *p, n)
                            .iter_mut()
                            .zip(&g[off..off + n])
                            .for_each(|(s, x)| *s += x);
                        off += n;
                    }
                }
                Op::Mean(parts) => {
                    let inv = 1.0 / parts.len() as f64;
                    for p in parts {
                        acc(&mut grads, *p, g.len())
                            .iter_mut()
                            .zip(&g)
                            .for_each(|(s, x)| *s += x * inv);
                    }
                }
                Op::Sum(a) => {
                    let n = self.dim(*a);
                    acc(&mut grads, *a, n).iter_mut().for_each(|s| *s += g[0]);
                }
                Op::Index(a, k) => {
                    let n = self.dim(*a);
                    acc(&mut grads, *a, n)[*k] += g[0];
                }
                Op::Dot(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let n = av.len();
                    let ga = acc(&mut grads, *a, n);
                    for k in 0..n {
                        ga[k] += g[0] * bv[k];
                    }
                    let gb = acc(&mut grads, *b, n);
                    for k in 0..n {
                        gb[k] += g[0] * av[k];
                    }
                }
                Op::Cosine { a, b, na, nb } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let c = node.value[0];
                    let n = av.len();
                    let inv = 1.0 / (na * nb);
                    let ga = acc(&mut grads, *a, n);
                    for k in 0..n {
                        ga[k] += g[0] * (bv[k] * inv - c * av[k] / (na * na));
                    }
                    let gb = acc(&mut grads, *b, n);
                    for k in 0..n {
                        gb[k] += g[0] * (av[k] * inv - c * bv[k] / (nb * nb));
                    }
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let gy = ops::dot(&g, y);
                    let ga = acc(&mut grads, *a, g.len());
                    for k in 0..g.len() {
                        ga[k] += y[k] * (g[k] - gy);
                    }
                }
                Op::Kl(p, q) => {
                    let (pv, qv) = (self.value(*p), self.value(*q));
                    let n = pv.len();
                    let gp = acc(&mut grads, *p, n);
                    for k in 0..n {
                        if pv[k] > 0.0 {
                            gp[k] += g[0] * (libm::log(pv[k] / qv[k]) + 1.0);
                        }
                    }
                    let gq = acc(&mut grads, *q, n);
                    for k in 0..n {
                        gq[k] -= g[0] * pv[k] / qv[k];
                    }
                }
                Op::SoftmaxKl { s, p, q } => {
                    let gs = acc(&mut grads, *s, p.len());
                    for k in 0..p.len() {
                        gs[k] += g[0] * (q[k] - p[k]);
                    }
                }
                Op::Attention { q, kv, weights } => {
                    self.attention_backward(&mut grads, q, kv, weights, &g);
                }
                Op::RnnCell {
                    input,
                    recur,
                    x,
                    h,
                    bias,
                } => {
                    let y = &node.value;
                    let dpre: Vec<f64> = g.iter().zip(y).map(|(gk, yk)| gk * (1.0 - yk * yk)).collect();
                    let wi = self.params.value(*input);
                    let xv = self.value(*x);
                    outer_acc(out.slot(*input, wi), &dpre, xv);
                    matvec_t_acc(wi, &dpre, acc(&mut grads, *x, xv.len()));
                    if let Some(h) = h {
                        let wr = self.params.value(*recur);
                        let hv = self.value(*h);
                        outer_acc(out.slot(*recur, wr), &dpre, hv);
                        matvec_t_acc(wr, &dpre, acc(&mut grads, *h, hv.len()));
                    }
                    acc(&mut grads, *bias, dpre.len())
                        .iter_mut()
                        .zip(&dpre)
                        .for_each(|(s, x)| *s += x);
                }
                Op::TokenLogProb {
                    proj,
                    h,
                    token,
                    probs,
                } => {
                    let mut dlogits: Vec<f64> = probs.iter().map(|p| -g[0] * p).collect();
                    dlogits[*token] += g[0];
                    let w = self.params.value(*proj);
                    let hv = self.value(*h);
                    outer_acc(out.slot(*proj, w), &dlogits, hv);
                    matvec_t_acc(w, &dlogits, acc(&mut grads, *h, hv.len()));
                }
            }
        }
        Ok(out)
    }

    fn attention_backward(
        &self,
        grads: &mut [Option<Vec<f64>>],
        q: &[Var],
        kv: &[Var],
        weights: &[f64],
        g: &[f64],
    ) {
        let nq = q.len();
        let nk = kv.len();
        let d = g.len();
        let scale = 1.0 / libm::sqrt(d.max(1) as f64);
        let inv_n = 1.0 / nq as f64;
        let dout: Vec<f64> = g.iter().map(|x| x * inv_n).collect();
        let mut dq = vec![vec![0.0; d]; nq];
        let mut dk = vec![vec![0.0; d]; nk];
        // dA_ij = dout . v_j, identical for every query under mean pooling
        let da: Vec<f64> = kv.iter().map(|v| ops::dot(&dout, self.value(*v))).collect();
        for i in 0..nq {
            let row = &weights[i * nk..(i + 1) * nk];
            let s: f64 = row.iter().zip(&da).map(|(a, b)| a * b).sum();
            let qi = self.value(q[i]);
            for j in 0..nk {
                let a = row[j];
                // values
                for k in 0..d {
                    dk[j][k] += a * dout[k];
                }
                let ds = a * (da[j] - s) * scale;
                let kj = self.value(kv[j]);
                for k in 0..d {
                    dq[i][k] += ds * kj[k];
                    dk[j][k] += ds * qi[k];
                }
            }
        }
        for (v, gq) in q.iter().zip(&dq) {
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; d]);
            slot.iter_mut().zip(gq).for_each(|(s, x)| *s += x);
        }
        for (v, gk) in kv.iter().zip(&dk) {
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; d]);
            slot.iter_mut().zip(gk).for_each(|(s, x)| *s += x);
        }
    }
}
