//! A small context-conditioned recurrent token policy. Its last hidden
//! state over a verbalized context is the latent query embedding (e_LTP).
//! Also home to the simulated teachers and the frozen unified embedder.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::diffcore::ops::{cosine_sim, log_softmax, normalize};
use crate::diffcore::{Dense, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::synthgen::IntentRecord;
use crate::verbalizer::{tokenize, words, EOS, MAX_QUERY_TOKENS};

pub const EMBED: &str = "reasoner.embed";
pub const INPUT: &str = "reasoner.input";
pub const RECUR: &str = "reasoner.recur";
pub const CONTEXT: &str = "reasoner.context";
pub const BIAS: &str = "reasoner.bias";
pub const OUTPUT: &str = "reasoner.output";

/// Embedding noise applied during training: uniform in `[-b, b]` with
/// `b = alpha / sqrt(len * dim)`.
pub struct EmbeddingNoise<'r> {
    pub alpha: f64,
    pub rng: &'r mut Rng,
}

impl EmbeddingNoise<'_> {
    pub fn bound(alpha: f64, len: usize, dim: usize) -> f64 {
        alpha / libm::sqrt((len * dim) as f64)
    }
}

/// Tape handles for an encoded context.
#[derive(Debug, Clone)]
pub struct EncodedContext {
    pub states: Vec<Var>,
    /// `B c + b`, reused by every later step.
    pub drive: Var,
}

impl EncodedContext {
    pub fn last(&self) -> Var {
        *self.states.last().expect("encoded context is never empty")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decoding {
    Greedy,
    Temperature(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ReasonerRepr", into = "ReasonerRepr")]
pub struct ReasonerModel {
    params: ParamStore,
    vocab: usize,
    dim: usize,
    embed: ParamId,
    input: ParamId,
    recur: ParamId,
    context: ParamId,
    bias: ParamId,
    output: ParamId,
}

#[derive(Serialize, Deserialize)]
struct ReasonerRepr {
    vocab: usize,
    dim: usize,
    params: ParamStore,
}

impl TryFrom<ReasonerRepr> for ReasonerModel {
    type Error = Error;
    fn try_from(r: ReasonerRepr) -> Result<Self> {
        ReasonerModel::from_params(r.vocab, r.dim, r.params)
    }
}

impl From<ReasonerModel> for ReasonerRepr {
    fn from(m: ReasonerModel) -> Self {
        ReasonerRepr {
            vocab: m.vocab,
            dim: m.dim,
            params: m.params,
        }
    }
}

fn gaussian(rows: usize, cols: usize, scale: f64, rng: &mut Rng) -> Dense {
    let data = (0..rows * cols).map(|_| scale * rng.normal()).collect();
    Dense::new(rows, cols, data).expect("shape matches data")
}

impl ReasonerModel {
    pub fn new(vocab: usize, dim: usize, seed: u64) -> Result<Self> {
        if vocab <= EOS as usize + 2 || dim == 0 {
            return Err(Error::InvalidConfig("reasoner needs vocab > 3 and dim > 0".into()));
        }
        let mut rng = Rng::new(seed).fork(0x5245_4153);
        let s = 1.0 / libm::sqrt(dim as f64);
        let mut p = ParamStore::new();
        p.add(EMBED, gaussian(vocab, dim, 1.0, &mut rng))?;
        p.add(INPUT, gaussian(dim, dim, s, &mut rng))?;
        p.add(RECUR, gaussian(dim, dim, 0.5 * s, &mut rng))?;
        p.add(CONTEXT, gaussian(dim, dim, s, &mut rng))?;
        p.add(BIAS, Dense::zeros(dim, 1))?;
        p.add(OUTPUT, gaussian(vocab, dim, s, &mut rng))?;
        Self::from_params(vocab, dim, p)
    }

    pub fn from_params(vocab: usize, dim: usize, params: ParamStore) -> Result<Self> {
        let shape = |name: &str, r: usize, c: usize| -> Result<ParamId> {
            let id = params.id(name)?;
            let v = params.value(id);
            if v.rows() != r || v.cols() != c {
                return Err(Error::Shape {
                    op: "reasoner params",
                    expected: alloc::format!("{name} {r}x{c}"),
                    found: alloc::format!("{}x{}", v.rows(), v.cols()),
                });
            }
            Ok(id)
        };
        Ok(ReasonerModel {
            embed: shape(EMBED, vocab, dim)?,
            input: shape(INPUT, dim, dim)?,
            recur: shape(RECUR, dim, dim)?,
            context: shape(CONTEXT, dim, dim)?,
            bias: shape(BIAS, dim, 1)?,
            output: shape(OUTPUT, vocab, dim)?,
            params,
            vocab,
            dim,
        })
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn fingerprint(&self) -> u64 {
        self.params.fingerprint()
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        match tokens.iter().find(|t| **t as usize >= self.vocab) {
            Some(t) => Err(Error::TokenOutOfVocab {
                token: *t,
                vocab: self.vocab,
            }),
            None => Ok(()),
        }
    }

    fn embed_token(&self, tape: &mut Tape, tok: u32, noise: &mut Option<EmbeddingNoise>, bound: f64) -> Result<Var> {
        let e = tape.param_row(self.embed, tok as usize)?;
        match noise {
            Some(n) if n.alpha > 0.0 => {
                let delta: Vec<f64> = (0..self.dim).map(|_| n.rng.uniform_range(-bound, bound)).collect();
                let d = tape.constant(delta);
                tape.add(e, d)
            }
            _ => Ok(e),
        }
    }

    /// Records the recurrence over the context on `tape`.
    pub fn encode_on(
        &self,
        tape: &mut Tape,
        tokens: &[u32],
        mut noise: Option<EmbeddingNoise>,
    ) -> Result<EncodedContext> {
        if tokens.is_empty() {
            return Err(Error::EmptySequence("encode_context"));
        }
        self.check_tokens(tokens)?;
        let bound = noise
            .as_ref()
            .map(|n| EmbeddingNoise::bound(n.alpha, tokens.len(), self.dim))
            .unwrap_or(0.0);
        let embs = tokens
            .iter()
            .map(|t| self.embed_token(tape, *t, &mut noise, bound))
            .collect::<Result<Vec<_>>>()?;
        let c = tape.mean(&embs)?;
        let drive = tape.affine(self.context, Some(self.bias), c)?;
        let mut states = Vec::with_capacity(tokens.len());
        let mut h = None;
        for e in embs {
            let next = tape.rnn_cell(self.input, self.recur, e, h, drive)?;
            states.push(next);
            h = Some(next);
        }
        Ok(EncodedContext { states, drive })
    }

    /// Teacher-forced `sum_t log p(q_t | context, q_<t)` continuing from the
    /// context's last state.
    pub fn query_log_prob_on(&self, tape: &mut Tape, ctx: &EncodedContext, query: &[u32]) -> Result<Var> {
        if query.is_empty() {
            return Err(Error::EmptySequence("log_prob query"));
        }
        self.check_tokens(query)?;
        let mut h = ctx.last();
        let mut terms = Vec::with_capacity(query.len());
        for (i, tok) in query.iter().enumerate() {
            terms.push(tape.token_log_prob(self.output, h, *tok as usize)?);
            if i + 1 < query.len() {
                let e = tape.param_row(self.embed, *tok as usize)?;
                h = tape.rnn_cell(self.input, self.recur, e, Some(h), ctx.drive)?;
            }
        }
        let all = tape.concat(&terms);
        Ok(tape.sum(all))
    }

    /// Hidden states (one column per context token) and e_LTP, the last one.
    pub fn encode_context(&self, tokens: &[u32]) -> Result<(Dense, Vec<f64>)> {
        let mut tape = Tape::new(&self.params);
        let enc = self.encode_on(&mut tape, tokens, None)?;
        let cols: Vec<Vec<f64>> = enc.states.iter().map(|v| tape.value(*v).to_vec()).collect();
        let last = cols.last().cloned().unwrap_or_default();
        Ok((Dense::from_columns(&cols)?, last))
    }

    pub fn e_ltp(&self, tokens: &[u32]) -> Result<Vec<f64>> {
        let mut tape = Tape::new(&self.params);
        let enc = self.encode_on(&mut tape, tokens, None)?;
        Ok(tape.value(enc.last()).to_vec())
    }

    pub fn log_prob(&self, context: &[u32], query: &[u32]) -> Result<f64> {
        let mut tape = Tape::new(&self.params);
        let enc = self.encode_on(&mut tape, context, None)?;
        let lp = self.query_log_prob_on(&mut tape, &enc, query)?;
        Ok(tape.scalar(lp))
    }

    /// Autoregressive decoding from the context state. Stops after EOS
    /// (kept in the output) or `max_len` tokens.
    pub fn generate_query(&self, context: &[u32], max_len: usize, decoding: Decoding, seed: u64) -> Result<Vec<u32>> {
        if max_len == 0 {
            return Err(Error::InvalidConfig("max_len must be at least 1".into()));
        }
        if let Decoding::Temperature(t) = decoding {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::InvalidTemperature(t));
            }
        }
        let mut rng = Rng::new(seed);
        let mut tape = Tape::new(&self.params);
        let enc = self.encode_on(&mut tape, context, None)?;
        let mut h = enc.last();
        let out_w = self.params.value(self.output);
        let mut out = Vec::new();
        loop {
            let logits = out_w.matvec(tape.value(h))?;
            let tok = match decoding {
                Decoding::Greedy => argmax(&logits),
                Decoding::Temperature(t) => {
                    let scaled: Vec<f64> = logits.iter().map(|l| l / t).collect();
                    let lp = log_softmax(&scaled)?;
                    let p: Vec<f64> = lp.iter().map(|x| libm::exp(*x)).collect();
                    rng.categorical(&p)
                }
            } as u32;
            out.push(tok);
            if tok == EOS || out.len() >= max_len {
                return Ok(out);
            }
            let e = tape.param_row(self.embed, tok as usize)?;
            h = tape.rnn_cell(self.input, self.recur, e, Some(h), enc.drive)?;
        }
    }
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TeacherName {
    CompassMax,
    Gemini,
    GPT5,
    Qwen3Baseline,
}

impl TeacherName {
    /// Tie-break priority, highest first.
    pub const PRIORITY: [TeacherName; 4] = [
        TeacherName::CompassMax,
        TeacherName::Gemini,
        TeacherName::GPT5,
        TeacherName::Qwen3Baseline,
    ];

    pub fn rank(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TeacherName::CompassMax => "CompassMax",
            TeacherName::Gemini => "Gemini",
            TeacherName::GPT5 => "GPT5",
            TeacherName::Qwen3Baseline => "Qwen3Baseline",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherSpec {
    pub name: TeacherName,
    pub quality: f64,
    pub seed: u64,
}

/// The three simulated external teachers with quality-ordered defaults.
pub fn default_teachers(seed: u64) -> Vec<TeacherSpec> {
    [(TeacherName::CompassMax, 0.9), (TeacherName::Gemini, 0.85), (TeacherName::GPT5, 0.8)]
        .iter()
        .map(|(name, quality)| TeacherSpec {
            name: *name,
            quality: *quality,
            seed: seed ^ (0x7EAC_0000 + name.rank() as u64),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryCandidate {
    pub source: TeacherName,
    pub tokens: Vec<u32>,
    pub embedding: Vec<f64>,
    #[serde(default)]
    pub ndcg: Option<f64>,
}

const FILLER: [&str; 12] = [
    "please", "help", "thing", "issue", "question", "item", "today", "know", "need", "about", "check", "again",
];

/// Tokens for a query text, EOS-terminated and capped at the query length.
pub fn query_tokens(text: &str, vocab: usize) -> Result<Vec<u32>> {
    let mut toks = tokenize(text, vocab)?;
    toks.truncate(MAX_QUERY_TOKENS - 1);
    toks.push(EOS);
    Ok(toks)
}

/// A simulated teacher's answer for one sample. The embedding blends the
/// golden intent's semantic vector with seeded noise by quality; the text is
/// the golden intent with each word replaced by filler with probability
/// `1 - quality`.
pub fn teacher_generate(teacher: &TeacherSpec, sample_id: u64, golden: &IntentRecord, vocab: usize) -> Result<QueryCandidate> {
    if teacher.name == TeacherName::Qwen3Baseline {
        return Err(Error::InvalidConfig("the baseline reasoner generates with its own model".into()));
    }
    if !(0.0..=1.0).contains(&teacher.quality) {
        return Err(Error::InvalidProbability(alloc::format!("teacher quality {}", teacher.quality)));
    }
    let mut rng = Rng::new(teacher.seed).fork(sample_id);
    let q = teacher.quality;
    let g = &golden.semantic_embedding;
    let eta = rng.unit_vector(g.len());
    let embedding = if q == 1.0 {
        g.clone()
    } else {
        let mixed: Vec<f64> = g.iter().zip(&eta).map(|(a, b)| q * a + (1.0 - q) * b).collect();
        normalize(&mixed).or_else(|_| Ok::<_, Error>(eta.clone()))?
    };
    let text: Vec<String> = words(&golden.text)
        .map(|w| {
            if rng.bernoulli(1.0 - q) {
                FILLER[rng.below(FILLER.len())].to_string()
            } else {
                w
            }
        })
        .collect();
    Ok(QueryCandidate {
        source: teacher.name,
        tokens: query_tokens(&text.join(" "), vocab)?,
        embedding,
        ndcg: None,
    })
}

/// The baseline reasoner's own candidate: a greedy query and its unit e_LTP.
pub fn baseline_candidate(model: &ReasonerModel, context: &[u32]) -> Result<QueryCandidate> {
    let tokens = model.generate_query(context, MAX_QUERY_TOKENS, Decoding::Greedy, 0)?;
    let embedding = normalize(&model.e_ltp(context)?)?;
    Ok(QueryCandidate {
        source: TeacherName::Qwen3Baseline,
        tokens,
        embedding,
        ndcg: None,
    })
}

/// Frozen stand-in for a sentence embedder: mean of a seeded token table,
/// a seeded projection, then unit normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnifiedEmbedder {
    table: Dense,
    proj: Dense,
}

impl UnifiedEmbedder {
    pub fn new(vocab: usize, dim: usize, seed: u64) -> Self {
        let mut rng = Rng::new(seed).fork(0x0E4B_ED00);
        UnifiedEmbedder {
            table: gaussian(vocab, dim, 1.0, &mut rng),
            proj: gaussian(dim, dim, 1.0 / libm::sqrt(dim as f64), &mut rng),
        }
    }

    pub fn embed(&self, tokens: &[u32]) -> Result<Vec<f64>> {
        if tokens.is_empty() {
            return Err(Error::EmptySequence("embed_query_unified"));
        }
        let mut mean = vec![0.0; self.table.cols()];
        for t in tokens {
            if *t as usize >= self.table.rows() {
                return Err(Error::TokenOutOfVocab {
                    token: *t,
                    vocab: self.table.rows(),
                });
            }
            mean.iter_mut().zip(self.table.row(*t as usize)).for_each(|(m, x)| *m += x);
        }
        let n = tokens.len() as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        normalize(&self.proj.matvec(&mean)?)
    }
}

/// Hook for a real language-model backend.
pub trait ExternalReasonerProvider {
    fn generate(&self, prompt: &str) -> Result<ExternalResponse>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExternalResponse {
    pub query_text: String,
    pub embedding: Vec<f64>,
}

/// Cosine between a candidate and the golden semantic embedding.
pub fn golden_cosine(c: &QueryCandidate, golden: &IntentRecord) -> Result<f64> {
    cosine_sim(&c.embedding, &golden.semantic_embedding)
}
