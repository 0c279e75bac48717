//! Ranking-guided alignment of the reasoner: supervised fine-tuning on
//! reward-selected winners, preference optimization against a frozen
//! reference, and an InfoNCE objective pulling e_LTP toward winner
//! embeddings.

use alloc::format;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::bestofn::PreferencePair;
use crate::diffcore::ops::{cosine_sim, log_sigmoid, normalize};
use crate::diffcore::{optimizer_step, Dense, LrSchedule, OptimizerState, Tape, Var};
use crate::error::{Error, Result};
use crate::reasoner::{EmbeddingNoise, ReasonerModel};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlignMode {
    Sft,
    SftDpo,
    SftCl,
}

impl AlignMode {
    pub const ALL: [AlignMode; 3] = [AlignMode::Sft, AlignMode::SftDpo, AlignMode::SftCl];

    pub fn as_str(self) -> &'static str {
        match self {
            AlignMode::Sft => "sft",
            AlignMode::SftDpo => "sft-dpo",
            AlignMode::SftCl => "sft-cl",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.as_str() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignConfig {
    pub mode: AlignMode,
    /// DPO temperature.
    pub beta: f64,
    /// InfoNCE temperature.
    pub tau: f64,
    pub lambda_cl: f64,
    pub lambda_causal: f64,
    pub neftune_alpha: f64,
    pub batch_size: usize,
    pub sft_epochs: usize,
    /// Phase-2 epochs (DPO or joint SFT+CL).
    pub epochs: usize,
    pub sft_lr: f64,
    pub lr: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    /// Heavy-ball momentum for every phase; 0 is plain SGD.
    pub momentum: f64,
    pub seed: u64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig {
            mode: AlignMode::SftCl,
            beta: 0.1,
            tau: 0.05,
            lambda_cl: 1.0,
            lambda_causal: 0.01,
            neftune_alpha: 5.0,
            batch_size: 16,
            sft_epochs: 2,
            epochs: 14,
            sft_lr: 0.05,
            lr: 0.5,
            warmup_fraction: 0.03,
            weight_decay: 0.0,
            clip_norm: 1.0,
            momentum: 0.0,
            seed: 0,
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.beta > 0.0) || !(self.tau > 0.0) {
            return bad("beta and tau must be positive");
        }
        if !(self.lambda_cl >= 0.0) || !(self.lambda_causal >= 0.0) || !(self.neftune_alpha >= 0.0) {
            return bad("lambda_cl, lambda_causal and neftune_alpha must be non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr >= 0.0) || !(self.sft_lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return bad("learning rates and weight decay must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return bad("warmup_fraction must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        Ok(())
    }
}

/// A frozen copy of the policy taken at the SFT checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferencePolicy {
    model: ReasonerModel,
    fingerprint: u64,
}

impl ReferencePolicy {
    pub fn freeze(model: &ReasonerModel) -> Self {
        ReferencePolicy {
            fingerprint: model.fingerprint(),
            model: model.clone(),
        }
    }

    pub fn model(&self) -> &ReasonerModel {
        &self.model
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    /// Fails if the parameters no longer hash to the frozen fingerprint.
    pub fn verify(&self) -> Result<()> {
        let now = self.model.fingerprint();
        if now != self.fingerprint {
            return Err(Error::StaleIndex {
                built: self.fingerprint,
                current: now,
            });
        }
        Ok(())
    }
}

/// One reward-selected winner: the prompt tokens, the winning query's
/// tokens and its (frozen) embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftExample {
    pub user_id: u64,
    pub context: Vec<u32>,
    pub query: Vec<u32>,
    pub positive: Vec<f64>,
}

/// Adds seeded uniform noise in `[-b, b]`, `b = alpha / sqrt(len * dim)`,
/// to each entry of `rows`.
pub fn neftune_noise(rows: &Dense, alpha: f64, len: usize, dim: usize, rng: &mut Rng) -> Dense {
    let mut out = rows.clone();
    if alpha > 0.0 {
        let b = EmbeddingNoise::bound(alpha, len, dim);
        out.as_mut_slice().iter_mut().for_each(|x| *x += rng.uniform_range(-b, b));
    }
    out
}

/// `-log sigmoid(beta * ((pi_w - ref_w) - (pi_l - ref_l)))`.
pub fn dpo_term(pi_w: f64, ref_w: f64, pi_l: f64, ref_l: f64, beta: f64) -> f64 {
    -log_sigmoid(beta * ((pi_w - ref_w) - (pi_l - ref_l)))
}

/// InfoNCE over rows of `h` with in-batch negatives taken from the other
/// rows' positives.
pub fn rg_cl_loss(h: &[Vec<f64>], positives: &[Vec<f64>], tau: f64) -> Result<f64> {
    if h.is_empty() {
        return Err(Error::EmptySequence("rg_cl_loss"));
    }
    if h.len() != positives.len() {
        return Err(Error::LengthMismatch(format!("{} states vs {} positives", h.len(), positives.len())));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidTemperature(tau));
    }
    let mut total = 0.0;
    for (i, hi) in h.iter().enumerate() {
        let logits = positives
            .iter()
            .map(|p| Ok(cosine_sim(hi, p)? / tau))
            .collect::<Result<Vec<_>>>()?;
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + libm::log(logits.iter().map(|l| libm::exp(l - m)).sum::<f64>());
        total += lse - logits[i];
    }
    Ok(total / h.len() as f64)
}

fn noise<'r>(rng: Option<&'r mut Rng>, alpha: f64) -> Option<EmbeddingNoise<'r>> {
    rng.map(|rng| EmbeddingNoise { alpha, rng })
}

/// Mean teacher-forced NLL plus the e_LTP handle of every example.
pub fn sft_terms_on(
    policy: &ReasonerModel,
    tape: &mut Tape,
    batch: &[(&[u32], &[u32])],
    mut rng: Option<&mut Rng>,
    alpha: f64,
) -> Result<(Var, Vec<Var>)> {
    let mut nll = Vec::with_capacity(batch.len());
    let mut states = Vec::with_capacity(batch.len());
    for (ctx, q) in batch {
        let enc = policy.encode_on(tape, ctx, noise(rng.as_deref_mut(), alpha))?;
        let lp = policy.query_log_prob_on(tape, &enc, q)?;
        nll.push(tape.scale(lp, -1.0));
        states.push(enc.last());
    }
    Ok((tape.mean(&nll)?, states))
}

/// Taped InfoNCE; positives enter as constants.
pub fn cl_on(tape: &mut Tape, states: &[Var], positives: &[&[f64]], tau: f64) -> Result<Var> {
    if states.is_empty() {
        return Err(Error::EmptySequence("rg_cl_loss"));
    }
    if states.len() != positives.len() {
        return Err(Error::LengthMismatch(format!("{} states vs {} positives", states.len(), positives.len())));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidTemperature(tau));
    }
    let pos: Vec<Var> = positives.iter().map(|p| tape.constant(p.to_vec())).collect();
    let n = states.len();
    let mut rows = Vec::with_capacity(n);
    for (i, h) in states.iter().enumerate() {
        let logits = pos
            .iter()
            .map(|p| {
                let c = tape.cosine(*h, *p)?;
                Ok(tape.scale(c, 1.0 / tau))
            })
            .collect::<Result<Vec<_>>>()?;
        let row = tape.concat(&logits);
        let mut target = vec![0.0; n];
        target[i] = 1.0;
        rows.push(tape.softmax_kl(target, row)?);
    }
    tape.mean(&rows)
}

/// `lambda_cl * CL + lambda_causal * SFT` over one shared encoding.
pub fn joint_on(
    policy: &ReasonerModel,
    tape: &mut Tape,
    batch: &[&SftExample],
    cfg: &AlignConfig,
    rng: Option<&mut Rng>,
) -> Result<(Var, Vec<Var>)> {
    let pairs: Vec<(&[u32], &[u32])> = batch.iter().map(|e| (e.context.as_slice(), e.query.as_slice())).collect();
    let (sft, states) = sft_terms_on(policy, tape, &pairs, rng, cfg.neftune_alpha)?;
    let positives: Vec<&[f64]> = batch.iter().map(|e| e.positive.as_slice()).collect();
    let cl = cl_on(tape, &states, &positives, cfg.tau)?;
    let a = tape.scale(cl, cfg.lambda_cl);
    let b = tape.scale(sft, cfg.lambda_causal);
    Ok((tape.add(a, b)?, states))
}

/// Reference log-probabilities `(winner, loser)` for one pair.
fn reference_logps(reference: &ReferencePolicy, pair: &PreferencePair, rng: Option<&mut Rng>, alpha: f64) -> Result<(f64, f64)> {
    let m = reference.model();
    let mut tape = Tape::new(m.params());
    let enc = m.encode_on(&mut tape, &pair.context, noise(rng, alpha))?;
    let w = m.query_log_prob_on(&mut tape, &enc, &pair.winner_tokens)?;
    let l = m.query_log_prob_on(&mut tape, &enc, &pair.loser_tokens)?;
    Ok((tape.scalar(w), tape.scalar(l)))
}

/// Mean DPO loss on `tape`. `refs` holds the reference log-probabilities
/// per pair; each pair's noise stream is replayed for the policy so both
/// see the same perturbed inputs.
pub fn dpo_on(
    policy: &ReasonerModel,
    tape: &mut Tape,
    pairs: &[&PreferencePair],
    refs: &[(f64, f64)],
    beta: f64,
    mut rngs: Option<&mut [Rng]>,
    alpha: f64,
) -> Result<Var> {
    if pairs.is_empty() {
        return Err(Error::EmptySequence("rg_dpo_loss"));
    }
    let mut terms = Vec::with_capacity(pairs.len());
    for (k, (pair, (rw, rl))) in pairs.iter().zip(refs).enumerate() {
        let rng = rngs.as_deref_mut().map(|r| &mut r[k]);
        let enc = policy.encode_on(tape, &pair.context, noise(rng, alpha))?;
        let w = policy.query_log_prob_on(tape, &enc, &pair.winner_tokens)?;
        let l = policy.query_log_prob_on(tape, &enc, &pair.loser_tokens)?;
        let margin = tape.sub(w, l)?;
        let scaled = tape.scale(margin, beta);
        let offset = tape.constant(vec![-beta * (rw - rl)]);
        let z = tape.add(scaled, offset)?;
        let ls = tape.log_sigmoid(z);
        terms.push(tape.scale(ls, -1.0));
    }
    tape.mean(&terms)
}

pub fn rg_sft_loss(policy: &ReasonerModel, batch: &[(&[u32], &[u32])]) -> Result<f64> {
    let mut tape = Tape::new(policy.params());
    let (loss, _) = sft_terms_on(policy, &mut tape, batch, None, 0.0)?;
    Ok(tape.scalar(loss))
}

pub fn rg_dpo_loss(policy: &ReasonerModel, reference: &ReferencePolicy, pairs: &[PreferencePair], beta: f64) -> Result<f64> {
    let refs = pairs
        .iter()
        .map(|p| reference_logps(reference, p, None, 0.0))
        .collect::<Result<Vec<_>>>()?;
    let mut tape = Tape::new(policy.params());
    let refs_p: Vec<&PreferencePair> = pairs.iter().collect();
    let loss = dpo_on(policy, &mut tape, &refs_p, &refs, beta, None, 0.0)?;
    Ok(tape.scalar(loss))
}

pub fn joint_loss(policy: &ReasonerModel, batch: &[SftExample], cfg: &AlignConfig) -> Result<f64> {
    let mut tape = Tape::new(policy.params());
    let refs: Vec<&SftExample> = batch.iter().collect();
    let (loss, _) = joint_on(policy, &mut tape, &refs, cfg, None)?;
    Ok(tape.scalar(loss))
}

/// Mean cosine between noise-free e_LTP and each example's positive.
pub fn mean_positive_cosine(policy: &ReasonerModel, examples: &[SftExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::EmptySequence("mean_positive_cosine"));
    }
    let mut s = 0.0;
    for e in examples {
        s += cosine_sim(&policy.e_ltp(&e.context)?, &e.positive)?;
    }
    Ok(s / examples.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlignPhase {
    Sft,
    Dpo,
    Cl,
}

impl AlignPhase {
    pub fn as_str(self) -> &'static str {
        match self {
            AlignPhase::Sft => "sft",
            AlignPhase::Dpo => "dpo",
            AlignPhase::Cl => "cl",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignEpoch {
    pub epoch: usize,
    pub phase: AlignPhase,
    pub loss: f64,
    /// Mean cos(h, positive) over the epoch's training batches, as seen by
    /// each forward pass. DPO batches carry no positives, so DPO epochs
    /// report the eval-mode mean over the SFT set instead.
    pub mean_cos: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignData {
    pub sft: Vec<SftExample>,
    pub pairs: Vec<PreferencePair>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignOutcome {
    pub log: Vec<AlignEpoch>,
    /// Loss of the first phase-2 batch, if phase 2 ran.
    pub phase2_first_loss: Option<f64>,
    pub reference: ReferencePolicy,
    /// Phase 2 was requested but had no data to run on.
    pub fallback: bool,
}

struct Phase<'a> {
    kind: AlignPhase,
    n_items: usize,
    epochs: usize,
    lr: f64,
    stream: u64,
    cfg: &'a AlignConfig,
}

/// One batch's loss and, when the batch has positives, the summed
/// cos(h, positive) of its forward pass.
type BatchOut = (Var, Option<f64>);

fn batch_cos_sum(tape: &Tape, states: &[Var], batch: &[&SftExample]) -> Result<f64> {
    let mut s = 0.0;
    for (h, e) in states.iter().zip(batch) {
        s += cosine_sim(tape.value(*h), &e.positive)?;
    }
    Ok(s)
}

/// Shuffled mini-batch SGD; `loss` records one batch's loss on a tape.
fn run_phase<F>(
    policy: &mut ReasonerModel,
    phase: Phase,
    eval: &[SftExample],
    first_loss: &mut Option<f64>,
    mut loss: F,
) -> Result<Vec<AlignEpoch>>
where
    F: FnMut(&ReasonerModel, &mut Tape, &[usize], &mut Rng) -> Result<BatchOut>,
{
    let cfg = phase.cfg;
    let steps = phase.n_items.div_ceil(cfg.batch_size) * phase.epochs;
    let mut state = OptimizerState::sgd(
        LrSchedule {
            base_lr: phase.lr,
            warmup_fraction: cfg.warmup_fraction,
            total_steps: steps,
        },
        cfg.weight_decay,
        cfg.clip_norm,
    )
    .with_momentum(cfg.momentum);
    let root = Rng::new(cfg.seed).fork(phase.stream);
    let mut log = Vec::with_capacity(phase.epochs);
    let mut step = 0;
    for epoch in 0..phase.epochs {
        let mut order: Vec<usize> = (0..phase.n_items).collect();
        root.fork(epoch as u64).shuffle(&mut order);
        let mut noise_rng = root.fork(0x1_0000 + epoch as u64);
        let (mut loss_sum, mut grad_norm, mut lr) = (0.0, 0.0, 0.0);
        let mut cos_sum = Some(0.0);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let grads = {
                let mut tape = Tape::new(policy.params());
                let (l, c) = loss(policy, &mut tape, chunk, &mut noise_rng)?;
                cos_sum = cos_sum.zip(c).map(|(a, b)| a + b);
                let v = tape.scalar(l);
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!("{} loss at epoch {epoch}, batch {b}", phase.kind.as_str())));
                }
                first_loss.get_or_insert(v);
                loss_sum += v * chunk.len() as f64;
                tape.backward(l)?
            };
            policy.params_mut().accumulate(&grads);
            let stats = optimizer_step(policy.params_mut(), &mut state, step)?;
            step += 1;
            grad_norm = stats.grad_norm;
            lr = stats.lr;
        }
        log.push(AlignEpoch {
            epoch,
            phase: phase.kind,
            loss: loss_sum / phase.n_items as f64,
            mean_cos: match cos_sum {
                Some(c) => c / phase.n_items as f64,
                None if eval.is_empty() => f64::NAN,
                None => mean_positive_cosine(policy, eval)?,
            },
            grad_norm,
            lr,
        });
    }
    Ok(log)
}

/// SFT on winners, a frozen checkpoint, then DPO on pairs or joint SFT+CL
/// depending on the mode.
pub fn align_train(policy: &mut ReasonerModel, data: &AlignData, cfg: &AlignConfig) -> Result<AlignOutcome> {
    cfg.validate()?;
    if data.sft.is_empty() {
        return Err(Error::EmptySequence("align_train: no SFT examples"));
    }
    let dim = policy.dim();
    if let Some(e) = data.sft.iter().find(|e| e.positive.len() != dim) {
        return Err(Error::LengthMismatch(format!("positive of user {} has {} dims, policy {dim}", e.user_id, e.positive.len())));
    }
    let alpha = cfg.neftune_alpha;
    let mut unused = None;
    let mut log = run_phase(
        policy,
        Phase {
            kind: AlignPhase::Sft,
            n_items: data.sft.len(),
            epochs: cfg.sft_epochs,
            lr: cfg.sft_lr,
            stream: 0xA11_0001,
            cfg,
        },
        &data.sft,
        &mut unused,
        |m, tape, idx, rng| {
            let batch: Vec<&SftExample> = idx.iter().map(|&i| &data.sft[i]).collect();
            let pairs: Vec<(&[u32], &[u32])> = batch.iter().map(|e| (e.context.as_slice(), e.query.as_slice())).collect();
            let (l, states) = sft_terms_on(m, tape, &pairs, Some(rng), alpha)?;
            Ok((l, Some(batch_cos_sum(tape, &states, &batch)?)))
        },
    )?;
    let reference = ReferencePolicy::freeze(policy);
    let mut first = None;
    let mut fallback = false;
    match cfg.mode {
        AlignMode::Sft => {}
        AlignMode::SftDpo if data.pairs.is_empty() => fallback = true,
        AlignMode::SftDpo => {
            let phase = run_phase(
                policy,
                Phase {
                    kind: AlignPhase::Dpo,
                    n_items: data.pairs.len(),
                    epochs: cfg.epochs,
                    lr: cfg.lr,
                    stream: 0xA11_0002,
                    cfg,
                },
                &data.sft,
                &mut first,
                |m, tape, idx, rng| {
                    let pairs: Vec<&PreferencePair> = idx.iter().map(|&i| &data.pairs[i]).collect();
                    let mut streams: Vec<Rng> = idx.iter().map(|_| Rng::new(rng.next_u64())).collect();
                    let refs = pairs
                        .iter()
                        .zip(streams.clone().iter_mut())
                        .map(|(p, r)| reference_logps(&reference, p, Some(r), alpha))
                        .collect::<Result<Vec<_>>>()?;
                    Ok((dpo_on(m, tape, &pairs, &refs, cfg.beta, Some(&mut streams), alpha)?, None))
                },
            )?;
            log.extend(phase);
        }
        AlignMode::SftCl => {
            let phase = run_phase(
                policy,
                Phase {
                    kind: AlignPhase::Cl,
                    n_items: data.sft.len(),
                    epochs: cfg.epochs,
                    lr: cfg.lr,
                    stream: 0xA11_0003,
                    cfg,
                },
                &data.sft,
                &mut first,
                |m, tape, idx, rng| {
                    let batch: Vec<&SftExample> = idx.iter().map(|&i| &data.sft[i]).collect();
                    let (l, states) = joint_on(m, tape, &batch, cfg, Some(rng))?;
                    Ok((l, Some(batch_cos_sum(tape, &states, &batch)?)))
                },
            )?;
            log.extend(phase);
        }
    }
    reference.verify()?;
    Ok(AlignOutcome {
        log,
        phase2_first_loss: first,
        reference,
        fallback,
    })
}

/// Unit-normalized e_LTP; the baseline reasoner's query embedding.
pub fn query_embedding(policy: &ReasonerModel, context: &[u32]) -> Result<Vec<f64>> {
    normalize(&policy.e_ltp(context)?)
}
