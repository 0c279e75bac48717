//! Query-enhanced three-tower ranker: user, intent and query towers scored
//! by weighted cosine, trained with a confidence-weighted listwise KL loss.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::diffcore::ops::{softmax, softmax_kl};
use crate::diffcore::{optimizer_step, Dense, LrSchedule, OptimizerState, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::metrics::{self, rank_order, MetricReport, ScoredImpression};
use crate::rng::Rng;
use crate::synthgen::{
    ImpressionRecord, IntentRecord, KnowledgeBase, UserRecord, N_ENTRY_POINT, N_GENDER,
    N_ORDER_STATUS, N_REGION, N_TIER, SECONDS_PER_DAY, SECONDS_PER_HOUR,
};

pub const DEFAULT_OMEGA: f64 = 0.7;
pub const N_TIME_BUCKETS: usize = 4;
pub const N_AGE_BUCKETS: usize = 5;
const AGE_FEATURE: &str = "order_age_days";

/// `{<1h, <24h, <7d, >=7d}` by seconds elapsed.
pub fn time_bucket(age_secs: u64) -> usize {
    if age_secs < SECONDS_PER_HOUR {
        0
    } else if age_secs < SECONDS_PER_DAY {
        1
    } else if age_secs < 7 * SECONDS_PER_DAY {
        2
    } else {
        3
    }
}

/// `{0, 1-2, 3-6, 7-13, 14+}` days.
pub fn order_age_bucket(days: u32) -> usize {
    match days {
        0 => 0,
        1..=2 => 1,
        3..=6 => 2,
        7..=13 => 3,
        _ => 4,
    }
}

/// Architecture, loss and optimizer settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QERecConfig {
    pub dim: usize,
    pub feature_dim: usize,
    pub hidden: usize,
    pub conf_hidden: usize,
    /// Weight of the user-intent similarity; `1 - omega` goes to the query.
    pub omega: f64,
    pub label_scale: f64,
    pub lambda_w: f64,
    pub dropout: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub reference_time: u64,
    /// Categorical features of the user tower and their cardinalities.
    pub categorical: BTreeMap<String, u32>,
    pub seed: u64,
}

impl Default for QERecConfig {
    fn default() -> Self {
        let categorical = [
            ("entry_point", N_ENTRY_POINT),
            ("gender", N_GENDER),
            ("order_status", N_ORDER_STATUS),
            ("region", N_REGION),
            ("tier", N_TIER),
        ]
        .iter()
        .map(|(k, v)| (k.to_string(), *v))
        .collect();
        QERecConfig {
            dim: 16,
            feature_dim: 4,
            hidden: 32,
            conf_hidden: 8,
            omega: DEFAULT_OMEGA,
            label_scale: 1.0,
            lambda_w: 0.1,
            dropout: 0.2,
            lr: 0.5,
            epochs: 6,
            batch_size: 32,
            warmup_fraction: 0.03,
            weight_decay: 0.01,
            clip_norm: 1.0,
            reference_time: 1_700_000_000,
            categorical,
            seed: 0,
        }
    }
}

impl QERecConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(0.0..=1.0).contains(&self.omega) {
            return bad("omega must lie in [0, 1]");
        }
        if self.dim == 0 || self.feature_dim == 0 || self.hidden == 0 || self.conf_hidden == 0 {
            return bad("layer sizes must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr >= 0.0) || !(self.lambda_w >= 0.0) || !(self.label_scale > 0.0) {
            return bad("lr and lambda_w must be non-negative, label_scale positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Ids {
    item: ParamId,
    sa: ParamId,
    time: ParamId,
    ca_w: ParamId,
    ca_b: ParamId,
    fuse1_w: ParamId,
    fuse1_b: ParamId,
    fuse2_w: ParamId,
    fuse2_b: ParamId,
    age: ParamId,
    intent_id: ParamId,
    int1_w: ParamId,
    int1_b: ParamId,
    int2_w: ParamId,
    int2_b: ParamId,
    q_w: ParamId,
    q_b: ParamId,
    conf1_w: ParamId,
    conf1_b: ParamId,
    conf2_w: ParamId,
    conf2_b: ParamId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelRepr", into = "ModelRepr")]
pub struct QERecModel {
    omega: f64,
    dim: usize,
    reference_time: u64,
    categorical: BTreeMap<String, u32>,
    intent_ids: Vec<u64>,
    params: ParamStore,
    feature_ids: Vec<(String, ParamId)>,
    ids: Ids,
}

#[derive(Serialize, Deserialize)]
struct ModelRepr {
    omega: f64,
    dim: usize,
    reference_time: u64,
    categorical: BTreeMap<String, u32>,
    intent_ids: Vec<u64>,
    params: ParamStore,
}

impl TryFrom<ModelRepr> for QERecModel {
    type Error = Error;
    fn try_from(r: ModelRepr) -> Result<Self> {
        QERecModel::assemble(r.omega, r.dim, r.reference_time, r.categorical, r.intent_ids, r.params)
    }
}

impl From<QERecModel> for ModelRepr {
    fn from(m: QERecModel) -> Self {
        ModelRepr {
            omega: m.omega,
            dim: m.dim,
            reference_time: m.reference_time,
            categorical: m.categorical,
            intent_ids: m.intent_ids,
            params: m.params,
        }
    }
}

fn gaussian(rows: usize, cols: usize, scale: f64, rng: &mut Rng) -> Dense {
    let data = (0..rows * cols).map(|_| scale * rng.normal()).collect();
    Dense::new(rows, cols, data).expect("shape matches data")
}

fn fan_in(rows: usize, cols: usize, rng: &mut Rng) -> Dense {
    gaussian(rows, cols, 1.0 / libm::sqrt(cols as f64), rng)
}

fn emb_name(feature: &str) -> String {
    format!("user.emb.{feature}")
}

impl QERecModel {
    /// Fresh towers for the intents of `kb`.
    pub fn new(cfg: &QERecConfig, kb: &KnowledgeBase) -> Result<Self> {
        cfg.validate()?;
        if kb.is_empty() {
            return Err(Error::InvalidConfig("empty knowledge base".into()));
        }
        if kb.dim() != cfg.dim {
            return Err(Error::InvalidConfig(format!(
                "knowledge base dimension {} differs from ranker dimension {}",
                kb.dim(),
                cfg.dim
            )));
        }
        let mut rng = Rng::new(cfg.seed).fork(0x0051_E8EC);
        let (d, f, h, hc) = (cfg.dim, cfg.feature_dim, cfg.hidden, cfg.conf_hidden);
        let n = kb.len();
        let mut p = ParamStore::new();
        for (name, card) in &cfg.categorical {
            p.add(&emb_name(name), gaussian(*card as usize, f, 0.5, &mut rng))?;
        }
        p.add("user.emb.age_bucket", gaussian(N_AGE_BUCKETS, f, 0.5, &mut rng))?;
        p.add("user.item", gaussian(n, d, 0.5, &mut rng))?;
        p.add("user.sa", fan_in(d, d, &mut rng))?;
        p.add("user.time", gaussian(N_TIME_BUCKETS, d, 0.5, &mut rng))?;
        p.add("user.ca_w", fan_in(d, 2 * d, &mut rng))?;
        p.add("user.ca_b", Dense::zeros(d, 1))?;
        let nonseq = f * (cfg.categorical.len() + 1);
        p.add("user.fuse1_w", fan_in(h, nonseq + 2 * d, &mut rng))?;
        p.add("user.fuse1_b", Dense::zeros(h, 1))?;
        p.add("user.fuse2_w", fan_in(d, h, &mut rng))?;
        p.add("user.fuse2_b", Dense::zeros(d, 1))?;
        p.add("intent.id", gaussian(n, d, 0.5, &mut rng))?;
        p.add("intent.l1_w", fan_in(h, 3 * d, &mut rng))?;
        p.add("intent.l1_b", Dense::zeros(h, 1))?;
        p.add("intent.l2_w", fan_in(d, h, &mut rng))?;
        p.add("intent.l2_b", Dense::zeros(d, 1))?;
        p.add("query.w", fan_in(d, d, &mut rng))?;
        p.add("query.b", Dense::zeros(d, 1))?;
        p.add("conf.l1_w", fan_in(hc, d, &mut rng))?;
        p.add("conf.l1_b", Dense::zeros(hc, 1))?;
        p.add("conf.l2_w", fan_in(1, hc, &mut rng))?;
        p.add("conf.l2_b", Dense::zeros(1, 1))?;
        let ids = kb.intents.iter().map(|i| i.intent_id).collect();
        Self::assemble(cfg.omega, d, cfg.reference_time, cfg.categorical.clone(), ids, p)
    }

    fn assemble(
        omega: f64,
        dim: usize,
        reference_time: u64,
        categorical: BTreeMap<String, u32>,
        intent_ids: Vec<u64>,
        params: ParamStore,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&omega) {
            return Err(Error::InvalidConfig("omega must lie in [0, 1]".into()));
        }
        if intent_ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig("intent ids must be strictly ascending".into()));
        }
        let get = |n: &str| params.id(n);
        let ids = Ids {
            item: get("user.item")?,
            sa: get("user.sa")?,
            time: get("user.time")?,
            ca_w: get("user.ca_w")?,
            ca_b: get("user.ca_b")?,
            fuse1_w: get("user.fuse1_w")?,
            fuse1_b: get("user.fuse1_b")?,
            fuse2_w: get("user.fuse2_w")?,
            fuse2_b: get("user.fuse2_b")?,
            age: get("user.emb.age_bucket")?,
            intent_id: get("intent.id")?,
            int1_w: get("intent.l1_w")?,
            int1_b: get("intent.l1_b")?,
            int2_w: get("intent.l2_w")?,
            int2_b: get("intent.l2_b")?,
            q_w: get("query.w")?,
            q_b: get("query.b")?,
            conf1_w: get("conf.l1_w")?,
            conf1_b: get("conf.l1_b")?,
            conf2_w: get("conf.l2_w")?,
            conf2_b: get("conf.l2_b")?,
        };
        let feature_ids = categorical
            .keys()
            .map(|k| Ok((k.clone(), get(&emb_name(k))?)))
            .collect::<Result<Vec<_>>>()?;
        for (id, rows) in [(ids.item, intent_ids.len()), (ids.intent_id, intent_ids.len())] {
            if params.value(id).rows() != rows {
                return Err(Error::Shape {
                    op: "intent tables",
                    expected: format!("{rows} rows"),
                    found: format!("{}", params.value(id).rows()),
                });
            }
        }
        if params.value(ids.q_w).rows() != dim {
            return Err(Error::Shape {
                op: "query tower",
                expected: format!("{dim}"),
                found: format!("{}", params.value(ids.q_w).rows()),
            });
        }
        Ok(QERecModel {
            omega,
            dim,
            reference_time,
            categorical,
            intent_ids,
            params,
            feature_ids,
            ids,
        })
    }

    pub fn omega(&self) -> f64 {
        self.omega
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

    pub fn intent_ids(&self) -> &[u64] {
        &self.intent_ids
    }

    /// Hash of every parameter plus the scoring settings.
    pub fn fingerprint(&self) -> u64 {
        let mut h = crate::hash::Fnv64::new();
        h.write_u64(self.params.fingerprint());
        h.write_f64(self.omega);
        h.write_u64(self.reference_time);
        for id in &self.intent_ids {
            h.write_u64(*id);
        }
        h.finish()
    }

    fn intent_row(&self, id: u64) -> Result<usize> {
        self.intent_ids.binary_search(&id).map_err(|_| Error::UnknownIntent(id))
    }

    /// User tower on `tape`. Dropout in the fusion layer is applied only
    /// when `train` carries an RNG and a positive rate.
    pub fn user_on(&self, tape: &mut Tape, user: &UserRecord, train: Option<(&mut Rng, f64)>) -> Result<Var> {
        let mut parts = Vec::with_capacity(self.feature_ids.len() + 3);
        for (name, pid) in &self.feature_ids {
            let v = user
                .profile
                .get(name)
                .or_else(|| user.context.get(name))
                .copied()
                .ok_or_else(|| Error::InvalidConfig(format!("user {} lacks feature {name}", user.user_id)))?;
            if v >= self.categorical[name] {
                return Err(Error::UnmappedFeature {
                    feature: name.clone(),
                    id: v,
                });
            }
            parts.push(tape.param_row(*pid, v as usize)?);
        }
        let age = user
            .context
            .get(AGE_FEATURE)
            .copied()
            .ok_or_else(|| Error::InvalidConfig(format!("user {} lacks feature {AGE_FEATURE}", user.user_id)))?;
        parts.push(tape.param_row(self.ids.age, order_age_bucket(age))?);

        if user.behavior_sequence.is_empty() {
            let z = tape.constant(vec![0.0; 2 * self.dim]);
            parts.push(z);
        } else {
            let mut items = Vec::with_capacity(user.behavior_sequence.len());
            let mut projected = Vec::with_capacity(items.capacity());
            let mut grouped = Vec::with_capacity(items.capacity());
            for (intent, ts) in &user.behavior_sequence {
                let x = tape.param_row(self.ids.item, self.intent_row(*intent)?)?;
                items.push(x);
                projected.push(tape.affine(self.ids.sa, None, x)?);
                let bucket = time_bucket(self.reference_time.saturating_sub(*ts));
                let t = tape.param_row(self.ids.time, bucket)?;
                let xt = tape.concat(&[x, t]);
                let pre = tape.affine(self.ids.ca_w, Some(self.ids.ca_b), xt)?;
                grouped.push(tape.tanh(pre));
            }
            parts.push(tape.self_attention(&projected)?);
            parts.push(tape.cross_attention(&items, &grouped)?);
        }
        let v = tape.concat(&parts);
        let h = tape.affine(self.ids.fuse1_w, Some(self.ids.fuse1_b), v)?;
        let mut h = tape.tanh(h);
        if let Some((rng, rate)) = train {
            h = tape.dropout(h, rate, rng)?;
        }
        let o = tape.affine(self.ids.fuse2_w, Some(self.ids.fuse2_b), h)?;
        Ok(tape.sigmoid(o))
    }

    pub fn intent_on(&self, tape: &mut Tape, intent: &IntentRecord) -> Result<Var> {
        if intent.semantic_embedding.len() != self.dim {
            return Err(Error::Shape {
                op: "intent tower",
                expected: format!("{}", self.dim),
                found: format!("{}", intent.semantic_embedding.len()),
            });
        }
        let z_id = tape.param_row(self.ids.intent_id, self.intent_row(intent.intent_id)?)?;
        let z_sem = tape.constant(intent.semantic_embedding.clone());
        let cross = tape.mul(z_id, z_sem)?;
        let x = tape.concat(&[z_id, z_sem, cross]);
        let h = tape.affine(self.ids.int1_w, Some(self.ids.int1_b), x)?;
        let h = tape.tanh(h);
        let o = tape.affine(self.ids.int2_w, Some(self.ids.int2_b), h)?;
        Ok(tape.tanh(o))
    }

    pub fn query_on(&self, tape: &mut Tape, e_ltp: &[f64]) -> Result<Var> {
        if e_ltp.len() != self.dim {
            return Err(Error::Shape {
                op: "query tower",
                expected: format!("{}", self.dim),
                found: format!("{}", e_ltp.len()),
            });
        }
        let x = tape.constant(e_ltp.to_vec());
        tape.affine(self.ids.q_w, Some(self.ids.q_b), x)
    }

    pub fn confidence_on(&self, tape: &mut Tape, z_u: Var, z_i_clicked: Var) -> Result<Var> {
        let x = tape.mul(z_u, z_i_clicked)?;
        let h = tape.affine(self.ids.conf1_w, Some(self.ids.conf1_b), x)?;
        let h = tape.tanh(h);
        let o = tape.affine(self.ids.conf2_w, Some(self.ids.conf2_b), h)?;
        let w = tape.sigmoid(o);
        tape.index(w, 0)
    }

    /// `omega cos(z_u, z_i) + (1 - omega) cos(z_i, z_q)`; the query term is
    /// skipped entirely when `omega = 1`.
    pub fn score_on(&self, tape: &mut Tape, z_u: Var, z_i: Var, z_q: Option<Var>) -> Result<Var> {
        let cu = tape.cosine(z_u, z_i)?;
        if self.omega == 1.0 {
            return Ok(cu);
        }
        let z_q = z_q.ok_or_else(|| Error::InvalidConfig("query embedding required when omega < 1".into()))?;
        let cq = tape.cosine(z_i, z_q)?;
        let a = tape.scale(cu, self.omega);
        let b = tape.scale(cq, 1.0 - self.omega);
        tape.add(a, b)
    }

    pub fn user_tower(&self, user: &UserRecord) -> Result<Vec<f64>> {
        let mut t = Tape::new(&self.params);
        let v = self.user_on(&mut t, user, None)?;
        Ok(t.value(v).to_vec())
    }

    pub fn intent_tower(&self, intent: &IntentRecord) -> Result<Vec<f64>> {
        let mut t = Tape::new(&self.params);
        let v = self.intent_on(&mut t, intent)?;
        Ok(t.value(v).to_vec())
    }

    pub fn query_tower(&self, e_ltp: &[f64]) -> Result<Vec<f64>> {
        let mut t = Tape::new(&self.params);
        let v = self.query_on(&mut t, e_ltp)?;
        Ok(t.value(v).to_vec())
    }

    pub fn confidence_weight(&self, z_u: &[f64], z_i_clicked: &[f64]) -> Result<f64> {
        let mut t = Tape::new(&self.params);
        let u = t.constant(z_u.to_vec());
        let i = t.constant(z_i_clicked.to_vec());
        let w = self.confidence_on(&mut t, u, i)?;
        Ok(t.scalar(w))
    }

    /// Untaped score from precomputed tower outputs; bitwise equal to the
    /// taped path.
    pub fn score_vectors(&self, z_u: &[f64], z_i: &[f64], z_q: Option<&[f64]>) -> Result<f64> {
        let mut t = Tape::new(&self.params);
        let u = t.constant(z_u.to_vec());
        let i = t.constant(z_i.to_vec());
        let q = z_q.map(|q| t.constant(q.to_vec()));
        let s = self.score_on(&mut t, u, i, q)?;
        Ok(t.scalar(s))
    }

    pub fn build_offline_index(&self, kb: &KnowledgeBase) -> Result<OfflineIntentIndex> {
        let mut vectors = BTreeMap::new();
        for it in &kb.intents {
            vectors.insert(it.intent_id, self.intent_tower(it)?);
        }
        for id in &self.intent_ids {
            if !vectors.contains_key(id) {
                return Err(Error::UnknownIntent(*id));
            }
        }
        Ok(OfflineIntentIndex {
            fingerprint: self.fingerprint(),
            vectors,
        })
    }
}

/// Standalone weighted score, for fixtures and reports.
pub fn score(cos_ui: f64, cos_iq: f64, omega: f64) -> f64 {
    omega * cos_ui + (1.0 - omega) * cos_iq
}

/// Precomputed intent-tower outputs tagged with the building model's
/// fingerprint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OfflineIntentIndex {
    pub fingerprint: u64,
    pub vectors: BTreeMap<u64, Vec<f64>>,
}

impl OfflineIntentIndex {
    pub fn lookup(&self, model: &QERecModel, intent_id: u64) -> Result<&[f64]> {
        self.check(model)?;
        self.get(intent_id)
    }

    pub fn check(&self, model: &QERecModel) -> Result<()> {
        let current = model.fingerprint();
        if current != self.fingerprint {
            return Err(Error::StaleIndex {
                built: self.fingerprint,
                current,
            });
        }
        Ok(())
    }

    fn get(&self, intent_id: u64) -> Result<&[f64]> {
        self.vectors
            .get(&intent_id)
            .map(Vec::as_slice)
            .ok_or(Error::UnknownIntent(intent_id))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredList {
    pub user_id: u64,
    pub candidates: Vec<u64>,
    pub scores: Vec<f64>,
    /// Candidate positions in display order.
    pub ranking: Vec<usize>,
    pub p_pred: Vec<f64>,
}

impl ScoredList {
    pub fn ranked_ids(&self) -> Vec<u64> {
        self.ranking.iter().map(|&i| self.candidates[i]).collect()
    }
}

/// A model bound to an index it has been checked against.
pub struct Scorer<'m> {
    model: &'m QERecModel,
    index: &'m OfflineIntentIndex,
}

impl<'m> Scorer<'m> {
    pub fn new(model: &'m QERecModel, index: &'m OfflineIntentIndex) -> Result<Self> {
        index.check(model)?;
        Ok(Scorer { model, index })
    }

    pub fn model(&self) -> &QERecModel {
        self.model
    }

    pub fn scores(&self, z_u: &[f64], z_q: Option<&[f64]>, candidates: &[u64]) -> Result<Vec<f64>> {
        if candidates.is_empty() {
            return Err(Error::EmptyCandidates);
        }
        candidates
            .iter()
            .map(|c| self.model.score_vectors(z_u, self.index.get(*c)?, z_q))
            .collect()
    }

    pub fn rank(&self, user: &UserRecord, e_ltp: Option<&[f64]>, candidates: &[u64]) -> Result<ScoredList> {
        let z_u = self.model.user_tower(user)?;
        let z_q = match e_ltp {
            Some(e) if self.model.omega < 1.0 => Some(self.model.query_tower(e)?),
            _ => None,
        };
        self.rank_vectors(user.user_id, &z_u, z_q.as_deref(), candidates)
    }

    pub fn rank_vectors(&self, user_id: u64, z_u: &[f64], z_q: Option<&[f64]>, candidates: &[u64]) -> Result<ScoredList> {
        let scores = self.scores(z_u, z_q, candidates)?;
        let ranking = rank_order(&scores, candidates)?;
        let p_pred = softmax(&scores)?;
        Ok(ScoredList {
            user_id,
            candidates: candidates.to_vec(),
            scores,
            ranking,
            p_pred,
        })
    }
}

/// Sum over lists of `w * KL(softmax(scale * y) || softmax(s))`.
pub fn listnet_loss(lists: &[(Vec<f64>, Vec<f64>, f64)], label_scale: f64) -> Result<f64> {
    let mut total = 0.0;
    for (scores, labels, w) in lists {
        if scores.len() != labels.len() {
            return Err(Error::LengthMismatch(format!("{} scores for {} labels", scores.len(), labels.len())));
        }
        if scores.len() < 2 {
            return Err(Error::ListTooShort(scores.len()));
        }
        let y: Vec<f64> = labels.iter().map(|l| label_scale * l).collect();
        total += w * softmax_kl(&softmax(&y)?, scores)?;
    }
    Ok(total)
}

/// Taped per-list term `w * KL + lambda_w (1 - w)^2`, with `w = None`
/// meaning an unweighted list.
pub fn listnet_on(
    tape: &mut Tape,
    scores: Var,
    labels: &[f64],
    w: Option<Var>,
    label_scale: f64,
    lambda_w: f64,
) -> Result<Var> {
    if labels.len() < 2 {
        return Err(Error::ListTooShort(labels.len()));
    }
    let y: Vec<f64> = labels.iter().map(|l| label_scale * l).collect();
    let kl = tape.softmax_kl(softmax(&y)?, scores)?;
    match w {
        None => Ok(kl),
        Some(w) => {
            let weighted = tape.mul(w, kl)?;
            let one = tape.constant(vec![1.0]);
            let gap = tape.sub(one, w)?;
            let sq = tape.mul(gap, gap)?;
            let pen = tape.scale(sq, lambda_w);
            tape.add(weighted, pen)
        }
    }
}

/// Everything a ranking pass needs about one impression.
pub struct RankingExample<'a> {
    pub user: &'a UserRecord,
    pub impression: &'a ImpressionRecord,
    pub query: Option<&'a [f64]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub total: f64,
    pub mean_w: f64,
}

/// Batch-mean training loss recorded on `tape`. Intent-tower outputs are
/// computed once per distinct intent.
pub fn batch_loss_on(
    model: &QERecModel,
    tape: &mut Tape,
    kb: &KnowledgeBase,
    batch: &[RankingExample],
    cfg: &QERecConfig,
    mut dropout: Option<&mut Rng>,
) -> Result<(Var, LossParts)> {
    if batch.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    let mut cache: BTreeMap<u64, Var> = BTreeMap::new();
    let mut terms = Vec::with_capacity(batch.len());
    let mut w_sum = 0.0;
    for ex in batch {
        let imp = ex.impression;
        let train = dropout.as_deref_mut().map(|r| (r, cfg.dropout));
        let z_u = model.user_on(tape, ex.user, train)?;
        let z_q = match (model.omega < 1.0, ex.query) {
            (true, Some(q)) => Some(model.query_on(tape, q)?),
            (true, None) => {
                return Err(Error::InvalidConfig(format!("no query embedding for user {}", ex.user.user_id)))
            }
            (false, _) => None,
        };
        let mut scores = Vec::with_capacity(imp.candidates.len());
        let mut clicked = Vec::new();
        for (c, l) in imp.candidates.iter().zip(&imp.labels) {
            let z_i = match cache.get(c) {
                Some(v) => *v,
                None => {
                    let v = model.intent_on(tape, kb.get(*c)?)?;
                    cache.insert(*c, v);
                    v
                }
            };
            if *l > 0 {
                clicked.push(z_i);
            }
            scores.push(model.score_on(tape, z_u, z_i, z_q)?);
        }
        if clicked.is_empty() {
            return Err(Error::NoRelevant);
        }
        let zc = if clicked.len() == 1 { clicked[0] } else { tape.mean(&clicked)? };
        let w = model.confidence_on(tape, z_u, zc)?;
        w_sum += tape.scalar(w);
        let s = tape.concat(&scores);
        let labels: Vec<f64> = imp.labels.iter().map(|l| f64::from(*l)).collect();
        terms.push(listnet_on(tape, s, &labels, Some(w), cfg.label_scale, cfg.lambda_w)?);
    }
    let all = tape.concat(&terms);
    let sum = tape.sum(all);
    let loss = tape.scale(sum, 1.0 / batch.len() as f64);
    let parts = LossParts {
        total: tape.scalar(loss),
        mean_w: w_sum / batch.len() as f64,
    };
    Ok((loss, parts))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub mean_w: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

/// Indexes users by id.
pub fn user_map(users: &[UserRecord]) -> BTreeMap<u64, &UserRecord> {
    users.iter().map(|u| (u.user_id, u)).collect()
}

fn lookup_user<'a>(users: &BTreeMap<u64, &'a UserRecord>, id: u64) -> Result<&'a UserRecord> {
    users
        .get(&id)
        .copied()
        .ok_or_else(|| Error::InvalidConfig(format!("impression references unknown user {id}")))
}

/// Mini-batch SGD over the training impressions that have at least one
/// click. `queries` holds one cached query embedding per user and is
/// required unless `omega = 1`.
pub fn train_stage1(
    cfg: &QERecConfig,
    kb: &KnowledgeBase,
    users: &[UserRecord],
    impressions: &[ImpressionRecord],
    queries: Option<&BTreeMap<u64, Vec<f64>>>,
) -> Result<(QERecModel, Vec<EpochLog>)> {
    let mut model = QERecModel::new(cfg, kb)?;
    let log = fit(&mut model, cfg, kb, users, impressions, queries)?;
    Ok((model, log))
}

/// Continues training `model` in place.
pub fn fit(
    model: &mut QERecModel,
    cfg: &QERecConfig,
    kb: &KnowledgeBase,
    users: &[UserRecord],
    impressions: &[ImpressionRecord],
    queries: Option<&BTreeMap<u64, Vec<f64>>>,
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    let by_id = user_map(users);
    let usable: Vec<&ImpressionRecord> = impressions.iter().filter(|i| i.labels.iter().any(|l| *l > 0)).collect();
    if usable.is_empty() {
        return Err(Error::NoRelevant);
    }
    let steps_per_epoch = usable.len().div_ceil(cfg.batch_size);
    let mut state = OptimizerState::sgd(
        LrSchedule {
            base_lr: cfg.lr,
            warmup_fraction: cfg.warmup_fraction,
            total_steps: steps_per_epoch * cfg.epochs,
        },
        cfg.weight_decay,
        cfg.clip_norm,
    );
    let root = Rng::new(cfg.seed).fork(0x7EA1);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..usable.len()).collect();
        let mut rng = root.fork(epoch as u64);
        rng.shuffle(&mut order);
        let mut drop_rng = root.fork(0x1_0000 + epoch as u64);
        let (mut loss_sum, mut w_sum, mut last_norm, mut last_lr) = (0.0, 0.0, 0.0, 0.0);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = chunk
                .iter()
                .map(|&i| {
                    let imp = usable[i];
                    Ok(RankingExample {
                        user: lookup_user(&by_id, imp.user_id)?,
                        impression: imp,
                        query: match queries {
                            Some(q) => q.get(&imp.user_id).map(Vec::as_slice),
                            None => None,
                        },
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let grads = {
                let mut tape = Tape::new(&model.params);
                let rate = cfg.dropout;
                let dr = if rate > 0.0 { Some(&mut drop_rng) } else { None };
                let (loss, parts) = batch_loss_on(model, &mut tape, kb, &batch, cfg, dr)?;
                loss_sum += parts.total * batch.len() as f64;
                w_sum += parts.mean_w * batch.len() as f64;
                tape.backward(loss).map_err(|e| match e {
                    Error::NonFinite(m) => Error::NonFinite(format!("{m} at epoch {epoch}, batch {b}")),
                    other => other,
                })?
            };
            model.params.accumulate(&grads);
            let stats = optimizer_step(&mut model.params, &mut state, step)?;
            step += 1;
            last_norm = stats.grad_norm;
            last_lr = stats.lr;
        }
        let n = usable.len() as f64;
        log.push(EpochLog {
            epoch,
            loss: loss_sum / n,
            mean_w: w_sum / n,
            grad_norm: last_norm,
            lr: last_lr,
        });
    }
    Ok(log)
}

/// Scores every impression and aggregates the ranking metrics. `truth`
/// maps users to their true intent for the hit-rate column.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_model(
    model: &QERecModel,
    kb: &KnowledgeBase,
    users: &[UserRecord],
    impressions: &[ImpressionRecord],
    queries: Option<&BTreeMap<u64, Vec<f64>>>,
    truth: Option<&BTreeMap<u64, u64>>,
    seed: u64,
    label: &str,
) -> Result<MetricReport> {
    let index = model.build_offline_index(kb)?;
    let scorer = Scorer::new(model, &index)?;
    let by_id = user_map(users);
    let mut items = Vec::with_capacity(impressions.len());
    for imp in impressions {
        let user = lookup_user(&by_id, imp.user_id)?;
        let q = queries.and_then(|q| q.get(&imp.user_id)).map(Vec::as_slice);
        if model.omega() < 1.0 && q.is_none() {
            return Err(Error::InvalidConfig(format!("no query embedding for user {}", imp.user_id)));
        }
        let list = scorer.rank(user, q, &imp.candidates)?;
        items.push(ScoredImpression {
            user_id: imp.user_id,
            candidates: list.candidates,
            scores: list.scores,
            labels: imp.labels.iter().map(|l| f64::from(*l)).collect(),
            true_intent: truth.and_then(|t| t.get(&imp.user_id).copied()),
        });
    }
    metrics::evaluate(&items, seed, label)
}
