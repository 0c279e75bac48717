//! Synthetic chatbot-intent world with a known latent ground truth.
//!
//! Intents are grouped into topic clusters. Each user carries a hidden
//! latent need near one cluster centre; their context fields and click
//! history are sampled conditionally on it, and click labels come from a
//! softmax over candidate affinities. All draws come from one seeded
//! [`Rng`], so a [`GeneratorConfig`] fixes the dataset bitwise.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::diffcore::ops::{cosine_sim, dot, normalize};
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const SECONDS_PER_HOUR: u64 = 3600;
pub const SECONDS_PER_DAY: u64 = 24 * SECONDS_PER_HOUR;

pub const PROFILE_FEATURES: [&str; 3] = ["gender", "region", "tier"];
pub const CONTEXT_FEATURES: [&str; 3] = ["entry_point", "order_age_days", "order_status"];

/// Cardinalities of the categorical features (ids are `0..n`).
pub const N_GENDER: u32 = 3;
pub const N_REGION: u32 = 6;
pub const N_TIER: u32 = 4;
pub const N_ENTRY_POINT: u32 = 7;
pub const N_ORDER_STATUS: u32 = 10;
pub const MAX_ORDER_AGE_DAYS: u32 = 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub n_users: usize,
    pub n_intents: usize,
    pub list_length: usize,
    pub dim: usize,
    pub n_clusters: usize,
    pub click_temperature: f64,
    pub max_clicks: usize,
    /// Spread of intent topics around their cluster centre.
    pub topic_noise: f64,
    /// Noise separating an intent's semantic embedding from its topic.
    pub semantic_noise: f64,
    /// Spread of latent needs around the user's cluster centre.
    pub need_noise: f64,
    /// Gaussian noise added to affinities by the simulated retriever.
    pub retrieval_noise: f64,
    /// Probability that each context field takes the value its cluster implies.
    pub context_fidelity: f64,
    pub history_max: usize,
    pub history_temperature: f64,
    pub eval_fraction: f64,
    pub reference_time: u64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            n_users: 10_000,
            n_intents: 200,
            list_length: 10,
            dim: 16,
            n_clusters: 8,
            click_temperature: 0.1,
            max_clicks: 1,
            topic_noise: 0.6,
            semantic_noise: 0.2,
            need_noise: 0.6,
            retrieval_noise: 0.3,
            context_fidelity: 0.6,
            history_max: 6,
            history_temperature: 0.15,
            eval_fraction: 0.2,
            reference_time: 1_700_000_000,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.list_length < 2 {
            return bad("list_length must be >= 2");
        }
        if self.dim < 2 {
            return bad("dim must be >= 2");
        }
        if self.n_intents < 2 {
            return bad("n_intents must be >= 2");
        }
        if self.list_length > self.n_intents {
            return bad("list_length must not exceed n_intents");
        }
        if self.n_clusters == 0 || self.n_clusters > self.n_intents {
            return bad("n_clusters must be in [1, n_intents]");
        }
        if self.dim < 64 && self.n_clusters as u128 > (1u128 << self.dim) {
            return bad("dim too small to place the requested clusters (k > 2^d)");
        }
        if !(0.0..1.0).contains(&self.eval_fraction) {
            return bad("eval_fraction must be in [0, 1)");
        }
        if self.max_clicks == 0 {
            return bad("max_clicks must be >= 1");
        }
        if self.click_temperature < 0.0 || self.history_temperature <= 0.0 {
            return bad("temperatures must be non-negative (history strictly positive)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentRecord {
    pub intent_id: u64,
    pub text: String,
    pub cluster: usize,
    pub topic_vector: Vec<f64>,
    pub semantic_embedding: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeBase {
    pub intents: Vec<IntentRecord>,
    /// Unit cluster centres the topics were drawn around.
    pub centers: Vec<Vec<f64>>,
}

impl KnowledgeBase {
    pub fn len(&self) -> usize {
        self.intents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.intents.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.intents.first().map_or(0, |i| i.topic_vector.len())
    }

    /// Row position of an intent id (ids are dense `0..n`).
    pub fn position(&self, intent_id: u64) -> Result<usize> {
        let p = intent_id as usize;
        match self.intents.get(p) {
            Some(rec) if rec.intent_id == intent_id => Ok(p),
            _ => self
                .intents
                .iter()
                .position(|r| r.intent_id == intent_id)
                .ok_or(Error::UnknownIntent(intent_id)),
        }
    }

    pub fn get(&self, intent_id: u64) -> Result<&IntentRecord> {
        Ok(&self.intents[self.position(intent_id)?])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserRecord {
    pub user_id: u64,
    pub profile: BTreeMap<String, u32>,
    /// `(intent_id, timestamp)` pairs, ascending by timestamp.
    pub behavior_sequence: Vec<(u64, u64)>,
    pub context: BTreeMap<String, u32>,
    /// Hidden ground truth; never written to training files.
    pub latent_need: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpressionRecord {
    pub user_id: u64,
    pub candidates: Vec<u64>,
    pub labels: Vec<u8>,
    pub split: Split,
}

impl ImpressionRecord {
    pub fn clicked(&self) -> impl Iterator<Item = u64> + '_ {
        self.candidates
            .iter()
            .zip(&self.labels)
            .filter(|(_, l)| **l > 0)
            .map(|(c, _)| *c)
    }

    pub fn has_both_classes(&self) -> bool {
        self.labels.iter().any(|l| *l > 0) && self.labels.iter().any(|l| *l == 0)
    }
}

/// One line of a training/eval dataset file: the observable user features
/// joined with their impression. Carries no latent ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRecord {
    pub user_id: u64,
    pub profile: BTreeMap<String, u32>,
    pub behavior_sequence: Vec<(u64, u64)>,
    pub context: BTreeMap<String, u32>,
    pub candidates: Vec<u64>,
    pub labels: Vec<u8>,
    pub split: Split,
}

/// Line of the evaluation oracle file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleRecord {
    pub user_id: u64,
    pub latent_need: Vec<f64>,
    pub true_intent_id: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    pub kb: KnowledgeBase,
    pub users: Vec<UserRecord>,
    pub impressions: Vec<ImpressionRecord>,
}

struct Theme {
    words: [&'static str; 8],
    entry_point: u32,
    order_status: u32,
}

const THEMES: [Theme; 8] = [
    Theme {
        words: ["parcel", "delivery", "shipping", "courier", "tracking", "arrive", "late", "receive"],
        entry_point: 3,
        order_status: 8,
    },
    Theme {
        words: ["refund", "money", "credit", "reimburse", "wallet", "cancelled", "back", "balance"],
        entry_point: 4,
        order_status: 6,
    },
    Theme {
        words: ["payment", "card", "failed", "charge", "bank", "installment", "checkout", "pay"],
        entry_point: 2,
        order_status: 1,
    },
    Theme {
        words: ["account", "password", "login", "email", "phone", "verify", "profile", "security"],
        entry_point: 5,
        order_status: 0,
    },
    Theme {
        words: ["voucher", "coupon", "discount", "code", "promo", "cashback", "coins", "deal"],
        entry_point: 1,
        order_status: 2,
    },
    Theme {
        words: ["return", "exchange", "damaged", "wrong", "item", "pickup", "label", "defective"],
        entry_point: 4,
        order_status: 9,
    },
    Theme {
        words: ["seller", "shop", "chat", "reply", "store", "rating", "contact", "message"],
        entry_point: 6,
        order_status: 7,
    },
    Theme {
        words: ["order", "cancel", "change", "address", "status", "confirm", "update", "modify"],
        entry_point: 0,
        order_status: 3,
    },
];

const OPENERS: [&str; 6] = ["how to", "why is my", "when will my", "can i", "what if my", "where is my"];

/// Entry point and order status that users of a cluster tend to show.
pub fn cluster_context(cluster: usize) -> (u32, u32) {
    match THEMES.get(cluster) {
        Some(t) => (t.entry_point, t.order_status),
        None => (cluster as u32 % N_ENTRY_POINT, cluster as u32 % N_ORDER_STATUS),
    }
}

fn noisy_unit(center: &[f64], noise: f64, rng: &mut Rng) -> Vec<f64> {
    if noise == 0.0 {
        return center.to_vec();
    }
    let d = center.len() as f64;
    let scale = noise / libm::sqrt(d);
    let v: Vec<f64> = center.iter().map(|c| c + scale * rng.normal()).collect();
    normalize(&v).unwrap_or_else(|_| center.to_vec())
}

fn cluster_centers(cfg: &GeneratorConfig, rng: &mut Rng) -> Result<Vec<Vec<f64>>> {
    let k = cfg.n_clusters;
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    let limit = 0.5;
    let mut tries = 0usize;
    while centers.len() < k {
        tries += 1;
        if tries > 100_000 {
            return Err(Error::InvalidConfig(format!(
                "could not place {k} separated cluster centres in dimension {}",
                cfg.dim
            )));
        }
        let c = rng.unit_vector(cfg.dim);
        if centers.iter().all(|o| dot(o, &c) < limit) {
            centers.push(c);
        }
    }
    Ok(centers)
}

fn intent_text(cluster: usize, rng: &mut Rng) -> String {
    let opener = OPENERS[rng.below(OPENERS.len())];
    let mut text = String::from(opener);
    match THEMES.get(cluster) {
        Some(theme) => {
            let mut idx: Vec<usize> = (0..theme.words.len()).collect();
            rng.shuffle(&mut idx);
            for i in &idx[..3] {
                text.push(' ');
                text.push_str(theme.words[*i]);
            }
        }
        None => {
            let base = &THEMES[cluster % THEMES.len()];
            text.push_str(&format!(" topic{cluster}"));
            for _ in 0..2 {
                text.push(' ');
                text.push_str(base.words[rng.below(base.words.len())]);
            }
        }
    }
    text
}

pub fn generate_kb(cfg: &GeneratorConfig) -> Result<KnowledgeBase> {
    cfg.validate()?;
    let mut rng = Rng::new(cfg.seed).fork(1);
    let centers = cluster_centers(cfg, &mut rng)?;
    let intents = (0..cfg.n_intents)
        .map(|i| {
            let cluster = i % cfg.n_clusters;
            let topic = noisy_unit(&centers[cluster], cfg.topic_noise, &mut rng);
            let sem = noisy_unit(&topic, cfg.semantic_noise, &mut rng);
            IntentRecord {
                intent_id: i as u64,
                text: intent_text(cluster, &mut rng),
                cluster,
                topic_vector: topic,
                semantic_embedding: sem,
            }
        })
        .collect();
    Ok(KnowledgeBase { intents, centers })
}

fn sample_field(preferred: u32, n: u32, fidelity: f64, rng: &mut Rng) -> u32 {
    if rng.bernoulli(fidelity) {
        preferred
    } else {
        rng.below(n as usize) as u32
    }
}

pub fn generate_users(cfg: &GeneratorConfig, kb: &KnowledgeBase) -> Result<Vec<UserRecord>> {
    cfg.validate()?;
    if kb.is_empty() {
        return Err(Error::InvalidConfig("empty knowledge base".into()));
    }
    let mut rng = Rng::new(cfg.seed).fork(2);
    let k = kb.centers.len();
    let mut users = Vec::with_capacity(cfg.n_users);
    for u in 0..cfg.n_users {
        let cluster = rng.below(k);
        let latent = noisy_unit(&kb.centers[cluster], cfg.need_noise, &mut rng);

        let mut profile = BTreeMap::new();
        profile.insert("gender".to_string(), rng.below(N_GENDER as usize) as u32);
        profile.insert("region".to_string(), rng.below(N_REGION as usize) as u32);
        profile.insert("tier".to_string(), rng.below(N_TIER as usize) as u32);

        let (pe, ps) = cluster_context(cluster);
        let mut context = BTreeMap::new();
        let entry = sample_field(pe, N_ENTRY_POINT, cfg.context_fidelity, &mut rng);
        let status = sample_field(ps, N_ORDER_STATUS, cfg.context_fidelity, &mut rng);
        let age = rng.below(MAX_ORDER_AGE_DAYS as usize + 1) as u32;
        context.insert("entry_point".to_string(), entry);
        context.insert("order_age_days".to_string(), age);
        context.insert("order_status".to_string(), status);

        let n_hist = rng.below(cfg.history_max + 1);
        let weights: Vec<f64> = kb
            .intents
            .iter()
            .map(|it| libm::exp((dot(&latent, &it.topic_vector) - 1.0) / cfg.history_temperature))
            .collect();
        let mut history: Vec<(u64, u64)> = (0..n_hist)
            .map(|_| {
                let pick = rng.categorical(&weights);
                // ages skew recent: squared uniform over two weeks
                let u = rng.uniform();
                let age = (u * u * (14 * SECONDS_PER_DAY) as f64) as u64;
                (kb.intents[pick].intent_id, cfg.reference_time - age)
            })
            .collect();
        history.sort_by_key(|(id, ts)| (*ts, *id));

        users.push(UserRecord {
            user_id: u as u64,
            profile,
            behavior_sequence: history,
            context,
            latent_need: latent,
        });
    }
    Ok(users)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

pub fn generate_impressions(
    cfg: &GeneratorConfig,
    users: &[UserRecord],
    kb: &KnowledgeBase,
) -> Result<Vec<ImpressionRecord>> {
    cfg.validate()?;
    if cfg.list_length > kb.len() {
        return Err(Error::InvalidConfig("list_length exceeds knowledge base size".into()));
    }
    let mut rng = Rng::new(cfg.seed).fork(3);
    let n_eval = libm::round(users.len() as f64 * cfg.eval_fraction) as usize;
    let first_eval = users.len() - n_eval;
    let mut out = Vec::with_capacity(users.len());
    for (pos, user) in users.iter().enumerate() {
        let affinity: Vec<f64> = kb
            .intents
            .iter()
            .map(|it| cosine_sim(&user.latent_need, &it.topic_vector))
            .collect::<Result<_>>()?;
        let noisy: Vec<f64> = affinity
            .iter()
            .map(|a| a + cfg.retrieval_noise * rng.normal())
            .collect();
        let mut order: Vec<usize> = (0..kb.len()).collect();
        order.sort_by(|a, b| noisy[*b].total_cmp(&noisy[*a]).then(a.cmp(b)));
        order.truncate(cfg.list_length);
        let cand_aff: Vec<f64> = order.iter().map(|i| affinity[*i]).collect();
        let split = if pos >= first_eval { Split::Eval } else { Split::Train };

        let labels = match split {
            Split::Eval => {
                let mut l = vec![0u8; order.len()];
                l[argmax(&cand_aff)] = 1;
                l
            }
            Split::Train => click_labels(&cand_aff, cfg, &mut rng)?,
        };
        out.push(ImpressionRecord {
            user_id: user.user_id,
            candidates: order.iter().map(|i| kb.intents[*i].intent_id).collect(),
            labels,
            split,
        });
    }
    Ok(out)
}

/// Independent Bernoulli clicks with probabilities softmax(affinity / T),
/// keeping at most `max_clicks` (the highest-affinity ones).
fn click_labels(aff: &[f64], cfg: &GeneratorConfig, rng: &mut Rng) -> Result<Vec<u8>> {
    let mut labels = vec![0u8; aff.len()];
    if cfg.click_temperature == 0.0 {
        labels[argmax(aff)] = 1;
        return Ok(labels);
    }
    let scaled: Vec<f64> = aff.iter().map(|a| a / cfg.click_temperature).collect();
    let p = crate::diffcore::ops::softmax(&scaled)?;
    let mut clicked: Vec<usize> = (0..aff.len()).filter(|i| rng.bernoulli(p[*i])).collect();
    if clicked.len() > cfg.max_clicks {
        clicked.sort_by(|a, b| aff[*b].total_cmp(&aff[*a]).then(a.cmp(b)));
        clicked.truncate(cfg.max_clicks);
    }
    for i in clicked {
        labels[i] = 1;
    }
    Ok(labels)
}

pub fn generate(cfg: &GeneratorConfig) -> Result<SyntheticWorld> {
    let kb = generate_kb(cfg)?;
    let users = generate_users(cfg, &kb)?;
    let impressions = generate_impressions(cfg, &users, &kb)?;
    Ok(SyntheticWorld {
        kb,
        users,
        impressions,
    })
}

impl SyntheticWorld {
    /// Observable dataset lines, one per impression.
    pub fn dataset_records(&self) -> Vec<DatasetRecord> {
        let by_id: BTreeMap<u64, &UserRecord> = self.users.iter().map(|u| (u.user_id, u)).collect();
        self.impressions
            .iter()
            .filter_map(|imp| {
                let u = by_id.get(&imp.user_id)?;
                Some(DatasetRecord {
                    user_id: u.user_id,
                    profile: u.profile.clone(),
                    behavior_sequence: u.behavior_sequence.clone(),
                    context: u.context.clone(),
                    candidates: imp.candidates.clone(),
                    labels: imp.labels.clone(),
                    split: imp.split,
                })
            })
            .collect()
    }

    /// Latent need and the highest-affinity candidate for every impression.
    pub fn oracle_records(&self) -> Result<Vec<OracleRecord>> {
        let by_id: BTreeMap<u64, &UserRecord> = self.users.iter().map(|u| (u.user_id, u)).collect();
        self.impressions
            .iter()
            .map(|imp| {
                let u = by_id.get(&imp.user_id).ok_or(Error::UnknownIntent(imp.user_id))?;
                Ok(OracleRecord {
                    user_id: u.user_id,
                    latent_need: u.latent_need.clone(),
                    true_intent_id: true_intent(&u.latent_need, &imp.candidates, &self.kb)?,
                })
            })
            .collect()
    }
}

/// Candidate with the highest latent-need affinity (lowest id on ties).
pub fn true_intent(latent_need: &[f64], candidates: &[u64], kb: &KnowledgeBase) -> Result<u64> {
    let mut best: Option<(f64, u64)> = None;
    for c in candidates {
        let a = cosine_sim(latent_need, &kb.get(*c)?.topic_vector)?;
        if best.map_or(true, |(b, id)| a > b || (a == b && *c < id)) {
            best = Some((a, *c));
        }
    }
    best.map(|(_, id)| id).ok_or(Error::EmptyCandidates)
}

/// Rebuild users (without latent needs) from dataset lines.
pub fn users_from_records(records: &[DatasetRecord]) -> Vec<UserRecord> {
    records
        .iter()
        .map(|r| UserRecord {
            user_id: r.user_id,
            profile: r.profile.clone(),
            behavior_sequence: r.behavior_sequence.clone(),
            context: r.context.clone(),
            latent_need: Vec::new(),
        })
        .collect()
}

pub fn impressions_from_records(records: &[DatasetRecord]) -> Vec<ImpressionRecord> {
    records
        .iter()
        .map(|r| ImpressionRecord {
            user_id: r.user_id,
            candidates: r.candidates.clone(),
            labels: r.labels.clone(),
            split: r.split,
        })
        .collect()
}
