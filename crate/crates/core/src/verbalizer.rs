//! Renders a user into a structured prompt and hashes it into token ids.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash::fnv1a64;
use crate::synthgen::{KnowledgeBase, UserRecord, SECONDS_PER_DAY};

pub const BOS: u32 = 0;
pub const EOS: u32 = 1;
pub const UNK: u32 = 2;
pub const FIRST_WORD_ID: u32 = 3;
pub const DEFAULT_VOCAB: usize = 256;
/// Upper bound on generated query length, EOS included.
pub const MAX_QUERY_TOKENS: usize = 20;

/// How one feature is displayed. Categorical features map ids to strings;
/// features without `values` are printed as numbers followed by `unit`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub values: Option<BTreeMap<u32, String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit: Option<String>,
}

impl FeatureSpec {
    fn categorical(label: &str, values: &[(u32, &str)]) -> Self {
        FeatureSpec {
            label: label.to_string(),
            values: Some(values.iter().map(|(k, v)| (*k, v.to_string())).collect()),
            unit: None,
        }
    }

    fn render(&self, feature: &str, id: u32) -> Result<String> {
        match &self.values {
            Some(map) => map
                .get(&id)
                .map(|s| format!("{}: {}", self.label, s))
                .ok_or_else(|| Error::UnmappedFeature {
                    feature: feature.to_string(),
                    id,
                }),
            None => Ok(match &self.unit {
                Some(u) => format!("{}: {} {}", self.label, id, u),
                None => format!("{}: {}", self.label, id),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub system: String,
    pub instruction: String,
    pub context_header: String,
    pub request: String,
    pub requirements: String,
    pub answer_cue: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate {
            system: "You are a helpful AI assistant. You first think about the reasoning process in the mind and then provide the user with the answer.".into(),
            instruction: "You are an intelligent assistant supporting an e-commerce Chatbot. When the user enters the Chatbot via different entry points, proactively suggest one \"hot question\" (common intent) that the user is most likely to ask right now, based on the user related information.".into(),
            context_header: "Below is User Context Information, User Profile, Order Status and User Historical Behaviour information:".into(),
            request: "Based on the above information, generate one question that users may encounter. Please describe in one sentence the question that the user may want to ask.".into(),
            requirements: "Requirements: Keep the question between 10-20 words.".into(),
            answer_cue: "The user question is:".into(),
        }
    }
}

/// Metadata used to turn feature ids into text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureDictionary {
    pub profile: BTreeMap<String, FeatureSpec>,
    pub context: BTreeMap<String, FeatureSpec>,
    /// Intent id to its description, for the behaviour fragments.
    pub intents: BTreeMap<u64, String>,
    /// Clock used to split the behaviour sequence into the last 24 hours
    /// and earlier.
    pub reference_time: u64,
    pub template: PromptTemplate,
}

impl FeatureDictionary {
    /// The built-in mapping for the synthetic feature schema.
    pub fn with_intents(kb: &KnowledgeBase, reference_time: u64) -> Self {
        let mut profile = BTreeMap::new();
        profile.insert(
            "gender".into(),
            FeatureSpec::categorical("User Gender", &[(0, "Unknown"), (1, "Male"), (2, "Female")]),
        );
        profile.insert(
            "region".into(),
            FeatureSpec::categorical(
                "User Region",
                &[
                    (0, "Singapore"),
                    (1, "Malaysia"),
                    (2, "Thailand"),
                    (3, "Vietnam"),
                    (4, "Philippines"),
                    (5, "Indonesia"),
                ],
            ),
        );
        profile.insert(
            "tier".into(),
            FeatureSpec::categorical(
                "User Tier",
                &[(0, "Bronze"), (1, "Silver"), (2, "Gold"), (3, "Platinum")],
            ),
        );
        let mut context = BTreeMap::new();
        context.insert(
            "entry_point".into(),
            FeatureSpec::categorical(
                "Entry Point",
                &[
                    (0, "Order Detail Page"),
                    (1, "Home Page"),
                    (2, "Checkout Page"),
                    (3, "Shipping Page"),
                    (4, "Return Refund Page"),
                    (5, "Me Page"),
                    (6, "Shop Page"),
                ],
            ),
        );
        context.insert(
            "order_age_days".into(),
            FeatureSpec {
                label: "Order Age".into(),
                values: None,
                unit: Some("Days".into()),
            },
        );
        context.insert(
            "order_status".into(),
            FeatureSpec::categorical(
                "Current Order Status",
                &[
                    (0, "NO_ORDER"),
                    (1, "UNPAID"),
                    (2, "TO_SHIP"),
                    (3, "PROCESSING"),
                    (4, "PACKED"),
                    (5, "IN_TRANSIT"),
                    (6, "CANCELLED"),
                    (7, "SHIPPED"),
                    (8, "TO_RECEIVE"),
                    (9, "COMPLETED"),
                ],
            ),
        );
        FeatureDictionary {
            profile,
            context,
            intents: kb.intents.iter().map(|i| (i.intent_id, i.text.clone())).collect(),
            reference_time,
            template: PromptTemplate::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerbalizedContext {
    pub user_id: u64,
    pub prompt_text: String,
    pub tokens: Vec<u32>,
}

fn render_group(
    specs: &BTreeMap<String, FeatureSpec>,
    values: &BTreeMap<String, u32>,
    out: &mut Vec<String>,
) -> Result<()> {
    // BTreeMap iteration gives the alphabetical-by-feature order
    for (name, spec) in specs {
        if let Some(id) = values.get(name) {
            out.push(spec.render(name, *id)?);
        }
    }
    for (name, id) in values {
        if !specs.contains_key(name) {
            return Err(Error::UnmappedFeature {
                feature: name.clone(),
                id: *id,
            });
        }
    }
    Ok(())
}

fn render_intents(dict: &FeatureDictionary, ids: &[u64]) -> Result<String> {
    let texts: Vec<String> = ids
        .iter()
        .map(|id| {
            dict.intents
                .get(id)
                .map(|t| format!("'{t}'"))
                .ok_or_else(|| Error::UnmappedFeature {
                    feature: "intent".into(),
                    id: *id as u32,
                })
        })
        .collect::<Result<_>>()?;
    Ok(format!("({})", texts.join(", ")))
}

/// Profile, behaviour and context fragments in their fixed order.
pub fn fragments(user: &UserRecord, dict: &FeatureDictionary) -> Result<Vec<String>> {
    let mut out = Vec::new();
    render_group(&dict.profile, &user.profile, &mut out)?;
    let cutoff = dict.reference_time.saturating_sub(SECONDS_PER_DAY);
    let (recent, earlier): (Vec<_>, Vec<_>) = user
        .behavior_sequence
        .iter()
        .partition(|(_, ts)| *ts >= cutoff);
    let recent: Vec<u64> = recent.iter().map(|(id, _)| *id).collect();
    let earlier: Vec<u64> = earlier.iter().map(|(id, _)| *id).collect();
    out.push(format!("Clicked Intents In 24 Hours: {}", render_intents(dict, &recent)?));
    out.push(format!("Clicked Intents Earlier: {}", render_intents(dict, &earlier)?));
    render_group(&dict.context, &user.context, &mut out)?;
    Ok(out)
}

pub fn verbalize(user: &UserRecord, dict: &FeatureDictionary, vocab: usize) -> Result<VerbalizedContext> {
    let frags = fragments(user, dict)?;
    let t = &dict.template;
    let prompt_text = format!(
        "##System Prompt\n{}\n\n##User Prompt\n{}\n\n{}\n{}\n\n{}\n\n{}\n{}",
        t.system,
        t.instruction,
        t.context_header,
        frags.join(", "),
        t.request,
        t.requirements,
        t.answer_cue
    );
    let tokens = tokenize(&prompt_text, vocab)?;
    Ok(VerbalizedContext {
        user_id: user.user_id,
        prompt_text,
        tokens,
    })
}

/// Lowercased word pieces: runs of alphanumerics and `_`; everything else
/// separates words and is dropped.
pub fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !(c.is_alphanumeric() || c == '_'))
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
}

pub fn word_id(word: &str, vocab: usize) -> u32 {
    let span = (vocab as u64).saturating_sub(u64::from(FIRST_WORD_ID)).max(1);
    FIRST_WORD_ID + (fnv1a64(word.as_bytes()) % span) as u32
}

/// Hashes each word into `[3, vocab)`; ids 0..3 are reserved for BOS, EOS
/// and UNK.
pub fn tokenize(text: &str, vocab: usize) -> Result<Vec<u32>> {
    if vocab <= FIRST_WORD_ID as usize {
        return Err(Error::InvalidConfig(format!("vocabulary of {vocab} leaves no word ids")));
    }
    let toks: Vec<u32> = words(text).map(|w| word_id(&w, vocab)).collect();
    if toks.is_empty() {
        return Err(Error::EmptySequence("tokenize"));
    }
    Ok(toks)
}
