//! Construct assignment for extracted entities.
//!
//! Each entity text is classified into one of the eleven theoretical
//! constructs with its originating message as context. Replies are parsed
//! strictly against the construct names; after one failed reprompt the
//! entity goes to the human review queue. The `stigma` and `no stigma`
//! nodes never reach the model.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, OnceLock};

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{labelled_subject, ChatRequest, Gateway, GatewayError, MockHandler};
use crate::model::{word_count, ConstructType, Message, Triple};
use crate::stats::{cohens_kappa, Stat, StatsError};
use crate::triples::{normalize_text, NO_STIGMA, STIGMA};

pub const MAX_JUSTIFICATION_WORDS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConstructOrigin {
    TheoryDriven,
    DataDriven,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstructDef {
    pub definition: String,
    pub origin: ConstructOrigin,
    #[serde(default)]
    pub examples: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "BTreeMap<ConstructType, ConstructDef>", into = "BTreeMap<ConstructType, ConstructDef>")]
pub struct ConstructScheme {
    pub constructs: BTreeMap<ConstructType, ConstructDef>,
}

impl TryFrom<BTreeMap<ConstructType, ConstructDef>> for ConstructScheme {
    type Error = String;

    fn try_from(constructs: BTreeMap<ConstructType, ConstructDef>) -> Result<Self, Self::Error> {
        let s = ConstructScheme { constructs };
        s.check()?;
        Ok(s)
    }
}

impl From<ConstructScheme> for BTreeMap<ConstructType, ConstructDef> {
    fn from(s: ConstructScheme) -> Self {
        s.constructs
    }
}

const THEORY_DRIVEN: [ConstructType; 4] = [
    ConstructType::SignalingEvent,
    ConstructType::CognitiveJudgment,
    ConstructType::EmotionalResponse,
    ConstructType::BehavioralIntention,
];

impl ConstructScheme {
    pub fn default_scheme() -> Self {
        serde_json::from_str(include_str!("../assets/constructs.json")).expect("bundled construct scheme")
    }

    pub fn check(&self) -> Result<(), String> {
        if let Some(c) = self.constructs.keys().find(|c| c.is_status()) {
            return Err(format!("{c} is reserved and cannot appear in a scheme"));
        }
        for c in ConstructType::THEORETICAL {
            let def = self
                .constructs
                .get(&c)
                .ok_or_else(|| format!("scheme lacks {c}"))?;
            let expected = if THEORY_DRIVEN.contains(&c) {
                ConstructOrigin::TheoryDriven
            } else {
                ConstructOrigin::DataDriven
            };
            if def.origin != expected {
                return Err(format!("{c} must be {expected:?}"));
            }
        }
        Ok(())
    }
}

/// Reserved status construct for the two status node texts.
pub fn reserved_construct(text: &str) -> Option<ConstructType> {
    match normalize_text(text).as_str() {
        STIGMA => Some(ConstructType::StigmaStatus),
        NO_STIGMA => Some(ConstructType::NoStigmaStatus),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub construct: ConstructType,
    pub justification: String,
    pub truncated: bool,
}

#[derive(Debug, Error)]
pub enum AssignError {
    #[error("no construct could be parsed from the model output for `{0}`")]
    Unmapped(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

const ASSIGN_SYSTEM: &str = "You map text segments from interview answers about depression onto theoretical constructs.";

pub fn assignment_request(entity_text: &str, context: &str, scheme: &ConstructScheme, retry: bool) -> ChatRequest {
    let mut user = String::from("Constructs:\n");
    for (c, def) in &scheme.constructs {
        user.push_str(&format!("- {}: {}", c.name(), def.definition));
        if !def.examples.is_empty() {
            user.push_str(&format!(" Examples: {}.", def.examples.join("; ")));
        }
        user.push('\n');
    }
    user.push_str(&format!(
        "\nFull participant message: {context}\nText segment: <<<{entity_text}>>>\n\n\
Answer in exactly this form:\nConstruct: <one construct name from the list>\nJustification: <fewer than {MAX_JUSTIFICATION_WORDS} words>\n"
    ));
    if retry {
        user.push_str("\nYour previous answer did not name a construct from the list. Use one of the names exactly as written.\n");
    }
    let req = ChatRequest::new(ASSIGN_SYSTEM, user).temperature(0.0).max_tokens(80);
    if retry {
        req.seed(1)
    } else {
        req
    }
}

fn construct_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?im)^\s*construct\s*:\s*(.+?)\s*$").unwrap())
}

fn justification_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?is)justification\s*:\s*(.*)").unwrap())
}

/// Strict parse: the named construct must be one of the eleven theoretical
/// constructs, allowing only case, spacing, underscores and surrounding
/// punctuation to differ.
pub fn parse_assignment(output: &str) -> Option<Assignment> {
    let output = output.replace('*', "");
    let output = output.as_str();
    let raw = construct_re()
        .captures(output)
        .map(|c| c[1].to_string())
        .or_else(|| output.lines().next().map(str::to_string))?;
    let name = raw.trim_matches(|c: char| c.is_whitespace() || "*.\"'`<>".contains(c));
    let construct: ConstructType = name.parse().ok()?;
    if construct.is_status() {
        return None;
    }
    let just = justification_re()
        .captures(output)
        .map(|c| c[1].trim().to_string())
        .unwrap_or_default();
    let words: Vec<&str> = just.split_whitespace().collect();
    let truncated = words.len() > MAX_JUSTIFICATION_WORDS;
    Some(Assignment {
        construct,
        justification: words[..words.len().min(MAX_JUSTIFICATION_WORDS)].join(" "),
        truncated,
    })
}

pub fn assign_construct(
    gateway: &Gateway,
    entity_text: &str,
    context: &str,
    scheme: &ConstructScheme,
) -> Result<Assignment, AssignError> {
    if entity_text.trim().is_empty() {
        return Err(AssignError::Input("entity text is empty".into()));
    }
    if let Some(c) = reserved_construct(entity_text) {
        return Ok(Assignment {
            construct: c,
            justification: "reserved status node".into(),
            truncated: false,
        });
    }
    for retry in [false, true] {
        let out = gateway
            .chat(&assignment_request(entity_text, context, scheme, retry))?
            .remove(0);
        if let Some(a) = parse_assignment(&out) {
            debug_assert!(word_count(&a.justification) <= MAX_JUSTIFICATION_WORDS);
            return Ok(a);
        }
    }
    Err(AssignError::Unmapped(entity_text.to_string()))
}

/// One entity occurrence: a distinct normalized text within one message.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawEntity {
    pub entity_text: String,
    pub message_id: String,
    /// `None` when the entity is waiting for human review.
    pub construct: Option<ConstructType>,
    pub justification: String,
    #[serde(default)]
    pub truncated: bool,
    /// Supporting triples in this message.
    pub frequency: u32,
}

/// Distinct (text, message) occurrences from a triple set, in sorted order,
/// with the number of triples mentioning each.
pub fn entity_occurrences(triples: &[Triple]) -> BTreeMap<(String, String), u32> {
    let mut occ = BTreeMap::new();
    for t in triples {
        let texts: BTreeSet<String> = [normalize_text(&t.cause_text), normalize_text(&t.effect_text)].into();
        for text in texts {
            *occ.entry((text, t.message_id.clone())).or_insert(0) += 1;
        }
    }
    occ
}

/// Assigns constructs to every entity occurrence in parallel. Unmapped
/// occurrences are returned with `construct: None`; gateway failures abort.
pub fn ontologize(
    gateway: &Gateway,
    triples: &[Triple],
    messages: &[Message],
    scheme: &ConstructScheme,
) -> Result<Vec<RawEntity>, AssignError> {
    let context: BTreeMap<&str, &str> = messages
        .iter()
        .map(|m| (m.message_id.as_str(), m.text.as_str()))
        .collect();
    let occ: Vec<((String, String), u32)> = entity_occurrences(triples).into_iter().collect();
    for ((_, mid), _) in &occ {
        if !context.contains_key(mid.as_str()) {
            return Err(AssignError::Input(format!("triple references unknown message {mid}")));
        }
    }
    let results = gateway.map_limited(&occ, |((text, mid), freq)| {
        let r = assign_construct(gateway, text, context[mid.as_str()], scheme);
        let base = RawEntity {
            entity_text: text.clone(),
            message_id: mid.clone(),
            construct: None,
            justification: String::new(),
            truncated: false,
            frequency: *freq,
        };
        match r {
            Ok(a) => Ok(RawEntity {
                construct: Some(a.construct),
                justification: a.justification,
                truncated: a.truncated,
                ..base
            }),
            Err(AssignError::Unmapped(_)) => Ok(base),
            Err(e) => Err(e),
        }
    });
    results.into_iter().collect()
}

pub fn review_queue(raw: &[RawEntity]) -> Vec<&RawEntity> {
    raw.iter().filter(|r| r.construct.is_none()).collect()
}

/// κ between human and model construct labels.
pub fn evaluate_assignment(human: &[ConstructType], llm: &[ConstructType]) -> Result<Stat, StatsError> {
    cohens_kappa(human, llm)
}

/// Ordered keyword cues for the offline assigner; the first construct with
/// a matching cue wins, CognitiveJudgment otherwise.
const MOCK_CUES: [(ConstructType, &[&str]); 10] = [
    (ConstructType::Suggestion, &["suggest", "recommend", "therapist", "therapy", "counsel", "see a doctor", "professional help", "should seek", "should try", "should get"]),
    (ConstructType::Personality, &["i am ", "i'm ", "easy-going", "easygoing", "kind of person", "by nature"]),
    (ConstructType::PastExperience, &["i had ", "i have had", "i've had", "i went through", "my friend", "my brother", "my sister", "my mother", "my father", "my mom", "my dad", "experience", "i used to", "when i was"]),
    (ConstructType::Motivation, &["want ", "wish", "hope ", "would like", "prefer", "trying to", "goal"]),
    (ConstructType::EmotionalResponse, &["feel", "angry", "anger", "mad ", "upset", "sympathy", "sympathetic", "compassion", "scared", "afraid", "frighten", "threatened", "sad for", "sorry for", "frustrat", "annoy", "worried", "worry", "concern", "embarrass", "pity", "no fear"]),
    (ConstructType::BehavioralIntention, &["help", "rent", "avoid", "talk to", "reach out", "support", "stay away", "distance", "hospital", "admit", "spend time", "check on", "keep away", "invite", "listen"]),
    (ConstructType::PotentialOutcome, &["will ", "would get", "might ", "could ", "worse", "downhill", "recover", "lose ", "end up", "get better"]),
    (ConstructType::Situation, &["work", "job", "family", "social media", "chores", "colleague", "coworker", "home", "house", "environment", "pressure", "money"]),
    (ConstructType::SignalingEvent, &["avery", "depress", "irritab", "irritated", "lonely", "loneliness", "judged", "concentrat", "symptom", "withdraw", "tired", "isolat", "snap", "temper"]),
    (ConstructType::Belief, &["everyone", "people", "mental illness", "society", "in general", "nobody", "anyone", "illness"]),
];

pub fn heuristic_construct(text: &str) -> ConstructType {
    let padded = format!("{} ", text.to_lowercase());
    MOCK_CUES
        .iter()
        .find(|(_, cues)| cues.iter().any(|c| padded.contains(c)))
        .map(|(c, _)| *c)
        .unwrap_or(ConstructType::CognitiveJudgment)
}

pub fn mock_assignment_handler() -> MockHandler {
    Arc::new(|req, _| {
        if req.system_prompt != ASSIGN_SYSTEM {
            return None;
        }
        let text = labelled_subject(&req.user_prompt, "Text segment:")?;
        let c = heuristic_construct(text);
        Some(format!(
            "Construct: {}\nJustification: the segment reads as {}.",
            c.name(),
            c.display_name()
        ))
    })
}
