//! Shared domain types for the interview, coding and graph stages.
//!
//! Everything here is an immutable value type. File formats are JSON or
//! JSON Lines; maps are `BTreeMap`/`BTreeSet` so serialization order is
//! always sorted by key.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The seven stigma attributions, in interview-script order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AttributionType {
    Responsibility,
    SocialDistance,
    Anger,
    Helping,
    Pity,
    CoerciveSegregation,
    Fear,
}

impl AttributionType {
    pub const ALL: [AttributionType; 7] = [
        AttributionType::Responsibility,
        AttributionType::SocialDistance,
        AttributionType::Anger,
        AttributionType::Helping,
        AttributionType::Pity,
        AttributionType::CoerciveSegregation,
        AttributionType::Fear,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttributionType::Responsibility => "Responsibility",
            AttributionType::SocialDistance => "SocialDistance",
            AttributionType::Anger => "Anger",
            AttributionType::Helping => "Helping",
            AttributionType::Pity => "Pity",
            AttributionType::CoerciveSegregation => "CoerciveSegregation",
            AttributionType::Fear => "Fear",
        }
    }

    /// Human-readable label ("social distance").
    pub fn display_name(self) -> &'static str {
        match self {
            AttributionType::Responsibility => "responsibility",
            AttributionType::SocialDistance => "social distance",
            AttributionType::Anger => "anger",
            AttributionType::Helping => "helping",
            AttributionType::Pity => "pity",
            AttributionType::CoerciveSegregation => "coercive segregation",
            AttributionType::Fear => "fear",
        }
    }

    /// Attributions whose follow-up depends on answer length rather than the
    /// real-time stigma code.
    pub fn is_emotion_or_responsibility(self) -> bool {
        matches!(
            self,
            AttributionType::Anger
                | AttributionType::Fear
                | AttributionType::Pity
                | AttributionType::Responsibility
        )
    }

    pub fn is_behavioral(self) -> bool {
        !self.is_emotion_or_responsibility()
    }
}

impl fmt::Display for AttributionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttributionType {
    type Err = UnknownVariant;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AttributionType::ALL
            .into_iter()
            .find(|a| a.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| UnknownVariant(s.to_string()))
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("unknown variant `{0}`")]
pub struct UnknownVariant(pub String);

/// A deductive code: one of the attributions, or non-stigmatizing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CodeLabel {
    Responsibility,
    SocialDistance,
    Anger,
    Helping,
    Pity,
    CoerciveSegregation,
    Fear,
    NonStigmatizing,
}

impl CodeLabel {
    pub const ALL: [CodeLabel; 8] = [
        CodeLabel::Responsibility,
        CodeLabel::SocialDistance,
        CodeLabel::Anger,
        CodeLabel::Helping,
        CodeLabel::Pity,
        CodeLabel::CoerciveSegregation,
        CodeLabel::Fear,
        CodeLabel::NonStigmatizing,
    ];

    pub fn index(self) -> usize {
        CodeLabel::ALL.iter().position(|&c| c == self).unwrap()
    }

    /// Multiple-choice letter used in coding prompts (A..H).
    pub fn letter(self) -> char {
        (b'A' + self.index() as u8) as char
    }

    pub fn from_letter(c: char) -> Option<CodeLabel> {
        let c = c.to_ascii_uppercase();
        if !('A'..='H').contains(&c) {
            return None;
        }
        Some(CodeLabel::ALL[(c as u8 - b'A') as usize])
    }

    pub fn attribution(self) -> Option<AttributionType> {
        match self {
            CodeLabel::NonStigmatizing => None,
            other => Some(AttributionType::ALL[other.index()]),
        }
    }

    pub fn is_stigmatizing(self) -> bool {
        self != CodeLabel::NonStigmatizing
    }

    pub fn name(self) -> &'static str {
        match self.attribution() {
            Some(a) => a.name(),
            None => "NonStigmatizing",
        }
    }
}

impl From<AttributionType> for CodeLabel {
    fn from(a: AttributionType) -> Self {
        CodeLabel::ALL[AttributionType::ALL.iter().position(|&x| x == a).unwrap()]
    }
}

impl fmt::Display for CodeLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CodeLabel {
    type Err = UnknownVariant;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        CodeLabel::ALL
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| UnknownVariant(s.to_string()))
    }
}

/// Theoretical constructs entities are mapped onto, plus the two reserved
/// status values carried only by the "stigma" / "no stigma" nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ConstructType {
    SignalingEvent,
    CognitiveJudgment,
    EmotionalResponse,
    BehavioralIntention,
    Belief,
    PastExperience,
    Personality,
    Situation,
    PotentialOutcome,
    Motivation,
    Suggestion,
    StigmaStatus,
    NoStigmaStatus,
}

impl ConstructType {
    /// The eleven assignable constructs.
    pub const THEORETICAL: [ConstructType; 11] = [
        ConstructType::SignalingEvent,
        ConstructType::CognitiveJudgment,
        ConstructType::EmotionalResponse,
        ConstructType::BehavioralIntention,
        ConstructType::Belief,
        ConstructType::PastExperience,
        ConstructType::Personality,
        ConstructType::Situation,
        ConstructType::PotentialOutcome,
        ConstructType::Motivation,
        ConstructType::Suggestion,
    ];

    pub fn is_status(self) -> bool {
        matches!(self, ConstructType::StigmaStatus | ConstructType::NoStigmaStatus)
    }

    pub fn name(self) -> &'static str {
        match self {
            ConstructType::SignalingEvent => "SignalingEvent",
            ConstructType::CognitiveJudgment => "CognitiveJudgment",
            ConstructType::EmotionalResponse => "EmotionalResponse",
            ConstructType::BehavioralIntention => "BehavioralIntention",
            ConstructType::Belief => "Belief",
            ConstructType::PastExperience => "PastExperience",
            ConstructType::Personality => "Personality",
            ConstructType::Situation => "Situation",
            ConstructType::PotentialOutcome => "PotentialOutcome",
            ConstructType::Motivation => "Motivation",
            ConstructType::Suggestion => "Suggestion",
            ConstructType::StigmaStatus => "StigmaStatus",
            ConstructType::NoStigmaStatus => "NoStigmaStatus",
        }
    }

    /// Spaced, lower-case form used in prompts ("past experience").
    pub fn display_name(self) -> &'static str {
        match self {
            ConstructType::SignalingEvent => "signaling event",
            ConstructType::CognitiveJudgment => "cognitive judgment",
            ConstructType::EmotionalResponse => "emotional response",
            ConstructType::BehavioralIntention => "behavioral intention",
            ConstructType::Belief => "belief",
            ConstructType::PastExperience => "past experience",
            ConstructType::Personality => "personality",
            ConstructType::Situation => "situation",
            ConstructType::PotentialOutcome => "potential outcome",
            ConstructType::Motivation => "motivation",
            ConstructType::Suggestion => "suggestion",
            ConstructType::StigmaStatus => "stigma",
            ConstructType::NoStigmaStatus => "no stigma",
        }
    }
}

impl fmt::Display for ConstructType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ConstructType {
    type Err = UnknownVariant;

    /// Accepts `PastExperience`, `past experience`, `past_experience`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key: String = s
            .chars()
            .filter(|c| !c.is_whitespace() && *c != '_' && *c != '-')
            .collect();
        ConstructType::THEORETICAL
            .into_iter()
            .chain([ConstructType::StigmaStatus, ConstructType::NoStigmaStatus])
            .find(|c| c.name().eq_ignore_ascii_case(&key))
            .ok_or_else(|| UnknownVariant(s.to_string()))
    }
}

/// Whitespace token count. Splits on Unicode whitespace, no stemming.
pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// One participant answer to one attribution question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub message_id: String,
    pub participant_id: String,
    pub session_id: String,
    pub attribution: AttributionType,
    pub turn_index: u32,
    pub text: String,
    pub word_count: usize,
    pub timestamp: DateTime<Utc>,
}

impl Message {
    pub fn new(
        message_id: impl Into<String>,
        participant_id: impl Into<String>,
        session_id: impl Into<String>,
        attribution: AttributionType,
        turn_index: u32,
        text: impl Into<String>,
        timestamp: DateTime<Utc>,
    ) -> Self {
        let text = text.into();
        Message {
            message_id: message_id.into(),
            participant_id: participant_id.into(),
            session_id: session_id.into(),
            attribution,
            turn_index,
            word_count: word_count(&text),
            text,
            timestamp,
        }
    }

    pub fn check(&self) -> Result<(), String> {
        if self.message_id.is_empty() {
            return Err("message_id is empty".into());
        }
        let wc = word_count(&self.text);
        if wc != self.word_count {
            return Err(format!(
                "word_count {} does not match text ({} tokens)",
                self.word_count, wc
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Coder {
    Human,
    #[serde(rename = "LLM")]
    Llm,
    External,
}

/// A single coder vote. Unparseable LLM samples become `Abstain`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Vote {
    Label(CodeLabel),
    Abstain,
}

impl Vote {
    pub fn label(self) -> Option<CodeLabel> {
        match self {
            Vote::Label(l) => Some(l),
            Vote::Abstain => None,
        }
    }
}

impl From<Vote> for String {
    fn from(v: Vote) -> String {
        match v {
            Vote::Label(l) => l.name().to_string(),
            Vote::Abstain => "Abstain".to_string(),
        }
    }
}

impl TryFrom<String> for Vote {
    type Error = UnknownVariant;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        if s == "Abstain" {
            Ok(Vote::Abstain)
        } else {
            s.parse().map(Vote::Label)
        }
    }
}

/// Plurality label over the non-abstaining votes. A tie is broken in favour
/// of the tied label whose first vote comes earliest.
pub fn plurality(votes: &[Vote]) -> Option<CodeLabel> {
    let mut counts = [0usize; 8];
    let mut first = [usize::MAX; 8];
    for (i, v) in votes.iter().enumerate() {
        if let Vote::Label(l) = v {
            let k = l.index();
            counts[k] += 1;
            first[k] = first[k].min(i);
        }
    }
    (0..8)
        .filter(|&k| counts[k] > 0)
        .min_by_key(|&k| (std::cmp::Reverse(counts[k]), first[k]))
        .map(|k| CodeLabel::ALL[k])
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodedMessage {
    pub message_id: String,
    pub votes: Vec<Vote>,
    pub explanations: Vec<String>,
    #[serde(rename = "final")]
    pub final_label: CodeLabel,
    pub coder: Coder,
}

impl CodedMessage {
    /// A single-vote record as produced by a human coder or external model.
    pub fn single(message_id: impl Into<String>, label: CodeLabel, coder: Coder) -> Self {
        CodedMessage {
            message_id: message_id.into(),
            votes: vec![Vote::Label(label)],
            explanations: vec![String::new()],
            final_label: label,
            coder,
        }
    }

    pub fn check(&self) -> Result<(), String> {
        let expected = match self.coder {
            Coder::Llm => 5,
            Coder::Human | Coder::External => 1,
        };
        if self.votes.len() != expected {
            return Err(format!(
                "{:?} record must carry {} votes, found {}",
                self.coder,
                expected,
                self.votes.len()
            ));
        }
        if self.explanations.len() != self.votes.len() {
            return Err("explanations and votes differ in length".into());
        }
        match plurality(&self.votes) {
            Some(p) if p == self.final_label => Ok(()),
            Some(p) => Err(format!(
                "final label {} is not the plurality vote {}",
                self.final_label, p
            )),
            None => Err("all votes abstain".into()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TripleOrigin {
    Prespecified,
    Extracted,
    Curated,
}

/// The only relation type: the effect holds *because* of the cause.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub enum Relation {
    #[default]
    #[serde(rename = "because")]
    Because,
}

/// A causal assertion stored in cause → effect direction.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Triple {
    pub triple_id: String,
    pub message_id: String,
    pub cause_text: String,
    pub effect_text: String,
    #[serde(default)]
    pub relation: Relation,
    pub origin: TripleOrigin,
}

impl Triple {
    pub fn check(&self) -> Result<(), String> {
        if self.cause_text.trim().is_empty() || self.effect_text.trim().is_empty() {
            return Err("cause and effect must be non-empty".into());
        }
        if self.cause_text == self.effect_text {
            return Err("cause and effect must differ".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub entity_id: String,
    pub canonical_text: String,
    pub construct: ConstructType,
    pub aliases: BTreeSet<String>,
    pub support: BTreeSet<String>,
    pub frequency: u32,
}

impl Entity {
    pub fn check(&self) -> Result<(), String> {
        if !self.aliases.contains(&self.canonical_text) {
            return Err(format!(
                "entity {}: aliases must contain the canonical text",
                self.entity_id
            ));
        }
        if self.frequency == 0 {
            return Err(format!("entity {}: frequency must be positive", self.entity_id));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    pub src: String,
    pub dst: String,
    pub weight: u32,
    pub message_ids: BTreeSet<String>,
}

/// Directed weighted causal graph over canonical entities.
///
/// Edges are kept sorted by `(src, dst)`; there is at most one edge per
/// ordered pair.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "RawGraph")]
pub struct CausalKnowledgeGraph {
    pub entities: BTreeMap<String, Entity>,
    pub edges: Vec<Edge>,
}

#[derive(Deserialize)]
struct RawGraph {
    entities: BTreeMap<String, Entity>,
    edges: Vec<Edge>,
}

impl TryFrom<RawGraph> for CausalKnowledgeGraph {
    type Error = String;

    fn try_from(raw: RawGraph) -> Result<Self, Self::Error> {
        let mut g = CausalKnowledgeGraph {
            entities: raw.entities,
            edges: raw.edges,
        };
        g.edges.sort_by(|a, b| (&a.src, &a.dst).cmp(&(&b.src, &b.dst)));
        g.check()?;
        Ok(g)
    }
}

impl CausalKnowledgeGraph {
    pub fn check(&self) -> Result<(), String> {
        for (id, e) in &self.entities {
            if id != &e.entity_id {
                return Err(format!("entity key {id} does not match entity_id {}", e.entity_id));
            }
            e.check()?;
        }
        for (i, e) in self.edges.iter().enumerate() {
            if e.weight as usize != e.message_ids.len() {
                return Err(format!(
                    "edge {}->{}: weight {} != |message_ids| {}",
                    e.src,
                    e.dst,
                    e.weight,
                    e.message_ids.len()
                ));
            }
            if e.weight == 0 {
                return Err(format!("edge {}->{}: weight must be positive", e.src, e.dst));
            }
            if e.src == e.dst {
                return Err(format!("self-loop on {}", e.src));
            }
            for end in [&e.src, &e.dst] {
                if !self.entities.contains_key(end) {
                    return Err(format!("edge references unknown entity {end}"));
                }
            }
            if i > 0 {
                let prev = &self.edges[i - 1];
                if (&prev.src, &prev.dst) == (&e.src, &e.dst) {
                    return Err(format!("duplicate edge {}->{}", e.src, e.dst));
                }
            }
        }
        Ok(())
    }

    pub fn edge(&self, src: &str, dst: &str) -> Option<&Edge> {
        self.edges
            .binary_search_by(|e| (e.src.as_str(), e.dst.as_str()).cmp(&(src, dst)))
            .ok()
            .map(|i| &self.edges[i])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DiscardReason {
    TooBrief,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Discard {
    pub message_id: String,
    pub reason: DiscardReason,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub total: usize,
    pub retained: Vec<String>,
    pub discarded: Vec<Discard>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ValidationError {
    #[error("duplicate message_id `{0}`")]
    Duplicate(String),
}

/// Minimum number of whitespace tokens for a message to be analysed.
pub const MIN_MESSAGE_WORDS: usize = 5;

/// Flags messages shorter than [`MIN_MESSAGE_WORDS`]. Output lists are
/// sorted by message id, so the report does not depend on input order.
pub fn validate_corpus(transcript: &[Message]) -> Result<ValidationReport, ValidationError> {
    let mut seen = BTreeSet::new();
    let mut retained = Vec::new();
    let mut discarded = Vec::new();
    for m in transcript {
        if !seen.insert(m.message_id.as_str()) {
            return Err(ValidationError::Duplicate(m.message_id.clone()));
        }
        if word_count(&m.text) < MIN_MESSAGE_WORDS {
            discarded.push(Discard {
                message_id: m.message_id.clone(),
                reason: DiscardReason::TooBrief,
            });
        } else {
            retained.push(m.message_id.clone());
        }
    }
    retained.sort();
    discarded.sort_by(|a, b| a.message_id.cmp(&b.message_id));
    Ok(ValidationReport {
        total: transcript.len(),
        retained,
        discarded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn msg(id: &str, text: &str) -> Message {
        Message::new(
            id,
            "P1",
            "S1",
            AttributionType::Pity,
            0,
            text,
            Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap(),
        )
    }

    #[test]
    fn cardinalities() {
        assert_eq!(AttributionType::ALL.len(), 7);
        assert_eq!(CodeLabel::ALL.len(), 8);
        assert_eq!(ConstructType::THEORETICAL.len(), 11);
        assert!(ConstructType::THEORETICAL.iter().all(|c| !c.is_status()));
        for a in AttributionType::ALL {
            assert_ne!(CodeLabel::from(a), CodeLabel::NonStigmatizing);
            assert_eq!(CodeLabel::from(a).attribution(), Some(a));
        }
    }

    #[test]
    fn letters_follow_canonical_order() {
        let letters: String = CodeLabel::ALL.iter().map(|c| c.letter()).collect();
        assert_eq!(letters, "ABCDEFGH");
        assert_eq!(CodeLabel::from_letter('h'), Some(CodeLabel::NonStigmatizing));
        assert_eq!(CodeLabel::from_letter('I'), None);
    }

    #[test]
    fn construct_parsing_is_lenient_about_spacing() {
        assert_eq!("past experience".parse(), Ok(ConstructType::PastExperience));
        assert_eq!("Past_Experience".parse(), Ok(ConstructType::PastExperience));
        assert!("Feelings".parse::<ConstructType>().is_err());
    }

    #[test]
    fn brief_messages_are_discarded() {
        let report = validate_corpus(&[
            msg("a", "no"),
            msg("b", "one two three four five"),
            msg("c", "one two three four"),
        ])
        .unwrap();
        assert_eq!(report.retained, vec!["b"]);
        assert_eq!(
            report.discarded.iter().map(|d| d.message_id.as_str()).collect::<Vec<_>>(),
            vec!["a", "c"]
        );
    }

    #[test]
    fn counts_over_a_hundred_messages() {
        let mut msgs: Vec<Message> = (0..100)
            .map(|i| msg(&format!("m{i:03}"), "I would feel quite sorry for them"))
            .collect();
        for i in [5, 50, 99] {
            msgs[i].text = "not really".into();
            msgs[i].word_count = 2;
        }
        let report = validate_corpus(&msgs).unwrap();
        assert_eq!(report.retained.len(), 97);
        assert_eq!(report.discarded.len(), 3);
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let err = validate_corpus(&[msg("a", "x"), msg("a", "y")]).unwrap_err();
        assert_eq!(err, ValidationError::Duplicate("a".into()));
    }

    #[test]
    fn unicode_whitespace_splits_words() {
        assert_eq!(word_count("one\u{00a0}two\u{2003}three\tfour\nfive"), 5);
        assert_eq!(word_count("   "), 0);
    }

    #[test]
    fn plurality_rules() {
        use CodeLabel::*;
        let v = |ls: &[CodeLabel]| ls.iter().map(|&l| Vote::Label(l)).collect::<Vec<_>>();
        assert_eq!(plurality(&v(&[Anger, Anger, Pity, Anger, Fear])), Some(Anger));
        assert_eq!(plurality(&v(&[Anger, Pity, Anger, Pity, Fear])), Some(Anger));
        assert_eq!(plurality(&v(&[Pity, Anger, Anger, Pity, Fear])), Some(Pity));
        assert_eq!(plurality(&[Vote::Abstain, Vote::Abstain]), None);
        assert_eq!(
            plurality(&[Vote::Abstain, Vote::Label(Fear), Vote::Abstain]),
            Some(Fear)
        );
    }

    #[test]
    fn vote_serializes_as_plain_string() {
        let json = serde_json::to_string(&vec![Vote::Label(CodeLabel::Pity), Vote::Abstain]).unwrap();
        assert_eq!(json, r#"["Pity","Abstain"]"#);
        let back: Vec<Vote> = serde_json::from_str(&json).unwrap();
        assert_eq!(back, vec![Vote::Label(CodeLabel::Pity), Vote::Abstain]);
    }

    #[test]
    fn graph_rejects_weight_mismatch() {
        let json = r#"{
          "entities": {
            "a": {"entity_id":"a","canonical_text":"x","construct":"Belief","aliases":["x"],"support":["m1"],"frequency":1},
            "b": {"entity_id":"b","canonical_text":"y","construct":"Belief","aliases":["y"],"support":["m1"],"frequency":1}
          },
          "edges": [{"src":"a","dst":"b","weight":2,"message_ids":["m1"]}]
        }"#;
        let err = serde_json::from_str::<CausalKnowledgeGraph>(json).unwrap_err();
        assert!(err.to_string().contains("weight 2"), "{err}");
    }
}
