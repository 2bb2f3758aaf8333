//! Causal triple extraction and the curation loop.
//!
//! Triples are written by the model effect-first, `(effect, because, cause)`,
//! and stored cause → effect with case-folded, whitespace-collapsed text.
//! Every message also receives one prespecified triple linking a status
//! entity derived from its code to the `stigma` or `no stigma` node.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, OnceLock};

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{labelled_subject, ChatRequest, Gateway, GatewayError, MockHandler};
use crate::model::{AttributionType, CodeLabel, Message, Relation, Triple, TripleOrigin};

pub const STIGMA: &str = "stigma";
pub const NO_STIGMA: &str = "no stigma";

#[derive(Debug, Error)]
pub enum TripleError {
    #[error("invalid input: {0}")]
    Input(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// Case-folds, trims and collapses internal whitespace.
pub fn normalize_text(s: &str) -> String {
    s.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

pub fn normalize_triple(t: &Triple) -> Triple {
    Triple {
        cause_text: normalize_text(&t.cause_text),
        effect_text: normalize_text(&t.effect_text),
        ..t.clone()
    }
}

fn surface_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)^\s*(?:[-*•]|\d+[.)])?\s*\(\s*(.+?)\s*,\s*because\s*,\s*(.+?)\s*\)\s*[.,;]?\s*$").unwrap()
    })
}

/// Parses one `(effect, because, cause)` line into normalized
/// `(cause, effect)`; degenerate pairs are rejected.
pub fn parse_surface(line: &str) -> Option<(String, String)> {
    let c = surface_re().captures(line)?;
    let effect = normalize_text(c[1].trim_matches(|ch| ch == '"' || ch == '\''));
    let cause = normalize_text(c[2].trim_matches(|ch| ch == '"' || ch == '\''));
    if cause.is_empty() || effect.is_empty() || cause == effect {
        return None;
    }
    Some((cause, effect))
}

pub fn to_surface(t: &Triple) -> String {
    format!("({}, because, {})", t.effect_text, t.cause_text)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusPair {
    pub stigmatizing: String,
    pub non_stigmatizing: String,
}

/// Status entity text per attribution.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StatusMap(pub BTreeMap<AttributionType, StatusPair>);

impl StatusMap {
    pub fn default_map() -> Self {
        Self::from_json(include_str!("../assets/status_entities.json")).expect("bundled status map")
    }

    pub fn from_json(text: &str) -> Result<Self, String> {
        let m: StatusMap = serde_json::from_str(text).map_err(|e| e.to_string())?;
        for a in AttributionType::ALL {
            if !m.0.contains_key(&a) {
                return Err(format!("status map lacks {a}"));
            }
        }
        Ok(m)
    }

    /// Every status entity text, including the two status nodes.
    pub fn all_texts(&self) -> BTreeSet<String> {
        let mut s: BTreeSet<String> = self
            .0
            .values()
            .flat_map(|p| [normalize_text(&p.stigmatizing), normalize_text(&p.non_stigmatizing)])
            .collect();
        s.insert(STIGMA.to_string());
        s.insert(NO_STIGMA.to_string());
        s
    }
}

/// The status triple for a coded message. A stigmatizing code links its own
/// status entity to `stigma`; a non-stigmatizing code links the
/// non-stigmatizing entity of the message's attribution to `no stigma`.
pub fn prespecified_triple(msg: &Message, code: CodeLabel, map: &StatusMap) -> Triple {
    let (cause, effect) = match code.attribution() {
        Some(a) => (&map.0[&a].stigmatizing, STIGMA),
        None => (&map.0[&msg.attribution].non_stigmatizing, NO_STIGMA),
    };
    Triple {
        triple_id: format!("{}#p", msg.message_id),
        message_id: msg.message_id.clone(),
        cause_text: normalize_text(cause),
        effect_text: effect.to_string(),
        relation: Relation::Because,
        origin: TripleOrigin::Prespecified,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exemplar {
    pub message_id: String,
    pub text: String,
    pub triples: Vec<Triple>,
}

/// Curated few-shot examples, in insertion order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExemplarStore {
    pub exemplars: Vec<Exemplar>,
}

impl ExemplarStore {
    /// Replaces any previous exemplar for the same message.
    pub fn upsert(&mut self, ex: Exemplar) {
        self.exemplars.retain(|e| e.message_id != ex.message_id);
        self.exemplars.push(ex);
    }

    /// The most recent `n` exemplars.
    pub fn recent(&self, n: usize) -> &[Exemplar] {
        &self.exemplars[self.exemplars.len().saturating_sub(n)..]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractOptions {
    pub max_exemplars: usize,
    pub max_tokens: u32,
}

impl Default for ExtractOptions {
    fn default() -> Self {
        ExtractOptions {
            max_exemplars: 5,
            max_tokens: 400,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Extraction {
    pub message_id: String,
    /// Prespecified triple first, then extracted triples in output order.
    pub triples: Vec<Triple>,
    /// Set when the model output had no parseable triple.
    pub no_extracted: bool,
}

const EXTRACT_SYSTEM: &str = "You extract causal relationships from interview answers about a person with depression.";

pub fn extraction_request(msg: &Message, exemplars: &[Exemplar], opts: &ExtractOptions) -> ChatRequest {
    let mut user = String::from(
        "List every cause-effect relationship stated or clearly implied in the participant message, one per line, in the form (effect, because, cause). \
Use short phrases taken from the message. When one effect is itself the cause of another, write both lines so the chain is preserved; prefer longer causal chains over isolated pairs. Write nothing else.\n",
    );
    for ex in exemplars {
        user.push_str(&format!("\nExample message: {}\n", ex.text));
        for t in &ex.triples {
            user.push_str(&to_surface(t));
            user.push('\n');
        }
    }
    user.push_str(&format!("\nParticipant message: <<<{}>>>\n", msg.text));
    ChatRequest::new(EXTRACT_SYSTEM, user)
        .temperature(0.0)
        .max_tokens(opts.max_tokens)
}

/// Parses model output into deduplicated extracted triples.
pub fn parse_extraction(msg: &Message, output: &str) -> Vec<Triple> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for line in output.lines() {
        if let Some(pair) = parse_surface(line) {
            if seen.insert(pair.clone()) {
                out.push(Triple {
                    triple_id: format!("{}#e{}", msg.message_id, out.len() + 1),
                    message_id: msg.message_id.clone(),
                    cause_text: pair.0,
                    effect_text: pair.1,
                    relation: Relation::Because,
                    origin: TripleOrigin::Extracted,
                });
            }
        }
    }
    out
}

pub fn extract_triples(
    gateway: &Gateway,
    msg: &Message,
    code: CodeLabel,
    status: &StatusMap,
    store: &ExemplarStore,
    opts: &ExtractOptions,
) -> Result<Extraction, TripleError> {
    let pre = prespecified_triple(msg, code, status);
    let req = extraction_request(msg, store.recent(opts.max_exemplars), opts);
    let output = gateway.chat(&req)?.remove(0);
    let extracted: Vec<Triple> = parse_extraction(msg, &output)
        .into_iter()
        .filter(|t| !(t.cause_text == pre.cause_text && t.effect_text == pre.effect_text))
        .collect();
    let no_extracted = extracted.is_empty();
    let mut triples = vec![pre];
    triples.extend(extracted);
    Ok(Extraction {
        message_id: msg.message_id.clone(),
        triples,
        no_extracted,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TripleSetAccuracy {
    pub matched: usize,
    pub reference_total: usize,
    pub value: f64,
}

fn keys(ts: &[Triple]) -> BTreeSet<(String, String)> {
    ts.iter()
        .map(|t| (normalize_text(&t.cause_text), normalize_text(&t.effect_text)))
        .collect()
}

/// Share of distinct reference pairs reproduced by the model.
pub fn triple_accuracy(model: &[Triple], reference: &[Triple]) -> Result<TripleSetAccuracy, TripleError> {
    let r = keys(reference);
    if r.is_empty() {
        return Err(TripleError::Input("reference triple set is empty".into()));
    }
    let matched = keys(model).intersection(&r).count();
    Ok(TripleSetAccuracy {
        matched,
        reference_total: r.len(),
        value: matched as f64 / r.len() as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ErrorTag {
    CauseEffectReversal,
    LogicalInconsistency,
    WordingInaccuracy,
    Redundancy,
    Omission,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op")]
pub enum CurationEdit {
    Delete {
        triple_id: String,
        tag: ErrorTag,
    },
    Modify {
        triple_id: String,
        cause_text: String,
        effect_text: String,
        tag: ErrorTag,
    },
    Add {
        message_id: String,
        cause_text: String,
        effect_text: String,
        tag: ErrorTag,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurationRecord {
    pub iteration: u32,
    pub message_id: String,
    pub model_triples: Vec<Triple>,
    pub curated_triples: Vec<Triple>,
    pub error_tags: BTreeMap<ErrorTag, u32>,
}

/// One curation pass over a batch, written to `curation/iter_<n>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurationIteration {
    pub iteration: u32,
    pub records: Vec<CurationRecord>,
    /// Model output scored against the curated triples, pooled over the
    /// batch.
    pub accuracy: Option<TripleSetAccuracy>,
}

/// Applies human edits to model triples of a batch, returns the iteration
/// record and adds curated messages to the exemplar store.
pub fn curation_session(
    iteration: u32,
    batch: &[Message],
    model_triples: &[Triple],
    edits: &[CurationEdit],
    store: &mut ExemplarStore,
) -> Result<CurationIteration, TripleError> {
    if iteration == 0 {
        return Err(TripleError::Input("iteration numbers start at 1".into()));
    }
    let batch_ids: BTreeSet<&str> = batch.iter().map(|m| m.message_id.as_str()).collect();
    let mut curated: BTreeMap<String, Triple> = BTreeMap::new();
    for t in model_triples {
        if !batch_ids.contains(t.message_id.as_str()) {
            return Err(TripleError::Input(format!(
                "triple {} belongs to message {} outside the batch",
                t.triple_id, t.message_id
            )));
        }
        let mut c = normalize_triple(t);
        c.origin = TripleOrigin::Curated;
        curated.insert(t.triple_id.clone(), c);
    }
    let mut tags: BTreeMap<String, BTreeMap<ErrorTag, u32>> = BTreeMap::new();
    let mut added: BTreeMap<String, usize> = BTreeMap::new();
    let unknown = |id: &str| TripleError::Input(format!("edit references unknown triple {id}"));
    for edit in edits {
        let (mid, tag) = match edit {
            CurationEdit::Delete { triple_id, tag } => {
                let t = curated.remove(triple_id).ok_or_else(|| unknown(triple_id))?;
                (t.message_id, *tag)
            }
            CurationEdit::Modify {
                triple_id,
                cause_text,
                effect_text,
                tag,
            } => {
                let t = curated.get_mut(triple_id).ok_or_else(|| unknown(triple_id))?;
                t.cause_text = normalize_text(cause_text);
                t.effect_text = normalize_text(effect_text);
                t.check().map_err(TripleError::Input)?;
                (t.message_id.clone(), *tag)
            }
            CurationEdit::Add {
                message_id,
                cause_text,
                effect_text,
                tag,
            } => {
                if !batch_ids.contains(message_id.as_str()) {
                    return Err(TripleError::Input(format!(
                        "edit adds to message {message_id} outside the batch"
                    )));
                }
                let n = added.entry(message_id.clone()).or_insert(0);
                *n += 1;
                let t = Triple {
                    triple_id: format!("{message_id}#c{n}"),
                    message_id: message_id.clone(),
                    cause_text: normalize_text(cause_text),
                    effect_text: normalize_text(effect_text),
                    relation: Relation::Because,
                    origin: TripleOrigin::Curated,
                };
                t.check().map_err(TripleError::Input)?;
                curated.insert(t.triple_id.clone(), t);
                (message_id.clone(), *tag)
            }
        };
        *tags.entry(mid).or_default().entry(tag).or_insert(0) += 1;
    }

    let mut records = Vec::new();
    let (mut matched, mut total) = (0, 0);
    for m in batch {
        let model: Vec<Triple> = model_triples
            .iter()
            .filter(|t| t.message_id == m.message_id)
            .cloned()
            .collect();
        let cur: Vec<Triple> = curated
            .values()
            .filter(|t| t.message_id == m.message_id)
            .cloned()
            .collect();
        if let Ok(acc) = triple_accuracy(&model, &cur) {
            matched += acc.matched;
            total += acc.reference_total;
        }
        if !cur.is_empty() {
            store.upsert(Exemplar {
                message_id: m.message_id.clone(),
                text: m.text.clone(),
                triples: cur.clone(),
            });
        }
        records.push(CurationRecord {
            iteration,
            message_id: m.message_id.clone(),
            model_triples: model,
            curated_triples: cur,
            error_tags: tags.remove(&m.message_id).unwrap_or_default(),
        });
    }
    let accuracy = (total > 0).then(|| TripleSetAccuracy {
        matched,
        reference_total: total,
        value: matched as f64 / total as f64,
    });
    Ok(CurationIteration {
        iteration,
        records,
        accuracy,
    })
}

/// Connectives that introduce the cause of the preceding clause.
const BACKWARD: [&str; 4] = ["because of", "because", "since", "due to"];
/// Connectives that introduce the effect of the preceding clause.
const FORWARD: [&str; 6] = ["which leads to", "leads to", "therefore", "so that", "which makes", "so"];

fn connective_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        let alts: Vec<String> = BACKWARD
            .iter()
            .chain(FORWARD.iter())
            .map(|c| regex::escape(c))
            .collect();
        Regex::new(&format!(r"(?i),?\s+\b({})\b\s*,?", alts.join("|"))).unwrap()
    })
}

fn clean_clause(s: &str) -> String {
    let t = s.trim_matches(|c: char| c.is_whitespace() || ",;:.!?\"'".contains(c));
    normalize_text(t)
}

/// Offline extractor: splits sentences on causal connectives and emits one
/// effect-first line per adjacent clause pair.
pub fn heuristic_extract(text: &str) -> Vec<String> {
    let mut lines = Vec::new();
    for sentence in text.split(['.', '!', '?', ';', '|']) {
        let mut clauses: Vec<String> = Vec::new();
        let mut kinds: Vec<bool> = Vec::new();
        let mut last = 0;
        for c in connective_re().captures_iter(sentence) {
            let m = c.get(0).unwrap();
            clauses.push(clean_clause(&sentence[last..m.start()]));
            kinds.push(BACKWARD.contains(&c[1].to_lowercase().as_str()));
            last = m.end();
        }
        clauses.push(clean_clause(&sentence[last..]));
        for (i, &backward) in kinds.iter().enumerate() {
            let (a, b) = (&clauses[i], &clauses[i + 1]);
            if a.is_empty() || b.is_empty() || a == b {
                continue;
            }
            let (effect, cause) = if backward { (a, b) } else { (b, a) };
            lines.push(format!("({effect}, because, {cause})"));
        }
    }
    lines
}

pub fn mock_extraction_handler() -> MockHandler {
    Arc::new(|req, _| {
        if req.system_prompt != EXTRACT_SYSTEM {
            return None;
        }
        let text = labelled_subject(&req.user_prompt, "Participant message:")?;
        Some(heuristic_extract(text).join("\n"))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::MockChatBackend;
    use chrono::{TimeZone, Utc};

    fn msg(a: AttributionType, text: &str) -> Message {
        Message::new("s:X", "P1", "s", a, 4, text, Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap())
    }

    fn t(id: &str, c: &str, e: &str) -> Triple {
        Triple {
            triple_id: id.into(),
            message_id: "m".into(),
            cause_text: c.into(),
            effect_text: e.into(),
            relation: Relation::Because,
            origin: TripleOrigin::Extracted,
        }
    }

    #[test]
    fn pity_status_triple() {
        let m = msg(AttributionType::Pity, "I would not really care about them");
        let p = prespecified_triple(&m, CodeLabel::Pity, &StatusMap::default_map());
        assert_eq!(to_surface(&p), "(stigma, because, no pity)");
        assert_eq!((p.cause_text.as_str(), p.effect_text.as_str()), ("no pity", "stigma"));
        let n = prespecified_triple(&m, CodeLabel::NonStigmatizing, &StatusMap::default_map());
        assert_eq!((n.cause_text.as_str(), n.effect_text.as_str()), ("pity", "no stigma"));
        let f = prespecified_triple(&m, CodeLabel::Fear, &StatusMap::default_map());
        assert_eq!(f.cause_text, "fear");
    }

    #[test]
    fn surface_parsing() {
        assert_eq!(
            parse_surface("(Pessimistic belief is validated, because,  choose a pessimistic response to life)"),
            Some(("choose a pessimistic response to life".into(), "pessimistic belief is validated".into()))
        );
        assert_eq!(parse_surface("1. (a, because, b)"), Some(("b".into(), "a".into())));
        assert_eq!(parse_surface("(a, because, a)"), None);
        assert_eq!(parse_surface("a because b"), None);
    }

    #[test]
    fn duplicates_collapse_and_chains_share_entities() {
        let g = Gateway::mock(MockChatBackend::new().with_rule(
            "spiral",
            "(a, because, b)\n(A,  because, b)\n(b, because, c)",
        ));
        let m = msg(AttributionType::Responsibility, "it is a spiral of choices");
        let x = extract_triples(&g, &m, CodeLabel::Responsibility, &StatusMap::default_map(), &ExemplarStore::default(), &ExtractOptions::default()).unwrap();
        assert_eq!(x.triples.len(), 3);
        assert_eq!(x.triples[1].effect_text, "a");
        assert_eq!(x.triples[2].effect_text, x.triples[1].cause_text);
        assert!(!x.no_extracted);
    }

    #[test]
    fn unparseable_output_keeps_prespecified() {
        let g = Gateway::mock(MockChatBackend::new());
        let m = msg(AttributionType::Fear, "no thoughts on that one");
        let x = extract_triples(&g, &m, CodeLabel::NonStigmatizing, &StatusMap::default_map(), &ExemplarStore::default(), &ExtractOptions::default()).unwrap();
        assert_eq!(x.triples.len(), 1);
        assert!(x.no_extracted);
    }

    #[test]
    fn accuracy_examples() {
        let a = vec![t("1", "a", "b"), t("2", "c", "d"), t("3", "e", "f")];
        let r = vec![t("1", "a", "b"), t("2", "c", "d"), t("4", "g", "h")];
        let acc = triple_accuracy(&a, &r).unwrap();
        assert_eq!((acc.matched, acc.reference_total), (2, 3));
        assert!((acc.value - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(triple_accuracy(&a, &a).unwrap().value, 1.0);
        assert!(triple_accuracy(&a, &[]).is_err());
    }

    #[test]
    fn heuristic_chains() {
        let lines = heuristic_extract("Avery feels lonely because they avoid friends because they feel judged.");
        assert_eq!(
            lines,
            vec![
                "(avery feels lonely, because, they avoid friends)",
                "(they avoid friends, because, they feel judged)"
            ]
        );
        let fwd = heuristic_extract("They stopped working, so they lost their job");
        assert_eq!(fwd, vec!["(they lost their job, because, they stopped working)"]);
    }

    #[test]
    fn delete_only_curation() {
        let m = msg(AttributionType::Helping, "x y z w v");
        let model = vec![
            Triple { message_id: m.message_id.clone(), ..t("s:X#e1", "a", "b") },
            Triple { message_id: m.message_id.clone(), ..t("s:X#e2", "a ", "B") },
        ];
        let mut store = ExemplarStore::default();
        let it = curation_session(
            1,
            std::slice::from_ref(&m),
            &model,
            &[CurationEdit::Delete { triple_id: "s:X#e2".into(), tag: ErrorTag::Redundancy }],
            &mut store,
        )
        .unwrap();
        assert_eq!(it.records[0].error_tags, BTreeMap::from([(ErrorTag::Redundancy, 1)]));
        assert_eq!(it.records[0].curated_triples.len(), 1);
        assert_eq!(it.accuracy.unwrap().reference_total, 1);
        assert_eq!(store.exemplars.len(), 1);
        let err = curation_session(2, std::slice::from_ref(&m), &model, &[CurationEdit::Delete { triple_id: "nope".into(), tag: ErrorTag::Redundancy }], &mut store);
        assert!(err.is_err());
    }
}
