//! Entity resolution.
//!
//! Entities are first grouped by exact (text, construct). Candidate pairs
//! come from the per-method top-k cosine neighbours, unioned over methods
//! and restricted to the same construct. Each unordered pair is judged once
//! by the chat backend; positive verdicts are closed transitively with a
//! disjoint-set forest.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::gateway::{
    cosine, labelled_subject, trigram_embedding, ChatRequest, EmbeddingMethodId, Gateway, GatewayError,
    MockHandler,
};
use crate::model::{ConstructType, Entity};
use crate::ontology::RawEntity;
use crate::triples::normalize_text;

pub const DEFAULT_K: usize = 10;
pub const STIGMA_ID: &str = "stigma";
pub const NO_STIGMA_ID: &str = "no-stigma";

#[derive(Debug, Error)]
pub enum ResolveError {
    #[error("unknown entity id {0}")]
    UnknownEntity(String),
    #[error("merge of {0} and {1} spans constructs {2} and {3}")]
    Consistency(String, String, ConstructType, ConstructType),
    #[error("invalid input: {0}")]
    Input(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// Stable id for a (construct, text) group.
pub fn entity_id(text: &str, construct: ConstructType) -> String {
    match construct {
        ConstructType::StigmaStatus => return STIGMA_ID.to_string(),
        ConstructType::NoStigmaStatus => return NO_STIGMA_ID.to_string(),
        _ => {}
    }
    let mut h = Sha256::new();
    h.update(construct.name().as_bytes());
    h.update([0]);
    h.update(normalize_text(text).as_bytes());
    let d = h.finalize();
    let hex: String = d[..6].iter().map(|b| format!("{b:02x}")).collect();
    format!("e-{hex}")
}

/// Groups mapped raw occurrences into entities keyed by (text, construct).
/// Unmapped occurrences are skipped.
pub fn initial_entities(raw: &[RawEntity]) -> Vec<Entity> {
    let mut by_id: BTreeMap<String, Entity> = BTreeMap::new();
    for r in raw {
        let Some(construct) = r.construct else { continue };
        let text = normalize_text(&r.entity_text);
        let id = entity_id(&text, construct);
        let e = by_id.entry(id.clone()).or_insert_with(|| Entity {
            entity_id: id,
            canonical_text: text.clone(),
            construct,
            aliases: BTreeSet::from([text.clone()]),
            support: BTreeSet::new(),
            frequency: 0,
        });
        e.support.insert(r.message_id.clone());
        e.frequency += r.frequency.max(1);
    }
    by_id.into_values().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub entity_id: String,
    pub candidates: BTreeSet<String>,
    pub per_method_hits: BTreeMap<String, Vec<(String, f64)>>,
}

/// Top-k neighbours of every entity under one embedding, excluding self,
/// ranked by cosine descending then entity id ascending.
pub fn top_k(ids: &[&str], vectors: &[Vec<f64>], k: usize) -> Vec<Vec<(String, f64)>> {
    (0..ids.len())
        .map(|i| {
            let mut hits: Vec<(usize, f64)> = (0..ids.len())
                .filter(|&j| j != i)
                .map(|j| (j, cosine(&vectors[i], &vectors[j])))
                .collect();
            hits.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| ids[a.0].cmp(ids[b.0])));
            hits.truncate(k);
            hits.into_iter().map(|(j, c)| (ids[j].to_string(), c)).collect()
        })
        .collect()
}

/// Candidate sets from precomputed embeddings, one vector list per method
/// aligned with `entities`. Status entities take no part.
pub fn candidates_from_embeddings(
    entities: &[Entity],
    embeddings: &[(EmbeddingMethodId, Vec<Vec<f64>>)],
    k: usize,
) -> Vec<CandidateSet> {
    let idx: Vec<usize> = (0..entities.len())
        .filter(|&i| !entities[i].construct.is_status())
        .collect();
    let ids: Vec<&str> = idx.iter().map(|&i| entities[i].entity_id.as_str()).collect();
    let construct: BTreeMap<&str, ConstructType> = idx
        .iter()
        .map(|&i| (entities[i].entity_id.as_str(), entities[i].construct))
        .collect();
    let mut sets: Vec<CandidateSet> = ids
        .iter()
        .map(|id| CandidateSet {
            entity_id: id.to_string(),
            candidates: BTreeSet::new(),
            per_method_hits: BTreeMap::new(),
        })
        .collect();
    for (method, vecs) in embeddings {
        let sub: Vec<Vec<f64>> = idx.iter().map(|&i| vecs[i].clone()).collect();
        for (pos, hits) in top_k(&ids, &sub, k).into_iter().enumerate() {
            let own = construct[ids[pos]];
            for (h, _) in &hits {
                if construct[h.as_str()] == own {
                    sets[pos].candidates.insert(h.clone());
                }
            }
            sets[pos].per_method_hits.insert(method.name.clone(), hits);
        }
    }
    sets
}

pub fn build_candidates(
    gateway: &Gateway,
    entities: &[Entity],
    methods: &[EmbeddingMethodId],
    k: usize,
) -> Result<Vec<CandidateSet>, ResolveError> {
    if k == 0 {
        return Err(ResolveError::Input("k must be at least 1".into()));
    }
    let texts: Vec<String> = entities.iter().map(|e| e.canonical_text.clone()).collect();
    let mut embeddings = Vec::new();
    if entities.len() >= 2 {
        for m in methods {
            embeddings.push((m.clone(), gateway.embed(&texts, m)?));
        }
    }
    Ok(candidates_from_embeddings(entities, &embeddings, k))
}

pub fn mean_candidate_size(sets: &[CandidateSet]) -> f64 {
    if sets.is_empty() {
        return 0.0;
    }
    sets.iter().map(|s| s.candidates.len()).sum::<usize>() as f64 / sets.len() as f64
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MergeDecision {
    /// Lexicographically ordered pair.
    pub pair: (String, String),
    pub verdict: bool,
    pub justification: String,
    #[serde(default)]
    pub unparsed: bool,
}

fn ordered(a: &str, b: &str) -> (String, String) {
    if a <= b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}

/// Decided pairs, shared across calls so no pair is queried twice.
#[derive(Debug, Default)]
pub struct MergeCache {
    decided: Mutex<BTreeMap<(String, String), MergeDecision>>,
}

impl MergeCache {
    pub fn len(&self) -> usize {
        self.decided.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

const MERGE_SYSTEM: &str = "You decide whether two text segments from interview answers express the same idea and should be merged into one entity.";

pub fn merge_request(a: &Entity, b: &Entity) -> ChatRequest {
    ChatRequest::new(
        MERGE_SYSTEM,
        format!(
            "Both segments belong to the construct {}.\nSegment A: <<<{}>>>\nSegment B: <<<{}>>>\n\
Reply with yes or no on the first line, then one short sentence of justification.",
            a.construct.display_name(),
            a.canonical_text,
            b.canonical_text
        ),
    )
    .temperature(0.0)
    .max_tokens(60)
}

/// Reads a leading yes/no; anything else is `None`.
pub fn parse_verdict(output: &str) -> Option<bool> {
    let first: String = output
        .trim_start()
        .chars()
        .take_while(|c| c.is_alphabetic())
        .collect::<String>()
        .to_lowercase();
    match first.as_str() {
        "yes" => Some(true),
        "no" => Some(false),
        _ => None,
    }
}

/// Judges every undecided unordered candidate pair and returns all
/// decisions touching the given sets, sorted by pair.
pub fn decide_merges(
    gateway: &Gateway,
    entities: &[Entity],
    sets: &[CandidateSet],
    cache: &MergeCache,
) -> Result<Vec<MergeDecision>, ResolveError> {
    let by_id: BTreeMap<&str, &Entity> = entities.iter().map(|e| (e.entity_id.as_str(), e)).collect();
    let mut pairs = BTreeSet::new();
    for s in sets {
        for c in &s.candidates {
            if c != &s.entity_id {
                pairs.insert(ordered(&s.entity_id, c));
            }
        }
    }
    for (a, b) in &pairs {
        for id in [a, b] {
            if !by_id.contains_key(id.as_str()) {
                return Err(ResolveError::UnknownEntity(id.clone()));
            }
        }
    }
    let todo: Vec<(String, String)> = {
        let decided = cache.decided.lock().unwrap();
        pairs.iter().filter(|p| !decided.contains_key(*p)).cloned().collect()
    };
    let results = gateway.map_limited(&todo, |(a, b)| -> Result<MergeDecision, GatewayError> {
        let (ea, eb) = (by_id[a.as_str()], by_id[b.as_str()]);
        if ea.canonical_text == eb.canonical_text {
            return Ok(MergeDecision {
                pair: (a.clone(), b.clone()),
                verdict: true,
                justification: "identical text".into(),
                unparsed: false,
            });
        }
        let out = gateway.chat(&merge_request(ea, eb))?.remove(0);
        let verdict = parse_verdict(&out);
        let justification = out.lines().skip(1).collect::<Vec<_>>().join(" ").trim().to_string();
        Ok(MergeDecision {
            pair: (a.clone(), b.clone()),
            verdict: verdict.unwrap_or(false),
            justification,
            unparsed: verdict.is_none(),
        })
    });
    let mut decided = cache.decided.lock().unwrap();
    for r in results {
        let d = r?;
        decided.insert(d.pair.clone(), d);
    }
    Ok(pairs.iter().map(|p| decided[p].clone()).collect())
}

/// Disjoint-set forest with path halving and union by size.
#[derive(Debug, Clone)]
pub struct DisjointSet {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl DisjointSet {
    pub fn new(n: usize) -> Self {
        DisjointSet {
            parent: (0..n).collect(),
            size: vec![1; n],
        }
    }

    pub fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    pub fn union(&mut self, a: usize, b: usize) -> bool {
        let (mut ra, mut rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        if self.size[ra] < self.size[rb] {
            std::mem::swap(&mut ra, &mut rb);
        }
        self.parent[rb] = ra;
        self.size[ra] += self.size[rb];
        true
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Resolution {
    pub decisions: Vec<MergeDecision>,
    /// Member ids per class, sorted; classes sorted by first member.
    pub classes: Vec<Vec<String>>,
    pub old_to_canonical: BTreeMap<String, String>,
    pub entities: BTreeMap<String, Entity>,
    #[serde(default)]
    pub mean_candidate_size: f64,
}

impl Resolution {
    /// Rewrites decisions onto canonical ids, dropping pairs now inside one
    /// class.
    pub fn remap_decisions(&self, decisions: &[MergeDecision]) -> Vec<MergeDecision> {
        let mut out: Vec<MergeDecision> = decisions
            .iter()
            .filter_map(|d| {
                let a = self.old_to_canonical.get(&d.pair.0)?;
                let b = self.old_to_canonical.get(&d.pair.1)?;
                (a != b).then(|| MergeDecision {
                    pair: ordered(a, b),
                    ..d.clone()
                })
            })
            .collect();
        out.sort();
        out.dedup_by(|a, b| a.pair == b.pair && a.verdict == b.verdict);
        out
    }
}

fn canonical_rank(e: &Entity) -> (std::cmp::Reverse<u32>, usize, &str) {
    (
        std::cmp::Reverse(e.frequency),
        e.canonical_text.chars().count(),
        e.entity_id.as_str(),
    )
}

/// Closes positive verdicts transitively and merges each class into its
/// highest-frequency member (ties: shorter text, then smaller id).
pub fn consolidate(entities: &[Entity], decisions: &[MergeDecision]) -> Result<Resolution, ResolveError> {
    let index: BTreeMap<&str, usize> = entities
        .iter()
        .enumerate()
        .map(|(i, e)| (e.entity_id.as_str(), i))
        .collect();
    if index.len() != entities.len() {
        return Err(ResolveError::Input("duplicate entity ids".into()));
    }
    let mut dsu = DisjointSet::new(entities.len());
    for d in decisions {
        let a = *index
            .get(d.pair.0.as_str())
            .ok_or_else(|| ResolveError::UnknownEntity(d.pair.0.clone()))?;
        let b = *index
            .get(d.pair.1.as_str())
            .ok_or_else(|| ResolveError::UnknownEntity(d.pair.1.clone()))?;
        if !d.verdict {
            continue;
        }
        if entities[a].construct != entities[b].construct {
            return Err(ResolveError::Consistency(
                d.pair.0.clone(),
                d.pair.1.clone(),
                entities[a].construct,
                entities[b].construct,
            ));
        }
        dsu.union(a, b);
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..entities.len() {
        groups.entry(dsu.find(i)).or_default().push(i);
    }
    let mut classes = Vec::new();
    let mut old_to_canonical = BTreeMap::new();
    let mut merged = BTreeMap::new();
    for members in groups.into_values() {
        let canon = members
            .iter()
            .map(|&i| &entities[i])
            .min_by(|a, b| canonical_rank(a).cmp(&canonical_rank(b)))
            .unwrap();
        let mut e = Entity {
            entity_id: canon.entity_id.clone(),
            canonical_text: canon.canonical_text.clone(),
            construct: canon.construct,
            aliases: BTreeSet::new(),
            support: BTreeSet::new(),
            frequency: 0,
        };
        let mut ids = Vec::new();
        for &i in &members {
            let m = &entities[i];
            e.aliases.extend(m.aliases.iter().cloned());
            e.support.extend(m.support.iter().cloned());
            e.frequency += m.frequency;
            old_to_canonical.insert(m.entity_id.clone(), canon.entity_id.clone());
            ids.push(m.entity_id.clone());
        }
        ids.sort();
        classes.push(ids);
        merged.insert(e.entity_id.clone(), e);
    }
    classes.sort();
    let mut decisions = decisions.to_vec();
    decisions.sort();
    Ok(Resolution {
        decisions,
        classes,
        old_to_canonical,
        entities: merged,
        mean_candidate_size: 0.0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolveOptions {
    pub methods: Vec<EmbeddingMethodId>,
    pub k: usize,
}

impl Default for ResolveOptions {
    fn default() -> Self {
        ResolveOptions {
            methods: (0..3).map(EmbeddingMethodId::mock).collect(),
            k: DEFAULT_K,
        }
    }
}

/// Full resolution over raw occurrences.
pub fn resolve(gateway: &Gateway, raw: &[RawEntity], opts: &ResolveOptions) -> Result<Resolution, ResolveError> {
    let entities = initial_entities(raw);
    let sets = build_candidates(gateway, &entities, &opts.methods, opts.k)?;
    let cache = MergeCache::default();
    let decisions = decide_merges(gateway, &entities, &sets, &cache)?;
    let mut r = consolidate(&entities, &decisions)?;
    r.mean_candidate_size = mean_candidate_size(&sets);
    Ok(r)
}

/// Offline merge judge: yes iff the trigram cosine of the two segments
/// reaches `threshold`.
pub fn mock_merge_handler(threshold: f64) -> MockHandler {
    Arc::new(move |req, _| {
        if req.system_prompt != MERGE_SYSTEM {
            return None;
        }
        let a = labelled_subject(&req.user_prompt, "Segment A:")?;
        let b = labelled_subject(&req.user_prompt, "Segment B:")?;
        Some(if trigram_similarity(a, b) >= threshold {
            "yes\nThe segments express the same idea.".to_string()
        } else {
            "no\nThe segments differ in meaning.".to_string()
        })
    })
}

pub fn trigram_similarity(a: &str, b: &str) -> f64 {
    let va = trigram_embedding(a, 0, 256).expect("non-empty text");
    let vb = trigram_embedding(b, 0, 256).expect("non-empty text");
    cosine(&va, &vb)
}
