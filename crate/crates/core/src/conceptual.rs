//! Construct-level distillation of the causal graph: theme discovery inside
//! one construct, group consolidation rules, mean-weight edge thresholding,
//! and DOT/JSON export of the layered model.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::ops::RangeInclusive;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cluster::{kmeans, silhouette_cosine};
use crate::gateway::{fnv1a, EmbeddingMethodId, Gateway, GatewayError};
use crate::model::{CausalKnowledgeGraph, ConstructType, Entity, Message};
use crate::projection::{tokenize, DEFAULT_STOPWORDS};

pub const KEYWORDS_PER_THEME: usize = 10;
pub const SAMPLES_PER_THEME: usize = 30;
pub const DEFAULT_K_RANGE: RangeInclusive<usize> = 2..=12;

#[derive(Debug, thiserror::Error)]
pub enum ConceptualError {
    #[error("invalid input: {0}")]
    Input(String),
    #[error("invalid model rules: {0}")]
    Rules(String),
    #[error("build error: {0}")]
    Build(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

pub type Result<T> = std::result::Result<T, ConceptualError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theme {
    /// Assigned by a human reviewer; always `None` when generated.
    pub label: Option<String>,
    pub keyword_top10: Vec<String>,
    pub representative_texts: Vec<String>,
    pub prevalence: f64,
    pub size: usize,
    pub entity_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThemeReport {
    pub construct: ConstructType,
    pub k: usize,
    /// Mean cosine silhouette of the chosen clustering; absent for the
    /// single-theme fallback.
    pub silhouette: Option<f64>,
    pub seed: u64,
    pub themes: Vec<Theme>,
}

/// Clusters the entities of one construct. `k` is chosen from
/// `k_range ∩ [2, n-1]` by maximal silhouette, the smaller `k` winning ties.
/// With fewer than three entities, an empty candidate range, or identical
/// texts the result is a single theme of prevalence 1.
pub fn discover_themes(
    gateway: &Gateway,
    construct: ConstructType,
    entities: &[Entity],
    method: &EmbeddingMethodId,
    k_range: RangeInclusive<usize>,
    seed: u64,
) -> Result<ThemeReport> {
    if entities.is_empty() {
        return Err(ConceptualError::Input(format!("construct {construct} has no entities")));
    }
    if let Some(e) = entities.iter().find(|e| e.construct != construct) {
        return Err(ConceptualError::Input(format!(
            "entity {} belongs to {}, not {construct}",
            e.entity_id, e.construct
        )));
    }
    let mut ents: Vec<&Entity> = entities.iter().collect();
    ents.sort_by(|a, b| a.entity_id.cmp(&b.entity_id));
    let n = ents.len();
    let texts: Vec<String> = ents.iter().map(|e| e.canonical_text.clone()).collect();
    let distinct: BTreeSet<&str> = texts.iter().map(String::as_str).collect();

    let lo = (*k_range.start()).max(2);
    let hi = (*k_range.end()).min(n.saturating_sub(1));
    let (assignments, k, silhouette) = if distinct.len() < 2 || lo > hi {
        (vec![0; n], 1, None)
    } else {
        let vecs = gateway.embed(&texts, method)?;
        let mut best: Option<(Vec<usize>, usize, f64)> = None;
        for k in lo..=hi {
            let km = kmeans(&vecs, k, fnv1a(seed, &(k as u64).to_le_bytes()), 300);
            let s = silhouette_cosine(&vecs, &km.assignments);
            if best.as_ref().map_or(true, |b| s > b.2) {
                best = Some((km.assignments, k, s));
            }
        }
        let (a, k, s) = best.expect("non-empty k range");
        (a, k, Some(s))
    };

    // Order clusters by size (descending), then by first member.
    let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &c) in assignments.iter().enumerate() {
        members.entry(c).or_default().push(i);
    }
    let mut clusters: Vec<Vec<usize>> = members.into_values().collect();
    clusters.sort_by(|a, b| b.len().cmp(&a.len()).then(a[0].cmp(&b[0])));

    let stop: BTreeSet<String> = DEFAULT_STOPWORDS.iter().map(|s| s.to_string()).collect();
    let tf: Vec<BTreeMap<String, u32>> = clusters
        .iter()
        .map(|c| {
            let mut m = BTreeMap::new();
            for &i in c {
                for t in tokenize(&texts[i], &stop) {
                    *m.entry(t).or_insert(0) += 1;
                }
            }
            m
        })
        .collect();
    let mut cf: BTreeMap<&str, u32> = BTreeMap::new();
    for m in &tf {
        for t in m.keys() {
            *cf.entry(t.as_str()).or_insert(0) += 1;
        }
    }
    let kf = clusters.len() as f64;
    let themes = clusters
        .iter()
        .zip(&tf)
        .enumerate()
        .map(|(ti, (c, m))| {
            let mut scored: Vec<(f64, &str)> = m
                .iter()
                .map(|(t, &f)| (f as f64 * (1.0 + kf / cf[t.as_str()] as f64).ln(), t.as_str()))
                .collect();
            scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(b.1)));
            let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(seed, format!("{construct}#{ti}").as_bytes()));
            let representative_texts = c
                .choose_multiple(&mut rng, SAMPLES_PER_THEME.min(c.len()))
                .map(|&i| texts[i].clone())
                .collect();
            Theme {
                label: None,
                keyword_top10: scored.iter().take(KEYWORDS_PER_THEME).map(|s| s.1.to_string()).collect(),
                representative_texts,
                prevalence: c.len() as f64 / n as f64,
                size: c.len(),
                entity_ids: c.iter().map(|&i| ents[i].entity_id.clone()).collect(),
            }
        })
        .collect();
    Ok(ThemeReport {
        construct,
        k,
        silhouette,
        seed,
        themes,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Layer {
    Stimuli,
    CognitiveMediator,
    EmotionalResponse,
    BehavioralIntention,
}

impl Layer {
    pub const ALL: [Layer; 4] = [
        Layer::Stimuli,
        Layer::CognitiveMediator,
        Layer::EmotionalResponse,
        Layer::BehavioralIntention,
    ];
}

/// Consolidation, exclusion and direction rules. Group names are either a
/// consolidation key or the name of a standalone construct.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawRules", into = "RawRules")]
pub struct ModelRules {
    pub consolidations: BTreeMap<String, BTreeSet<ConstructType>>,
    pub excluded: BTreeSet<ConstructType>,
    pub source_only: BTreeSet<String>,
    pub sink_only: BTreeSet<String>,
    /// Minimum number of distinct participants behind a group edge.
    pub min_support: u32,
    pub layers: BTreeMap<Layer, BTreeSet<String>>,
    pub known_pathways: BTreeSet<(String, String)>,
    group_of: BTreeMap<ConstructType, String>,
}

#[derive(Clone, Serialize, Deserialize)]
struct RawRules {
    consolidations: BTreeMap<String, BTreeSet<ConstructType>>,
    excluded: BTreeSet<ConstructType>,
    source_only: BTreeSet<String>,
    sink_only: BTreeSet<String>,
    min_support: u32,
    layers: BTreeMap<Layer, BTreeSet<String>>,
    #[serde(default)]
    known_pathways: BTreeSet<(String, String)>,
}

impl From<ModelRules> for RawRules {
    fn from(r: ModelRules) -> Self {
        RawRules {
            consolidations: r.consolidations,
            excluded: r.excluded,
            source_only: r.source_only,
            sink_only: r.sink_only,
            min_support: r.min_support,
            layers: r.layers,
            known_pathways: r.known_pathways,
        }
    }
}

impl TryFrom<RawRules> for ModelRules {
    type Error = String;

    fn try_from(r: RawRules) -> std::result::Result<Self, String> {
        let mut group_of = BTreeMap::new();
        for (g, cs) in &r.consolidations {
            if cs.is_empty() {
                return Err(format!("group {g} is empty"));
            }
            if g.parse::<ConstructType>().is_ok() {
                return Err(format!("group name {g} collides with a construct"));
            }
            for c in cs {
                if c.is_status() {
                    return Err(format!("status construct {c} cannot be grouped"));
                }
                if r.excluded.contains(c) {
                    return Err(format!("{c} is both excluded and grouped"));
                }
                if let Some(prev) = group_of.insert(*c, g.clone()) {
                    return Err(format!("{c} is in both {prev} and {g}"));
                }
            }
        }
        for c in ConstructType::THEORETICAL {
            if !r.excluded.contains(&c) {
                group_of.entry(c).or_insert_with(|| c.name().to_string());
            }
        }
        let groups: BTreeSet<&String> = group_of.values().collect();
        let mut placed: BTreeMap<&String, Layer> = BTreeMap::new();
        for (layer, gs) in &r.layers {
            for g in gs {
                if !groups.contains(g) {
                    return Err(format!("layer {layer:?} names unknown group {g}"));
                }
                if placed.insert(g, *layer).is_some() {
                    return Err(format!("group {g} is placed in two layers"));
                }
            }
        }
        if let Some(g) = groups.iter().find(|g| !placed.contains_key(*g)) {
            return Err(format!("group {g} has no layer"));
        }
        let named = r
            .source_only
            .iter()
            .chain(&r.sink_only)
            .chain(r.known_pathways.iter().flat_map(|(a, b)| [a, b]));
        for g in named {
            if !groups.contains(g) {
                return Err(format!("rule names unknown group {g}"));
            }
        }
        if let Some(g) = r.source_only.intersection(&r.sink_only).next() {
            return Err(format!("group {g} is both source-only and sink-only"));
        }
        Ok(ModelRules {
            consolidations: r.consolidations,
            excluded: r.excluded,
            source_only: r.source_only,
            sink_only: r.sink_only,
            min_support: r.min_support,
            layers: r.layers,
            known_pathways: r.known_pathways,
            group_of,
        })
    }
}

impl ModelRules {
    pub fn default_rules() -> Self {
        Self::from_json(include_str!("../assets/model_rules.json")).expect("bundled model rules are valid")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| ConceptualError::Rules(e.to_string()))
    }

    /// Group of a construct; `None` for excluded and status constructs.
    pub fn group_of(&self, c: ConstructType) -> Option<&str> {
        self.group_of.get(&c).map(String::as_str)
    }

    pub fn layer_of(&self, group: &str) -> Option<Layer> {
        self.layers.iter().find(|(_, gs)| gs.contains(group)).map(|(l, _)| *l)
    }

    pub fn groups(&self) -> BTreeSet<&str> {
        self.group_of.values().map(String::as_str).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    StatusEndpoint,
    Excluded,
    IntoSourceOnly,
    FromSinkOnly,
    SelfLoop,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DroppedEdge {
    pub src: String,
    pub dst: String,
    pub reason: DropReason,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupNode {
    pub group: String,
    pub layer: Layer,
    pub constructs: BTreeSet<ConstructType>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupEdge {
    pub src_group: String,
    pub dst_group: String,
    /// Distinct participants with at least one supporting message.
    pub weight: u32,
    pub message_count: u32,
    /// Mean outgoing weight of the source group.
    pub threshold: f64,
    pub retained: bool,
    pub known: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptualModel {
    pub layers: Vec<Layer>,
    pub nodes: Vec<GroupNode>,
    pub edges: Vec<GroupEdge>,
    pub dropped: Vec<DroppedEdge>,
    pub below_min_support: usize,
}

/// Retention for one source group: strictly above the mean outgoing weight,
/// or the lone outgoing edge. Integer arithmetic avoids rounding at ties.
pub fn retain_mask(weights: &[u32]) -> Vec<bool> {
    let total: u64 = weights.iter().map(|&w| w as u64).sum();
    let n = weights.len() as u64;
    weights.iter().map(|&w| n == 1 || w as u64 * n > total).collect()
}

/// Aggregates entity-level edges into group edges, applies the rules and
/// thresholds each source group at its mean outgoing weight.
pub fn build_conceptual_model(
    graph: &CausalKnowledgeGraph,
    transcript: &[Message],
    rules: &ModelRules,
) -> Result<ConceptualModel> {
    let participant: BTreeMap<&str, &str> = transcript
        .iter()
        .map(|m| (m.message_id.as_str(), m.participant_id.as_str()))
        .collect();
    let mut lifted: BTreeMap<(String, String), (BTreeSet<&str>, BTreeSet<&str>)> = BTreeMap::new();
    let mut dropped: BTreeSet<(String, String, DropReason)> = BTreeSet::new();
    for e in &graph.edges {
        let construct = |id: &str| {
            graph
                .entities
                .get(id)
                .map(|x| x.construct)
                .ok_or_else(|| ConceptualError::Build(format!("edge endpoint {id} is not an entity")))
        };
        let (cs, cd) = (construct(&e.src)?, construct(&e.dst)?);
        if cs.is_status() || cd.is_status() {
            dropped.insert((cs.name().into(), cd.name().into(), DropReason::StatusEndpoint));
            continue;
        }
        let (gs, gd) = match (rules.group_of(cs), rules.group_of(cd)) {
            (Some(a), Some(b)) => (a.to_string(), b.to_string()),
            _ => {
                dropped.insert((cs.name().into(), cd.name().into(), DropReason::Excluded));
                continue;
            }
        };
        let reason = if gs == gd {
            Some(DropReason::SelfLoop)
        } else if rules.source_only.contains(&gd) {
            Some(DropReason::IntoSourceOnly)
        } else if rules.sink_only.contains(&gs) {
            Some(DropReason::FromSinkOnly)
        } else {
            None
        };
        if let Some(r) = reason {
            dropped.insert((gs, gd, r));
            continue;
        }
        let slot = lifted.entry((gs, gd)).or_default();
        for mid in &e.message_ids {
            let pid = participant
                .get(mid.as_str())
                .ok_or_else(|| ConceptualError::Build(format!("message {mid} is not in the transcript")))?;
            slot.0.insert(pid);
            slot.1.insert(mid);
        }
    }

    let mut below_min_support = 0;
    let mut by_src: BTreeMap<String, Vec<(String, u32, u32)>> = BTreeMap::new();
    for ((gs, gd), (ps, ms)) in lifted {
        let w = ps.len() as u32;
        if w < rules.min_support.max(1) {
            below_min_support += 1;
            continue;
        }
        by_src.entry(gs).or_default().push((gd, w, ms.len() as u32));
    }
    let mut edges = Vec::new();
    for (src, outs) in by_src {
        let weights: Vec<u32> = outs.iter().map(|o| o.1).collect();
        let mask = retain_mask(&weights);
        let threshold = weights.iter().map(|&w| w as f64).sum::<f64>() / weights.len() as f64;
        for ((dst, w, mc), keep) in outs.into_iter().zip(mask) {
            let known = rules.known_pathways.contains(&(src.clone(), dst.clone()));
            edges.push(GroupEdge {
                src_group: src.clone(),
                dst_group: dst,
                weight: w,
                message_count: mc,
                threshold,
                retained: keep,
                known,
            });
        }
    }

    let mut nodes: Vec<GroupNode> = rules
        .groups()
        .into_iter()
        .map(|g| GroupNode {
            group: g.to_string(),
            layer: rules.layer_of(g).expect("validated rules place every group"),
            constructs: ConstructType::THEORETICAL
                .into_iter()
                .filter(|c| rules.group_of(*c) == Some(g))
                .collect(),
        })
        .collect();
    nodes.sort_by(|a, b| (a.layer, &a.group).cmp(&(b.layer, &b.group)));
    let rank: BTreeMap<&str, (Layer, &str)> = nodes.iter().map(|n| (n.group.as_str(), (n.layer, n.group.as_str()))).collect();
    edges.sort_by(|a, b| {
        (rank[a.src_group.as_str()], rank[a.dst_group.as_str()]).cmp(&(rank[b.src_group.as_str()], rank[b.dst_group.as_str()]))
    });
    Ok(ConceptualModel {
        layers: Layer::ALL.to_vec(),
        nodes,
        edges,
        dropped: dropped
            .into_iter()
            .map(|(src, dst, reason)| DroppedEdge { src, dst, reason })
            .collect(),
        below_min_support,
    })
}

fn dot_id(s: &str) -> String {
    format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""))
}

/// DOT rendering of retained edges. Layers become ranked columns; known
/// pathways are solid, others dashed, and pen width scales with weight.
pub fn to_dot(model: &ConceptualModel) -> String {
    let mut s = String::from("digraph conceptual_model {\n  rankdir=LR;\n  node [shape=box];\n");
    for (li, layer) in model.layers.iter().enumerate() {
        let _ = writeln!(s, "  subgraph cluster_{li} {{\n    label={};\n    rank=same;", dot_id(&format!("{layer:?}")));
        for n in model.nodes.iter().filter(|n| n.layer == *layer) {
            let _ = writeln!(s, "    {};", dot_id(&n.group));
        }
        s.push_str("  }\n");
    }
    let max = model.edges.iter().filter(|e| e.retained).map(|e| e.weight).max().unwrap_or(1).max(1);
    for e in model.edges.iter().filter(|e| e.retained) {
        let _ = writeln!(
            s,
            "  {} -> {} [label=\"{}\", penwidth={:.2}, style={}, class={}];",
            dot_id(&e.src_group),
            dot_id(&e.dst_group),
            e.weight,
            1.0 + 4.0 * e.weight as f64 / max as f64,
            if e.known { "solid" } else { "dashed" },
            if e.known { "known" } else { "novel" },
        );
    }
    s.push_str("}\n");
    s
}

pub fn to_json(model: &ConceptualModel) -> String {
    serde_json::to_string_pretty(model).expect("model serializes") + "\n"
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_rule_and_singleton() {
        assert_eq!(retain_mask(&[5, 3, 1]), vec![true, false, false]);
        assert_eq!(retain_mask(&[4]), vec![true]);
        assert_eq!(retain_mask(&[2, 2]), vec![false, false]);
    }

    #[test]
    fn default_rules_place_every_group() {
        let r = ModelRules::default_rules();
        assert_eq!(r.groups().len(), 7);
        assert_eq!(r.group_of(ConstructType::Belief), Some("CognitiveMediatorGroup"));
        assert_eq!(r.group_of(ConstructType::Suggestion), None);
        assert_eq!(r.layer_of("DispositionGroup"), Some(Layer::Stimuli));
        let back: ModelRules = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn rejects_double_grouping() {
        let bad = include_str!("../assets/model_rules.json").replace("\"Motivation\", \"Personality\"", "\"Belief\"");
        assert!(ModelRules::from_json(&bad).is_err());
    }
}
