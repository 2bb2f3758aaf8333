//! Causal knowledge graph assembly, quality metrics and exports.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{CausalKnowledgeGraph, ConstructType, Edge, Entity, Message, Triple};
use crate::ontology::RawEntity;
use crate::resolver::{entity_id, Resolution};
use crate::stats::mean_sd;
use crate::triples::normalize_text;

pub const DEFAULT_CYCLE_CAP: usize = 10_000;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("triples reference unknown entities: {}", .0.join(", "))]
    Build(Vec<String>),
    #[error("participant {0} not found")]
    NotFound(String),
    #[error("invalid input: {0}")]
    Input(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildReport {
    pub graph: CausalKnowledgeGraph,
    /// Assertions whose endpoints merged into one entity.
    pub self_loops_dropped: usize,
    /// Triples with an endpoint waiting for construct review.
    pub unmapped_triples: Vec<String>,
}

/// Builds the graph from canonical entities and (message, src, dst)
/// assertions. Weight counts distinct messages; self-loops are dropped and
/// counted.
pub fn graph_from_assertions(
    entities: BTreeMap<String, Entity>,
    assertions: impl IntoIterator<Item = (String, String, String)>,
) -> (CausalKnowledgeGraph, usize) {
    let mut edges: BTreeMap<(String, String), BTreeSet<String>> = BTreeMap::new();
    let mut loops = 0;
    for (mid, src, dst) in assertions {
        if src == dst {
            loops += 1;
            continue;
        }
        edges.entry((src, dst)).or_default().insert(mid);
    }
    let edges = edges
        .into_iter()
        .map(|((src, dst), message_ids)| Edge {
            src,
            dst,
            weight: message_ids.len() as u32,
            message_ids,
        })
        .collect();
    (CausalKnowledgeGraph { entities, edges }, loops)
}

/// Maps every triple endpoint through its (text, message) occurrence and the
/// resolution to a canonical entity and assembles the graph.
pub fn build_graph(
    raw: &[RawEntity],
    resolution: &Resolution,
    triples: &[Triple],
) -> Result<BuildReport, GraphError> {
    let occ: BTreeMap<(String, &str), Option<ConstructType>> = raw
        .iter()
        .map(|r| ((normalize_text(&r.entity_text), r.message_id.as_str()), r.construct))
        .collect();
    let mut unknown = Vec::new();
    let mut unmapped = Vec::new();
    let mut assertions = Vec::new();
    for t in triples {
        let mut ends = Vec::with_capacity(2);
        let mut state = Ok(());
        for text in [&t.cause_text, &t.effect_text] {
            let key = (normalize_text(text), t.message_id.as_str());
            match occ.get(&key) {
                None => state = state.and(Err(true)),
                Some(None) => state = state.and(Err(false)),
                Some(Some(c)) => match resolution.old_to_canonical.get(&entity_id(&key.0, *c)) {
                    Some(id) => ends.push(id.clone()),
                    None => state = state.and(Err(true)),
                },
            }
        }
        match state {
            Err(true) => unknown.push(t.triple_id.clone()),
            Err(false) => unmapped.push(t.triple_id.clone()),
            Ok(()) => assertions.push((t.message_id.clone(), ends[0].clone(), ends[1].clone())),
        }
    }
    if !unknown.is_empty() {
        return Err(GraphError::Build(unknown));
    }
    let (graph, self_loops_dropped) = graph_from_assertions(resolution.entities.clone(), assertions);
    Ok(BuildReport {
        graph,
        self_loops_dropped,
        unmapped_triples: unmapped,
    })
}

/// Node-indexed adjacency of a graph; indices follow entity id order.
pub struct Indexed<'a> {
    pub ids: Vec<&'a str>,
    pub index: BTreeMap<&'a str, usize>,
    pub adj: Vec<Vec<usize>>,
}

impl<'a> Indexed<'a> {
    pub fn new(g: &'a CausalKnowledgeGraph) -> Self {
        let ids: Vec<&str> = g.entities.keys().map(String::as_str).collect();
        let index: BTreeMap<&str, usize> = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        let mut adj = vec![Vec::new(); ids.len()];
        for e in &g.edges {
            adj[index[e.src.as_str()]].push(index[e.dst.as_str()]);
        }
        Indexed { ids, index, adj }
    }
}

/// Strongly connected components (Tarjan, iterative). Components are
/// returned in reverse topological order.
pub fn strongly_connected(adj: &[Vec<usize>], active: &[bool]) -> Vec<Vec<usize>> {
    let n = adj.len();
    let mut index = vec![usize::MAX; n];
    let mut low = vec![0; n];
    let mut on_stack = vec![false; n];
    let mut stack = Vec::new();
    let mut comps = Vec::new();
    let mut next = 0;
    for root in 0..n {
        if !active[root] || index[root] != usize::MAX {
            continue;
        }
        let mut call: Vec<(usize, usize)> = vec![(root, 0)];
        index[root] = next;
        low[root] = next;
        next += 1;
        stack.push(root);
        on_stack[root] = true;
        while let Some(top) = call.len().checked_sub(1) {
            let (v, pos) = call[top];
            if pos < adj[v].len() {
                let w = adj[v][pos];
                call[top].1 += 1;
                if !active[w] {
                    continue;
                }
                if index[w] == usize::MAX {
                    index[w] = next;
                    low[w] = next;
                    next += 1;
                    stack.push(w);
                    on_stack[w] = true;
                    call.push((w, 0));
                } else if on_stack[w] {
                    low[v] = low[v].min(index[w]);
                }
            } else {
                call.pop();
                if let Some(&(u, _)) = call.last() {
                    low[u] = low[u].min(low[v]);
                }
                if low[v] == index[v] {
                    let mut comp = Vec::new();
                    loop {
                        let w = stack.pop().unwrap();
                        on_stack[w] = false;
                        comp.push(w);
                        if w == v {
                            break;
                        }
                    }
                    comp.sort_unstable();
                    comps.push(comp);
                }
            }
        }
    }
    comps
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CycleEnumeration {
    pub cycles: Vec<Vec<usize>>,
    pub overflow: bool,
}

/// Elementary directed cycles (Johnson's algorithm), stopping once `cap`
/// cycles have been found. Each cycle starts at its smallest vertex.
pub fn elementary_cycles(adj: &[Vec<usize>], cap: usize) -> CycleEnumeration {
    let n = adj.len();
    let mut out = CycleEnumeration {
        cycles: Vec::new(),
        overflow: false,
    };
    let mut s = 0;
    while s < n {
        let active: Vec<bool> = (0..n).map(|v| v >= s).collect();
        let start = strongly_connected(adj, &active)
            .into_iter()
            .filter(|c| c.len() > 1 || adj[c[0]].contains(&c[0]))
            .min_by_key(|c| c[0]);
        let Some(comp) = start else { break };
        s = comp[0];
        let mut in_comp = vec![false; n];
        for &v in &comp {
            in_comp[v] = true;
        }
        let mut j = Johnson {
            adj,
            in_comp: &in_comp,
            blocked: vec![false; n],
            b: vec![BTreeSet::new(); n],
            path: Vec::new(),
            start: s,
            cap,
            out: &mut out,
        };
        j.circuit(s);
        if out.overflow {
            break;
        }
        s += 1;
    }
    out
}

struct Johnson<'a> {
    adj: &'a [Vec<usize>],
    in_comp: &'a [bool],
    blocked: Vec<bool>,
    b: Vec<BTreeSet<usize>>,
    path: Vec<usize>,
    start: usize,
    cap: usize,
    out: &'a mut CycleEnumeration,
}

impl Johnson<'_> {
    fn unblock(&mut self, u: usize) {
        let mut work = vec![u];
        while let Some(x) = work.pop() {
            if !self.blocked[x] {
                continue;
            }
            self.blocked[x] = false;
            work.extend(std::mem::take(&mut self.b[x]));
        }
    }

    fn circuit(&mut self, v: usize) -> bool {
        let mut found = false;
        self.path.push(v);
        self.blocked[v] = true;
        for &w in &self.adj[v] {
            if self.out.overflow {
                break;
            }
            if !self.in_comp[w] {
                continue;
            }
            if w == self.start {
                if self.out.cycles.len() >= self.cap {
                    self.out.overflow = true;
                    break;
                }
                self.out.cycles.push(self.path.clone());
                found = true;
            } else if !self.blocked[w] && self.circuit(w) {
                found = true;
            }
        }
        if found {
            self.unblock(v);
        } else {
            for &w in &self.adj[v] {
                if self.in_comp[w] {
                    self.b[w].insert(v);
                }
            }
        }
        self.path.pop();
        found
    }
}

/// Weakly connected components as sorted index lists, largest first then by
/// smallest member.
pub fn weak_components(n: usize, adj: &[Vec<usize>]) -> Vec<Vec<usize>> {
    let mut und = vec![Vec::new(); n];
    for (v, ws) in adj.iter().enumerate() {
        for &w in ws {
            und[v].push(w);
            und[w].push(v);
        }
    }
    let mut seen = vec![false; n];
    let mut comps = Vec::new();
    for s in 0..n {
        if seen[s] {
            continue;
        }
        seen[s] = true;
        let mut comp = vec![s];
        let mut i = 0;
        while i < comp.len() {
            for &w in &und[comp[i]] {
                if !seen[w] {
                    seen[w] = true;
                    comp.push(w);
                }
            }
            i += 1;
        }
        comp.sort_unstable();
        comps.push(comp);
    }
    comps.sort_by(|a, b| b.len().cmp(&a.len()).then(a[0].cmp(&b[0])));
    comps
}

/// Aggregate over maximal paths: count, Σ length, Σ length².
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathTotals {
    pub count: u128,
    pub sum: u128,
    pub sum_sq: u128,
    pub max: usize,
}

impl PathTotals {
    pub fn add(&mut self, o: &PathTotals) {
        self.count += o.count;
        self.sum += o.sum;
        self.sum_sq += o.sum_sq;
        self.max = self.max.max(o.max);
    }

    pub fn mean_sd(&self) -> MeanSd {
        if self.count == 0 {
            return MeanSd { mean: 0.0, sd: 0.0 };
        }
        let c = self.count as f64;
        let mean = self.sum as f64 / c;
        let var = (self.sum_sq as f64 / c - mean * mean).max(0.0);
        MeanSd { mean, sd: var.sqrt() }
    }
}

/// Maximal source-to-sink path statistics of a small directed graph given
/// as an edge list. Edges inside a non-trivial strongly connected component
/// are removed first; the flag reports whether any were.
pub fn maximal_paths(edges: &[(usize, usize)]) -> (PathTotals, bool) {
    let mut nodes: Vec<usize> = edges.iter().flat_map(|&(a, b)| [a, b]).collect();
    nodes.sort_unstable();
    nodes.dedup();
    let local: BTreeMap<usize, usize> = nodes.iter().enumerate().map(|(i, &v)| (v, i)).collect();
    let n = nodes.len();
    let mut adj = vec![Vec::new(); n];
    for &(a, b) in edges {
        adj[local[&a]].push(local[&b]);
    }
    let comps = strongly_connected(&adj, &vec![true; n]);
    let mut comp_of = vec![0; n];
    for (ci, c) in comps.iter().enumerate() {
        for &v in c {
            comp_of[v] = ci;
        }
    }
    let mut cyclic = false;
    let mut dag = vec![Vec::new(); n];
    let mut indeg = vec![0usize; n];
    for (v, ws) in adj.iter().enumerate() {
        for &w in ws {
            if comp_of[v] == comp_of[w] {
                cyclic = true;
            } else {
                dag[v].push(w);
                indeg[w] += 1;
            }
        }
    }
    // Tarjan emits components sinks-first, which is a reverse topological
    // order of the condensation; process vertices in that order.
    let order: Vec<usize> = comps.iter().flatten().copied().collect();
    let mut memo = vec![PathTotals::default(); n];
    for &v in &order {
        if dag[v].is_empty() {
            memo[v] = PathTotals {
                count: 1,
                sum: 0,
                sum_sq: 0,
                max: 0,
            };
            continue;
        }
        let mut t = PathTotals::default();
        for &w in &dag[v] {
            let m = memo[w];
            t.count += m.count;
            t.sum += m.sum + m.count;
            t.sum_sq += m.sum_sq + 2 * m.sum + m.count;
            t.max = t.max.max(m.max + 1);
        }
        memo[v] = t;
    }
    let mut total = PathTotals::default();
    for v in 0..n {
        if indeg[v] == 0 && !dag[v].is_empty() {
            total.add(&memo[v]);
        }
    }
    (total, cyclic)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

impl MeanSd {
    pub fn of(xs: &[f64]) -> Self {
        if xs.is_empty() {
            return MeanSd { mean: 0.0, sd: 0.0 };
        }
        let (mean, sd) = mean_sd(xs);
        MeanSd { mean, sd }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoherenceMetrics {
    pub cycle_count: usize,
    pub cycle_overflow: bool,
    pub cycle_entity_fraction: f64,
    pub component_count: usize,
    pub component_sizes: Vec<usize>,
    pub largest_component_fraction: f64,
    pub chain_count: u128,
    pub mean_chain_length: MeanSd,
    pub max_chain_length: usize,
    /// Messages whose own edges contained a cycle, removed for chain stats.
    pub messages_with_cyclic_edges: Vec<String>,
}

pub fn coherence_metrics(g: &CausalKnowledgeGraph, cycle_cap: usize) -> CoherenceMetrics {
    let ix = Indexed::new(g);
    let n = ix.ids.len();
    let cyc = elementary_cycles(&ix.adj, cycle_cap);
    let on_cycle: BTreeSet<usize> = cyc.cycles.iter().flatten().copied().collect();
    let comps = weak_components(n, &ix.adj);
    let frac = |k: usize| if n == 0 { 0.0 } else { k as f64 / n as f64 };

    let mut per_message: BTreeMap<&str, Vec<(usize, usize)>> = BTreeMap::new();
    for e in &g.edges {
        let pair = (ix.index[e.src.as_str()], ix.index[e.dst.as_str()]);
        for m in &e.message_ids {
            per_message.entry(m.as_str()).or_default().push(pair);
        }
    }
    let mut totals = PathTotals::default();
    let mut cyclic = Vec::new();
    for (m, edges) in &per_message {
        let (t, c) = maximal_paths(edges);
        totals.add(&t);
        if c {
            cyclic.push(m.to_string());
        }
    }
    CoherenceMetrics {
        cycle_count: cyc.cycles.len(),
        cycle_overflow: cyc.overflow,
        cycle_entity_fraction: frac(on_cycle.len()),
        component_count: comps.len(),
        component_sizes: comps.iter().map(Vec::len).collect(),
        largest_component_fraction: frac(comps.first().map_or(0, Vec::len)),
        chain_count: totals.count,
        mean_chain_length: totals.mean_sd(),
        max_chain_length: totals.max,
        messages_with_cyclic_edges: cyclic,
    }
}

/// Lower-cased tokens with surrounding punctuation removed.
pub fn align_tokens(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|t| {
            t.trim_matches(|c: char| !c.is_alphanumeric())
                .to_lowercase()
        })
        .collect()
}

/// Marks message tokens covered by any occurrence of any phrase as a
/// contiguous token run.
pub fn covered_tokens(message: &[String], phrases: &[Vec<String>]) -> Vec<bool> {
    let mut covered = vec![false; message.len()];
    for p in phrases {
        let p: Vec<&String> = p.iter().filter(|t| !t.is_empty()).collect();
        if p.is_empty() || p.len() > message.len() {
            continue;
        }
        for start in 0..=message.len() - p.len() {
            let mut k = 0;
            let mut i = start;
            // Punctuation-only tokens in the message are skipped over.
            while i < message.len() && k < p.len() {
                if message[i].is_empty() && i > start {
                    i += 1;
                    continue;
                }
                if &message[i] != p[k] {
                    break;
                }
                i += 1;
                k += 1;
            }
            if k == p.len() {
                covered[start..i].iter_mut().for_each(|c| *c = true);
            }
        }
    }
    covered
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageMetrics {
    pub entity_word_coverage: f64,
    pub relationships_per_message: MeanSd,
    pub relationships_per_participant: MeanSd,
    pub constructs_per_message: MeanSd,
    pub constructs_per_participant: MeanSd,
}

pub fn coverage_metrics(g: &CausalKnowledgeGraph, transcript: &[Message]) -> Result<CoverageMetrics, GraphError> {
    if transcript.is_empty() {
        return Err(GraphError::Input("transcript is empty".into()));
    }
    let mut edges_of: BTreeMap<&str, Vec<&Edge>> = BTreeMap::new();
    for e in &g.edges {
        for m in &e.message_ids {
            edges_of.entry(m.as_str()).or_default().push(e);
        }
    }
    let (mut covered, mut total) = (0usize, 0usize);
    let mut rel_msg = Vec::new();
    let mut con_msg = Vec::new();
    let mut by_participant: BTreeMap<&str, (usize, BTreeSet<ConstructType>)> = BTreeMap::new();
    for m in transcript {
        let edges = edges_of.get(m.message_id.as_str()).map(Vec::as_slice).unwrap_or(&[]);
        let ents: BTreeSet<&str> = edges
            .iter()
            .flat_map(|e| [e.src.as_str(), e.dst.as_str()])
            .collect();
        let phrases: Vec<Vec<String>> = ents
            .iter()
            .flat_map(|id| g.entities[*id].aliases.iter())
            .map(|a| align_tokens(a))
            .collect();
        let tokens = align_tokens(&m.text);
        covered += covered_tokens(&tokens, &phrases).iter().filter(|&&c| c).count();
        total += tokens.len();
        let constructs: BTreeSet<ConstructType> = ents
            .iter()
            .map(|id| g.entities[*id].construct)
            .filter(|c| !c.is_status())
            .collect();
        rel_msg.push(edges.len() as f64);
        con_msg.push(constructs.len() as f64);
        let p = by_participant.entry(m.participant_id.as_str()).or_default();
        p.0 += edges.len();
        p.1.extend(constructs);
    }
    let rel_p: Vec<f64> = by_participant.values().map(|p| p.0 as f64).collect();
    let con_p: Vec<f64> = by_participant.values().map(|p| p.1.len() as f64).collect();
    Ok(CoverageMetrics {
        entity_word_coverage: if total == 0 { 0.0 } else { covered as f64 / total as f64 },
        relationships_per_message: MeanSd::of(&rel_msg),
        relationships_per_participant: MeanSd::of(&rel_p),
        constructs_per_message: MeanSd::of(&con_msg),
        constructs_per_participant: MeanSd::of(&con_p),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CkgMetricsReport {
    pub entity_count: usize,
    pub edge_count: usize,
    pub total_weight: u64,
    pub message_count: usize,
    pub participant_count: usize,
    #[serde(flatten)]
    pub coverage: CoverageMetrics,
    #[serde(flatten)]
    pub coherence: CoherenceMetrics,
}

pub fn metrics(g: &CausalKnowledgeGraph, transcript: &[Message], cycle_cap: usize) -> Result<CkgMetricsReport, GraphError> {
    let participants: BTreeSet<&str> = transcript.iter().map(|m| m.participant_id.as_str()).collect();
    Ok(CkgMetricsReport {
        entity_count: g.entities.len(),
        edge_count: g.edges.len(),
        total_weight: g.edges.iter().map(|e| e.weight as u64).sum(),
        message_count: transcript.len(),
        participant_count: participants.len(),
        coverage: coverage_metrics(g, transcript)?,
        coherence: coherence_metrics(g, cycle_cap),
    })
}

/// Edges supported by a participant's messages, with weights recounted over
/// those messages; entities keep their global ids.
pub fn participant_subgraph(
    g: &CausalKnowledgeGraph,
    transcript: &[Message],
    participant_id: &str,
) -> Result<CausalKnowledgeGraph, GraphError> {
    let mine: BTreeSet<&str> = transcript
        .iter()
        .filter(|m| m.participant_id == participant_id)
        .map(|m| m.message_id.as_str())
        .collect();
    if mine.is_empty() {
        return Err(GraphError::NotFound(participant_id.to_string()));
    }
    let mut edges = Vec::new();
    let mut used = BTreeSet::new();
    for e in &g.edges {
        let ids: BTreeSet<String> = e
            .message_ids
            .iter()
            .filter(|m| mine.contains(m.as_str()))
            .cloned()
            .collect();
        if !ids.is_empty() {
            used.insert(e.src.clone());
            used.insert(e.dst.clone());
            edges.push(Edge {
                src: e.src.clone(),
                dst: e.dst.clone(),
                weight: ids.len() as u32,
                message_ids: ids,
            });
        }
    }
    let entities = g
        .entities
        .iter()
        .filter(|(id, _)| used.contains(*id))
        .map(|(id, e)| (id.clone(), e.clone()))
        .collect();
    Ok(CausalKnowledgeGraph { entities, edges })
}

fn dot_escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// DOT export; nodes carry their construct as `class`.
pub fn to_dot(g: &CausalKnowledgeGraph, name: &str) -> String {
    let mut s = format!("digraph \"{}\" {{\n  rankdir=LR;\n", dot_escape(name));
    for e in g.entities.values() {
        let _ = writeln!(
            s,
            "  \"{}\" [label=\"{}\", class=\"{}\", construct=\"{}\", frequency={}];",
            dot_escape(&e.entity_id),
            dot_escape(&e.canonical_text),
            e.construct.name(),
            e.construct.name(),
            e.frequency
        );
    }
    for e in &g.edges {
        let _ = writeln!(
            s,
            "  \"{}\" -> \"{}\" [weight={}, label=\"{}\"];",
            dot_escape(&e.src),
            dot_escape(&e.dst),
            e.weight,
            e.weight
        );
    }
    s.push_str("}\n");
    s
}

pub fn to_graphml(g: &CausalKnowledgeGraph) -> String {
    let mut s = String::from(
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<graphml xmlns=\"http://graphml.graphdrawing.org/xmlns\">\n  \
<key id=\"text\" for=\"node\" attr.name=\"text\" attr.type=\"string\"/>\n  \
<key id=\"construct\" for=\"node\" attr.name=\"construct\" attr.type=\"string\"/>\n  \
<key id=\"frequency\" for=\"node\" attr.name=\"frequency\" attr.type=\"int\"/>\n  \
<key id=\"weight\" for=\"edge\" attr.name=\"weight\" attr.type=\"int\"/>\n  \
<graph id=\"ckg\" edgedefault=\"directed\">\n",
    );
    for e in g.entities.values() {
        let _ = writeln!(
            s,
            "    <node id=\"{}\"><data key=\"text\">{}</data><data key=\"construct\">{}</data><data key=\"frequency\">{}</data></node>",
            xml_escape(&e.entity_id),
            xml_escape(&e.canonical_text),
            e.construct.name(),
            e.frequency
        );
    }
    for e in &g.edges {
        let _ = writeln!(
            s,
            "    <edge source=\"{}\" target=\"{}\"><data key=\"weight\">{}</data></edge>",
            xml_escape(&e.src),
            xml_escape(&e.dst),
            e.weight
        );
    }
    s.push_str("  </graph>\n</graphml>\n");
    s
}
