//! Two-dimensional word-embedding projection of the transcript vocabulary,
//! with k-means clusters and per-attribution direction arrows.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::cluster::{kmeans, pca};
use crate::gateway::{EmbeddingMethodId, Gateway, GatewayError};
use crate::model::{AttributionType, Message};

pub const DEFAULT_STOPWORDS: &[&str] = &[
    "a", "about", "after", "all", "also", "am", "an", "and", "any", "are", "as", "at", "be", "because",
    "been", "being", "but", "by", "can", "could", "did", "do", "does", "doing", "for", "from", "had",
    "has", "have", "having", "he", "her", "him", "his", "how", "i", "if", "in", "into", "is", "it",
    "it's", "its", "just", "me", "more", "my", "no", "not", "of", "on", "or", "our", "so", "some",
    "such", "than", "that", "the", "their", "them", "then", "there", "these", "they", "they're",
    "this", "those", "to", "too", "very", "was", "we", "were", "what", "when", "which", "who", "why",
    "will", "with", "would", "you", "your", "i'm", "i'd", "don't",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionOptions {
    pub k_clusters: usize,
    pub seed: u64,
    pub stopwords: BTreeSet<String>,
}

impl Default for ProjectionOptions {
    fn default() -> Self {
        ProjectionOptions {
            k_clusters: 200,
            seed: 0,
            stopwords: DEFAULT_STOPWORDS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectedWord {
    pub word: String,
    pub cluster_id: usize,
    pub frequency: u32,
    /// Most frequent word of its cluster (ties: alphabetical).
    pub representative: bool,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionArrow {
    pub attribution: AttributionType,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub words: Vec<ProjectedWord>,
    pub arrows: Vec<AttributionArrow>,
    pub explained_variance: Vec<f64>,
    pub k: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum ProjectionError {
    #[error("invalid input: {0}")]
    Input(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

pub fn tokenize(text: &str, stopwords: &BTreeSet<String>) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !(c.is_alphanumeric() || c == '\''))
        .map(|t| t.trim_matches('\''))
        .filter(|t| t.chars().count() >= 2 && !t.chars().all(|c| c.is_ascii_digit()) && !stopwords.contains(*t))
        .map(str::to_string)
        .collect()
}

pub fn emit_projection(
    gateway: &Gateway,
    transcript: &[Message],
    method: &EmbeddingMethodId,
    opts: &ProjectionOptions,
) -> Result<Projection, ProjectionError> {
    if transcript.is_empty() {
        return Err(ProjectionError::Input("transcript is empty".into()));
    }
    let mut freq: BTreeMap<String, u32> = BTreeMap::new();
    let mut by_attr: BTreeMap<AttributionType, BTreeMap<String, u32>> = BTreeMap::new();
    for m in transcript {
        for t in tokenize(&m.text, &opts.stopwords) {
            *freq.entry(t.clone()).or_insert(0) += 1;
            *by_attr.entry(m.attribution).or_default().entry(t).or_insert(0) += 1;
        }
    }
    if freq.len() < 2 {
        return Err(ProjectionError::Input(format!(
            "vocabulary has {} distinct words; at least 2 are needed",
            freq.len()
        )));
    }
    let vocab: Vec<String> = freq.keys().cloned().collect();
    let vectors = gateway.embed(&vocab, method)?;
    let index: BTreeMap<&str, usize> = vocab.iter().enumerate().map(|(i, w)| (w.as_str(), i)).collect();
    let k = opts.k_clusters.clamp(1, vocab.len());
    let km = kmeans(&vectors, k, opts.seed, 300);
    let p = pca(&vectors, 2);

    let mut rep: BTreeMap<usize, (u32, &str)> = BTreeMap::new();
    for (i, w) in vocab.iter().enumerate() {
        let f = freq[w];
        let e = rep.entry(km.assignments[i]).or_insert((f, w));
        if f > e.0 || (f == e.0 && w.as_str() < e.1) {
            *e = (f, w);
        }
    }
    let words = vocab
        .iter()
        .enumerate()
        .map(|(i, w)| {
            let xy = p.project(&vectors[i]);
            ProjectedWord {
                word: w.clone(),
                cluster_id: km.assignments[i],
                frequency: freq[w],
                representative: rep[&km.assignments[i]].1 == w,
                x: xy[0],
                y: xy[1],
            }
        })
        .collect();
    let dim = vectors[0].len();
    let arrows = by_attr
        .iter()
        .map(|(a, counts)| {
            let total: f64 = counts.values().map(|&c| c as f64).sum();
            let mut mean = vec![0.0; dim];
            for (w, &c) in counts {
                for (m, v) in mean.iter_mut().zip(&vectors[index[w.as_str()]]) {
                    *m += v * c as f64 / total;
                }
            }
            let xy = p.project(&mean);
            AttributionArrow {
                attribution: *a,
                x: xy[0],
                y: xy[1],
            }
        })
        .collect();
    Ok(Projection {
        words,
        arrows,
        explained_variance: p.eigenvalues,
        k,
    })
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// One CSV holding word rows and attribution arrow rows, distinguished by
/// the `kind` column. Coordinates use six decimals.
pub fn to_csv(p: &Projection) -> String {
    let mut s = String::from("kind,label,cluster_id,frequency,representative,x,y\n");
    for w in &p.words {
        let _ = writeln!(
            s,
            "word,{},{},{},{},{:.6},{:.6}",
            csv_field(&w.word),
            w.cluster_id,
            w.frequency,
            w.representative,
            w.x,
            w.y
        );
    }
    for a in &p.arrows {
        let _ = writeln!(s, "arrow,{},,,,{:.6},{:.6}", a.attribution.name(), a.x, a.y);
    }
    s
}
