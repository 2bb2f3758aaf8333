//! End-to-end orchestration from a transcript to the conceptual model, with
//! a content-hashed manifest that makes re-runs resumable.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::coding::{code_corpus, mock_coding_handler, Codebook, CodingError};
use crate::conceptual::{self, build_conceptual_model, discover_themes, ConceptualError, ModelRules, ThemeReport};
use crate::gateway::{EmbeddingMethodId, Gateway, GatewayConfig, GatewayError, MockChatBackend};
use crate::graph::{self, build_graph, GraphError, DEFAULT_CYCLE_CAP};
use crate::interview::{mock_interview_handler, ScriptPack};
use crate::io::{parse_jsonl, read_jsonl, to_json_pretty, to_jsonl, write_atomic, IoError};
use crate::model::{validate_corpus, CausalKnowledgeGraph, CodedMessage, ConstructType, Entity, Message, Triple};
use crate::ontology::{mock_assignment_handler, ontologize, AssignError, ConstructScheme, RawEntity};
use crate::projection::{emit_projection, to_csv, ProjectionError, ProjectionOptions};
use crate::resolver::{mock_merge_handler, resolve, ResolveError, ResolveOptions, Resolution};
use crate::triples::{extract_triples, mock_extraction_handler, ExemplarStore, ExtractOptions, StatusMap, TripleError};

pub const MANIFEST: &str = "manifest.json";

pub const CODES: &str = "codes.jsonl";
pub const TRIPLES: &str = "triples.jsonl";
pub const ENTITIES_RAW: &str = "entities_raw.jsonl";
pub const RESOLUTION: &str = "resolution.json";
pub const GRAPH: &str = "graph.json";
pub const METRICS: &str = "metrics.json";
pub const PROJECTION: &str = "projection.csv";
pub const THEMES: &str = "themes.json";
pub const CONCEPTUAL_MODEL: &str = "conceptual_model.json";

/// Artifacts in stage order.
pub const ARTIFACTS: [&str; 9] = [
    CODES,
    TRIPLES,
    ENTITIES_RAW,
    RESOLUTION,
    GRAPH,
    METRICS,
    PROJECTION,
    THEMES,
    CONCEPTUAL_MODEL,
];

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("backend failure in stage {stage}: {source}")]
    Backend {
        stage: &'static str,
        #[source]
        source: GatewayError,
    },
    #[error("stage {stage} failed: {message}")]
    Stage { stage: &'static str, message: String },
}

impl PipelineError {
    /// Process exit status: 2 for backend failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Backend { .. } => 2,
            _ => 1,
        }
    }

    fn stage(stage: &'static str, e: impl StageError) -> Self {
        match e.into_gateway() {
            Ok(g) => PipelineError::Backend { stage, source: g },
            Err(message) => PipelineError::Stage { stage, message },
        }
    }
}

/// Separates backend failures from validation failures in stage errors.
pub trait StageError: std::fmt::Display + Sized {
    fn gateway(&self) -> Option<&GatewayError>;

    fn into_gateway(self) -> Result<GatewayError, String> {
        match self.gateway() {
            Some(GatewayError::Input(_)) | None => Err(self.to_string()),
            Some(g) => Ok(g.clone()),
        }
    }
}

macro_rules! stage_error {
    ($($t:ty),*) => {$(
        impl StageError for $t {
            fn gateway(&self) -> Option<&GatewayError> {
                match self {
                    Self::Gateway(g) => Some(g),
                    _ => None,
                }
            }
        }
    )*};
}
stage_error!(CodingError, TripleError, AssignError, ResolveError, ProjectionError, ConceptualError);

impl StageError for GraphError {
    fn gateway(&self) -> Option<&GatewayError> {
        None
    }
}

impl StageError for GatewayError {
    fn gateway(&self) -> Option<&GatewayError> {
        Some(self)
    }
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageToggles {
    #[serde(default = "yes")]
    pub code: bool,
    #[serde(default = "yes")]
    pub extract: bool,
    #[serde(default = "yes")]
    pub ontologize: bool,
    #[serde(default = "yes")]
    pub resolve: bool,
    #[serde(default = "yes")]
    pub graph: bool,
    #[serde(default = "yes")]
    pub metrics: bool,
    #[serde(default = "yes")]
    pub project: bool,
    #[serde(default = "yes")]
    pub themes: bool,
    #[serde(default = "yes")]
    pub model: bool,
}

impl Default for StageToggles {
    fn default() -> Self {
        toml::from_str("").expect("all toggles default")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Thresholds {
    /// Word count below which the interview asks a follow-up.
    pub min_length_threshold: usize,
    /// Trigram cosine at which the offline merge judge says yes.
    pub merge_cosine: f64,
    /// Nearest neighbours per embedding method during resolution.
    pub k: usize,
    pub k_clusters: usize,
    pub cycle_cap: usize,
    pub theme_k_min: usize,
    pub theme_k_max: usize,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            min_length_threshold: 20,
            merge_cosine: 0.6,
            k: crate::resolver::DEFAULT_K,
            k_clusters: 200,
            cycle_cap: DEFAULT_CYCLE_CAP,
            theme_k_min: *conceptual::DEFAULT_K_RANGE.start(),
            theme_k_max: *conceptual::DEFAULT_K_RANGE.end(),
        }
    }
}

/// Optional replacements for the bundled assets.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AssetPaths {
    pub codebook: Option<PathBuf>,
    pub scripts: Option<PathBuf>,
    pub constructs: Option<PathBuf>,
    pub status_map: Option<PathBuf>,
    pub model_rules: Option<PathBuf>,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_methods() -> Vec<EmbeddingMethodId> {
    ResolveOptions::default().methods
}

/// Pipeline configuration. Relative paths resolve against the directory of
/// the configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub transcript: PathBuf,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub gateway: GatewayConfig,
    /// The first method also drives the projection and theme clustering.
    #[serde(default = "default_methods")]
    pub embedding_methods: Vec<EmbeddingMethodId>,
    #[serde(default)]
    pub stages: StageToggles,
    #[serde(default)]
    pub thresholds: Thresholds,
    #[serde(default)]
    pub assets: AssetPaths,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        if cfg.embedding_methods.is_empty() {
            return Err(PipelineError::Config("at least one embedding method is required".into()));
        }
        if cfg.gateway.max_in_flight == 0 {
            return Err(PipelineError::Config("max_in_flight must be at least 1".into()));
        }
        if cfg.thresholds.theme_k_min > cfg.thresholds.theme_k_max {
            return Err(PipelineError::Config("theme_k_min exceeds theme_k_max".into()));
        }
        Ok(cfg)
    }

    /// Reads the file and rebases relative paths onto its directory.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(|source| IoError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.rebase(base);
        Ok(cfg)
    }

    pub fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.transcript);
        fix(&mut self.out_dir);
        for p in [
            &mut self.assets.codebook,
            &mut self.assets.scripts,
            &mut self.assets.constructs,
            &mut self.assets.status_map,
            &mut self.assets.model_rules,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    /// Forces every backend to the deterministic mocks.
    pub fn force_mock(&mut self) {
        self.gateway.chat = crate::gateway::BackendConfig::mock();
        self.gateway.embeddings = crate::gateway::BackendConfig::mock();
        self.embedding_methods = default_methods();
    }
}

/// Loaded assets, bundled unless overridden.
#[derive(Debug, Clone)]
pub struct Assets {
    pub codebook: Codebook,
    pub scripts: ScriptPack,
    pub constructs: ConstructScheme,
    pub status_map: StatusMap,
    pub model_rules: ModelRules,
}

fn read_text(p: &Path) -> Result<String, PipelineError> {
    fs::read_to_string(p).map_err(|source| {
        IoError::Io {
            path: p.to_path_buf(),
            source,
        }
        .into()
    })
}

impl Assets {
    pub fn load(paths: &AssetPaths) -> Result<Self, PipelineError> {
        let bad = |p: &Path, e: String| PipelineError::Input(format!("{}: {e}", p.display()));
        let codebook = match &paths.codebook {
            Some(p) => {
                let cb: Codebook = serde_json::from_str(&read_text(p)?).map_err(|e| bad(p, e.to_string()))?;
                cb.check().map_err(|e| bad(p, e))?;
                cb
            }
            None => Codebook::default_stigma(),
        };
        let scripts = match &paths.scripts {
            Some(p) => ScriptPack::from_json(&read_text(p)?).map_err(|e| bad(p, e))?,
            None => ScriptPack::default_pack(),
        };
        let constructs = match &paths.constructs {
            Some(p) => {
                let s: ConstructScheme = serde_json::from_str(&read_text(p)?).map_err(|e| bad(p, e.to_string()))?;
                s.check().map_err(|e| bad(p, e))?;
                s
            }
            None => ConstructScheme::default_scheme(),
        };
        let status_map = match &paths.status_map {
            Some(p) => StatusMap::from_json(&read_text(p)?).map_err(|e| bad(p, e))?,
            None => StatusMap::default_map(),
        };
        let model_rules = match &paths.model_rules {
            Some(p) => ModelRules::from_json(&read_text(p)?).map_err(|e| bad(p, e.to_string()))?,
            None => ModelRules::default_rules(),
        };
        Ok(Assets {
            codebook,
            scripts,
            constructs,
            status_map,
            model_rules,
        })
    }
}

/// Offline chat backend answering every prompt family the pipeline and the
/// interview engine issue.
pub fn mock_backend(codebook: &Codebook, merge_cosine: f64) -> MockChatBackend {
    MockChatBackend::new()
        .with_handler(mock_coding_handler(codebook.clone()))
        .with_handler(mock_extraction_handler())
        .with_handler(mock_assignment_handler())
        .with_handler(mock_merge_handler(merge_cosine))
        .with_handler(mock_interview_handler())
}

pub fn build_gateway(cfg: &PipelineConfig, assets: &Assets) -> Result<Gateway, PipelineError> {
    Gateway::from_config(&cfg.gateway, mock_backend(&assets.codebook, cfg.thresholds.merge_cosine))
        .map_err(|e| PipelineError::Config(e.to_string()))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub name: String,
    pub sha256: String,
    pub bytes: u64,
    /// Digest of the configuration, seed and upstream artifact hashes that
    /// produced this file.
    pub input_key: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub config_sha256: String,
    pub transcript_sha256: String,
    pub artifacts: Vec<ArtifactRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub manifest: Manifest,
    pub regenerated: Vec<String>,
    pub reused: Vec<String>,
    pub discarded_messages: usize,
    pub uncoded_messages: Vec<String>,
    pub unmapped_triples: usize,
}

struct Runner {
    out: PathBuf,
    prev: BTreeMap<String, ArtifactRecord>,
    config_hash: String,
    seed: u64,
    hashes: BTreeMap<&'static str, String>,
    records: Vec<ArtifactRecord>,
    regenerated: Vec<String>,
    reused: Vec<String>,
}

impl Runner {
    fn key(&self, name: &str, deps: &[&str]) -> String {
        let mut h = Sha256::new();
        h.update(name.as_bytes());
        h.update(self.config_hash.as_bytes());
        h.update(self.seed.to_le_bytes());
        for d in deps {
            h.update(d.as_bytes());
            h.update(self.hashes.get(d).map(String::as_str).unwrap_or("-").as_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Reuses the on-disk artifact when its recorded key and hash still
    /// match, otherwise produces and writes it.
    fn stage(
        &mut self,
        name: &'static str,
        deps: &[&str],
        enabled: bool,
        produce: impl FnOnce() -> Result<Vec<u8>, PipelineError>,
    ) -> Result<Vec<u8>, PipelineError> {
        let key = self.key(name, deps);
        let path = self.out.join(name);
        let existing = fs::read(&path).ok();
        let fresh = match (&existing, self.prev.get(name)) {
            (Some(b), Some(rec)) => rec.input_key == key && rec.sha256 == sha256_hex(b),
            _ => false,
        };
        let bytes = if fresh || (!enabled && existing.is_some()) {
            self.reused.push(name.to_string());
            existing.expect("checked above")
        } else if !enabled {
            return Err(PipelineError::Input(format!(
                "stage producing {name} is disabled and {} does not exist",
                path.display()
            )));
        } else {
            let b = produce()?;
            write_atomic(&path, &b)?;
            self.regenerated.push(name.to_string());
            b
        };
        let sha = sha256_hex(&bytes);
        self.hashes.insert(name, sha.clone());
        self.records.push(ArtifactRecord {
            name: name.to_string(),
            sha256: sha,
            bytes: bytes.len() as u64,
            input_key: key,
        });
        Ok(bytes)
    }
}

fn utf8(name: &str, b: &[u8]) -> Result<String, PipelineError> {
    String::from_utf8(b.to_vec()).map_err(|_| PipelineError::Input(format!("{name} is not UTF-8")))
}

fn json<T: serde::de::DeserializeOwned>(name: &str, b: &[u8]) -> Result<T, PipelineError> {
    serde_json::from_slice(b).map_err(|e| PipelineError::Input(format!("{name}: {e}")))
}

fn question_for(pack: &ScriptPack) -> impl Fn(&Message) -> String + Sync + '_ {
    move |m: &Message| pack.question_scripts.get(&m.attribution).cloned().unwrap_or_default()
}

/// Runs every stage in order. Messages below the minimum word count are
/// excluded from analysis; messages every coder sample abstained on are
/// reported and skipped downstream.
pub fn run_pipeline(cfg: &PipelineConfig, gateway: &Gateway, assets: &Assets) -> Result<PipelineReport, PipelineError> {
    let transcript_bytes = fs::read(&cfg.transcript).map_err(|source| IoError::Io {
        path: cfg.transcript.clone(),
        source,
    })?;
    let all: Vec<Message> = parse_jsonl(&utf8("transcript", &transcript_bytes)?, &cfg.transcript)?;
    for m in &all {
        m.check().map_err(PipelineError::Input)?;
    }
    let validation = validate_corpus(&all).map_err(|e| PipelineError::Input(e.to_string()))?;
    let keep: std::collections::BTreeSet<&str> = validation.retained.iter().map(String::as_str).collect();
    let transcript: Vec<Message> = all.iter().filter(|m| keep.contains(m.message_id.as_str())).cloned().collect();
    if transcript.is_empty() {
        return Err(PipelineError::Input("no message meets the minimum length".into()));
    }

    fs::create_dir_all(&cfg.out_dir).map_err(|source| IoError::Io {
        path: cfg.out_dir.clone(),
        source,
    })?;
    let prev: BTreeMap<String, ArtifactRecord> = fs::read(cfg.out_dir.join(MANIFEST))
        .ok()
        .and_then(|b| serde_json::from_slice::<Manifest>(&b).ok())
        .map(|m| m.artifacts.into_iter().map(|a| (a.name.clone(), a)).collect())
        .unwrap_or_default();

    let config_hash = {
        let fingerprint = serde_json::json!({
            "gateway": cfg.gateway,
            "embedding_methods": cfg.embedding_methods,
            "thresholds": cfg.thresholds,
            "codebook": assets.codebook,
            "scripts": assets.scripts,
            "constructs": assets.constructs,
            "status_map": assets.status_map,
            "model_rules": assets.model_rules,
        });
        sha256_hex(fingerprint.to_string().as_bytes())
    };
    let transcript_sha256 = sha256_hex(&transcript_bytes);
    let mut r = Runner {
        out: cfg.out_dir.clone(),
        prev,
        config_hash: config_hash.clone(),
        seed: cfg.seed,
        hashes: BTreeMap::from([("transcript", transcript_sha256.clone())]),
        records: Vec::new(),
        regenerated: Vec::new(),
        reused: Vec::new(),
    };
    let st = &cfg.stages;
    let method = &cfg.embedding_methods[0];

    let mut uncoded = Vec::new();
    let codes_b = r.stage(CODES, &["transcript"], st.code, || {
        let vignette = assets.scripts.vignette_text();
        let results = code_corpus(gateway, &transcript, &assets.codebook, &vignette, question_for(&assets.scripts));
        let mut codes = Vec::new();
        for (m, res) in transcript.iter().zip(results) {
            match res {
                Ok(c) => codes.push(c),
                Err(CodingError::AllAbstained(..)) => uncoded.push(m.message_id.clone()),
                Err(e) => return Err(PipelineError::stage("code", e)),
            }
        }
        Ok(to_jsonl(&codes).into_bytes())
    })?;
    let codes: Vec<CodedMessage> = parse_jsonl(&utf8(CODES, &codes_b)?, &cfg.out_dir.join(CODES))?;

    let triples_b = r.stage(TRIPLES, &["transcript", CODES], st.extract, || {
        let by_id: BTreeMap<&str, &Message> = transcript.iter().map(|m| (m.message_id.as_str(), m)).collect();
        let work: Vec<(&Message, _)> = codes
            .iter()
            .filter_map(|c| by_id.get(c.message_id.as_str()).map(|m| (*m, c.final_label)))
            .collect();
        let store = ExemplarStore::default();
        let opts = ExtractOptions::default();
        let results = gateway.map_limited(&work, |(m, code)| {
            extract_triples(gateway, m, *code, &assets.status_map, &store, &opts)
        });
        let mut triples: Vec<Triple> = Vec::new();
        for res in results {
            triples.extend(res.map_err(|e| PipelineError::stage("extract", e))?.triples);
        }
        Ok(to_jsonl(&triples).into_bytes())
    })?;
    let triples: Vec<Triple> = parse_jsonl(&utf8(TRIPLES, &triples_b)?, &cfg.out_dir.join(TRIPLES))?;

    let raw_b = r.stage(ENTITIES_RAW, &["transcript", TRIPLES], st.ontologize, || {
        let raw = ontologize(gateway, &triples, &transcript, &assets.constructs)
            .map_err(|e| PipelineError::stage("ontologize", e))?;
        Ok(to_jsonl(&raw).into_bytes())
    })?;
    let raw: Vec<RawEntity> = parse_jsonl(&utf8(ENTITIES_RAW, &raw_b)?, &cfg.out_dir.join(ENTITIES_RAW))?;

    let res_b = r.stage(RESOLUTION, &[ENTITIES_RAW], st.resolve, || {
        let opts = ResolveOptions {
            methods: cfg.embedding_methods.clone(),
            k: cfg.thresholds.k,
        };
        let res = resolve(gateway, &raw, &opts).map_err(|e| PipelineError::stage("resolve", e))?;
        Ok(to_json_pretty(&res).into_bytes())
    })?;
    let resolution: Resolution = json(RESOLUTION, &res_b)?;

    let mut unmapped_triples = 0;
    let graph_b = r.stage(GRAPH, &[ENTITIES_RAW, RESOLUTION, TRIPLES], st.graph, || {
        let report = build_graph(&raw, &resolution, &triples).map_err(|e| PipelineError::stage("build-graph", e))?;
        unmapped_triples = report.unmapped_triples.len();
        Ok(to_json_pretty(&report.graph).into_bytes())
    })?;
    let graph: CausalKnowledgeGraph = json(GRAPH, &graph_b)?;

    r.stage(METRICS, &[GRAPH, "transcript"], st.metrics, || {
        let m = graph::metrics(&graph, &transcript, cfg.thresholds.cycle_cap)
            .map_err(|e| PipelineError::stage("metrics", e))?;
        Ok(to_json_pretty(&m).into_bytes())
    })?;

    r.stage(PROJECTION, &["transcript"], st.project, || {
        let opts = ProjectionOptions {
            k_clusters: cfg.thresholds.k_clusters,
            seed: cfg.seed,
            ..Default::default()
        };
        let p = emit_projection(gateway, &transcript, method, &opts).map_err(|e| PipelineError::stage("project", e))?;
        Ok(to_csv(&p).into_bytes())
    })?;

    r.stage(THEMES, &[GRAPH], st.themes, || {
        let reports = themes_for_graph(gateway, &graph, method, cfg.thresholds.theme_k_min..=cfg.thresholds.theme_k_max, cfg.seed)
            .map_err(|e| PipelineError::stage("themes", e))?;
        Ok(to_json_pretty(&reports).into_bytes())
    })?;

    r.stage(CONCEPTUAL_MODEL, &[GRAPH, "transcript"], st.model, || {
        let model = build_conceptual_model(&graph, &transcript, &assets.model_rules)
            .map_err(|e| PipelineError::stage("model", e))?;
        Ok(conceptual::to_json(&model).into_bytes())
    })?;

    let manifest = Manifest {
        seed: cfg.seed,
        config_sha256: config_hash,
        transcript_sha256,
        artifacts: r.records,
    };
    write_atomic(&cfg.out_dir.join(MANIFEST), to_json_pretty(&manifest).as_bytes())?;
    Ok(PipelineReport {
        manifest,
        regenerated: r.regenerated,
        reused: r.reused,
        discarded_messages: validation.discarded.len(),
        uncoded_messages: uncoded,
        unmapped_triples,
    })
}

/// Theme reports for every theoretical construct present in the graph.
pub fn themes_for_graph(
    gateway: &Gateway,
    graph: &CausalKnowledgeGraph,
    method: &EmbeddingMethodId,
    k_range: std::ops::RangeInclusive<usize>,
    seed: u64,
) -> Result<Vec<ThemeReport>, ConceptualError> {
    let mut by_construct: BTreeMap<ConstructType, Vec<Entity>> = BTreeMap::new();
    for e in graph.entities.values().filter(|e| !e.construct.is_status()) {
        by_construct.entry(e.construct).or_default().push(e.clone());
    }
    by_construct
        .iter()
        .map(|(c, ents)| discover_themes(gateway, *c, ents, method, k_range.clone(), seed))
        .collect()
}

/// Reads a JSONL artifact, for subcommands that consume a single stage.
pub fn read_artifact<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, PipelineError> {
    Ok(read_jsonl(path)?)
}
