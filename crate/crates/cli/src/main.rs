//! `stigmagraph`: runs the interview service and every analysis stage.
//!
//! Exit status is 0 on success, 1 on usage or validation errors (including
//! missing input files) and 2 when a model backend fails.

use std::collections::BTreeMap;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use stigmagraph_core::coding::{code_corpus, compare_classifiers, kappa_report, Codebook, CodingError};
use stigmagraph_core::conceptual::{build_conceptual_model, discover_themes, to_dot as model_dot, to_json as model_json};
use stigmagraph_core::gateway::{EmbeddingMethodId, Gateway, GatewayConfig, GatewayError};
use stigmagraph_core::graph::{build_graph, metrics, participant_subgraph, to_dot, to_graphml, DEFAULT_CYCLE_CAP};
use stigmagraph_core::interview::{InterviewConfig, InterviewEngine, ScriptPack};
use stigmagraph_core::io::{read_json, read_jsonl, to_json_pretty, write_atomic, write_json, write_jsonl, IoError};
use stigmagraph_core::model::{CausalKnowledgeGraph, CodedMessage, ConstructType, Entity, Message, Triple};
use stigmagraph_core::ontology::{ontologize, ConstructScheme, RawEntity};
use stigmagraph_core::pipeline::{self, mock_backend, run_pipeline, Assets, AssetPaths, PipelineConfig, StageError};
use stigmagraph_core::projection::{emit_projection, to_csv, ProjectionOptions};
use stigmagraph_core::resolver::{resolve, ResolveOptions, Resolution};
use stigmagraph_core::stats::{McNemarVariant, Stat};
use stigmagraph_core::triples::{extract_triples, triple_accuracy, ExemplarStore, ExtractOptions, StatusMap};
use stigmagraph_service::{AppState, ServiceConfig};

#[derive(Parser)]
#[command(name = "stigmagraph", version, about = "Chatbot interviews to causal knowledge graphs and conceptual models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct GatewayArgs {
    /// Gateway TOML; omitted means the deterministic mocks.
    #[arg(long)]
    gateway_config: Option<PathBuf>,
    /// Force every backend to the deterministic mocks.
    #[arg(long)]
    mock: bool,
    /// Trigram cosine at which the offline merge judge says yes.
    #[arg(long, default_value_t = 0.6)]
    merge_cosine: f64,
}

#[derive(Subcommand)]
enum Command {
    /// Serve the interview REST API.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value_t = 50)]
        max_sessions: usize,
        #[arg(long)]
        scripts: Option<PathBuf>,
        #[arg(long, default_value = "data")]
        data_dir: PathBuf,
        /// Allowed browser origin; repeatable. None allows any.
        #[arg(long = "cors-origin")]
        cors_origins: Vec<String>,
        #[arg(long, default_value_t = 20)]
        min_length_threshold: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        gateway: GatewayArgs,
    },
    /// Code transcript messages by five-vote majority.
    Code {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        codebook: Option<PathBuf>,
        #[arg(long)]
        scripts: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        gateway: GatewayArgs,
    },
    /// Cohen's kappa between two code files.
    Kappa {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        cand: PathBuf,
        /// Also write the full report (matrix, per-label kappa).
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Compare candidate coders against a reference with McNemar and Cochran's Q.
    Compare {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long = "cand", required = true)]
        cands: Vec<PathBuf>,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        /// Use the exact binomial McNemar test.
        #[arg(long)]
        exact: bool,
    },
    /// Extract causal triples from coded messages.
    Extract {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        transcript: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        exemplars: Option<PathBuf>,
        #[arg(long)]
        status_map: Option<PathBuf>,
        #[command(flatten)]
        gateway: GatewayArgs,
    },
    /// Share of reference triples reproduced by a model triple set.
    Accuracy {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
    },
    /// Assign constructs to triple endpoints.
    Ontologize {
        #[arg(long)]
        triples: PathBuf,
        #[arg(long)]
        transcript: PathBuf,
        #[arg(long)]
        constructs: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        gateway: GatewayArgs,
    },
    /// Merge equivalent entities.
    Resolve {
        #[arg(long)]
        entities: PathBuf,
        #[arg(long, default_value_t = 3)]
        methods: usize,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, default_value = "resolution.json")]
        out: PathBuf,
        #[command(flatten)]
        gateway: GatewayArgs,
    },
    /// Assemble the causal knowledge graph.
    BuildGraph {
        #[arg(long)]
        entities: PathBuf,
        #[arg(long)]
        resolution: PathBuf,
        #[arg(long)]
        triples: PathBuf,
        #[arg(long, default_value = "graph.json")]
        out: PathBuf,
        #[arg(long)]
        dot: Option<PathBuf>,
        #[arg(long)]
        graphml: Option<PathBuf>,
    },
    /// Coverage and coherence metrics of a graph.
    Metrics {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        transcript: PathBuf,
        #[arg(long, default_value_t = DEFAULT_CYCLE_CAP)]
        cycle_cap: usize,
        #[arg(long, default_value = "metrics.json")]
        out: PathBuf,
    },
    /// Graph restricted to one participant's messages.
    Subgraph {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        transcript: PathBuf,
        #[arg(long)]
        participant: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        dot: Option<PathBuf>,
    },
    /// Two-dimensional word embedding projection.
    Project {
        #[arg(long)]
        transcript: PathBuf,
        #[arg(long, default_value_t = 200)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "projection.csv")]
        out: PathBuf,
        #[command(flatten)]
        gateway: GatewayArgs,
    },
    /// Theme discovery inside constructs.
    Themes {
        #[arg(long)]
        graph: PathBuf,
        /// Limit to one construct; all present constructs otherwise.
        #[arg(long)]
        construct: Option<String>,
        #[arg(long, default_value_t = 2)]
        k_min: usize,
        #[arg(long, default_value_t = 12)]
        k_max: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "themes")]
        out_dir: PathBuf,
        #[command(flatten)]
        gateway: GatewayArgs,
    },
    /// Layered conceptual model with mean-weight thresholding.
    Model {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        transcript: PathBuf,
        #[arg(long)]
        rules: Option<PathBuf>,
        #[arg(long, default_value = "conceptual_model.json")]
        out: PathBuf,
        #[arg(long, default_value = "conceptual_model.dot")]
        dot: PathBuf,
    },
    /// Run every stage and write a content-hashed manifest.
    Pipeline {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        mock: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn input(m: impl ToString) -> Self {
        Failure {
            code: 1,
            message: m.to_string(),
        }
    }

    fn stage(e: impl StageError) -> Self {
        match e.into_gateway() {
            Ok(g) => Failure {
                code: 2,
                message: g.to_string(),
            },
            Err(m) => Failure::input(m),
        }
    }
}

impl From<IoError> for Failure {
    fn from(e: IoError) -> Self {
        Failure::input(e)
    }
}

impl From<GatewayError> for Failure {
    fn from(e: GatewayError) -> Self {
        Failure::stage(e)
    }
}

type Outcome = Result<(), Failure>;

fn gateway(args: &GatewayArgs, codebook: &Codebook) -> Result<Gateway, Failure> {
    let cfg = match (&args.gateway_config, args.mock) {
        (Some(p), false) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::input(format!("{}: {e}", p.display())))?;
            GatewayConfig::from_toml(&text).map_err(|e| Failure::input(format!("{}: {e}", p.display())))?
        }
        _ => GatewayConfig::default(),
    };
    Gateway::from_config(&cfg, mock_backend(codebook, args.merge_cosine)).map_err(Failure::input)
}

fn load<T: serde::de::DeserializeOwned>(path: &Option<PathBuf>, fallback: impl FnOnce() -> T) -> Result<T, Failure> {
    match path {
        Some(p) => Ok(read_json(p)?),
        None => Ok(fallback()),
    }
}

fn print_json<T: Serialize>(v: &T) {
    print!("{}", to_json_pretty(v));
}

fn fmt_stat(s: Stat) -> String {
    match s.value() {
        Some(v) => format!("{v:.6}"),
        None => "undefined".into(),
    }
}

fn scripts(path: &Option<PathBuf>) -> Result<ScriptPack, Failure> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::input(format!("{}: {e}", p.display())))?;
            ScriptPack::from_json(&text).map_err(|e| Failure::input(format!("{}: {e}", p.display())))
        }
        None => Ok(ScriptPack::default_pack()),
    }
}

fn codebook(path: &Option<PathBuf>) -> Result<Codebook, Failure> {
    let cb: Codebook = load(path, Codebook::default_stigma)?;
    cb.check().map_err(Failure::input)?;
    Ok(cb)
}

fn run(cmd: Command) -> Outcome {
    match cmd {
        Command::Serve {
            port,
            max_sessions,
            scripts: scripts_path,
            data_dir,
            cors_origins,
            min_length_threshold,
            seed,
            gateway: gw,
        } => {
            let cb = Codebook::default_stigma();
            let engine = InterviewEngine::new(
                Arc::new(gateway(&gw, &cb)?),
                scripts(&scripts_path)?,
                cb,
                InterviewConfig {
                    min_length_threshold,
                    ..Default::default()
                },
            );
            let cfg = ServiceConfig {
                max_sessions,
                data_dir,
                cors_origins,
                seed,
            };
            let state = AppState::new(engine, cfg).map_err(Failure::input)?;
            let addr = SocketAddr::from(([0, 0, 0, 0], port));
            let rt = tokio::runtime::Runtime::new().map_err(Failure::input)?;
            eprintln!("listening on {addr}");
            rt.block_on(stigmagraph_service::serve(state, addr)).map_err(Failure::input)
        }
        Command::Code {
            input,
            codebook: cb_path,
            scripts: sp,
            out,
            gateway: gw,
        } => {
            let cb = codebook(&cb_path)?;
            let pack = scripts(&sp)?;
            let msgs: Vec<Message> = read_jsonl(&input)?;
            let g = gateway(&gw, &cb)?;
            let vignette = pack.vignette_text();
            let results = code_corpus(&g, &msgs, &cb, &vignette, |m: &Message| {
                pack.question_scripts.get(&m.attribution).cloned().unwrap_or_default()
            });
            let mut codes = Vec::new();
            for (m, r) in msgs.iter().zip(results) {
                match r {
                    Ok(c) => codes.push(c),
                    Err(CodingError::AllAbstained(..)) => eprintln!("uncoded: {}", m.message_id),
                    Err(e) => return Err(Failure::stage(e)),
                }
            }
            write_jsonl(&out, &codes)?;
            eprintln!("coded {} of {} messages", codes.len(), msgs.len());
            Ok(())
        }
        Command::Kappa { reference, cand, report } => {
            let r: Vec<CodedMessage> = read_jsonl(&reference)?;
            let c: Vec<CodedMessage> = read_jsonl(&cand)?;
            let rep = kappa_report(&r, &c).map_err(Failure::stage)?;
            println!("{}", fmt_stat(rep.kappa));
            if let Some(p) = report {
                write_json(&p, &rep)?;
            }
            Ok(())
        }
        Command::Compare {
            reference,
            cands,
            alpha,
            exact,
        } => {
            let human: Vec<CodedMessage> = read_jsonl(&reference)?;
            let mut named = Vec::new();
            for p in &cands {
                let name = p.file_stem().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned());
                named.push((name, read_jsonl(p)?));
            }
            let variant = if exact { McNemarVariant::ExactBinomial } else { McNemarVariant::ChiSquare };
            let rep = compare_classifiers(&human, &named, alpha, variant).map_err(Failure::stage)?;
            print_json(&rep);
            Ok(())
        }
        Command::Extract {
            input,
            transcript,
            out,
            exemplars,
            status_map,
            gateway: gw,
        } => {
            let codes: Vec<CodedMessage> = read_jsonl(&input)?;
            let msgs: Vec<Message> = read_jsonl(&transcript)?;
            let status: StatusMap = load(&status_map, StatusMap::default_map)?;
            let store = match exemplars {
                Some(p) => ExemplarStore {
                    exemplars: read_jsonl(&p)?,
                },
                None => ExemplarStore::default(),
            };
            let by_id: BTreeMap<&str, &Message> = msgs.iter().map(|m| (m.message_id.as_str(), m)).collect();
            let mut work = Vec::new();
            for c in &codes {
                let m = by_id
                    .get(c.message_id.as_str())
                    .ok_or_else(|| Failure::input(format!("code for unknown message {}", c.message_id)))?;
                work.push((*m, c.final_label));
            }
            let g = gateway(&gw, &Codebook::default_stigma())?;
            let opts = ExtractOptions::default();
            let mut triples: Vec<Triple> = Vec::new();
            for r in g.map_limited(&work, |(m, code)| extract_triples(&g, m, *code, &status, &store, &opts)) {
                triples.extend(r.map_err(Failure::stage)?.triples);
            }
            write_jsonl(&out, &triples)?;
            Ok(())
        }
        Command::Accuracy { model, reference } => {
            let m: Vec<Triple> = read_jsonl(&model)?;
            let r: Vec<Triple> = read_jsonl(&reference)?;
            let a = triple_accuracy(&m, &r).map_err(Failure::stage)?;
            println!("{:.6}", a.value);
            eprintln!("{} of {} reference relationships matched", a.matched, a.reference_total);
            Ok(())
        }
        Command::Ontologize {
            triples,
            transcript,
            constructs,
            out,
            gateway: gw,
        } => {
            let t: Vec<Triple> = read_jsonl(&triples)?;
            let msgs: Vec<Message> = read_jsonl(&transcript)?;
            let scheme: ConstructScheme = load(&constructs, ConstructScheme::default_scheme)?;
            let g = gateway(&gw, &Codebook::default_stigma())?;
            let raw = ontologize(&g, &t, &msgs, &scheme).map_err(Failure::stage)?;
            let pending = raw.iter().filter(|r| r.construct.is_none()).count();
            write_jsonl(&out, &raw)?;
            if pending > 0 {
                eprintln!("{pending} entities await construct review");
            }
            Ok(())
        }
        Command::Resolve {
            entities,
            methods,
            k,
            out,
            gateway: gw,
        } => {
            if methods == 0 {
                return Err(Failure::input("--methods must be at least 1"));
            }
            let raw: Vec<RawEntity> = read_jsonl(&entities)?;
            let g = gateway(&gw, &Codebook::default_stigma())?;
            let opts = ResolveOptions {
                methods: (0..methods).map(EmbeddingMethodId::mock).collect(),
                k,
            };
            let res = resolve(&g, &raw, &opts).map_err(Failure::stage)?;
            write_json(&out, &res)?;
            eprintln!("{} entities in {} classes", res.old_to_canonical.len(), res.classes.len());
            Ok(())
        }
        Command::BuildGraph {
            entities,
            resolution,
            triples,
            out,
            dot,
            graphml,
        } => {
            let raw: Vec<RawEntity> = read_jsonl(&entities)?;
            let res: Resolution = read_json(&resolution)?;
            let t: Vec<Triple> = read_jsonl(&triples)?;
            let rep = build_graph(&raw, &res, &t).map_err(Failure::stage)?;
            write_json(&out, &rep.graph)?;
            if let Some(p) = dot {
                write_atomic(&p, to_dot(&rep.graph, "ckg").as_bytes())?;
            }
            if let Some(p) = graphml {
                write_atomic(&p, to_graphml(&rep.graph).as_bytes())?;
            }
            eprintln!(
                "{} entities, {} edges; {} self-loops dropped, {} triples pending review",
                rep.graph.entities.len(),
                rep.graph.edges.len(),
                rep.self_loops_dropped,
                rep.unmapped_triples.len()
            );
            Ok(())
        }
        Command::Metrics {
            graph,
            transcript,
            cycle_cap,
            out,
        } => {
            let g: CausalKnowledgeGraph = read_json(&graph)?;
            let msgs: Vec<Message> = read_jsonl(&transcript)?;
            let m = metrics(&g, &msgs, cycle_cap).map_err(Failure::stage)?;
            write_json(&out, &m)?;
            print_json(&m);
            Ok(())
        }
        Command::Subgraph {
            graph,
            transcript,
            participant,
            out,
            dot,
        } => {
            let g: CausalKnowledgeGraph = read_json(&graph)?;
            let msgs: Vec<Message> = read_jsonl(&transcript)?;
            let sub = participant_subgraph(&g, &msgs, &participant).map_err(Failure::stage)?;
            write_json(&out, &sub)?;
            if let Some(p) = dot {
                write_atomic(&p, to_dot(&sub, &participant).as_bytes())?;
            }
            Ok(())
        }
        Command::Project {
            transcript,
            k,
            seed,
            out,
            gateway: gw,
        } => {
            let msgs: Vec<Message> = read_jsonl(&transcript)?;
            let g = gateway(&gw, &Codebook::default_stigma())?;
            let opts = ProjectionOptions {
                k_clusters: k,
                seed,
                ..Default::default()
            };
            let p = emit_projection(&g, &msgs, &EmbeddingMethodId::mock(0), &opts).map_err(Failure::stage)?;
            write_atomic(&out, to_csv(&p).as_bytes())?;
            Ok(())
        }
        Command::Themes {
            graph,
            construct,
            k_min,
            k_max,
            seed,
            out_dir,
            gateway: gw,
        } => {
            if k_min > k_max {
                return Err(Failure::input("--k-min exceeds --k-max"));
            }
            let g: CausalKnowledgeGraph = read_json(&graph)?;
            let only: Option<ConstructType> = construct
                .map(|c| c.parse().map_err(|_| Failure::input(format!("unknown construct {c}"))))
                .transpose()?;
            let mut groups: BTreeMap<ConstructType, Vec<Entity>> = BTreeMap::new();
            for e in g.entities.values().filter(|e| !e.construct.is_status()) {
                if only.map_or(true, |c| c == e.construct) {
                    groups.entry(e.construct).or_default().push(e.clone());
                }
            }
            if let Some(c) = only.filter(|c| !groups.contains_key(c)) {
                return Err(Failure::input(format!("graph has no entity of construct {c}")));
            }
            let gw = gateway(&gw, &Codebook::default_stigma())?;
            let method = EmbeddingMethodId::mock(0);
            for (c, ents) in &groups {
                let rep = discover_themes(&gw, *c, ents, &method, k_min..=k_max, seed).map_err(Failure::stage)?;
                write_json(&out_dir.join(format!("{}.json", c.name())), &rep)?;
                eprintln!("{}: {} themes", c.name(), rep.themes.len());
            }
            Ok(())
        }
        Command::Model {
            graph,
            transcript,
            rules,
            out,
            dot,
        } => {
            let g: CausalKnowledgeGraph = read_json(&graph)?;
            let msgs: Vec<Message> = read_jsonl(&transcript)?;
            let assets = Assets::load(&AssetPaths {
                model_rules: rules,
                ..Default::default()
            })
            .map_err(Failure::input)?;
            let m = build_conceptual_model(&g, &msgs, &assets.model_rules).map_err(Failure::stage)?;
            write_atomic(&out, model_json(&m).as_bytes())?;
            write_atomic(&dot, model_dot(&m).as_bytes())?;
            Ok(())
        }
        Command::Pipeline {
            config,
            mock,
            seed,
            out_dir,
        } => {
            let mut cfg = PipelineConfig::load(&config).map_err(pipeline_failure)?;
            if mock {
                cfg.force_mock();
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(d) = out_dir {
                cfg.out_dir = d;
            }
            let assets = Assets::load(&cfg.assets).map_err(pipeline_failure)?;
            let g = pipeline::build_gateway(&cfg, &assets).map_err(pipeline_failure)?;
            let rep = run_pipeline(&cfg, &g, &assets).map_err(pipeline_failure)?;
            for a in &rep.manifest.artifacts {
                println!("{}  {}", a.sha256, a.name);
            }
            eprintln!(
                "regenerated {}, reused {}; {} brief messages skipped, {} uncoded, {} triples pending review; manifest at {}",
                rep.regenerated.len(),
                rep.reused.len(),
                rep.discarded_messages,
                rep.uncoded_messages.len(),
                rep.unmapped_triples,
                display(&cfg.out_dir.join(pipeline::MANIFEST))
            );
            Ok(())
        }
    }
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

fn pipeline_failure(e: pipeline::PipelineError) -> Failure {
    Failure {
        code: e.exit_code() as u8,
        message: e.to_string(),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
