//! Core library: data model, LLM gateway, interview engine, deductive coding,
//! causal triple extraction, ontology assignment, entity resolution, graph
//! metrics and conceptual model synthesis.

pub mod cluster;
pub mod coding;
pub mod conceptual;
pub mod gateway;
pub mod graph;
pub mod interview;
pub mod io;
pub mod model;
pub mod ontology;
pub mod pipeline;
pub mod projection;
pub mod resolver;
pub mod stats;
pub mod triples;
