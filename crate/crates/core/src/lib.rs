//! Business-insight generation from time-series metric tables: ingestion,
//! cleaning, rule-based detectors, LLM-backed narrative pipelines, and a
//! benchmark harness comparing them.

pub mod anonymize;
pub mod bench;
pub mod chunk;
pub mod datamodel;
pub mod ingest;
pub mod insights;
pub mod llm;
pub mod narrative;
pub mod pipeline;
pub mod preprocess;
pub mod prompt;
pub mod stats;
