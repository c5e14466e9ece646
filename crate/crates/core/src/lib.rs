//! Knowledge-graph grounded explanations for multiple-choice QA: graph
//! storage and pruning, a graph-attention reasoner, two-stage LLM
//! explanations, automatic scoring, retrieval of demonstrations and
//! evaluation utilities.

pub mod dataset;
pub mod debugger;
pub mod embed;
pub mod error;
pub mod evalkit;
pub mod explainer;
pub mod fixtures;
pub mod gat;
pub mod kg;
pub mod llm;
pub mod par;
pub mod pipeline;
pub mod prune;
pub mod retrieval;

pub use error::{Error, Result};
