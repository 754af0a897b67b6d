//! Citation-graph-based scientific paper summarization.
//!
//! The crate is organized around the stages of the pipeline:
//!
//! - [`corpus`]: loading, validating, filtering and normalizing paper
//!   records (JSON-Lines input, rule-based tokenization).
//! - [`citegraph`]: the citation graph, per-paper subgraph extraction,
//!   pruning, and transductive/inductive dataset splits.
//! - [`rouge`]: self-contained ROUGE-1/2/L scoring.
//! - [`baselines`]: LEAD, greedy Oracle, and TextRank extractive systems.
//! - [`numcore`]: a dense-tensor expression graph with reverse-mode
//!   differentiation; the substrate the model is built on.
//! - [`vocab`]: fixed vocabulary plus per-document extended ids for
//!   copying out-of-vocabulary source words.
//! - [`model`]: the summarization network itself — document encoder,
//!   salience-gated neighborhood extraction, graph-attention encoder,
//!   dual-attention copy decoder, and the training loss.
//! - [`decoding`]: beam search with ROUGE credit and trigram blocking.
//! - [`training`]: Adagrad optimization loop, validation, checkpoints.
//! - [`eval`]: corpus-level ROUGE reports and degree-bucket analysis.

pub mod baselines;
pub mod citegraph;
pub mod corpus;
pub mod decoding;
pub mod eval;
pub mod model;
pub mod numcore;
pub mod rouge;
pub mod training;
pub mod vocab;
