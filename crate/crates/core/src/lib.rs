//! Noisy-channel decoding for document-grounded response generation.
//!
//! A grounded response generator is usually decoded with the *direct* model
//! `p(u | context, document)`. Factorizing it with Bayes' rule gives a
//! *channel* model `p(document | u, context)` times an ungrounded response
//! model `p(u | context)`; weighting the two with scaling factors trades
//! grounding fidelity against fluency. This crate provides:
//!
//! * [`vocab`] and [`data`]: vocabulary, dialog data model, JSONL ingestion.
//! * [`scorer`]: the locally normalized sequence-model abstraction with
//!   n-gram, tabular and remote implementations.
//! * [`world`]: small synthetic worlds with an explicit joint distribution,
//!   used as exact ground truth.
//! * [`decode`]: direct beam search, n-best reranking, two online
//!   noisy-channel beam searches and an exhaustive enumeration oracle.
//! * [`retrieval`]: tf-idf / BM25 retrievers and the retrieve-then-decode
//!   pipeline.
//! * [`eval`]: token-F1, LCS ratio, corpus BLEU, perplexity, λ sweeps and
//!   compute-budget curves.

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub mod data;
pub mod decode;
pub mod error;
pub mod eval;
pub mod retrieval;
pub mod scorer;
pub mod seed;
pub mod vocab;
pub mod wire;
pub mod world;

pub use data::{DocumentCollection, GroundedExample, Speaker, Turn};
pub use decode::{BeamConfig, DecoderConfig, DecoderKind, Hypothesis, NBestList, ScalingConfig, ScoreBreakdown};
pub use error::{Error, Result, ScoreError};
pub use scorer::{Condition, Role, Scorer, ScorerSet};
pub use vocab::{TokenId, Vocabulary};
pub use world::{WorldModel, WorldSpec};
