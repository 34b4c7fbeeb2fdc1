//! Decipherment-candidate retrieval for oracle bone script.
//!
//! Query analyses (a predicted radical plus three analysis texts) are matched
//! against a character–pictograph analysis dictionary with token-level
//! BERT-Score. See [`matcher`] for the ranking procedure.

pub mod analysis;
pub mod corpus;
pub mod embed;
pub mod evalkit;
pub mod matcher;
pub mod recog;
pub mod simscore;

pub use corpus::{DictEntry, Dictionary, QueryAnalyses};
pub use embed::{EmbeddingStore, TokenEmbeddingSeq};
pub use matcher::{decipher, Branch, MatchConfig, RadicalFallback, RankedCandidate};
pub use simscore::{bert_score, SimilarityScore};
