//! Cross-lingual query pivoting.
//!
//! A low-resource-language question is answered by finding an equivalent
//! question in a high-resource-language query→answer database (dense
//! retrieval, optionally followed by pairwise reranking), looking up the
//! stored answer and translating it back.

pub mod adapter;
pub mod answer_xlate;
pub mod corpus;
pub mod embedding;
pub mod experiments;
pub mod index;
pub mod metrics;
pub mod pivot;
pub mod synthetic;
pub mod text;
