//! Query reformulation for behavior enrichment in product search.
//!
//! Behavior-impoverished queries borrow engagement signals from
//! behavior-rich queries with the same intent. This crate mines query-query
//! relevance from purchase logs, trains a bi-encoder retriever and a
//! cross-encoder re-ranker, and evaluates them offline.

pub mod ance;
pub mod application;
pub mod corpus;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod mining;
pub mod normalizer;
pub mod retrieval_index;
pub mod synthgen;
pub mod training;
pub mod util;

pub use error::{Error, Result};
