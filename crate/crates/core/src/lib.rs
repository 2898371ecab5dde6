//! Entity-relation graph memory and a confidence-gated retrieval loop for
//! question answering over long videos.

pub mod agent;
pub mod config;
pub mod eval;
pub mod gateway;
pub mod graph;
pub mod parser;
pub mod selector;
pub mod store;
