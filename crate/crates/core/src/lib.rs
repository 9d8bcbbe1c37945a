//! Temporal interval logic over a knowledge graph, with an ML-to-facts bridge.

pub mod annotation;
pub mod bridge;
pub mod engine;
pub mod graph;
pub mod interval;
pub mod lang;
pub mod scenario;
