//! Explainability-driven auditing for image datasets: generate or ingest a
//! corpus, train a small reference model, attribute its predictions, detect
//! label-correlated acquisition artifacts, and remediate them.

pub mod audit;
pub mod corpus;
pub mod explain;
pub mod mask;
pub mod prototype;
pub mod remedy;
pub mod rng;
pub mod synthgen;
