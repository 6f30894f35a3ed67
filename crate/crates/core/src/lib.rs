//! Toolkit for synthesizing, filtering, annotating and detecting
//! fine-grained hallucinations.

pub mod annotation;
pub mod benchmarks;
pub mod cli;
pub mod corpus;
pub mod detection;
pub mod filtering;
pub mod gateway;
pub mod manifest;
pub mod metrics;
pub mod retrieval;
pub mod rng;
pub mod synthesis;
pub mod taxonomy;
