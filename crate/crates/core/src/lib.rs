//! Language-model knowledge tracing for programming exercises.

pub mod adaptation;
pub mod data;
pub mod dkt;
pub mod encoder;
pub mod encoding;
pub mod enrich;
pub mod evaluation;
pub mod feedback;
pub mod harness;
pub mod llm;
pub mod model;
pub mod optim;
pub mod service;
pub mod synthetic;
pub mod template;
