//! Query-focused summarization model: a tiny decoder with parameter-efficient
//! adapters, a query-conditioned hypernetwork that generates them, and
//! segment-wise attention with query-focused compressive memory.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod hyper;
pub mod infini;
pub mod model;
pub mod params;
pub mod peft;
pub mod prompt;
pub mod tokenizer;

pub use config::ArchConfig;
pub use error::{Error, Result};
pub use params::ParamStore;
