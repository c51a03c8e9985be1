//! Data, training, decoding and evaluation on top of the core model.

pub mod data;
pub mod generate;
pub mod report;
pub mod train;

pub use data::{gen_needle_task, load_jsonl, write_jsonl, Example, NeedleConfig};
pub use generate::{generate, generate_text, Decoding, GenConfig};
pub use report::{evaluate, Report};
pub use train::{lr_at, masked_loss, train, TrainConfig, TrainOutcome, Trainable};
