//! Instruction-supervised tuning experiments for small multimodal models.

pub mod cli;
pub mod conversation;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod synthworld;
pub mod templates;
pub mod tensor;
pub mod tokenizer;
pub mod trainer;
