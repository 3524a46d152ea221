//! Desk-scale language pipeline: grammar, corpus, embedder and the
//! soft-prompt decoder.

pub mod corpus;
pub mod decoder;
pub mod embed;
pub mod grammar;
pub mod system;

pub use corpus::Record;
pub use decoder::{DecoderConfig, DecoderTrainConfig, DecoderTrainer, SemanticDecoder};
pub use embed::Embedder;
pub use grammar::{Attributes, GrammarConfig, ToyGrammar};
