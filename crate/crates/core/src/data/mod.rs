//! Corpus ingestion, byte tokenization, calibration sampling and the SPT
//! container shared by every stage.

pub mod calibration;
pub mod corpus;
pub mod spt;
pub mod tokenizer;

pub use calibration::{sample_calibration, CalibrationSet};
pub use corpus::{load_corpus, Split, TokenStream};
pub use tokenizer::ByteTokenizer;
