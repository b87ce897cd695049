//! Closed-book question answering laboratory.
//!
//! The crate is organised around the pipeline stages:
//!
//! - [`corpus`]: QA datasets and raw text ingestion, holdout splits, text-to-text targets.
//! - [`tokenizer`]: byte-level BPE vocabulary with reserved sentinel ids.
//! - [`span_corruption`]: the random-span denoising objective.
//! - [`salient`]: salient span mining (entities and dates) and single-span masking.
//! - [`model`]: a small encoder-decoder transformer with analytic gradients.
//! - [`optim`]: AdaFactor with factored second moments.
//! - [`trainer`]: pre-training, fine-tuning, checkpoint selection and objective comparison.
//! - [`eval`]: answer normalization, exact match and multi-answer recall.
//! - [`audit`]: false-negative adjudication store, summaries and export.

pub mod audit;
pub mod corpus;
pub mod eval;
pub mod jsonl;
pub mod model;
pub mod optim;
pub mod rng;
pub mod salient;
pub mod span_corruption;
pub mod tokenizer;
pub mod trainer;

pub use corpus::{CorpusDocument, Dataset, QaExample, SentenceRecord};
pub use span_corruption::CorruptedPair;
pub use tokenizer::Vocab;
