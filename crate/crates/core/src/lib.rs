//! Readability curricula for code summarization.
//!
//! The crate turns a corpus of Python functions into progressively less
//! readable variants (function-name erosion, identifier renaming, dead-code
//! injection), trains a small summarizer over the resulting three-level
//! curricula with a meta-curriculum schedule or one of several baseline
//! schedules, and scores robustness with smoothed sentence BLEU-4.
//!
//! Modules follow the pipeline order:
//!
//! - [`corpus`]: JSONL datasets, validation and deterministic splits.
//! - [`srcmodel`]: tokenizer, parser and scope analysis for single functions.
//! - [`obfuscate`]: the three semantics-preserving transforms.
//! - [`curriculum`]: aligned three-level bundles and batch triples.
//! - [`metrics`]: BLEU-4, cosine similarity and robustness tables.
//! - [`minimodel`]: a tiny summarizer with exact gradients.
//! - [`metatrain`]: the meta-curriculum step and baseline schedules.
//! - [`llmeval`]: prompt protocols and a cached chat-completions client.

pub mod corpus;
pub mod curriculum;
pub mod llmeval;
pub mod metatrain;
pub mod metrics;
pub mod minimodel;
pub mod obfuscate;
pub mod seed;
pub mod srcmodel;

pub use corpus::{CorpusExample, Dataset, SplitTag};
pub use curriculum::{BatchTriple, CurriculumBundle, CurriculumKind};
pub use metrics::{bleu4, cosine_similarity, BleuReport, RobustnessReport};
pub use minimodel::{ParamVector, Vocab};
pub use obfuscate::{dci, fne, irn, DciPlan, RenameMap};
pub use srcmodel::{parse_function, render, FunctionModel, ScopeTable};
