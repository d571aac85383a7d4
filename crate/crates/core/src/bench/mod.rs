//! Synthetic grammar, training corpus, probing benchmark and failure cases.

pub mod benchmark;
pub mod corpus;
pub mod failures;
pub mod grammar;

pub use benchmark::{build_benchmark, probe_sets, BenchmarkSample, ProbePair, SpecScope};
pub use corpus::{generate_corpus, Corpus, CorpusSample};
pub use failures::{benchmark_failures, find_failures, sequence_pairs, SequencePair};
pub use grammar::{Grammar, Instance, TokenType};
