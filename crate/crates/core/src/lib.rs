//! Toolkit for bootstrapping multilingual semantic-parsing corpora from
//! English data and training a desk-scale neural parser on the result.
//!
//! The pieces, in pipeline order:
//!
//! * [`mrl`] — parse/serialize the bracketed intent/slot meaning
//!   representation and adapt raw TOP annotations into it.
//! * [`dataset`] — TSV ingestion, the line-delimited corpus format, splits.
//! * [`placeholder`] — rewrite examples into placeholder templates and
//!   restore them after translation.
//! * [`translate`] — pluggable machine-translation backends with a
//!   write-through cache.
//! * [`aligner`] — EM-trained reparameterized IBM Model 2 word aligner with
//!   a diagonal prior, plus Viterbi decoding.
//! * [`projection`] — orchestrates template → translate → align → restore
//!   to produce a target-language corpus with per-example accounting.
//! * [`bpe`] — byte-pair-encoding subword tokenizer shared across languages.
//! * [`nn`] — transformer encoder-decoder parser with a copy mechanism,
//!   MLM pretraining, gradual unfreezing, and beam-search decoding.
//! * [`eval`] — exact match, filtered match, BLEU, and the evaluation
//!   harness (standard / zero-shot / translate-test).
//! * [`synth`] — deterministic toy-grammar corpus generators used by the
//!   test suite and the `synth` CLI subcommand.

pub mod aligner;
pub mod bpe;
pub mod cli;
pub mod dataset;
pub mod eval;
pub mod mrl;
pub mod nn;
pub mod placeholder;
pub mod projection;
pub mod synth;
pub mod translate;

pub use dataset::{Corpus, Example, Provenance, Split};
pub use mrl::{parse_mrl, serialize_mrl, MrlTree};
