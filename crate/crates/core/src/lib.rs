//! Terminology-constrained neural machine translation toolkit.
//!
//! The pipeline teaches a small translation model to satisfy bilingual
//! terminology constraints without any inference-time machinery:
//!
//! 1. [`terminology`] matches dictionary entries against a parallel corpus
//!    and rewrites matched source spans inline as
//!    `<S> source-term <C> target-term </C>` (optionally masking the source
//!    side), recording which reference tokens belong to a constraint.
//! 2. [`subword`] learns a joint byte-pair encoding and segments the
//!    augmented corpus; the tag tokens are never split.
//! 3. [`nmt`] trains a transformer encoder-decoder with tied embeddings
//!    under a weighted cross-entropy loss that up-weights constraint tokens
//!    on a phased schedule, and decodes with beam search.
//! 4. [`eval`] scores translations with corpus BLEU and the fraction of
//!    constraints actually generated (Term%).
//!
//! [`synth`] generates deterministic synthetic bilingual corpora so the
//! whole pipeline can be exercised and compared end to end on a CPU budget,
//! and [`pipeline`] wires the stages together for experiments.

pub mod corpus;
pub mod eval;
pub mod nmt;
pub mod pipeline;
pub mod reserved;
pub mod subword;
pub mod synth;
pub mod terminology;
