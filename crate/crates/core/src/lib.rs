//! Desk-scale entity-aware dense passage retrieval.
//!
//! A bi-encoder retriever whose query and passage embeddings are enriched by
//! a single-head attention layer over frozen, dynamically updatable entity
//! embeddings. The crate bundles everything needed to run the pipeline on
//! small corpora end to end:
//!
//! - [`tensor`]: dense f64 linear algebra, activations, and a
//!   finite-difference gradient checker,
//! - [`tokenizer`] / [`encoder`]: a miniature transformer text encoder with
//!   hand-written backward passes,
//! - [`linker`]: dictionary-based entity linking built from hyperlink
//!   statistics with trie matching,
//! - [`entity`]: the frozen entity embedding store and the masked-inference
//!   entity embedder,
//! - [`attention`]: the context-entity attention layer,
//! - [`model`] / [`training`]: the shared-tower bi-encoder, in-batch-negative
//!   loss, and Adam training with freezing semantics,
//! - [`eval`]: exact brute-force retrieval, top-k accuracy, and
//!   frequency-binned reporting,
//! - [`flops`]: the analytical cost model,
//! - [`synth`]: synthetic corpus generation for end-to-end checks.

pub mod attention;
pub mod container;
pub mod encoder;
pub mod entity;
pub mod error;
pub mod eval;
pub mod flops;
pub mod linker;
pub mod model;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod tokenizer;
pub mod training;

pub use error::{KprError, Result};
pub use rng::Rng;
pub use tensor::{Matrix, Mode};
