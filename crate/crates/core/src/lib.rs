//! Distillation of word-in-context representations from frozen masked
//! language models.
//!
//! The pipeline: a frozen MLM (a deterministic toy model or hidden states
//! exported to `HSX1` files) produces per-layer hidden states for a target
//! word; two small transformer encoders distil those layers into a *meaning*
//! vector and a *context* vector whose mean reconstructs the pooled original
//! representation. Training corpora of (original, positive, negative)
//! sentence triples are built automatically from paraphrase or translation
//! pairs via embedding-based word alignment and masked-token filtering.
//!
//! Modules follow the processing order:
//! - [`nncore`]: tensors, a small reverse-mode graph, transformer building
//!   blocks, finite-difference gradient checking.
//! - [`provider`]: frozen hidden-state sources (toy MLM, `HSX1` files),
//!   subword pooling and top-layer selection.
//! - [`distiller`]: the meaning/context encoder pair.
//! - [`objective`]: reconstruction and cross-reconstruction losses.
//! - [`corpus`]: training-triple construction (alignment + filtering).
//! - [`trainer`]: AdamW loop with warmup and early stopping.
//! - [`evalkit`]: word-pair, STS and distribution analyses.
//! - [`selfcheck`]: executable verification suite used by the CLI and the
//!   acceptance tests.

pub mod corpus;
pub mod distiller;
pub mod error;
pub mod evalkit;
pub mod nncore;
pub mod objective;
pub mod par;
pub mod provider;
pub mod selfcheck;
pub mod trainer;

pub use error::CoreError;
pub use nncore::real::Real;
pub use nncore::tensor::Tensor2D;
