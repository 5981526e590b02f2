//! MemSizer: attention through an unbalanced key-value memory.
//!
//! Keys are `k` learned slot vectors per head; values are a `k x d` matrix
//! accumulated from the source as a sum of per-token outer products. The
//! value matrix is therefore a rolling sum during generation, which gives
//! constant decode memory and constant work per generated token.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`], [`autodiff`], [`counter`]: dense `f64` kernels, a
//!   reverse-mode tape and multiply-add accounting.
//! * [`memsizer`]: the memory attention layer, its parallel and recurrent
//!   forms.
//! * [`baseline`]: softmax attention with a KV cache and ELU linear
//!   attention, for comparison.
//! * [`model`], [`train`]: small encoder-decoder / decoder-only
//!   transformers, synthetic tasks, Adam and label-smoothed cross-entropy.
//! * [`bench`], [`verify`]: the generation benchmark and the invariant suite
//!   driven by the `memsizer` command-line tool.

pub mod autodiff;
pub mod baseline;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod counter;
pub mod error;
mod kernels;
pub mod memsizer;
pub mod model;
pub mod params;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use kernels::{Segments, MASK_LOGIT};
pub use tensor::{LayerNormParams, Matrix};
