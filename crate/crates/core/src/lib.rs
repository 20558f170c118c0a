//! Streaming video reasoning on a toy decoder.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
mod error;

pub mod embeddings;
pub mod evalkit;
pub mod kvcache;
pub mod masking;
pub mod numerics;
pub mod positional;
pub mod report;
pub mod runtime;
pub mod streamprep;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/streaming-mask.md")]
    mod streaming_mask {}
    #[doc = include_str!("../../../book/src/positions.md")]
    mod positions {}
    #[doc = include_str!("../../../book/src/dual-cache.md")]
    mod dual_cache {}
    #[doc = include_str!("../../../book/src/paradigms.md")]
    mod paradigms {}
    #[doc = include_str!("../../../book/src/stream-prep.md")]
    mod stream_prep {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
