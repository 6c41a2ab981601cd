//! Memory-guided normality learning for video anomaly detection.
//!
//! An encoder maps each input window to a grid of queries, a bank of
//! prototype items records normal query patterns, and a decoder rebuilds or
//! predicts the target frame from the queries and what they read from the
//! bank. Frames are scored by reconstruction quality and by the distance of
//! their queries to the nearest items.
//!
//! ```
//! use mnad::memory::{read, MemoryBank, QueryMap};
//! use mnad::tensor::Tensor;
//!
//! let bank = MemoryBank::<f64>::new(Tensor::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
//! let q = QueryMap::new(1, 1, Tensor::from_f64(&[1, 2], &[1.0, 0.0]).unwrap()).unwrap();
//! let (_, w) = read(&q, &bank).unwrap();
//! assert!(w.weight(0, 0) > w.weight(0, 1));
//! ```

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod data;
pub mod error;
pub mod memory;
pub mod model;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod trainer;
pub mod losses;
pub mod scoring;

/// The guide's snippets, compiled as doc-tests.
#[cfg(doctest)]
pub mod guide {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub struct Introduction;
    #[doc = include_str!("../../../book/src/autodiff.md")]
    pub struct Autodiff;
    #[doc = include_str!("../../../book/src/memory.md")]
    pub struct Memory;
    #[doc = include_str!("../../../book/src/losses.md")]
    pub struct Losses;
    #[doc = include_str!("../../../book/src/scoring.md")]
    pub struct Scoring;
    #[doc = include_str!("../../../book/src/data.md")]
    pub struct Data;
    #[doc = include_str!("../../../book/src/training.md")]
    pub struct Training;
    #[doc = include_str!("../../../book/src/cli.md")]
    pub struct Cli;
}
