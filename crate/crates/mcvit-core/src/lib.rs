//! Memory-consolidated video transformers on a self-contained f64 autodiff
//! core.
//!
//! The crate implements the full model family — joint space-time attention,
//! streaming, memory-augmented, and memory-consolidated variants — together
//! with non-parametric memory consolidation (random / greedy coreset /
//! k-means), bounded memory policies, a contrastive training loop with a
//! synthetic cross-segment task, and an analytic FLOP and peak-memory cost
//! model. Everything runs on CPU with 64-bit floats and a counter-based
//! seeded RNG, so results are bit-reproducible across runs and platforms.
//!
//! The crate is `no_std` (with `alloc`); file formats, CLI, and timing live
//! in the companion `mcvit` crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod blocks;
pub mod consolidation;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod profiler;
pub mod rng;
pub mod runtime;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use error::{CoreError, Result};
pub use graph::{Gradients, Graph, VarId};
pub use rng::SplitRng;
pub use tensor::Tensor;

/// Thin wrappers over `libm` so the crate builds without `std` float math;
/// `libm` is pure Rust, which also keeps results bit-identical across
/// platforms.
pub(crate) mod fm {
    #[inline]
    pub fn exp(x: f64) -> f64 {
        libm::exp(x)
    }

    #[inline]
    pub fn ln(x: f64) -> f64 {
        libm::log(x)
    }

    #[inline]
    pub fn sqrt(x: f64) -> f64 {
        libm::sqrt(x)
    }

    #[inline]
    pub fn erf(x: f64) -> f64 {
        libm::erf(x)
    }

    #[inline]
    pub fn cos(x: f64) -> f64 {
        libm::cos(x)
    }
}
