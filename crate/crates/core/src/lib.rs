//! A class-agnostic segmentation loss, trained end to end on the CPU.
//!
//! The loss ([`losses::cas_forward`]) sees only a partition of each image
//! into regions, never class labels. It makes outputs uniform inside every
//! region and pushes region means apart. The crate also has cross-entropy
//! baselines, a small network with exact gradients ([`nnet`]), saliency and
//! partition metrics, synthetic datasets and an experiment harness.
//!
//! ```
//! use casseg::grid::{RegionMap, SoftmaxField};
//! use casseg::losses::{cas_bounds, cas_forward, CasConfig};
//!
//! let s = SoftmaxField::uniform(8, 8, 2);
//! let r = RegionMap::new(8, 8, (0..64).map(|p| (p / 32) as u32).collect())?;
//! let cfg = CasConfig::default();
//! let loss = cas_forward(&s, &r, cfg)?;
//! assert!(cas_bounds(2, cfg, 2).contains(loss));
//! # Ok::<(), casseg::Error>(())
//! ```

pub mod error;
pub mod grid;
pub mod harness;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod nnet;
pub mod region;
pub mod synth;

pub use error::{Error, Result};

// Compiles and runs every snippet in the guide as a doc-test.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/loss.md")]
    mod loss {}
    #[doc = include_str!("../../../book/src/baselines.md")]
    mod baselines {}
    #[doc = include_str!("../../../book/src/network.md")]
    mod network {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}
