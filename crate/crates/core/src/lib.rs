//! Dilated pixel affinity for semantic segmentation.
//!
//! * [`affinity`] builds dilated neighborhoods, derives binary ground-truth
//!   affinity from label maps and tallies neighbor categories.
//! * [`loss`] is a reference focal affinity loss with analytic gradients.
//! * [`propagation`] refines class-probability maps with affinity.
//! * [`metrics`] scores segmentations (mIoU) and affinity predictions.
//! * [`synth`] generates seeded Voronoi label maps and noisy predictions.
//! * [`tensor_io`] reads and writes label PNGs and AFT1 tensors.
//! * [`cli`] wires everything into the `affinity-lab` command.
//!
//! The guide under `book/` walks through each piece; its code listings are
//! compiled and run as doc-tests of this crate.

pub mod affinity;
pub mod cli;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod propagation;
pub mod synth;
pub mod tensor_io;

pub use error::{Error, Result};

// README and book chapters, so `cargo test --doc` runs their listings.
#[cfg(doctest)]
#[doc = include_str!("../../../README.md")]
pub struct ReadmeDoctests;

#[cfg(doctest)]
pub mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/dilated-affinity.md")]
    pub mod dilated_affinity {}
    #[doc = include_str!("../../../book/src/neighbor-categories.md")]
    pub mod neighbor_categories {}
    #[doc = include_str!("../../../book/src/affinity-loss.md")]
    pub mod affinity_loss {}
    #[doc = include_str!("../../../book/src/propagation.md")]
    pub mod propagation {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    pub mod evaluation {}
    #[doc = include_str!("../../../book/src/synthetic-data.md")]
    pub mod synthetic_data {}
    #[doc = include_str!("../../../book/src/file-formats.md")]
    pub mod file_formats {}
    #[doc = include_str!("../../../book/src/cli.md")]
    pub mod cli {}
}
