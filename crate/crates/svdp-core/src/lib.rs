//! Test-time adaptation for dense prediction with sparse visual domain prompts.
//!
//! The pipeline adapts a source-pretrained segmentation or depth network to a
//! stream of corrupted target images, one sample at a time, without labels:
//!
//! 1. pixel-wise predictive uncertainty from the teacher (MC dropout or
//!    multi-resolution augmentation),
//! 2. top-k prompt placement on the most uncertain pixels,
//! 3. additive pixel prompts warped into the input,
//! 4. teacher pseudo-labels (multi-scale averaged, confidence filtered),
//! 5. one optimizer step on the consistency loss,
//! 6. uncertainty-scaled EMA blending of the prompt parameters,
//! 7. EMA update of the teacher weights.
//!
//! The [`benchmark`] module provides a synthetic multi-domain corpus
//! (fog / night / rain / snow analogs) and the mIoU / depth metric suite used
//! to evaluate TTA and continual-TTA runs.

#![allow(clippy::needless_range_loop, clippy::too_many_arguments, clippy::type_complexity)]

pub mod adaptation;
pub mod benchmark;
pub mod dump;
pub mod error;
pub mod loss;
pub mod model;
pub mod num;
pub mod optim;
pub mod placement;
pub mod prompts;
pub mod pseudo;
pub mod tensor;
pub mod uncertainty;
pub mod updating;

pub use error::{Error, Result};

use std::sync::OnceLock;

static POOL_INIT: OnceLock<()> = OnceLock::new();

/// Configures the global rayon pool from the `SVDP_THREADS` env var.
///
/// No-op after the first call (or if some other code already built the pool).
pub fn init_parallelism() {
    POOL_INIT.get_or_init(|| {
        if let Ok(v) = std::env::var("SVDP_THREADS") {
            if let Ok(n) = v.trim().parse::<usize>() {
                if n >= 1 {
                    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
                }
            }
        }
    });
}
