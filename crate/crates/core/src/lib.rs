//! Weakly supervised forest mapping over synthetic dual-polarization SAR.
//!
//! The crate trains a small Unet-style segmentation network under three
//! supervision regimes and compares them on a built-in synthetic benchmark:
//!
//! - **dense**: complete, accurate labels (the comparison ceiling),
//! - **incomplete**: accurate labels at a small fraction of pixels (masked loss),
//! - **inaccurate**: dense but noisy labels, refined by iterative self-training
//!   on the model's own predictions until the map stops changing.
//!
//! Everything runs on CPU from a single seed and is bit-reproducible. See the
//! `examples/` directory for one runnable program per capability, or the
//! `forestmap` binary for the subcommand interface.

pub mod autodiff;
pub mod cli;
pub mod experiment;
pub mod metrics;
pub mod patch;
pub mod raster;
pub mod scene;
pub mod seeds;
pub mod selftrain;
pub mod train;
pub mod unet;
