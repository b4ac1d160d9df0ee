//! Histopathology patch pipeline at desk scale.
//!
//! The crate covers the full path from a stained slide raster to a
//! post-processed class label map:
//!
//! * [`imaging`] — raster images with physical resolution, resampling,
//!   cropping with fill policies, dataset normalization statistics
//! * [`tissue`] — saturation-based tissue masking (Otsu), coarse
//!   one-pixel-per-patch masks and the patch-level background rule
//! * [`annotations`] — polygonal region annotations and class lookup
//! * [`extraction`] — grid planning, labeled patch extraction, manifests,
//!   stratified and k-fold splits
//! * [`augment`] — seeded label-preserving patch transforms
//! * [`net`] — densely connected CNN built from scratch: forward,
//!   analytic backprop, weighted cross-entropy, SGD schedules
//! * [`segmentation`] — stride-grid whole-slide inference, median filter
//!   and priority dilation post-processing
//! * [`metrics`] — confusion matrices, accuracy, cross-validation driver
//!
//! All randomness is seeded and all operations are deterministic for a
//! fixed seed, so full pipeline runs are reproducible byte for byte.

// Index loops mirror the kernel arithmetic; `!(x > 0)` guards reject NaN.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod annotations;
pub mod augment;
pub mod error;
pub mod extraction;
pub mod fixtures;
pub mod imaging;
pub mod io;
pub mod manifest;
pub mod metrics;
pub mod net;
pub mod segmentation;
pub mod tissue;

pub use error::{Error, Result};
pub use imaging::{DatasetStats, FloatImage, LabelClass, RasterImage};
pub use manifest::DatasetManifest;
pub use segmentation::LabelMap;
