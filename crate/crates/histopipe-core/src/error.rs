//! Crate-wide error type aggregating the per-module errors.

use thiserror::Error;

use crate::annotations::AnnotationError;
use crate::augment::AugmentError;
use crate::extraction::ExtractError;
use crate::imaging::ImagingError;
use crate::io::FormatError;
use crate::metrics::MetricsError;
use crate::net::NetError;
use crate::segmentation::SegmentError;
use crate::tissue::MaskError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Annotation(#[from] AnnotationError),
    #[error(transparent)]
    Extract(#[from] ExtractError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Segment(#[from] SegmentError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
