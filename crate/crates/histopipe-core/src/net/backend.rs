//! Trained-network classifier backend for whole-slide segmentation.

use super::model::predict;
use super::params::ParamStore;
use super::scalar::Scalar;
use super::tensor::Tensor;
use super::NetworkSpec;
use crate::imaging::{normalize, DatasetStats, NORMALIZE_EPSILON};
use crate::segmentation::{BackendMetadata, ClassifierBackend, PatchBatch, SegmentError};

/// Wraps trained parameters plus the normalization statistics the run
/// was trained under, so segmentation can stay classifier-agnostic.
pub struct NetworkBackend<F> {
    pub params: ParamStore<F>,
    pub spec: NetworkSpec,
    pub stats: DatasetStats,
    pub patch_pixel_size: u32,
    pub expected_um_per_px: Option<f64>,
}

impl<F: Scalar> ClassifierBackend for NetworkBackend<F> {
    fn metadata(&self) -> BackendMetadata {
        BackendMetadata {
            patch_pixel_size: self.patch_pixel_size,
            expected_um_per_px: self.expected_um_per_px,
            stats_ref: Some(format!(
                "mean={:?} std={:?}",
                self.stats.per_channel_mean, self.stats.per_channel_std
            )),
        }
    }

    fn classify_batch(&self, batch: &PatchBatch) -> Result<Vec<[f64; 4]>, SegmentError> {
        let floats = batch
            .patches
            .iter()
            .map(|p| normalize(p, &self.stats, NORMALIZE_EPSILON))
            .collect::<Result<Vec<_>, _>>()
            .map_err(SegmentError::Imaging)?;
        let tensor = Tensor::<F>::from_float_images(&floats);
        let preds = predict(&self.params, &self.spec, &tensor)
            .map_err(|e| SegmentError::ExternalBackend(format!("network forward failed: {e}")))?;
        Ok(preds.into_iter().map(|(_, probs)| probs).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{LabelClass, RasterImage};
    use crate::net::init_xavier_uniform;
    use crate::segmentation::{segment, SegmentConfig};

    #[test]
    fn network_backend_drives_segmentation() {
        let spec = NetworkSpec::toy(2, vec![1], 4);
        let params = init_xavier_uniform::<f32>(&spec, 21).unwrap();
        let stats = DatasetStats {
            per_channel_mean: vec![128.0; 3],
            per_channel_std: vec![60.0; 3],
            sample_count: 1,
        };
        let backend = NetworkBackend {
            params,
            spec,
            stats,
            patch_pixel_size: 16,
            expected_um_per_px: None,
        };
        let slide = RasterImage::filled(64, 48, 3, 180, 1.0);
        let config = SegmentConfig {
            downsample: 1.0,
            patch_pixel_size: 16,
            stride: 16,
            batch_size: 5,
        };
        let map = segment(&slide, "s", &backend, &config, None).unwrap();
        assert_eq!((map.width(), map.height()), (4, 3));
        // Constant input, deterministic net: one class everywhere.
        let first = map.cells()[0];
        assert!(map.cells().iter().all(|&c| c == first));
        assert!(LabelClass::from_code(first.code()).is_some());
    }
}
