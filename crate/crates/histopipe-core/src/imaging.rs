//! Raster images with physical resolution metadata and the pixel-level
//! operations the pipeline is built on: resampling, cropping with fill
//! policies and dataset-level normalization statistics.
//!
//! Pixel data is kept as 8-bit until a raster is explicitly normalized
//! into a [`FloatImage`]; every resample of 8-bit data rounds back to
//! 8-bit so stored patches stay lossless PNG material.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("pixel data length {got} does not match {width}x{height}x{channels} = {expected}")]
    DataLength {
        got: usize,
        expected: usize,
        width: u32,
        height: u32,
        channels: u8,
    },
    #[error("image dimensions must be nonzero, got {width}x{height}")]
    EmptyImage { width: u32, height: u32 },
    #[error("resolution must be positive, got {0} um/px")]
    NonPositiveResolution(f64),
    #[error("channel count {0} not supported (expected 1 or 3)")]
    BadChannelCount(u8),
    #[error("resample factor must be positive, got {0}")]
    BadFactor(f64),
    #[error("resample factor {factor} collapses {width}x{height} to an empty image")]
    EmptyResample { factor: f64, width: u32, height: u32 },
    #[error("crop size must be positive")]
    EmptyCrop,
    #[error("source_context fill requires an enclosing raster")]
    MissingContext,
    #[error("context raster incompatible with source: {0}")]
    ContextMismatch(String),
    #[error("no images provided")]
    EmptyDataset,
    #[error("channel count mismatch: got {got}, expected {expected}")]
    ChannelMismatch { got: u8, expected: u8 },
}

/// Tissue class of a pixel, patch or label-map cell.
///
/// The numeric codes are ordinal: the order normal < benign < in-situ <
/// invasive drives both the label-map median filter and the priority
/// resolution of overlapping dilated regions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u8)]
pub enum LabelClass {
    Normal = 0,
    Benign = 1,
    InSitu = 2,
    Invasive = 3,
}

impl LabelClass {
    pub const ALL: [LabelClass; 4] = [
        LabelClass::Normal,
        LabelClass::Benign,
        LabelClass::InSitu,
        LabelClass::Invasive,
    ];
    pub const COUNT: usize = 4;

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<LabelClass> {
        match code {
            0 => Some(LabelClass::Normal),
            1 => Some(LabelClass::Benign),
            2 => Some(LabelClass::InSitu),
            3 => Some(LabelClass::Invasive),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LabelClass::Normal => "normal",
            LabelClass::Benign => "benign",
            LabelClass::InSitu => "in situ",
            LabelClass::Invasive => "invasive",
        }
    }
}

/// 8-bit raster with isotropic physical resolution in micrometers per pixel.
///
/// Data is row-major with interleaved channels; 3 channels for RGB,
/// 1 for grayscale and masks.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterImage {
    width: u32,
    height: u32,
    channels: u8,
    data: Vec<u8>,
    resolution: f64,
}

impl RasterImage {
    pub fn new(
        width: u32,
        height: u32,
        channels: u8,
        data: Vec<u8>,
        resolution: f64,
    ) -> Result<RasterImage, ImagingError> {
        if width == 0 || height == 0 {
            return Err(ImagingError::EmptyImage { width, height });
        }
        if channels != 1 && channels != 3 {
            return Err(ImagingError::BadChannelCount(channels));
        }
        if !(resolution > 0.0) {
            return Err(ImagingError::NonPositiveResolution(resolution));
        }
        let expected = width as usize * height as usize * channels as usize;
        if data.len() != expected {
            return Err(ImagingError::DataLength {
                got: data.len(),
                expected,
                width,
                height,
                channels,
            });
        }
        Ok(RasterImage {
            width,
            height,
            channels,
            data,
            resolution,
        })
    }

    /// Uniform image of a single value in every channel.
    pub fn filled(width: u32, height: u32, channels: u8, value: u8, resolution: f64) -> RasterImage {
        let data = vec![value; width as usize * height as usize * channels as usize];
        RasterImage::new(width, height, channels, data, resolution).expect("valid fill dimensions")
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn channels(&self) -> u8 {
        self.channels
    }

    /// Micrometers per pixel.
    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    /// Replace the resolution metadata, keeping pixels untouched.
    pub fn with_resolution(mut self, resolution: f64) -> Result<RasterImage, ImagingError> {
        if !(resolution > 0.0) {
            return Err(ImagingError::NonPositiveResolution(resolution));
        }
        self.resolution = resolution;
        Ok(self)
    }

    #[inline]
    fn index(&self, x: u32, y: u32, c: u8) -> usize {
        (y as usize * self.width as usize + x as usize) * self.channels as usize + c as usize
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32, c: u8) -> u8 {
        self.data[self.index(x, y, c)]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, c: u8, value: u8) {
        let i = self.index(x, y, c);
        self.data[i] = value;
    }

    /// Pixel lookup with coordinates clamped to the image rectangle.
    #[inline]
    pub fn get_clamped(&self, x: i64, y: i64, c: u8) -> u8 {
        let cx = x.clamp(0, self.width as i64 - 1) as u32;
        let cy = y.clamp(0, self.height as i64 - 1) as u32;
        self.get(cx, cy, c)
    }

    pub fn is_rgb(&self) -> bool {
        self.channels == 3
    }
}

/// Floating-point raster produced by [`normalize`]; same layout as
/// [`RasterImage`] but with f64 samples and no resolution bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatImage {
    pub width: u32,
    pub height: u32,
    pub channels: u8,
    pub data: Vec<f64>,
}

impl FloatImage {
    #[inline]
    pub fn get(&self, x: u32, y: u32, c: u8) -> f64 {
        self.data[(y as usize * self.width as usize + x as usize) * self.channels as usize
            + c as usize]
    }
}

/// Per-channel normalization statistics of a whole dataset.
///
/// Computed over the union of all pixels of all images, never per image;
/// the standard deviation uses the population formula.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetStats {
    pub per_channel_mean: Vec<f64>,
    pub per_channel_std: Vec<f64>,
    pub sample_count: u64,
}

/// Default guard against division by zero for zero-variance channels.
pub const NORMALIZE_EPSILON: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResampleMethod {
    /// Nearest-neighbor; preserves label/mask validity.
    Nearest,
    /// Edge-clamped bilinear; default for image data.
    Bilinear,
}

/// Dimension rounding used throughout: round-half-up of `dim / factor`.
pub fn scaled_dimension(dim: u32, factor: f64) -> u32 {
    (dim as f64 / factor + 0.5).floor() as u32
}

/// Resample an image by a positive scale factor.
///
/// Output dimensions are `round_half_up(input / factor)` and the output
/// resolution is `input resolution * factor`, so physical extent is
/// preserved up to rounding. Factors below 1 upsample.
pub fn resample(
    image: &RasterImage,
    factor: f64,
    method: ResampleMethod,
) -> Result<RasterImage, ImagingError> {
    if !(factor > 0.0) || !factor.is_finite() {
        return Err(ImagingError::BadFactor(factor));
    }
    let out_w = scaled_dimension(image.width, factor);
    let out_h = scaled_dimension(image.height, factor);
    if out_w == 0 || out_h == 0 {
        return Err(ImagingError::EmptyResample {
            factor,
            width: image.width,
            height: image.height,
        });
    }
    // Sample against the realized ratio so the content spans the full
    // output raster even when the rounded dimensions drift off factor.
    let scale_x = image.width as f64 / out_w as f64;
    let scale_y = image.height as f64 / out_h as f64;
    let channels = image.channels as usize;
    let mut data = vec![0u8; out_w as usize * out_h as usize * channels];
    for oy in 0..out_h {
        for ox in 0..out_w {
            let base = (oy as usize * out_w as usize + ox as usize) * channels;
            match method {
                ResampleMethod::Nearest => {
                    let sx = (((ox as f64 + 0.5) * scale_x).floor() as i64)
                        .clamp(0, image.width as i64 - 1) as u32;
                    let sy = (((oy as f64 + 0.5) * scale_y).floor() as i64)
                        .clamp(0, image.height as i64 - 1) as u32;
                    for c in 0..image.channels {
                        data[base + c as usize] = image.get(sx, sy, c);
                    }
                }
                ResampleMethod::Bilinear => {
                    let sx = (ox as f64 + 0.5) * scale_x - 0.5;
                    let sy = (oy as f64 + 0.5) * scale_y - 0.5;
                    for c in 0..image.channels {
                        let v = bilinear_sample_u8(image, sx, sy, c);
                        data[base + c as usize] = (v + 0.5).floor().clamp(0.0, 255.0) as u8;
                    }
                }
            }
        }
    }
    RasterImage::new(out_w, out_h, image.channels, data, image.resolution * factor)
}

/// Edge-clamped bilinear lookup of one channel at a continuous position.
pub fn bilinear_sample_u8(image: &RasterImage, x: f64, y: f64, c: u8) -> f64 {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let x0 = x0 as i64;
    let y0 = y0 as i64;
    let p00 = image.get_clamped(x0, y0, c) as f64;
    let p10 = image.get_clamped(x0 + 1, y0, c) as f64;
    let p01 = image.get_clamped(x0, y0 + 1, c) as f64;
    let p11 = image.get_clamped(x0 + 1, y0 + 1, c) as f64;
    let top = p00 * (1.0 - fx) + p10 * fx;
    let bottom = p01 * (1.0 - fx) + p11 * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Edge-clamped bilinear lookup on a bare f64 plane.
pub fn bilinear_sample_plane(plane: &[f64], width: u32, height: u32, x: f64, y: f64) -> f64 {
    let clamp_at = |px: i64, py: i64| -> f64 {
        let cx = px.clamp(0, width as i64 - 1) as usize;
        let cy = py.clamp(0, height as i64 - 1) as usize;
        plane[cy * width as usize + cx]
    };
    let x0f = x.floor();
    let y0f = y.floor();
    let fx = x - x0f;
    let fy = y - y0f;
    let x0 = x0f as i64;
    let y0 = y0f as i64;
    let top = clamp_at(x0, y0) * (1.0 - fx) + clamp_at(x0 + 1, y0) * fx;
    let bottom = clamp_at(x0, y0 + 1) * (1.0 - fx) + clamp_at(x0 + 1, y0 + 1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// How pixels outside the source rectangle are produced by
/// [`crop_with_fill`] and by the augmentation resampler.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FillMode {
    /// Clamp coordinates to the source rectangle (nearest neighbors
    /// inside the image).
    NearestEdge,
    /// Read the true pixels from a larger enclosing raster, clamping at
    /// that raster's own border.
    SourceContext,
}

/// A larger raster enclosing a source image, used by
/// [`FillMode::SourceContext`]. `source_origin` is the position of the
/// source's (0,0) pixel inside the context raster.
#[derive(Debug, Clone, Copy)]
pub struct ContextRaster<'a> {
    pub image: &'a RasterImage,
    pub source_origin: (i64, i64),
}

impl<'a> ContextRaster<'a> {
    fn check_against(&self, source: &RasterImage) -> Result<(), ImagingError> {
        if self.image.channels != source.channels {
            return Err(ImagingError::ContextMismatch(format!(
                "channel count {} vs {}",
                self.image.channels, source.channels
            )));
        }
        let rel = (self.image.resolution - source.resolution).abs() / source.resolution;
        if rel > 1e-9 {
            return Err(ImagingError::ContextMismatch(format!(
                "resolution {} um/px vs {} um/px",
                self.image.resolution, source.resolution
            )));
        }
        Ok(())
    }

    /// Pixel in source coordinates, read from the context, clamped at the
    /// context border.
    #[inline]
    fn get(&self, sx: i64, sy: i64, c: u8) -> u8 {
        self.image
            .get_clamped(sx + self.source_origin.0, sy + self.source_origin.1, c)
    }
}

/// Crop a `size`x`size` window centered on `center`, which may lie
/// anywhere; out-of-bounds pixels are filled per policy.
pub fn crop_with_fill(
    source: &RasterImage,
    center: (i64, i64),
    size: u32,
    fill: FillMode,
    context: Option<ContextRaster<'_>>,
) -> Result<RasterImage, ImagingError> {
    if size == 0 {
        return Err(ImagingError::EmptyCrop);
    }
    let ctx = match fill {
        FillMode::NearestEdge => None,
        FillMode::SourceContext => {
            let ctx = context.ok_or(ImagingError::MissingContext)?;
            ctx.check_against(source)?;
            Some(ctx)
        }
    };
    let half = (size / 2) as i64;
    let x0 = center.0 - half;
    let y0 = center.1 - half;
    let channels = source.channels as usize;
    let mut data = vec![0u8; size as usize * size as usize * channels];
    for dy in 0..size as i64 {
        for dx in 0..size as i64 {
            let sx = x0 + dx;
            let sy = y0 + dy;
            let base = (dy as usize * size as usize + dx as usize) * channels;
            let inside = sx >= 0 && sy >= 0 && sx < source.width as i64 && sy < source.height as i64;
            for c in 0..source.channels {
                let v = if inside {
                    source.get(sx as u32, sy as u32, c)
                } else {
                    match ctx {
                        None => source.get_clamped(sx, sy, c),
                        Some(ref ctx) => ctx.get(sx, sy, c),
                    }
                };
                data[base + c as usize] = v;
            }
        }
    }
    RasterImage::new(size, size, source.channels, data, source.resolution)
}

/// Per-channel mean and population standard deviation over the union of
/// all pixels of all images.
pub fn compute_dataset_stats(images: &[RasterImage]) -> Result<DatasetStats, ImagingError> {
    if images.is_empty() {
        return Err(ImagingError::EmptyDataset);
    }
    let channels = images[0].channels;
    for img in images {
        if img.channels != channels {
            return Err(ImagingError::ChannelMismatch {
                got: img.channels,
                expected: channels,
            });
        }
    }
    // Per-image partial sums merged in image order; u8 values keep every
    // partial an exact f64 integer, so the merge order cannot matter.
    use rayon::prelude::*;
    let partials: Vec<(f64, Vec<f64>, Vec<f64>)> = images
        .par_iter()
        .map(|img| {
            let c = img.channels as usize;
            let mut sum = vec![0.0f64; c];
            let mut sumsq = vec![0.0f64; c];
            for (i, &v) in img.data().iter().enumerate() {
                let v = v as f64;
                sum[i % c] += v;
                sumsq[i % c] += v * v;
            }
            let n = (img.width as usize * img.height as usize) as f64;
            (n, sum, sumsq)
        })
        .collect();
    let c = channels as usize;
    let mut total = 0.0f64;
    let mut sum = vec![0.0f64; c];
    let mut sumsq = vec![0.0f64; c];
    for (n, s, sq) in partials {
        total += n;
        for i in 0..c {
            sum[i] += s[i];
            sumsq[i] += sq[i];
        }
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / total).collect();
    let std: Vec<f64> = (0..c)
        .map(|i| (sumsq[i] / total - mean[i] * mean[i]).max(0.0).sqrt())
        .collect();
    Ok(DatasetStats {
        per_channel_mean: mean,
        per_channel_std: std,
        sample_count: images.len() as u64,
    })
}

/// Same statistics over floating-point rasters; used to verify that a
/// normalized dataset has mean 0 and std 1.
pub fn compute_float_stats(images: &[FloatImage]) -> Result<DatasetStats, ImagingError> {
    if images.is_empty() {
        return Err(ImagingError::EmptyDataset);
    }
    let channels = images[0].channels;
    for img in images {
        if img.channels != channels {
            return Err(ImagingError::ChannelMismatch {
                got: img.channels,
                expected: channels,
            });
        }
    }
    let c = channels as usize;
    let mut total = 0.0f64;
    let mut sum = vec![0.0f64; c];
    let mut sumsq = vec![0.0f64; c];
    for img in images {
        for (i, &v) in img.data.iter().enumerate() {
            sum[i % c] += v;
            sumsq[i % c] += v * v;
        }
        total += (img.width as usize * img.height as usize) as f64;
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / total).collect();
    let std: Vec<f64> = (0..c)
        .map(|i| (sumsq[i] / total - mean[i] * mean[i]).max(0.0).sqrt())
        .collect();
    Ok(DatasetStats {
        per_channel_mean: mean,
        per_channel_std: std,
        sample_count: images.len() as u64,
    })
}

/// `(value - mean) / max(std, epsilon)` per channel.
pub fn normalize(
    image: &RasterImage,
    stats: &DatasetStats,
    epsilon: f64,
) -> Result<FloatImage, ImagingError> {
    if stats.per_channel_mean.len() != image.channels as usize {
        return Err(ImagingError::ChannelMismatch {
            got: image.channels,
            expected: stats.per_channel_mean.len() as u8,
        });
    }
    let c = image.channels as usize;
    let denom: Vec<f64> = stats.per_channel_std.iter().map(|s| s.max(epsilon)).collect();
    let data = image
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| (v as f64 - stats.per_channel_mean[i % c]) / denom[i % c])
        .collect();
    Ok(FloatImage {
        width: image.width,
        height: image.height,
        channels: image.channels,
        data,
    })
}

/// Affine inverse of [`normalize`].
pub fn denormalize(
    image: &FloatImage,
    stats: &DatasetStats,
    epsilon: f64,
) -> Result<FloatImage, ImagingError> {
    if stats.per_channel_mean.len() != image.channels as usize {
        return Err(ImagingError::ChannelMismatch {
            got: image.channels,
            expected: stats.per_channel_mean.len() as u8,
        });
    }
    let c = image.channels as usize;
    let data = image
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| v * stats.per_channel_std[i % c].max(epsilon) + stats.per_channel_mean[i % c])
        .collect();
    Ok(FloatImage {
        width: image.width,
        height: image.height,
        channels: image.channels,
        data,
    })
}
