//! Seeded, label-preserving patch transforms: rotation, flips, scale
//! jitter, shift with fill policy, color jitter and normalization.
//!
//! Geometric stages compose, in fixed order, as scale about center, then
//! rotation about center, then flips, then shift; the composed inverse
//! map is sampled once bilinearly so repeated resampling never stacks.
//! Angles that are exact multiples of 90 degrees use snapped trig values
//! and therefore produce exact pixel permutations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::imaging::{
    normalize, ContextRaster, DatasetStats, FillMode, FloatImage, RasterImage, NORMALIZE_EPSILON,
};
use crate::Error;

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("scale range [{lo}, {hi}] invalid: need 0 < lo <= hi")]
    BadScaleRange { lo: f64, hi: f64 },
    #[error("shift fraction {0} outside [0, 1]")]
    BadShiftFraction(f64),
    #[error("color jitter delta {name} = {value} must be >= 0")]
    NegativeDelta { name: &'static str, value: f64 },
    #[error("batch patches disagree in shape: {0}x{1}x{2} vs {3}x{4}x{5}")]
    ShapeMismatch(u32, u32, u8, u32, u32, u8),
    #[error("source_context fill requires context rasters for the batch")]
    MissingBatchContext,
    #[error("batch has {patches} patches but {contexts} context rasters")]
    ContextCountMismatch { patches: usize, contexts: usize },
}

/// Color jitter bounds; deltas are drawn uniformly in +-max.
/// Brightness and hue are additive (pixel scale 0..1 and hue circle
/// fraction respectively), saturation and contrast multiplicative about
/// 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColorJitterConfig {
    pub max_brightness_delta: f64,
    pub max_saturation_delta: f64,
    pub max_hue_delta: f64,
    pub max_contrast_delta: f64,
}

impl Default for ColorJitterConfig {
    fn default() -> Self {
        ColorJitterConfig {
            max_brightness_delta: 64.0 / 255.0,
            max_saturation_delta: 0.25,
            max_hue_delta: 0.04,
            max_contrast_delta: 0.75,
        }
    }
}

impl ColorJitterConfig {
    pub const OFF: ColorJitterConfig = ColorJitterConfig {
        max_brightness_delta: 0.0,
        max_saturation_delta: 0.0,
        max_hue_delta: 0.0,
        max_contrast_delta: 0.0,
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationConfig {
    pub rotate: bool,
    pub flips: bool,
    pub scale_range: (f64, f64),
    pub shift_fraction_max: f64,
    pub fill: FillMode,
    pub color: ColorJitterConfig,
    pub seed: u64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            rotate: true,
            flips: true,
            scale_range: (0.5, 2.0),
            shift_fraction_max: 0.5,
            fill: FillMode::NearestEdge,
            color: ColorJitterConfig::default(),
            seed: 0,
        }
    }
}

impl AugmentationConfig {
    /// Degenerate configuration whose samples are always the identity.
    pub fn identity() -> AugmentationConfig {
        AugmentationConfig {
            rotate: false,
            flips: false,
            scale_range: (1.0, 1.0),
            shift_fraction_max: 0.0,
            fill: FillMode::NearestEdge,
            color: ColorJitterConfig::OFF,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(AugmentError::BadScaleRange { lo, hi });
        }
        if !(0.0..=1.0).contains(&self.shift_fraction_max) {
            return Err(AugmentError::BadShiftFraction(self.shift_fraction_max));
        }
        for (name, value) in [
            ("brightness", self.color.max_brightness_delta),
            ("saturation", self.color.max_saturation_delta),
            ("hue", self.color.max_hue_delta),
            ("contrast", self.color.max_contrast_delta),
        ] {
            if value < 0.0 {
                return Err(AugmentError::NegativeDelta { name, value });
            }
        }
        Ok(())
    }
}

/// One reified random draw, so an augmentation is reproducible and
/// inspectable independent of the RNG that produced it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentationSample {
    pub angle_degrees: f64,
    pub flip_h: bool,
    pub flip_v: bool,
    pub scale: f64,
    /// Pixel shift (dx, dy).
    pub shift: (f64, f64),
    pub brightness_delta: f64,
    pub saturation_delta: f64,
    pub hue_delta: f64,
    pub contrast_delta: f64,
}

impl AugmentationSample {
    pub const IDENTITY: AugmentationSample = AugmentationSample {
        angle_degrees: 0.0,
        flip_h: false,
        flip_v: false,
        scale: 1.0,
        shift: (0.0, 0.0),
        brightness_delta: 0.0,
        saturation_delta: 0.0,
        hue_delta: 0.0,
        contrast_delta: 0.0,
    };

    fn is_geometric_identity(&self) -> bool {
        self.angle_degrees.rem_euclid(360.0) == 0.0
            && !self.flip_h
            && !self.flip_v
            && self.scale == 1.0
            && self.shift == (0.0, 0.0)
    }

    fn is_color_identity(&self) -> bool {
        self.brightness_delta == 0.0
            && self.saturation_delta == 0.0
            && self.hue_delta == 0.0
            && self.contrast_delta == 0.0
    }
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

fn uniform_pm(rng: &mut impl Rng, max: f64) -> f64 {
    if max == 0.0 {
        0.0
    } else {
        rng.gen_range(-max..max)
    }
}

/// Draw one augmentation for a patch of the given dimensions. Angles are
/// uniform over [0, 360), flips fair coins, scale uniform over the
/// configured range, shifts uniform over +-fraction of each dimension and
/// color deltas uniform over +-max.
pub fn draw_sample(
    config: &AugmentationConfig,
    dims: (u32, u32),
    rng: &mut impl Rng,
) -> Result<AugmentationSample, AugmentError> {
    config.validate()?;
    let angle_degrees = if config.rotate {
        uniform(rng, 0.0, 360.0)
    } else {
        0.0
    };
    let (flip_h, flip_v) = if config.flips {
        (rng.gen_bool(0.5), rng.gen_bool(0.5))
    } else {
        (false, false)
    };
    let scale = uniform(rng, config.scale_range.0, config.scale_range.1);
    let shift = (
        uniform_pm(rng, config.shift_fraction_max * dims.0 as f64),
        uniform_pm(rng, config.shift_fraction_max * dims.1 as f64),
    );
    Ok(AugmentationSample {
        angle_degrees,
        flip_h,
        flip_v,
        scale,
        shift,
        brightness_delta: uniform_pm(rng, config.color.max_brightness_delta),
        saturation_delta: uniform_pm(rng, config.color.max_saturation_delta),
        hue_delta: uniform_pm(rng, config.color.max_hue_delta),
        contrast_delta: uniform_pm(rng, config.color.max_contrast_delta),
    })
}

/// Cosine/sine with right-angle snapping so quarter-turn rotations are
/// exact.
fn snapped_trig(angle_degrees: f64) -> (f64, f64) {
    let a = angle_degrees.rem_euclid(360.0);
    if a == 0.0 {
        (1.0, 0.0)
    } else if a == 90.0 {
        (0.0, 1.0)
    } else if a == 180.0 {
        (-1.0, 0.0)
    } else if a == 270.0 {
        (0.0, -1.0)
    } else {
        let r = a.to_radians();
        (r.cos(), r.sin())
    }
}

/// Apply a sample to a patch: geometric stages via one composed inverse
/// affine map with bilinear sampling under the fill policy, then color
/// jitter in the order brightness, saturation, hue, contrast, each
/// clamped to the valid range.
pub fn apply(
    image: &RasterImage,
    sample: &AugmentationSample,
    fill: FillMode,
    context: Option<ContextRaster<'_>>,
) -> Result<RasterImage, Error> {
    let geo = if sample.is_geometric_identity() {
        image.clone()
    } else {
        apply_geometry(image, sample, fill, context)?
    };
    if sample.is_color_identity() {
        Ok(geo)
    } else {
        Ok(apply_color(&geo, sample))
    }
}

fn apply_geometry(
    image: &RasterImage,
    sample: &AugmentationSample,
    fill: FillMode,
    context: Option<ContextRaster<'_>>,
) -> Result<RasterImage, Error> {
    let ctx = match fill {
        FillMode::NearestEdge => None,
        FillMode::SourceContext => Some(
            context.ok_or(crate::imaging::ImagingError::MissingContext)?,
        ),
    };
    let w = image.width();
    let h = image.height();
    let channels = image.channels();
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let (cos_t, sin_t) = snapped_trig(sample.angle_degrees);
    let inv_scale = 1.0 / sample.scale;
    let mut data = vec![0u8; w as usize * h as usize * channels as usize];
    for oy in 0..h {
        for ox in 0..w {
            // Invert the forward chain: shift, flips, rotation, scale.
            let mut x = ox as f64 - sample.shift.0;
            let mut y = oy as f64 - sample.shift.1;
            if sample.flip_h {
                x = 2.0 * cx - x;
            }
            if sample.flip_v {
                y = 2.0 * cy - y;
            }
            let xr = x - cx;
            let yr = y - cy;
            let sx = cx + (cos_t * xr + sin_t * yr) * inv_scale;
            let sy = cy + (-sin_t * xr + cos_t * yr) * inv_scale;
            let base = (oy as usize * w as usize + ox as usize) * channels as usize;
            for c in 0..channels {
                let v = match ctx {
                    None => crate::imaging::bilinear_sample_u8(image, sx, sy, c),
                    Some(ref ctx) => bilinear_sample_with_context(image, ctx, sx, sy, c),
                };
                data[base + c as usize] = (v + 0.5).floor().clamp(0.0, 255.0) as u8;
            }
        }
    }
    Ok(RasterImage::new(w, h, channels, data, image.resolution())
        .expect("dimensions carried over"))
}

/// Bilinear tap that reads beyond the source from an enclosing raster,
/// clamping at the enclosing raster's own border.
fn bilinear_sample_with_context(
    image: &RasterImage,
    ctx: &ContextRaster<'_>,
    x: f64,
    y: f64,
    c: u8,
) -> f64 {
    let tap = |px: i64, py: i64| -> f64 {
        if px >= 0 && py >= 0 && px < image.width() as i64 && py < image.height() as i64 {
            image.get(px as u32, py as u32, c) as f64
        } else {
            ctx.image
                .get_clamped(px + ctx.source_origin.0, py + ctx.source_origin.1, c)
                as f64
        }
    };
    let x0f = x.floor();
    let y0f = y.floor();
    let fx = x - x0f;
    let fy = y - y0f;
    let x0 = x0f as i64;
    let y0 = y0f as i64;
    let top = tap(x0, y0) * (1.0 - fx) + tap(x0 + 1, y0) * fx;
    let bottom = tap(x0, y0 + 1) * (1.0 - fx) + tap(x0 + 1, y0 + 1) * fx;
    top * (1.0 - fy) + bottom * fy
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let v = max;
    let s = if max == 0.0 { 0.0 } else { delta / max };
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        (((g - b) / delta).rem_euclid(6.0)) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    (h, s, v)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as i32 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

fn apply_color(image: &RasterImage, sample: &AugmentationSample) -> RasterImage {
    let channels = image.channels() as usize;
    let pixel_count = image.data().len() / channels;
    // Pass 1: brightness, then saturation and hue in HSV, on 0..1 floats.
    let mut float: Vec<f64> = image.data().iter().map(|&v| v as f64 / 255.0).collect();
    if sample.brightness_delta != 0.0 {
        for v in float.iter_mut() {
            *v = (*v + sample.brightness_delta).clamp(0.0, 1.0);
        }
    }
    let touch_hsv = channels == 3 && (sample.saturation_delta != 0.0 || sample.hue_delta != 0.0);
    if touch_hsv {
        for px in float.chunks_exact_mut(3) {
            let (mut h, mut s, v) = rgb_to_hsv(px[0], px[1], px[2]);
            if sample.saturation_delta != 0.0 {
                s = (s * (1.0 + sample.saturation_delta)).clamp(0.0, 1.0);
            }
            if sample.hue_delta != 0.0 {
                h = (h + sample.hue_delta).rem_euclid(1.0);
            }
            let (r, g, b) = hsv_to_rgb(h, s, v);
            px[0] = r.clamp(0.0, 1.0);
            px[1] = g.clamp(0.0, 1.0);
            px[2] = b.clamp(0.0, 1.0);
        }
    }
    // Pass 2: contrast scales about the per-channel image mean.
    if sample.contrast_delta != 0.0 {
        let mut mean = vec![0.0f64; channels];
        for (i, &v) in float.iter().enumerate() {
            mean[i % channels] += v;
        }
        for m in mean.iter_mut() {
            *m /= pixel_count as f64;
        }
        let gain = 1.0 + sample.contrast_delta;
        for (i, v) in float.iter_mut().enumerate() {
            let m = mean[i % channels];
            *v = (m + gain * (*v - m)).clamp(0.0, 1.0);
        }
    }
    let data: Vec<u8> = float
        .iter()
        .map(|&v| (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8)
        .collect();
    RasterImage::new(
        image.width(),
        image.height(),
        image.channels(),
        data,
        image.resolution(),
    )
    .expect("shape preserved")
}

/// Enclosing raster owned alongside a batch, for source-context fill.
#[derive(Debug, Clone)]
pub struct ContextPatch {
    pub image: RasterImage,
    /// Position of the patch's (0,0) pixel inside `image`.
    pub source_origin: (i64, i64),
}

/// Per-patch draw, apply and normalize; patch `i` consumes RNG stream
/// `i + 1` of the seed so batches parallelize without reordering risk.
pub fn augment_batch(
    patches: &[RasterImage],
    config: &AugmentationConfig,
    stats: &DatasetStats,
) -> Result<Vec<FloatImage>, Error> {
    augment_batch_seeded(patches, config, stats, config.seed, None)
}

/// [`augment_batch`] with an explicit seed (the training loop varies it
/// per epoch) and optional per-patch context rasters.
pub fn augment_batch_seeded(
    patches: &[RasterImage],
    config: &AugmentationConfig,
    stats: &DatasetStats,
    seed: u64,
    contexts: Option<&[ContextPatch]>,
) -> Result<Vec<FloatImage>, Error> {
    config.validate()?;
    if let Some(first) = patches.first() {
        for p in patches {
            if (p.width(), p.height(), p.channels())
                != (first.width(), first.height(), first.channels())
            {
                return Err(AugmentError::ShapeMismatch(
                    first.width(),
                    first.height(),
                    first.channels(),
                    p.width(),
                    p.height(),
                    p.channels(),
                )
                .into());
            }
        }
    }
    if config.fill == FillMode::SourceContext {
        match contexts {
            None => return Err(AugmentError::MissingBatchContext.into()),
            Some(ctxs) if ctxs.len() != patches.len() => {
                return Err(AugmentError::ContextCountMismatch {
                    patches: patches.len(),
                    contexts: ctxs.len(),
                }
                .into())
            }
            Some(_) => {}
        }
    }
    patches
        .par_iter()
        .enumerate()
        .map(|(i, patch)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64 + 1);
            let sample = draw_sample(config, (patch.width(), patch.height()), &mut rng)?;
            let ctx = contexts.map(|ctxs| ContextRaster {
                image: &ctxs[i].image,
                source_origin: ctxs[i].source_origin,
            });
            let augmented = apply(patch, &sample, config.fill, ctx)?;
            Ok(normalize(&augmented, stats, NORMALIZE_EPSILON)?)
        })
        .collect()
}
