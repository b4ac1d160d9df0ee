//! Background subtraction: Otsu thresholding of the HSV saturation
//! channel, the coarse one-pixel-per-patch mask used to pre-filter large
//! grids, and the patch-level foreground fraction behind the 80%
//! background rule.

use thiserror::Error;

use crate::extraction::GridSpec;
use crate::imaging::{bilinear_sample_plane, RasterImage};

#[derive(Debug, Error)]
pub enum MaskError {
    #[error("histogram has no counts")]
    EmptyHistogram,
    #[error("tissue masking requires a 3-channel RGB image, got {0} channels")]
    NotRgb(u8),
    #[error("grid center ({x}, {y}) maps outside the low-resolution raster ({width}x{height})")]
    CenterOutOfBounds { x: f64, y: f64, width: u32, height: u32 },
    #[error("mask bit count {got} does not match {width}x{height}")]
    BitLength { got: usize, width: u32, height: u32 },
    #[error("rectangle does not intersect the mask")]
    EmptyRectangle,
    #[error("operation requires a {expected:?} mask, got {got:?}")]
    ScopeMismatch { expected: MaskScope, got: MaskScope },
    #[error("level-0 resolution must be positive, got {0}")]
    BadResolution(f64),
}

/// What one mask pixel stands for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskScope {
    /// One mask pixel per image pixel.
    FullResolutionGrid,
    /// One mask pixel per planned patch center.
    OnePixelPerPatch,
}

/// Binary foreground raster at a stated resolution; `true` is tissue.
#[derive(Debug, Clone, PartialEq)]
pub struct TissueMask {
    width: u32,
    height: u32,
    bits: Vec<bool>,
    resolution: f64,
    scope: MaskScope,
}

impl TissueMask {
    pub fn new(
        width: u32,
        height: u32,
        bits: Vec<bool>,
        resolution: f64,
        scope: MaskScope,
    ) -> Result<TissueMask, MaskError> {
        if bits.len() != width as usize * height as usize {
            return Err(MaskError::BitLength {
                got: bits.len(),
                width,
                height,
            });
        }
        Ok(TissueMask {
            width,
            height,
            bits,
            resolution,
            scope,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn scope(&self) -> MaskScope {
        self.scope
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[y as usize * self.width as usize + x as usize]
    }

    pub fn foreground_count(&self) -> u64 {
        self.bits.iter().filter(|&&b| b).count() as u64
    }
}

/// Axis-aligned pixel rectangle; may extend outside a raster.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelRect {
    pub x: i64,
    pub y: i64,
    pub width: u32,
    pub height: u32,
}

impl PixelRect {
    pub fn new(x: i64, y: i64, width: u32, height: u32) -> PixelRect {
        PixelRect { x, y, width, height }
    }

    /// Right edge (exclusive).
    pub fn x_end(&self) -> i64 {
        self.x + self.width as i64
    }

    /// Bottom edge (exclusive).
    pub fn y_end(&self) -> i64 {
        self.y + self.height as i64
    }

    pub fn contains(&self, x: i64, y: i64) -> bool {
        x >= self.x && y >= self.y && x < self.x_end() && y < self.y_end()
    }
}

/// HSV saturation of one RGB pixel scaled to 0..=255 (hexcone model,
/// S = (max-min)/max with S = 0 when max = 0).
#[inline]
pub fn saturation_byte(r: u8, g: u8, b: u8) -> u8 {
    let max = r.max(g).max(b);
    if max == 0 {
        return 0;
    }
    let min = r.min(g).min(b);
    (255.0 * (max - min) as f64 / max as f64 + 0.5).floor() as u8
}

/// Saturation plane of an RGB image as f64 values in 0..=255.
fn saturation_plane(image: &RasterImage) -> Result<Vec<f64>, MaskError> {
    if image.channels() != 3 {
        return Err(MaskError::NotRgb(image.channels()));
    }
    let data = image.data();
    Ok(data
        .chunks_exact(3)
        .map(|px| saturation_byte(px[0], px[1], px[2]) as f64)
        .collect())
}

fn histogram_of(plane: &[f64]) -> [u64; 256] {
    let mut hist = [0u64; 256];
    for &v in plane {
        hist[v as usize] += 1;
    }
    hist
}

/// Otsu's threshold: the `t` in 0..=255 maximizing between-class variance
/// with class 0 = bins `0..=t`; ties resolve to the smallest `t`.
///
/// All cumulative sums are exact integers in f64 (counts below 2^45), so
/// the argmax is reproducible regardless of evaluation strategy.
pub fn otsu_threshold(histogram: &[u64; 256]) -> Result<u8, MaskError> {
    let total: u64 = histogram.iter().sum();
    if total == 0 {
        return Err(MaskError::EmptyHistogram);
    }
    let total_f = total as f64;
    let mut sum_total = 0.0f64;
    for (i, &count) in histogram.iter().enumerate() {
        sum_total += i as f64 * count as f64;
    }
    let mut best_t = 0u8;
    let mut best_v = f64::NEG_INFINITY;
    let mut w0 = 0.0f64;
    let mut s0 = 0.0f64;
    for t in 0..256usize {
        w0 += histogram[t] as f64;
        s0 += t as f64 * histogram[t] as f64;
        let v = between_class_variance(w0, s0, total_f, sum_total);
        if v > best_v {
            best_v = v;
            best_t = t as u8;
        }
    }
    Ok(best_t)
}

/// Between-class variance for a split with `w0` pixels of value sum `s0`
/// below or at the threshold. Shared by the implementation and the
/// exhaustive-search oracle so both evaluate the identical expression.
#[inline]
pub fn between_class_variance(w0: f64, s0: f64, total: f64, sum_total: f64) -> f64 {
    let w1 = total - w0;
    if w0 == 0.0 || w1 == 0.0 {
        return 0.0;
    }
    let mu0 = s0 / w0;
    let mu1 = (sum_total - s0) / w1;
    let diff = mu0 - mu1;
    w0 * w1 * diff * diff
}

/// Full-resolution tissue mask: saturation > Otsu threshold.
pub fn compute_mask(image: &RasterImage) -> Result<TissueMask, MaskError> {
    let plane = saturation_plane(image)?;
    let hist = histogram_of(&plane);
    let t = otsu_threshold(&hist)?;
    mask_from_plane(image, &plane, t)
}

/// Same masking with a caller-chosen constant saturation threshold
/// instead of Otsu's.
pub fn compute_mask_with_threshold(
    image: &RasterImage,
    threshold: u8,
) -> Result<TissueMask, MaskError> {
    let plane = saturation_plane(image)?;
    mask_from_plane(image, &plane, threshold)
}

fn mask_from_plane(
    image: &RasterImage,
    plane: &[f64],
    threshold: u8,
) -> Result<TissueMask, MaskError> {
    let t = threshold as f64;
    let bits = plane.iter().map(|&s| s > t).collect();
    TissueMask::new(
        image.width(),
        image.height(),
        bits,
        image.resolution(),
        MaskScope::FullResolutionGrid,
    )
}

/// Coarse mask with one pixel per planned patch: the low-resolution
/// saturation raster is bilinearly interpolated at every grid center and
/// thresholded with the image-level Otsu threshold.
///
/// Grid centers are level-0 coordinates; `level0_um_per_px` relates them
/// to the low-resolution raster through the resolution ratio.
pub fn coarse_mask_for_grid(
    image_lowres: &RasterImage,
    grid: &GridSpec,
    level0_um_per_px: f64,
) -> Result<TissueMask, MaskError> {
    if !(level0_um_per_px > 0.0) {
        return Err(MaskError::BadResolution(level0_um_per_px));
    }
    let plane = saturation_plane(image_lowres)?;
    let hist = histogram_of(&plane);
    let t = otsu_threshold(&hist)? as f64;
    let factor = image_lowres.resolution() / level0_um_per_px;
    let (cols, rows) = grid.shape();
    let w = image_lowres.width();
    let h = image_lowres.height();
    let mut bits = Vec::with_capacity(cols as usize * rows as usize);
    for center in grid.centers() {
        let x = (center.0 as f64 + 0.5) / factor - 0.5;
        let y = (center.1 as f64 + 0.5) / factor - 0.5;
        if x < -0.5 || y < -0.5 || x > w as f64 - 0.5 || y > h as f64 - 0.5 {
            return Err(MaskError::CenterOutOfBounds {
                x,
                y,
                width: w,
                height: h,
            });
        }
        let s = bilinear_sample_plane(&plane, w, h, x, y);
        bits.push(s > t);
    }
    TissueMask::new(
        cols,
        rows,
        bits,
        grid.spacing() as f64 * level0_um_per_px,
        MaskScope::OnePixelPerPatch,
    )
}

/// Foreground fraction of a rectangle clipped to the mask.
///
/// The caller applies the keep rule: a patch counts as background when at
/// least 80% of its pixels are background, so it is kept only if the
/// returned fraction is strictly greater than 0.2.
pub fn patch_foreground_fraction(mask: &TissueMask, rect: PixelRect) -> Result<f64, MaskError> {
    if mask.scope != MaskScope::FullResolutionGrid {
        return Err(MaskError::ScopeMismatch {
            expected: MaskScope::FullResolutionGrid,
            got: mask.scope,
        });
    }
    let x0 = rect.x.max(0);
    let y0 = rect.y.max(0);
    let x1 = rect.x_end().min(mask.width as i64);
    let y1 = rect.y_end().min(mask.height as i64);
    if x0 >= x1 || y0 >= y1 {
        return Err(MaskError::EmptyRectangle);
    }
    let mut fg = 0u64;
    for y in y0..y1 {
        for x in x0..x1 {
            if mask.get(x as u32, y as u32) {
                fg += 1;
            }
        }
    }
    let total = ((x1 - x0) * (y1 - y0)) as f64;
    Ok(fg as f64 / total)
}

/// Default keep rule for the patch-level background filter.
pub const KEEP_FOREGROUND_FRACTION: f64 = 0.2;

impl MaskScope {
    fn name(self) -> &'static str {
        match self {
            MaskScope::FullResolutionGrid => "full_resolution_grid",
            MaskScope::OnePixelPerPatch => "one_pixel_per_patch",
        }
    }

    fn from_name(name: &str) -> Option<MaskScope> {
        match name {
            "full_resolution_grid" => Some(MaskScope::FullResolutionGrid),
            "one_pixel_per_patch" => Some(MaskScope::OnePixelPerPatch),
            _ => None,
        }
    }
}

/// Persist as 8-bit grayscale PNG (0 background, 255 foreground) with a
/// sidecar recording resolution and scope.
pub fn write_mask(path: &std::path::Path, mask: &TissueMask) -> Result<(), crate::io::FormatError> {
    let data: Vec<u8> = mask.bits.iter().map(|&b| if b { 255 } else { 0 }).collect();
    let image = RasterImage::new(mask.width, mask.height, 1, data, mask.resolution)
        .expect("mask dimensions are valid");
    crate::io::write_image(path, &image)?;
    let mut sidecar = crate::io::Sidecar::new();
    sidecar.set("um_per_px", mask.resolution);
    sidecar.set("scope", mask.scope.name());
    crate::io::write_sidecar(path, &sidecar)
}

pub fn read_mask(path: &std::path::Path) -> Result<TissueMask, crate::io::FormatError> {
    let image = crate::io::read_image(path)?;
    let sidecar = crate::io::read_sidecar(path)?;
    let resolution = sidecar.get_f64(path, "um_per_px")?;
    let scope_raw = sidecar.get("scope").ok_or_else(|| crate::io::FormatError::MissingKey {
        path: path.to_path_buf(),
        key: "scope".into(),
    })?;
    let scope = MaskScope::from_name(scope_raw).ok_or_else(|| {
        crate::io::FormatError::Decode {
            path: path.to_path_buf(),
            message: format!("unknown mask scope `{scope_raw}`"),
        }
    })?;
    if image.channels() != 1 {
        return Err(crate::io::FormatError::Decode {
            path: path.to_path_buf(),
            message: format!("mask PNG must be grayscale, got {} channels", image.channels()),
        });
    }
    let bits = image.data().iter().map(|&v| v >= 128).collect();
    TissueMask::new(image.width(), image.height(), bits, resolution, scope).map_err(|e| {
        crate::io::FormatError::Decode {
            path: path.to_path_buf(),
            message: e.to_string(),
        }
    })
}
