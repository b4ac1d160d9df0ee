//! Whole-slide patch-grid inference producing a class label map, plus the
//! median-filter and priority-dilation post-processing stages.

use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::imaging::{crop_with_fill, resample, FillMode, LabelClass, RasterImage, ResampleMethod};
use crate::io::{read_indexed_png, read_sidecar, write_indexed_png, write_sidecar, FormatError, Sidecar};
use crate::tissue::{patch_foreground_fraction, MaskScope, PixelRect, TissueMask};

#[derive(Debug, Error)]
pub enum SegmentError {
    #[error("cell count {got} does not match {width}x{height}")]
    CellLength { got: usize, width: u32, height: u32 },
    #[error("backend expects {backend} px patches, config requests {config} px")]
    PatchSizeMismatch { backend: u32, config: u32 },
    #[error(
        "backend expects {expected} um/px, slide at downsample {downsample} yields {got} um/px"
    )]
    ResolutionMismatch { expected: f64, got: f64, downsample: f64 },
    #[error("probability row {row} sums to {sum}, expected 1")]
    BadProbabilitySum { row: usize, sum: f64 },
    #[error("backend returned {got} probability rows for {expected} patches")]
    BatchLengthMismatch { got: usize, expected: usize },
    #[error("median window must be odd and >= 1, got {0}")]
    EvenWindow(u32),
    #[error("tissue mask must be full-resolution at the classifier raster size {expected:?}, got {got:?}")]
    MaskShape { expected: (u32, u32), got: (u32, u32) },
    #[error("stride must be positive")]
    ZeroStride,
    #[error("downsample must be >= 1, got {0}")]
    BadDownsample(f64),
    #[error("label map palette mismatch: {0}")]
    Palette(String),
    #[error("sidecar {key} is {got}, expected {expected}")]
    SidecarMismatch { key: String, got: String, expected: String },
    #[error("external backend failed: {0}")]
    ExternalBackend(String),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Imaging(#[from] crate::imaging::ImagingError),
    #[error(transparent)]
    Mask(#[from] crate::tissue::MaskError),
}

/// Per-grid-cell class raster produced by whole-slide inference.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    width: u32,
    height: u32,
    cells: Vec<LabelClass>,
    /// Grid cell side in pixels at classifier input resolution.
    cell_stride_pixels: u32,
    /// Level-0 pixels per cell (slide downsample times stride).
    total_downsample: f64,
    slide_id: String,
}

impl LabelMap {
    pub fn new(
        width: u32,
        height: u32,
        cells: Vec<LabelClass>,
        cell_stride_pixels: u32,
        total_downsample: f64,
        slide_id: String,
    ) -> Result<LabelMap, SegmentError> {
        if cells.len() != width as usize * height as usize {
            return Err(SegmentError::CellLength {
                got: cells.len(),
                width,
                height,
            });
        }
        Ok(LabelMap {
            width,
            height,
            cells,
            cell_stride_pixels,
            total_downsample,
            slide_id,
        })
    }

    pub fn filled(
        width: u32,
        height: u32,
        class: LabelClass,
        cell_stride_pixels: u32,
        total_downsample: f64,
        slide_id: &str,
    ) -> LabelMap {
        LabelMap {
            width,
            height,
            cells: vec![class; width as usize * height as usize],
            cell_stride_pixels,
            total_downsample,
            slide_id: slide_id.to_string(),
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn cells(&self) -> &[LabelClass] {
        &self.cells
    }

    pub fn cell_stride_pixels(&self) -> u32 {
        self.cell_stride_pixels
    }

    pub fn total_downsample(&self) -> f64 {
        self.total_downsample
    }

    pub fn slide_id(&self) -> &str {
        &self.slide_id
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> LabelClass {
        self.cells[y as usize * self.width as usize + x as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, class: LabelClass) {
        self.cells[y as usize * self.width as usize + x as usize] = class;
    }

    /// Same grid geometry with different cells.
    fn with_cells(&self, cells: Vec<LabelClass>) -> LabelMap {
        LabelMap {
            width: self.width,
            height: self.height,
            cells,
            cell_stride_pixels: self.cell_stride_pixels,
            total_downsample: self.total_downsample,
            slide_id: self.slide_id.clone(),
        }
    }
}

/// What a classifier plugged into [`segment`] declares about itself.
#[derive(Debug, Clone, PartialEq)]
pub struct BackendMetadata {
    pub patch_pixel_size: u32,
    /// Expected classifier-input resolution; checked against
    /// slide resolution times downsample when present.
    pub expected_um_per_px: Option<f64>,
    /// Reference to the normalization statistics baked into the backend.
    pub stats_ref: Option<String>,
}

/// One batch of grid patches handed to a backend: pixel payloads plus
/// the grid centers they were cropped around, in classifier-raster
/// pixel coordinates.
#[derive(Debug, Clone)]
pub struct PatchBatch {
    pub patches: Vec<RasterImage>,
    pub centers: Vec<(i64, i64)>,
}

/// Callable classifier contract: patch batch in, one probability row per
/// patch out. Rows must sum to 1 within 1e-6.
pub trait ClassifierBackend {
    fn metadata(&self) -> BackendMetadata;
    fn classify_batch(&self, batch: &PatchBatch) -> Result<Vec<[f64; 4]>, SegmentError>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentConfig {
    /// Slide-to-classifier downsample factor.
    pub downsample: f64,
    pub patch_pixel_size: u32,
    /// Grid cell side at classifier resolution.
    pub stride: u32,
    pub batch_size: usize,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        SegmentConfig {
            downsample: 4.5,
            patch_pixel_size: 157,
            stride: 32,
            batch_size: 64,
        }
    }
}

/// Label-map dimensions for a classifier raster: ceil(dim / stride), so
/// partial right/bottom cells are covered rather than skipped.
pub fn cell_dims(raster_w: u32, raster_h: u32, stride: u32) -> (u32, u32) {
    (raster_w.div_ceil(stride), raster_h.div_ceil(stride))
}

/// The grid of cell centers [`segment`] classifies, expressed as a
/// [`crate::extraction::GridSpec`] over the ceil-padded raster extent so
/// ground-truth rasterization can enumerate the identical centers.
pub fn segment_grid(
    raster_w: u32,
    raster_h: u32,
    stride: u32,
) -> Result<crate::extraction::GridSpec, crate::extraction::ExtractError> {
    let (cells_x, cells_y) = cell_dims(raster_w, raster_h, stride);
    crate::extraction::GridSpec::new(
        PixelRect::new(0, 0, cells_x * stride, cells_y * stride),
        stride,
        (stride / 2, stride / 2),
        stride,
    )
}

/// Classify every grid center of a stride-cell grid over the downsampled
/// slide and write the argmax class per cell.
///
/// Cells whose stride-square region is entirely background in the
/// optional tissue mask (given at classifier raster geometry) are set to
/// normal without classification. Border patches use nearest-edge fill.
pub fn segment(
    slide: &RasterImage,
    slide_id: &str,
    backend: &dyn ClassifierBackend,
    config: &SegmentConfig,
    mask: Option<&TissueMask>,
) -> Result<LabelMap, SegmentError> {
    let meta = backend.metadata();
    if meta.patch_pixel_size != config.patch_pixel_size {
        return Err(SegmentError::PatchSizeMismatch {
            backend: meta.patch_pixel_size,
            config: config.patch_pixel_size,
        });
    }
    if config.stride == 0 {
        return Err(SegmentError::ZeroStride);
    }
    if !(config.downsample >= 1.0) {
        return Err(SegmentError::BadDownsample(config.downsample));
    }
    let raster_res = slide.resolution() * config.downsample;
    if let Some(expected) = meta.expected_um_per_px {
        let rel = (raster_res - expected).abs() / expected;
        if rel > 1e-3 {
            return Err(SegmentError::ResolutionMismatch {
                expected,
                got: raster_res,
                downsample: config.downsample,
            });
        }
    }
    let raster = if config.downsample == 1.0 {
        slide.clone()
    } else {
        resample(slide, config.downsample, ResampleMethod::Bilinear)?
    };
    if let Some(m) = mask {
        if m.scope() != MaskScope::FullResolutionGrid
            || (m.width(), m.height()) != (raster.width(), raster.height())
        {
            return Err(SegmentError::MaskShape {
                expected: (raster.width(), raster.height()),
                got: (m.width(), m.height()),
            });
        }
    }
    let (cells_x, cells_y) = cell_dims(raster.width(), raster.height(), config.stride);
    let stride = config.stride as i64;
    let half = stride / 2;
    let mut cells = vec![LabelClass::Normal; cells_x as usize * cells_y as usize];

    // Plan which cells need classification.
    let mut jobs: Vec<(usize, (i64, i64))> = Vec::new();
    for cy in 0..cells_y as i64 {
        for cx in 0..cells_x as i64 {
            let idx = (cy * cells_x as i64 + cx) as usize;
            if let Some(m) = mask {
                let rect = PixelRect::new(cx * stride, cy * stride, config.stride, config.stride);
                let fraction = patch_foreground_fraction(m, rect)?;
                if fraction == 0.0 {
                    continue; // stays normal, never classified
                }
            }
            jobs.push((idx, (cx * stride + half, cy * stride + half)));
        }
    }

    let batch_size = config.batch_size.max(1);
    for chunk in jobs.chunks(batch_size) {
        let patches: Vec<RasterImage> = chunk
            .par_iter()
            .map(|(_, center)| {
                crop_with_fill(
                    &raster,
                    *center,
                    config.patch_pixel_size,
                    FillMode::NearestEdge,
                    None,
                )
            })
            .collect::<Result<_, _>>()?;
        let batch = PatchBatch {
            patches,
            centers: chunk.iter().map(|(_, c)| *c).collect(),
        };
        let probs = backend.classify_batch(&batch)?;
        if probs.len() != chunk.len() {
            return Err(SegmentError::BatchLengthMismatch {
                got: probs.len(),
                expected: chunk.len(),
            });
        }
        for (row, ((idx, _), p)) in chunk.iter().zip(&probs).enumerate() {
            let sum: f64 = p.iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(SegmentError::BadProbabilitySum { row, sum });
            }
            cells[*idx] = argmax_class(p);
        }
    }

    LabelMap::new(
        cells_x,
        cells_y,
        cells,
        config.stride,
        config.downsample * config.stride as f64,
        slide_id.to_string(),
    )
}

/// Ties break toward the lowest class code.
pub fn argmax_class(probs: &[f64; 4]) -> LabelClass {
    let mut best = 0usize;
    for c in 1..4 {
        if probs[c] > probs[best] {
            best = c;
        }
    }
    LabelClass::from_code(best as u8).expect("class code in range")
}

/// Ordinal median of each cell's window x window neighborhood under the
/// class order 0 < 1 < 2 < 3; borders replicate edge cells.
pub fn median_filter(map: &LabelMap, window: u32) -> Result<LabelMap, SegmentError> {
    if window.is_multiple_of(2) || window == 0 {
        return Err(SegmentError::EvenWindow(window));
    }
    if window == 1 {
        return Ok(map.clone());
    }
    let half = (window / 2) as i64;
    let area = (window * window) as usize;
    let middle = area / 2;
    let cells = filter_cells(map, half, move |counts| {
        let mut seen = 0usize;
        for (class, &n) in counts.iter().enumerate() {
            seen += n;
            if seen > middle {
                return LabelClass::from_code(class as u8).expect("class in range");
            }
        }
        unreachable!("window counts sum to the window area")
    });
    Ok(map.with_cells(cells))
}

/// Majority-vote alternative to the ordinal median; ties resolve to the
/// lowest class code.
pub fn majority_filter(map: &LabelMap, window: u32) -> Result<LabelMap, SegmentError> {
    if window.is_multiple_of(2) || window == 0 {
        return Err(SegmentError::EvenWindow(window));
    }
    if window == 1 {
        return Ok(map.clone());
    }
    let half = (window / 2) as i64;
    let cells = filter_cells(map, half, |counts| {
        let mut best = 0usize;
        for class in 1..4 {
            if counts[class] > counts[best] {
                best = class;
            }
        }
        LabelClass::from_code(best as u8).expect("class in range")
    });
    Ok(map.with_cells(cells))
}

fn filter_cells(
    map: &LabelMap,
    half: i64,
    reduce: impl Fn(&[usize; 4]) -> LabelClass + Sync,
) -> Vec<LabelClass> {
    let w = map.width as i64;
    let h = map.height as i64;
    (0..h)
        .into_par_iter()
        .flat_map_iter(|y| {
            let reduce = &reduce;
            (0..w).map(move |x| {
                let mut counts = [0usize; 4];
                for dy in -half..=half {
                    for dx in -half..=half {
                        let sx = (x + dx).clamp(0, w - 1);
                        let sy = (y + dy).clamp(0, h - 1);
                        counts[map.get(sx as u32, sy as u32).code() as usize] += 1;
                    }
                }
                reduce(&counts)
            })
        })
        .collect()
}

/// Grow every non-normal region by an L1 ball (iterated 4-connected
/// cross) of the given radius; overlaps resolve to the highest class and
/// normal cells are only ever overwritten, never expanded.
pub fn priority_dilate(map: &LabelMap, radius: u32) -> LabelMap {
    if radius == 0 {
        return map.clone();
    }
    let w = map.width as i64;
    let h = map.height as i64;
    let r = radius as i64;
    let cells: Vec<LabelClass> = (0..h)
        .into_par_iter()
        .flat_map_iter(|y| {
            (0..w).map(move |x| {
                let mut best = map.get(x as u32, y as u32);
                for dy in -r..=r {
                    let budget = r - dy.abs();
                    for dx in -budget..=budget {
                        let sx = x + dx;
                        let sy = y + dy;
                        if sx < 0 || sy < 0 || sx >= w || sy >= h {
                            continue;
                        }
                        let v = map.get(sx as u32, sy as u32);
                        if v != LabelClass::Normal && v > best {
                            best = v;
                        }
                    }
                }
                best
            })
        })
        .collect();
    map.with_cells(cells)
}

/// Which smoothing stage [`postprocess`] runs first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SmoothMode {
    #[default]
    Median,
    Majority,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PostprocessConfig {
    pub median_window: u32,
    pub dilate_radius: u32,
    pub smooth: SmoothMode,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        PostprocessConfig {
            median_window: 5,
            dilate_radius: 1,
            smooth: SmoothMode::Median,
        }
    }
}

/// Smooth then dilate, in that order: the dilation regrows tumor regions
/// the smoothing shrank.
pub fn postprocess(map: &LabelMap, config: &PostprocessConfig) -> Result<LabelMap, SegmentError> {
    let smoothed = match config.smooth {
        SmoothMode::Median => median_filter(map, config.median_window)?,
        SmoothMode::Majority => majority_filter(map, config.median_window)?,
    };
    Ok(priority_dilate(&smoothed, config.dilate_radius))
}

/// Fixed indexed-PNG palette: normal white, benign green, in-situ blue,
/// invasive red.
pub const LABEL_PALETTE: [u8; 12] = [255, 255, 255, 0, 255, 0, 0, 0, 255, 255, 0, 0];

/// Write a label map as indexed-color PNG plus a metadata sidecar with
/// stride, downsample and slide id.
pub fn export_label_map(map: &LabelMap, path: &Path) -> Result<(), SegmentError> {
    let indices: Vec<u8> = map.cells.iter().map(|c| c.code()).collect();
    write_indexed_png(path, map.width, map.height, &indices, &LABEL_PALETTE)?;
    let mut sidecar = Sidecar::new();
    sidecar.set("stride", map.cell_stride_pixels);
    sidecar.set("downsample", map.total_downsample);
    sidecar.set("slide_id", &map.slide_id);
    write_sidecar(path, &sidecar)?;
    Ok(())
}

pub fn import_label_map(path: &Path) -> Result<LabelMap, SegmentError> {
    let (width, height, indices, palette) = read_indexed_png(path)?;
    if palette != LABEL_PALETTE {
        return Err(SegmentError::Palette(format!(
            "expected {LABEL_PALETTE:?}, found {palette:?}"
        )));
    }
    let cells: Vec<LabelClass> = indices
        .iter()
        .map(|&i| {
            LabelClass::from_code(i)
                .ok_or_else(|| SegmentError::Palette(format!("index {i} out of range")))
        })
        .collect::<Result<_, _>>()?;
    let sidecar = read_sidecar(path)?;
    let stride = sidecar.get_u32(path, "stride")?;
    let downsample = sidecar.get_f64(path, "downsample")?;
    let slide_id = sidecar.get("slide_id").unwrap_or("").to_string();
    LabelMap::new(width, height, cells, stride, downsample, slide_id)
}

/// Import asserting the sidecar geometry matches what the caller expects.
pub fn import_label_map_expecting(
    path: &Path,
    expected_stride: u32,
    expected_downsample: f64,
) -> Result<LabelMap, SegmentError> {
    let map = import_label_map(path)?;
    if map.cell_stride_pixels != expected_stride {
        return Err(SegmentError::SidecarMismatch {
            key: "stride".into(),
            got: map.cell_stride_pixels.to_string(),
            expected: expected_stride.to_string(),
        });
    }
    let rel = (map.total_downsample - expected_downsample).abs() / expected_downsample;
    if rel > 1e-9 {
        return Err(SegmentError::SidecarMismatch {
            key: "downsample".into(),
            got: map.total_downsample.to_string(),
            expected: expected_downsample.to_string(),
        });
    }
    Ok(map)
}

/// Stub backend returning a constant class; test plumbing.
pub struct ConstantBackend {
    pub class: LabelClass,
    pub patch_pixel_size: u32,
}

impl ClassifierBackend for ConstantBackend {
    fn metadata(&self) -> BackendMetadata {
        BackendMetadata {
            patch_pixel_size: self.patch_pixel_size,
            expected_um_per_px: None,
            stats_ref: None,
        }
    }

    fn classify_batch(&self, batch: &PatchBatch) -> Result<Vec<[f64; 4]>, SegmentError> {
        let mut row = [0.0f64; 4];
        row[self.class.code() as usize] = 1.0;
        Ok(vec![row; batch.patches.len()])
    }
}

/// Oracle backend answering with the ground-truth class at each center;
/// lets segmentation plumbing be verified independently of any trained
/// classifier. Centers arrive in classifier-raster coordinates and are
/// mapped back to level 0 through the declared downsample.
pub struct GroundTruthBackend<'a> {
    pub annotations: &'a crate::annotations::AnnotationSet,
    pub patch_pixel_size: u32,
    pub downsample: f64,
}

impl ClassifierBackend for GroundTruthBackend<'_> {
    fn metadata(&self) -> BackendMetadata {
        BackendMetadata {
            patch_pixel_size: self.patch_pixel_size,
            expected_um_per_px: None,
            stats_ref: None,
        }
    }

    fn classify_batch(&self, batch: &PatchBatch) -> Result<Vec<[f64; 4]>, SegmentError> {
        Ok(batch
            .centers
            .iter()
            .map(|&(x, y)| {
                let level0 = (x as f64 * self.downsample, y as f64 * self.downsample);
                let class = self.annotations.class_at_point(level0);
                let mut row = [0.0f64; 4];
                row[class.code() as usize] = 1.0;
                row
            })
            .collect())
    }
}

/// Backend that shells out to an external classifier process. Patches are
/// written as PNGs into a fresh directory, the command is invoked with
/// that directory as its final argument, and probabilities are read back
/// from `probs.txt` inside it (`<index> <p0> <p1> <p2> <p3>` per line).
pub struct ExternalProcessBackend {
    pub command: Vec<String>,
    pub patch_pixel_size: u32,
    pub expected_um_per_px: Option<f64>,
    pub work_dir: std::path::PathBuf,
}

impl ExternalProcessBackend {
    fn run(&self, batch: &PatchBatch) -> Result<Vec<[f64; 4]>, SegmentError> {
        let ext_err = |m: String| SegmentError::ExternalBackend(m);
        if self.command.is_empty() {
            return Err(ext_err("empty command".into()));
        }
        std::fs::create_dir_all(&self.work_dir)
            .map_err(|e| ext_err(format!("creating {}: {e}", self.work_dir.display())))?;
        let batch_dir = self.work_dir.join(format!(
            "batch_{:016x}",
            crate::io::fnv1a64(format!("{:?}", batch.centers).as_bytes())
        ));
        std::fs::create_dir_all(&batch_dir)
            .map_err(|e| ext_err(format!("creating batch dir: {e}")))?;
        for (i, patch) in batch.patches.iter().enumerate() {
            let path = batch_dir.join(format!("patch_{i:05}.png"));
            crate::io::write_image(&path, patch)?;
        }
        let status = std::process::Command::new(&self.command[0])
            .args(&self.command[1..])
            .arg(&batch_dir)
            .status()
            .map_err(|e| ext_err(format!("spawning `{}`: {e}", self.command[0])))?;
        if !status.success() {
            return Err(ext_err(format!("command exited with {status}")));
        }
        let probs_path = batch_dir.join("probs.txt");
        let text = std::fs::read_to_string(&probs_path)
            .map_err(|e| ext_err(format!("reading {}: {e}", probs_path.display())))?;
        let mut rows = vec![None; batch.patches.len()];
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 5 {
                return Err(ext_err(format!("probs.txt line {}: expected 5 fields", lineno + 1)));
            }
            let idx: usize = fields[0]
                .parse()
                .map_err(|_| ext_err(format!("probs.txt line {}: bad index", lineno + 1)))?;
            if idx >= rows.len() {
                return Err(ext_err(format!("probs.txt line {}: index {idx} out of range", lineno + 1)));
            }
            let mut row = [0.0f64; 4];
            for (slot, f) in row.iter_mut().zip(&fields[1..]) {
                *slot = f
                    .parse()
                    .map_err(|_| ext_err(format!("probs.txt line {}: bad probability", lineno + 1)))?;
            }
            rows[idx] = Some(row);
        }
        rows.into_iter()
            .enumerate()
            .map(|(i, r)| r.ok_or_else(|| ext_err(format!("probs.txt missing row {i}"))))
            .collect()
    }
}

impl ClassifierBackend for ExternalProcessBackend {
    fn metadata(&self) -> BackendMetadata {
        BackendMetadata {
            patch_pixel_size: self.patch_pixel_size,
            expected_um_per_px: self.expected_um_per_px,
            stats_ref: None,
        }
    }

    fn classify_batch(&self, batch: &PatchBatch) -> Result<Vec<[f64; 4]>, SegmentError> {
        self.run(batch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotations::AnnotationSet;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn map_from(codes: &[u8], w: u32, h: u32) -> LabelMap {
        let cells = codes
            .iter()
            .map(|&c| LabelClass::from_code(c).unwrap())
            .collect();
        LabelMap::new(w, h, cells, 32, 144.0, "t".into()).unwrap()
    }

    fn random_map(rng: &mut ChaCha8Rng, w: u32, h: u32) -> LabelMap {
        let codes: Vec<u8> = (0..w * h).map(|_| rng.gen_range(0..4)).collect();
        map_from(&codes, w, h)
    }

    // Brute-force median: collect the window, sort, take the middle.
    fn median_brute(map: &LabelMap, window: u32) -> Vec<LabelClass> {
        let half = (window / 2) as i64;
        let w = map.width() as i64;
        let h = map.height() as i64;
        let mut out = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let mut values = Vec::new();
                for dy in -half..=half {
                    for dx in -half..=half {
                        let sx = (x + dx).clamp(0, w - 1) as u32;
                        let sy = (y + dy).clamp(0, h - 1) as u32;
                        values.push(map.get(sx, sy).code());
                    }
                }
                values.sort_unstable();
                out.push(LabelClass::from_code(values[values.len() / 2]).unwrap());
            }
        }
        out
    }

    // Brute-force priority dilation: dilate each class separately with an
    // L1 ball, then paint in ascending class order.
    fn dilate_brute(map: &LabelMap, radius: u32) -> Vec<LabelClass> {
        let w = map.width() as i64;
        let h = map.height() as i64;
        let r = radius as i64;
        let mut out: Vec<LabelClass> = map.cells().to_vec();
        for class in [LabelClass::Benign, LabelClass::InSitu, LabelClass::Invasive] {
            let mut grown = vec![false; (w * h) as usize];
            for y in 0..h {
                for x in 0..w {
                    if map.get(x as u32, y as u32) != class {
                        continue;
                    }
                    for dy in -r..=r {
                        for dx in -r..=r {
                            if dx.abs() + dy.abs() > r {
                                continue;
                            }
                            let nx = x + dx;
                            let ny = y + dy;
                            if nx >= 0 && ny >= 0 && nx < w && ny < h {
                                grown[(ny * w + nx) as usize] = true;
                            }
                        }
                    }
                }
            }
            for (i, &g) in grown.iter().enumerate() {
                if g && out[i] < class {
                    out[i] = class;
                }
            }
        }
        out
    }

    #[test]
    fn median_window_one_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let map = random_map(&mut rng, 9, 7);
        assert_eq!(median_filter(&map, 1).unwrap(), map);
    }

    #[test]
    fn median_rejects_even_window() {
        let map = map_from(&[0; 9], 3, 3);
        assert!(matches!(median_filter(&map, 2), Err(SegmentError::EvenWindow(2))));
        assert!(matches!(median_filter(&map, 0), Err(SegmentError::EvenWindow(0))));
    }

    #[test]
    fn median_of_known_neighborhood() {
        // Window values {0,0,0,1,1,2,3,3,3}: sorted middle is 1.
        let map = map_from(&[0, 0, 0, 1, 1, 2, 3, 3, 3], 3, 3);
        let filtered = median_filter(&map, 3).unwrap();
        assert_eq!(filtered.get(1, 1), LabelClass::Benign);
    }

    #[test]
    fn median_uniform_map_unchanged() {
        let map = map_from(&[2; 25], 5, 5);
        assert_eq!(median_filter(&map, 3).unwrap(), map);
    }

    #[test]
    fn median_matches_brute_force_on_random_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for _ in 0..200 {
            let map = random_map(&mut rng, 16, 16);
            for window in [3u32, 5] {
                let fast = median_filter(&map, window).unwrap();
                assert_eq!(fast.cells(), median_brute(&map, window).as_slice());
            }
        }
    }

    #[test]
    fn median_idempotent_on_locally_constant_maps() {
        // Blocks larger than the window are locally constant at window scale.
        let mut codes = vec![0u8; 12 * 12];
        for y in 0..12 {
            for x in 0..12 {
                codes[y * 12 + x] = if x < 6 { 0 } else { 3 };
            }
        }
        let map = map_from(&codes, 12, 12);
        let once = median_filter(&map, 3).unwrap();
        let twice = median_filter(&once, 3).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn dilate_radius_zero_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let map = random_map(&mut rng, 8, 8);
        assert_eq!(priority_dilate(&map, 0), map);
    }

    #[test]
    fn dilate_adjacent_overlap_resolves_to_higher() {
        // Benign at (1,1), in-situ at (3,1): their radius-1 dilations
        // overlap at (2,1), which must become in-situ.
        let mut codes = vec![0u8; 25];
        codes[5 + 1] = 1;
        codes[5 + 3] = 2;
        let map = map_from(&codes, 5, 5);
        let out = priority_dilate(&map, 1);
        assert_eq!(out.get(2, 1), LabelClass::InSitu);
        // The in-situ dilation is 2 cells away from (1,1); benign survives.
        assert_eq!(out.get(1, 1), LabelClass::Benign);
    }

    #[test]
    fn dilate_matches_brute_force_on_random_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        for _ in 0..200 {
            let map = random_map(&mut rng, 16, 16);
            let fast = priority_dilate(&map, 1);
            assert_eq!(fast.cells(), dilate_brute(&map, 1).as_slice());
            let fast2 = priority_dilate(&map, 2);
            assert_eq!(fast2.cells(), dilate_brute(&map, 2).as_slice());
        }
    }

    #[test]
    fn dilate_never_reverts_to_normal() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let map = random_map(&mut rng, 10, 10);
            let out = priority_dilate(&map, 1);
            for (before, after) in map.cells().iter().zip(out.cells()) {
                if *before != LabelClass::Normal {
                    assert_ne!(*after, LabelClass::Normal);
                    assert!(*after >= *before);
                }
            }
        }
    }

    #[test]
    fn postprocess_identity_config() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let map = random_map(&mut rng, 12, 12);
        let config = PostprocessConfig {
            median_window: 1,
            dilate_radius: 0,
            smooth: SmoothMode::Median,
        };
        assert_eq!(postprocess(&map, &config).unwrap(), map);
    }

    #[test]
    fn postprocess_removes_speckle() {
        // Isolated invasive cell in a normal field disappears under a
        // 3x3 median: median of {0 x8, 3} = 0.
        let mut codes = vec![0u8; 49];
        codes[3 * 7 + 3] = 3;
        let map = map_from(&codes, 7, 7);
        let config = PostprocessConfig {
            median_window: 3,
            dilate_radius: 1,
            smooth: SmoothMode::Median,
        };
        let out = postprocess(&map, &config).unwrap();
        assert!(out.cells().iter().all(|&c| c == LabelClass::Normal));
    }

    #[test]
    fn postprocess_grows_solid_region_boundary() {
        // Solid invasive block survives the median and grows by the
        // dilation radius.
        let mut codes = vec![0u8; 20 * 20];
        for y in 5..12 {
            for x in 5..12 {
                codes[y * 20 + x] = 3;
            }
        }
        let map = map_from(&codes, 20, 20);
        let config = PostprocessConfig {
            median_window: 3,
            dilate_radius: 1,
            smooth: SmoothMode::Median,
        };
        let out = postprocess(&map, &config).unwrap();
        let expected = dilate_brute(&median_filter(&map, 3).unwrap(), 1);
        assert_eq!(out.cells(), expected.as_slice());
        // The block itself is intact and its 4-neighbors joined it.
        assert_eq!(out.get(8, 8), LabelClass::Invasive);
        assert_eq!(out.get(4, 8), LabelClass::Invasive);
        assert_eq!(out.get(8, 4), LabelClass::Invasive);
        assert_eq!(out.get(3, 8), LabelClass::Normal);
    }

    #[test]
    fn constant_backend_fills_map() {
        let slide = RasterImage::filled(96, 64, 3, 200, 1.0);
        let backend = ConstantBackend {
            class: LabelClass::Invasive,
            patch_pixel_size: 16,
        };
        let config = SegmentConfig {
            downsample: 1.0,
            patch_pixel_size: 16,
            stride: 32,
            batch_size: 4,
        };
        let map = segment(&slide, "s", &backend, &config, None).unwrap();
        assert_eq!((map.width(), map.height()), (3, 2));
        assert!(map.cells().iter().all(|&c| c == LabelClass::Invasive));
        assert_eq!(map.total_downsample(), 32.0);
    }

    #[test]
    fn cell_dims_use_ceiling() {
        assert_eq!(cell_dims(1024, 1024, 32), (32, 32));
        assert_eq!(cell_dims(1000, 500, 32), (32, 16));
        assert_eq!(cell_dims(1, 1, 32), (1, 1));
        assert_eq!(cell_dims(33, 64, 32), (2, 2));
    }

    #[test]
    fn downsample_bookkeeping_is_144() {
        let config = SegmentConfig::default();
        assert_eq!(config.downsample * config.stride as f64, 144.0);
        // 4608 level-0 px at downsample 4.5 -> 1024 classifier px ->
        // 32 cells; one cell covers 144 level-0 px.
        assert_eq!(crate::imaging::scaled_dimension(4608, 4.5), 1024);
        assert_eq!(cell_dims(1024, 1024, 32), (32, 32));
    }

    #[test]
    fn segment_checks_declared_backend_resolution() {
        struct Picky;
        impl ClassifierBackend for Picky {
            fn metadata(&self) -> BackendMetadata {
                BackendMetadata {
                    patch_pixel_size: 16,
                    expected_um_per_px: Some(2.1),
                    stats_ref: None,
                }
            }
            fn classify_batch(&self, batch: &PatchBatch) -> Result<Vec<[f64; 4]>, SegmentError> {
                Ok(vec![[1.0, 0.0, 0.0, 0.0]; batch.patches.len()])
            }
        }
        let slide = RasterImage::filled(64, 64, 3, 200, 0.467);
        let good = SegmentConfig {
            downsample: 4.5,
            patch_pixel_size: 16,
            stride: 32,
            batch_size: 4,
        };
        // 0.467 * 4.5 = 2.1015, inside the 1e-3 relative tolerance of 2.1.
        assert!(segment(&slide, "s", &Picky, &good, None).is_ok());
        let bad = SegmentConfig {
            downsample: 2.0,
            ..good
        };
        assert!(matches!(
            segment(&slide, "s", &Picky, &bad, None),
            Err(SegmentError::ResolutionMismatch { .. })
        ));
    }

    #[test]
    fn segment_rejects_patch_size_mismatch() {
        let slide = RasterImage::filled(64, 64, 3, 200, 1.0);
        let backend = ConstantBackend {
            class: LabelClass::Normal,
            patch_pixel_size: 157,
        };
        let config = SegmentConfig {
            downsample: 1.0,
            patch_pixel_size: 16,
            stride: 32,
            batch_size: 4,
        };
        assert!(matches!(
            segment(&slide, "s", &backend, &config, None),
            Err(SegmentError::PatchSizeMismatch { .. })
        ));
    }

    #[test]
    fn segment_with_ground_truth_backend_matches_rasterize() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..5 {
            let w = rng.gen_range(100..300);
            let h = rng.gen_range(100..300);
            let slide = RasterImage::filled(w, h, 3, 210, 1.0);
            let mut regions = Vec::new();
            for _ in 0..rng.gen_range(1..4) {
                let x0 = rng.gen_range(0.0..w as f64 * 0.7);
                let y0 = rng.gen_range(0.0..h as f64 * 0.7);
                let side = rng.gen_range(20.0..80.0);
                let class = LabelClass::from_code(rng.gen_range(1..4)).unwrap();
                regions.push(AnnotationSet::rect_region(class, x0, y0, x0 + side, y0 + side));
            }
            let set = AnnotationSet::new("s", regions);
            let backend = GroundTruthBackend {
                annotations: &set,
                patch_pixel_size: 24,
                downsample: 1.0,
            };
            let config = SegmentConfig {
                downsample: 1.0,
                patch_pixel_size: 24,
                stride: 16,
                batch_size: 7,
            };
            let map = segment(&slide, "s", &backend, &config, None).unwrap();
            let grid = segment_grid(w, h, 16).unwrap();
            let truth = set.rasterize(&grid);
            assert_eq!(map.cells(), truth.cells());
            assert_eq!((map.width(), map.height()), (truth.width(), truth.height()));
        }
    }

    #[test]
    fn segment_skips_fully_background_cells() {
        let slide = RasterImage::filled(64, 64, 3, 200, 1.0);
        // Mask: only the top-left 32x32 cell contains any foreground.
        let mut bits = vec![false; 64 * 64];
        bits[5 * 64 + 5] = true;
        let mask = TissueMask::new(64, 64, bits, 1.0, MaskScope::FullResolutionGrid).unwrap();
        let backend = ConstantBackend {
            class: LabelClass::Invasive,
            patch_pixel_size: 16,
        };
        let config = SegmentConfig {
            downsample: 1.0,
            patch_pixel_size: 16,
            stride: 32,
            batch_size: 4,
        };
        let map = segment(&slide, "s", &backend, &config, Some(&mask)).unwrap();
        assert_eq!(map.get(0, 0), LabelClass::Invasive);
        assert_eq!(map.get(1, 0), LabelClass::Normal);
        assert_eq!(map.get(0, 1), LabelClass::Normal);
        assert_eq!(map.get(1, 1), LabelClass::Normal);
    }

    #[test]
    fn label_map_png_roundtrip() {
        let dir = tempfile::TempDir::new().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let map = random_map(&mut rng, 14, 11);
        let path = dir.path().join("map.png");
        export_label_map(&map, &path).unwrap();
        let back = import_label_map(&path).unwrap();
        assert_eq!(back, map);
    }

    #[test]
    fn all_normal_map_is_all_white() {
        let dir = tempfile::TempDir::new().unwrap();
        let map = LabelMap::filled(4, 4, LabelClass::Normal, 32, 144.0, "s");
        let path = dir.path().join("map.png");
        export_label_map(&map, &path).unwrap();
        let (_, _, indices, palette) = read_indexed_png(&path).unwrap();
        assert!(indices.iter().all(|&i| i == 0));
        assert_eq!(&palette[0..3], &[255, 255, 255]);
    }

    #[test]
    fn import_rejects_wrong_palette() {
        let dir = tempfile::TempDir::new().unwrap();
        let path = dir.path().join("map.png");
        let bad_palette = [0u8, 0, 0, 1, 1, 1, 2, 2, 2, 3, 3, 3];
        write_indexed_png(&path, 2, 2, &[0, 1, 2, 3], &bad_palette).unwrap();
        let mut sidecar = Sidecar::new();
        sidecar.set("stride", 32).set("downsample", 144.0).set("slide_id", "s");
        write_sidecar(&path, &sidecar).unwrap();
        assert!(matches!(import_label_map(&path), Err(SegmentError::Palette(_))));
    }

    #[test]
    fn import_expecting_flags_downsample_mismatch() {
        let dir = tempfile::TempDir::new().unwrap();
        let map = LabelMap::filled(4, 4, LabelClass::Benign, 32, 144.0, "s");
        let path = dir.path().join("map.png");
        export_label_map(&map, &path).unwrap();
        assert!(import_label_map_expecting(&path, 32, 144.0).is_ok());
        assert!(matches!(
            import_label_map_expecting(&path, 32, 128.0),
            Err(SegmentError::SidecarMismatch { .. })
        ));
        assert!(matches!(
            import_label_map_expecting(&path, 16, 144.0),
            Err(SegmentError::SidecarMismatch { .. })
        ));
    }

    #[test]
    fn external_process_backend_roundtrip() {
        // Fake classifier: a shell script emitting fixed probabilities.
        let dir = tempfile::TempDir::new().unwrap();
        let script = dir.path().join("classify.sh");
        std::fs::write(
            &script,
            "#!/bin/sh\nd=\"$1\"\ni=0\nfor f in \"$d\"/patch_*.png; do\n  echo \"$i 0.1 0.2 0.3 0.4\" >> \"$d/probs.txt\"\n  i=$((i+1))\ndone\n",
        )
        .unwrap();
        #[cfg(unix)]
        {
            use std::os::unix::fs::PermissionsExt;
            std::fs::set_permissions(&script, std::fs::Permissions::from_mode(0o755)).unwrap();
        }
        let backend = ExternalProcessBackend {
            command: vec![script.to_string_lossy().into_owned()],
            patch_pixel_size: 8,
            expected_um_per_px: None,
            work_dir: dir.path().join("work"),
        };
        let slide = RasterImage::filled(16, 16, 3, 128, 1.0);
        let config = SegmentConfig {
            downsample: 1.0,
            patch_pixel_size: 8,
            stride: 8,
            batch_size: 3,
        };
        let map = segment(&slide, "s", &backend, &config, None).unwrap();
        assert!(map.cells().iter().all(|&c| c == LabelClass::Invasive));
    }
}
