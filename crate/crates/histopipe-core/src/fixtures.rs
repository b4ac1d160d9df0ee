//! Deterministic synthetic fixtures: stained-tissue-like slides with
//! known annotations, so every pipeline stage is testable without any
//! external dataset.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::annotations::AnnotationSet;
use crate::imaging::{LabelClass, RasterImage};

/// Base color per tissue class: saturated, mutually distinguishable, and
/// clearly separated from near-white glass so Otsu masking works.
pub fn class_color(class: LabelClass) -> [u8; 3] {
    match class {
        LabelClass::Normal => [226, 168, 192],
        LabelClass::Benign => [124, 202, 144],
        LabelClass::InSitu => [122, 144, 222],
        LabelClass::Invasive => [222, 118, 118],
    }
}

pub const GLASS_COLOR: [u8; 3] = [246, 245, 247];

#[derive(Debug, Clone)]
pub struct FixtureSlide {
    pub image: RasterImage,
    pub annotations: AnnotationSet,
}

/// Synthetic slide: a tissue section of normal-stained texture over
/// glass, with rectangular lesion regions of classes 1..3 recorded as
/// annotations. Deterministic per seed.
pub fn synthetic_slide(
    slide_id: &str,
    width: u32,
    height: u32,
    um_per_px: f64,
    lesions: usize,
    seed: u64,
) -> FixtureSlide {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity((width * height * 3) as usize);
    // Tissue occupies a centered rounded blob; outside is glass.
    let tissue_x0 = width as f64 * 0.08;
    let tissue_x1 = width as f64 * 0.92;
    let tissue_y0 = height as f64 * 0.08;
    let tissue_y1 = height as f64 * 0.92;
    let mut regions = Vec::new();
    let mut rects: Vec<(f64, f64, f64, f64, LabelClass)> = Vec::new();
    for i in 0..lesions {
        let class = LabelClass::from_code(1 + (i % 3) as u8).unwrap();
        let side_x = rng.gen_range(width as f64 * 0.1..width as f64 * 0.3);
        let side_y = rng.gen_range(height as f64 * 0.1..height as f64 * 0.3);
        let x0 = rng.gen_range(tissue_x0..(tissue_x1 - side_x));
        let y0 = rng.gen_range(tissue_y0..(tissue_y1 - side_y));
        rects.push((x0, y0, x0 + side_x, y0 + side_y, class));
        regions.push(AnnotationSet::rect_region(class, x0, y0, x0 + side_x, y0 + side_y));
    }
    for y in 0..height {
        for x in 0..width {
            let fx = x as f64;
            let fy = y as f64;
            let in_tissue =
                fx >= tissue_x0 && fx < tissue_x1 && fy >= tissue_y0 && fy < tissue_y1;
            let base = if in_tissue {
                // Highest class wins where lesions overlap, matching the
                // annotation lookup.
                let mut class = LabelClass::Normal;
                for &(x0, y0, x1, y1, c) in &rects {
                    if fx >= x0 && fx < x1 && fy >= y0 && fy < y1 && c > class {
                        class = c;
                    }
                }
                class_color(class)
            } else {
                GLASS_COLOR
            };
            for c in 0..3 {
                let noise: i16 = rng.gen_range(-8..=8);
                data.push((base[c] as i16 + noise).clamp(0, 255) as u8);
            }
        }
    }
    let image = RasterImage::new(width, height, 3, data, um_per_px).expect("fixture dims valid");
    FixtureSlide {
        image,
        annotations: AnnotationSet::new(slide_id, regions),
    }
}

/// Labeled single-class patches with mild noise; `per_class` of each of
/// the four classes, in class order.
pub fn synthetic_patch_set(
    per_class: usize,
    size: u32,
    seed: u64,
) -> Vec<(RasterImage, LabelClass)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(per_class * 4);
    for class in LabelClass::ALL {
        for _ in 0..per_class {
            let base = class_color(class);
            let mut data = Vec::with_capacity((size * size * 3) as usize);
            for _ in 0..size * size {
                for c in 0..3 {
                    let noise: i16 = rng.gen_range(-12..=12);
                    data.push((base[c] as i16 + noise).clamp(0, 255) as u8);
                }
            }
            out.push((
                RasterImage::new(size, size, 3, data, 1.0).expect("fixture dims valid"),
                class,
            ));
        }
    }
    out
}
