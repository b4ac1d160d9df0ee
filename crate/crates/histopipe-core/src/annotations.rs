//! Polygonal region annotations per slide and class lookup at points.
//!
//! Unannotated area is implicitly normal; overlapping regions resolve to
//! the highest class code, mirroring the priority order used by label-map
//! post-processing.

use std::fmt::Write as _;

use thiserror::Error;

use crate::extraction::GridSpec;
use crate::imaging::LabelClass;
use crate::segmentation::LabelMap;

#[derive(Debug, Error)]
pub enum AnnotationError {
    #[error("polygon needs at least 3 vertices, got {0}")]
    TooFewVertices(usize),
    #[error("polygon has zero area")]
    ZeroArea,
    #[error("region class must be benign, in situ or invasive; got {0}")]
    BadRegionClass(u8),
    #[error("annotation line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// How extraction treats a grid center outside every region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UnannotatedPolicy {
    /// Label it normal (class 0).
    #[default]
    Normal,
    /// Drop it; used for partially annotated slides.
    Exclude,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    class: LabelClass,
    polygon: Vec<(f64, f64)>,
}

impl Region {
    pub fn new(class: LabelClass, polygon: Vec<(f64, f64)>) -> Result<Region, AnnotationError> {
        if class == LabelClass::Normal {
            return Err(AnnotationError::BadRegionClass(0));
        }
        if polygon.len() < 3 {
            return Err(AnnotationError::TooFewVertices(polygon.len()));
        }
        if shoelace_area(&polygon) == 0.0 {
            return Err(AnnotationError::ZeroArea);
        }
        Ok(Region { class, polygon })
    }

    pub fn class(&self) -> LabelClass {
        self.class
    }

    pub fn polygon(&self) -> &[(f64, f64)] {
        &self.polygon
    }

    /// Even-odd containment with a half-open edge rule: an edge counts as
    /// crossing when exactly one endpoint lies strictly above the query
    /// row, so a point exactly on a horizontal upper edge is outside.
    pub fn contains(&self, point: (f64, f64)) -> bool {
        let (px, py) = point;
        let mut inside = false;
        let n = self.polygon.len();
        for i in 0..n {
            let a = self.polygon[i];
            let b = self.polygon[(i + 1) % n];
            if (a.1 < py) != (b.1 < py) {
                let x_cross = a.0 + (py - a.1) * (b.0 - a.0) / (b.1 - a.1);
                if px < x_cross {
                    inside = !inside;
                }
            }
        }
        inside
    }
}

fn shoelace_area(polygon: &[(f64, f64)]) -> f64 {
    let n = polygon.len();
    let mut acc = 0.0;
    for i in 0..n {
        let (x0, y0) = polygon[i];
        let (x1, y1) = polygon[(i + 1) % n];
        acc += x0 * y1 - x1 * y0;
    }
    acc.abs() / 2.0
}

/// All annotated regions of one slide, in level-0 pixel coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationSet {
    slide_id: String,
    regions: Vec<Region>,
    unannotated_policy: UnannotatedPolicy,
}

impl AnnotationSet {
    pub fn new(slide_id: impl Into<String>, regions: Vec<Region>) -> AnnotationSet {
        AnnotationSet {
            slide_id: slide_id.into(),
            regions,
            unannotated_policy: UnannotatedPolicy::Normal,
        }
    }

    pub fn with_policy(mut self, policy: UnannotatedPolicy) -> AnnotationSet {
        self.unannotated_policy = policy;
        self
    }

    pub fn slide_id(&self) -> &str {
        &self.slide_id
    }

    pub fn regions(&self) -> &[Region] {
        &self.regions
    }

    pub fn unannotated_policy(&self) -> UnannotatedPolicy {
        self.unannotated_policy
    }

    /// Class at a level-0 point: highest class code among containing
    /// regions, class 0 when none contains it.
    pub fn class_at_point(&self, point: (f64, f64)) -> LabelClass {
        self.regions
            .iter()
            .filter(|r| r.contains(point))
            .map(|r| r.class)
            .max()
            .unwrap_or(LabelClass::Normal)
    }

    /// Like [`Self::class_at_point`] but honoring the unannotated policy:
    /// `None` means the point should be dropped.
    pub fn label_at(&self, point: (f64, f64)) -> Option<LabelClass> {
        let hit = self
            .regions
            .iter()
            .filter(|r| r.contains(point))
            .map(|r| r.class)
            .max();
        match (hit, self.unannotated_policy) {
            (Some(class), _) => Some(class),
            (None, UnannotatedPolicy::Normal) => Some(LabelClass::Normal),
            (None, UnannotatedPolicy::Exclude) => None,
        }
    }

    /// Ground-truth label map: [`Self::class_at_point`] at every grid
    /// center, row-major.
    pub fn rasterize(&self, grid: &GridSpec) -> LabelMap {
        let (cols, rows) = grid.shape();
        let cells: Vec<LabelClass> = grid
            .centers()
            .map(|(cx, cy)| self.class_at_point((cx as f64, cy as f64)))
            .collect();
        LabelMap::new(
            cols,
            rows,
            cells,
            grid.spacing(),
            grid.spacing() as f64,
            self.slide_id.clone(),
        )
        .expect("grid shape matches cell count")
    }

    /// Line-delimited text form: one `class=<c>; points=x,y x,y ...`
    /// record per region.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# annotations for slide {}", self.slide_id);
        for region in &self.regions {
            let _ = write!(out, "class={}; points=", region.class.code());
            for (i, (x, y)) in region.polygon.iter().enumerate() {
                if i > 0 {
                    out.push(' ');
                }
                let _ = write!(out, "{x},{y}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(slide_id: impl Into<String>, text: &str) -> Result<AnnotationSet, AnnotationError> {
        let mut regions = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parse_err = |message: String| AnnotationError::Parse {
                line: lineno + 1,
                message,
            };
            let (class_part, points_part) = line
                .split_once(';')
                .ok_or_else(|| parse_err("expected `class=<c>; points=...`".into()))?;
            let class_str = class_part
                .trim()
                .strip_prefix("class=")
                .ok_or_else(|| parse_err("missing `class=` field".into()))?;
            let code: u8 = class_str
                .trim()
                .parse()
                .map_err(|_| parse_err(format!("bad class `{class_str}`")))?;
            let class = LabelClass::from_code(code)
                .filter(|c| *c != LabelClass::Normal)
                .ok_or_else(|| parse_err(format!("class must be 1, 2 or 3, got {code}")))?;
            let points_str = points_part
                .trim()
                .strip_prefix("points=")
                .ok_or_else(|| parse_err("missing `points=` field".into()))?;
            let mut polygon = Vec::new();
            for pair in points_str.split_whitespace() {
                let (xs, ys) = pair
                    .split_once(',')
                    .ok_or_else(|| parse_err(format!("bad point `{pair}`")))?;
                let x: f64 = xs.parse().map_err(|_| parse_err(format!("bad x `{xs}`")))?;
                let y: f64 = ys.parse().map_err(|_| parse_err(format!("bad y `{ys}`")))?;
                polygon.push((x, y));
            }
            regions.push(Region::new(class, polygon).map_err(|e| parse_err(e.to_string()))?);
        }
        Ok(AnnotationSet::new(slide_id, regions))
    }

    /// Convenience for tests and fixtures: an axis-aligned rectangle
    /// region spanning `[x0, x1) x [y0, y1)`.
    pub fn rect_region(class: LabelClass, x0: f64, y0: f64, x1: f64, y1: f64) -> Region {
        Region::new(class, vec![(x0, y0), (x1, y0), (x1, y1), (x0, y1)])
            .expect("rectangle is a valid region")
    }
}
