//! The persisted catalog of an extraction run: one record per patch plus
//! per-class counts, optional dataset statistics and split assignments.
//!
//! The on-disk form is line-oriented text with a versioned header so
//! experiment bookkeeping stays diff-friendly:
//!
//! ```text
//! HISTOPIPE-MANIFEST v1
//! seed: 42
//! counts: 120, 8, 3, 40
//! slide_a, 353, 353, 0, 330, 157, patches/4f2e....png
//! ...
//! [stats]
//! count: 171
//! mean: 201.4, 163.2, 181.9
//! std: 44.1, 40.0, 38.5
//! [split]
//! kind: holdout
//! train_fraction: 0.8
//! assignment: ttvtt...
//! ```

use std::path::Path;

use crate::imaging::{DatasetStats, LabelClass};
use crate::io::FormatError;

pub const MANIFEST_HEADER: &str = "HISTOPIPE-MANIFEST v1";

/// One extracted, labeled patch.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchRecord {
    pub slide_id: String,
    /// Level-0 pixel coordinates of the patch center.
    pub center: (i64, i64),
    pub label: LabelClass,
    /// Physical side length in micrometers.
    pub physical_um: f64,
    /// Pixel side length of the stored payload.
    pub pixel_px: u32,
    /// Payload file, relative to the manifest location.
    pub payload_path: String,
}

impl PatchRecord {
    /// Micrometers per payload pixel.
    pub fn um_per_px(&self) -> f64 {
        self.physical_um / self.pixel_px as f64
    }
}

/// Train/validation side of a holdout split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SplitAssignment {
    Holdout {
        train_fraction: f64,
        assignment: Vec<Split>,
    },
    KFold {
        k: u32,
        fold_of: Vec<u32>,
        /// Set when some class had fewer members than folds, so not every
        /// fold sees every class.
        degraded: bool,
    },
}

impl SplitAssignment {
    pub fn len(&self) -> usize {
        match self {
            SplitAssignment::Holdout { assignment, .. } => assignment.len(),
            SplitAssignment::KFold { fold_of, .. } => fold_of.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<PatchRecord>,
    pub per_class_counts: [u64; 4],
    pub stats: Option<DatasetStats>,
    pub split: Option<SplitAssignment>,
    pub seed: u64,
}

impl DatasetManifest {
    pub fn new(records: Vec<PatchRecord>, seed: u64) -> DatasetManifest {
        let per_class_counts = count_labels(&records);
        DatasetManifest {
            records,
            per_class_counts,
            stats: None,
            split: None,
            seed,
        }
    }

    pub fn total(&self) -> u64 {
        self.per_class_counts.iter().sum()
    }

    /// Per-class counts must equal a recount of record labels and sum to
    /// the record count; every split must cover every record.
    pub fn check_consistency(&self) -> Result<(), String> {
        let recount = count_labels(&self.records);
        if recount != self.per_class_counts {
            return Err(format!(
                "per_class_counts {:?} != recount {:?}",
                self.per_class_counts, recount
            ));
        }
        if self.total() != self.records.len() as u64 {
            return Err(format!(
                "counts sum {} != record count {}",
                self.total(),
                self.records.len()
            ));
        }
        if let Some(split) = &self.split {
            if split.len() != self.records.len() {
                return Err(format!(
                    "split assignment covers {} records, manifest has {}",
                    split.len(),
                    self.records.len()
                ));
            }
        }
        Ok(())
    }

    /// Record indices on the requested side of the holdout split.
    pub fn split_indices(&self, side: Split) -> Option<Vec<usize>> {
        match &self.split {
            Some(SplitAssignment::Holdout { assignment, .. }) => Some(
                assignment
                    .iter()
                    .enumerate()
                    .filter(|(_, s)| **s == side)
                    .map(|(i, _)| i)
                    .collect(),
            ),
            _ => None,
        }
    }

    pub fn labels(&self) -> Vec<LabelClass> {
        self.records.iter().map(|r| r.label).collect()
    }

    /// Summary line in the per-class reporting style used everywhere:
    /// total first, then normal/benign/in situ/invasive.
    pub fn count_summary(&self) -> String {
        format!(
            "{} patches: {} normal, {} benign, {} in situ, {} invasive",
            self.total(),
            self.per_class_counts[0],
            self.per_class_counts[1],
            self.per_class_counts[2],
            self.per_class_counts[3]
        )
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from(MANIFEST_HEADER);
        out.push('\n');
        out.push_str(&format!("seed: {}\n", self.seed));
        out.push_str(&format!(
            "counts: {}, {}, {}, {}\n",
            self.per_class_counts[0],
            self.per_class_counts[1],
            self.per_class_counts[2],
            self.per_class_counts[3]
        ));
        for r in &self.records {
            out.push_str(&format!(
                "{}, {}, {}, {}, {}, {}, {}\n",
                r.slide_id,
                r.center.0,
                r.center.1,
                r.label.code(),
                r.physical_um,
                r.pixel_px,
                r.payload_path
            ));
        }
        if let Some(stats) = &self.stats {
            out.push_str("[stats]\n");
            out.push_str(&format!("count: {}\n", stats.sample_count));
            out.push_str(&format!("mean: {}\n", join_f64(&stats.per_channel_mean)));
            out.push_str(&format!("std: {}\n", join_f64(&stats.per_channel_std)));
        }
        if let Some(split) = &self.split {
            out.push_str("[split]\n");
            match split {
                SplitAssignment::Holdout {
                    train_fraction,
                    assignment,
                } => {
                    out.push_str("kind: holdout\n");
                    out.push_str(&format!("train_fraction: {train_fraction}\n"));
                    let encoded: String = assignment
                        .iter()
                        .map(|s| match s {
                            Split::Train => 't',
                            Split::Val => 'v',
                        })
                        .collect();
                    out.push_str(&format!("assignment: {encoded}\n"));
                }
                SplitAssignment::KFold { k, fold_of, degraded } => {
                    out.push_str("kind: kfold\n");
                    out.push_str(&format!("k: {k}\n"));
                    out.push_str(&format!("degraded: {degraded}\n"));
                    let encoded: Vec<String> = fold_of.iter().map(|f| f.to_string()).collect();
                    out.push_str(&format!("fold_of: {}\n", encoded.join(",")));
                }
            }
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<(), FormatError> {
        crate::io::write_text(path, &self.to_text())
    }

    pub fn read(path: &Path) -> Result<DatasetManifest, FormatError> {
        let text = std::fs::read_to_string(path).map_err(|e| FormatError::io(path, e))?;
        Self::from_text(path, &text)
    }

    pub fn from_text(path: &Path, text: &str) -> Result<DatasetManifest, FormatError> {
        let mut lines = text.lines().enumerate();
        let header = lines.next().map(|(_, l)| l.trim()).unwrap_or("");
        if header != MANIFEST_HEADER {
            return Err(FormatError::BadHeader {
                path: path.to_path_buf(),
                expected: MANIFEST_HEADER.to_string(),
                found: header.to_string(),
            });
        }
        let mut seed = 0u64;
        let mut counts = [0u64; 4];
        let mut records = Vec::new();
        let mut stats_fields: Vec<(usize, String, String)> = Vec::new();
        let mut split_fields: Vec<(usize, String, String)> = Vec::new();
        #[derive(PartialEq)]
        enum Section {
            Records,
            Stats,
            Split,
        }
        let mut section = Section::Records;
        for (i, raw) in lines {
            let line = raw.trim();
            let lineno = i + 1;
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            match line {
                "[stats]" => {
                    section = Section::Stats;
                    continue;
                }
                "[split]" => {
                    section = Section::Split;
                    continue;
                }
                _ if line.starts_with('[') => {
                    return Err(FormatError::record(path, lineno, format!("unknown section {line}")));
                }
                _ => {}
            }
            match section {
                Section::Records => {
                    if let Some(v) = line.strip_prefix("seed:") {
                        seed = v.trim().parse().map_err(|_| {
                            FormatError::record(path, lineno, format!("bad seed `{v}`"))
                        })?;
                        continue;
                    }
                    if let Some(v) = line.strip_prefix("counts:") {
                        let parts: Vec<&str> = v.split(',').map(|s| s.trim()).collect();
                        if parts.len() != 4 {
                            return Err(FormatError::record(path, lineno, "counts needs 4 values"));
                        }
                        for (c, p) in counts.iter_mut().zip(parts) {
                            *c = p.parse().map_err(|_| {
                                FormatError::record(path, lineno, format!("bad count `{p}`"))
                            })?;
                        }
                        continue;
                    }
                    records.push(parse_record(path, lineno, line)?);
                }
                Section::Stats => {
                    let (k, v) = split_kv(path, lineno, line)?;
                    stats_fields.push((lineno, k, v));
                }
                Section::Split => {
                    let (k, v) = split_kv(path, lineno, line)?;
                    split_fields.push((lineno, k, v));
                }
            }
        }
        let stats = if stats_fields.is_empty() {
            None
        } else {
            Some(parse_stats(path, &stats_fields)?)
        };
        let split = if split_fields.is_empty() {
            None
        } else {
            Some(parse_split(path, &split_fields)?)
        };
        let manifest = DatasetManifest {
            records,
            per_class_counts: counts,
            stats,
            split,
            seed,
        };
        manifest
            .check_consistency()
            .map_err(|e| FormatError::record(path, 0, e))?;
        Ok(manifest)
    }
}

fn count_labels(records: &[PatchRecord]) -> [u64; 4] {
    let mut counts = [0u64; 4];
    for r in records {
        counts[r.label.code() as usize] += 1;
    }
    counts
}

fn join_f64(values: &[f64]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(", ")
}

fn split_kv(path: &Path, lineno: usize, line: &str) -> Result<(String, String), FormatError> {
    line.split_once(':')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| FormatError::record(path, lineno, "expected `key: value`"))
}

fn parse_record(path: &Path, lineno: usize, line: &str) -> Result<PatchRecord, FormatError> {
    let parts: Vec<&str> = line.split(',').map(|s| s.trim()).collect();
    if parts.len() != 7 {
        return Err(FormatError::record(
            path,
            lineno,
            format!("expected 7 fields, got {}", parts.len()),
        ));
    }
    let err = |field: &str, value: &str| {
        FormatError::record(path, lineno, format!("bad {field} `{value}`"))
    };
    let label_code: u8 = parts[3].parse().map_err(|_| err("label", parts[3]))?;
    Ok(PatchRecord {
        slide_id: parts[0].to_string(),
        center: (
            parts[1].parse().map_err(|_| err("center_x", parts[1]))?,
            parts[2].parse().map_err(|_| err("center_y", parts[2]))?,
        ),
        label: LabelClass::from_code(label_code)
            .ok_or_else(|| err("label", parts[3]))?,
        physical_um: parts[4].parse().map_err(|_| err("physical_um", parts[4]))?,
        pixel_px: parts[5].parse().map_err(|_| err("pixel_px", parts[5]))?,
        payload_path: parts[6].to_string(),
    })
}

fn parse_f64_list(path: &Path, lineno: usize, v: &str) -> Result<Vec<f64>, FormatError> {
    v.split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| FormatError::record(path, lineno, format!("bad number `{s}`")))
        })
        .collect()
}

fn parse_stats(path: &Path, fields: &[(usize, String, String)]) -> Result<DatasetStats, FormatError> {
    let mut count = None;
    let mut mean = None;
    let mut std = None;
    for (lineno, k, v) in fields {
        match k.as_str() {
            "count" => {
                count = Some(v.parse().map_err(|_| {
                    FormatError::record(path, *lineno, format!("bad count `{v}`"))
                })?)
            }
            "mean" => mean = Some(parse_f64_list(path, *lineno, v)?),
            "std" => std = Some(parse_f64_list(path, *lineno, v)?),
            other => {
                return Err(FormatError::record(
                    path,
                    *lineno,
                    format!("unknown stats key `{other}`"),
                ))
            }
        }
    }
    match (count, mean, std) {
        (Some(sample_count), Some(per_channel_mean), Some(per_channel_std)) => Ok(DatasetStats {
            per_channel_mean,
            per_channel_std,
            sample_count,
        }),
        _ => Err(FormatError::record(path, 0, "stats section needs count, mean and std")),
    }
}

fn parse_split(path: &Path, fields: &[(usize, String, String)]) -> Result<SplitAssignment, FormatError> {
    let get = |key: &str| -> Option<&(usize, String, String)> {
        fields.iter().find(|(_, k, _)| k == key)
    };
    let kind = get("kind").ok_or_else(|| FormatError::record(path, 0, "split section needs kind"))?;
    for (lineno, k, _) in fields {
        let known = match kind.2.as_str() {
            "holdout" => matches!(k.as_str(), "kind" | "train_fraction" | "assignment"),
            _ => matches!(k.as_str(), "kind" | "k" | "degraded" | "fold_of"),
        };
        if !known {
            return Err(FormatError::record(path, *lineno, format!("unknown split key `{k}`")));
        }
    }
    match kind.2.as_str() {
        "holdout" => {
            let frac = get("train_fraction")
                .ok_or_else(|| FormatError::record(path, 0, "holdout split needs train_fraction"))?;
            let train_fraction: f64 = frac.2.parse().map_err(|_| {
                FormatError::record(path, frac.0, format!("bad train_fraction `{}`", frac.2))
            })?;
            let assignment_field = get("assignment")
                .ok_or_else(|| FormatError::record(path, 0, "holdout split needs assignment"))?;
            let assignment = assignment_field
                .2
                .chars()
                .map(|c| match c {
                    't' => Ok(Split::Train),
                    'v' => Ok(Split::Val),
                    other => Err(FormatError::record(
                        path,
                        assignment_field.0,
                        format!("bad assignment char `{other}`"),
                    )),
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok(SplitAssignment::Holdout {
                train_fraction,
                assignment,
            })
        }
        "kfold" => {
            let k_field = get("k").ok_or_else(|| FormatError::record(path, 0, "kfold split needs k"))?;
            let k: u32 = k_field
                .2
                .parse()
                .map_err(|_| FormatError::record(path, k_field.0, format!("bad k `{}`", k_field.2)))?;
            let degraded = match get("degraded") {
                Some((lineno, _, v)) => v.parse().map_err(|_| {
                    FormatError::record(path, *lineno, format!("bad degraded flag `{v}`"))
                })?,
                None => false,
            };
            let folds_field = get("fold_of")
                .ok_or_else(|| FormatError::record(path, 0, "kfold split needs fold_of"))?;
            let fold_of = folds_field
                .2
                .split(',')
                .map(|s| {
                    s.trim().parse().map_err(|_| {
                        FormatError::record(path, folds_field.0, format!("bad fold index `{s}`"))
                    })
                })
                .collect::<Result<Vec<u32>, _>>()?;
            Ok(SplitAssignment::KFold { k, fold_of, degraded })
        }
        other => Err(FormatError::record(
            path,
            kind.0,
            format!("unknown split kind `{other}`"),
        )),
    }
}
