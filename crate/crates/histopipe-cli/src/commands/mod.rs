//! Command implementations: thin orchestration over the library modules
//! plus path resolution, reproducibility records and exit-code mapping.

pub mod dataset;
pub mod extract;
pub mod report;
pub mod segmenting;
pub mod training;

use std::path::{Path, PathBuf};

use histopipe_core::imaging::{LabelClass, RasterImage};
use histopipe_core::io::FormatError;
use histopipe_core::manifest::DatasetManifest;
use histopipe_core::net::{Dtype, LrDecay, NetworkSpec, Phase, Scope, TrainSchedule, TransitionPool};
use histopipe_core::Error as CoreError;

use crate::config::{ConfigError, KeyedBlock, RunConfig};

/// Failure classes map straight onto exit codes: 2 usage/config,
/// 3 missing inputs, 4 data format, 5 processing.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    MissingInput(PathBuf),
    Format(String),
    Process(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::MissingInput(_) => 3,
            CliError::Format(_) => 4,
            CliError::Process(_) => 5,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "config error: {m}"),
            CliError::MissingInput(p) => write!(f, "missing input: {}", p.display()),
            CliError::Format(m) => write!(f, "format error: {m}"),
            CliError::Process(m) => write!(f, "{m}"),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.0)
    }
}

fn io_not_found(e: &std::io::Error) -> bool {
    e.kind() == std::io::ErrorKind::NotFound
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match &e {
            CoreError::Format(FormatError::Io { path, source }) if io_not_found(source) => {
                CliError::MissingInput(path.clone())
            }
            CoreError::Segment(histopipe_core::segmentation::SegmentError::Format(
                FormatError::Io { path, source },
            )) if io_not_found(source) => CliError::MissingInput(path.clone()),
            CoreError::Format(_) => CliError::Format(e.to_string()),
            CoreError::Net(histopipe_core::net::NetError::WeightsFormat { .. }) => {
                CliError::Format(e.to_string())
            }
            _ => CliError::Process(e.to_string()),
        }
    }
}

impl From<FormatError> for CliError {
    fn from(e: FormatError) -> Self {
        CliError::from(CoreError::Format(e))
    }
}

impl From<histopipe_core::segmentation::SegmentError> for CliError {
    fn from(e: histopipe_core::segmentation::SegmentError) -> Self {
        CliError::from(CoreError::Segment(e))
    }
}

impl From<histopipe_core::net::NetError> for CliError {
    fn from(e: histopipe_core::net::NetError) -> Self {
        CliError::from(CoreError::Net(e))
    }
}

pub type CmdResult = Result<(), CliError>;

/// Resolved invocation context shared by every command.
pub struct Ctx {
    pub config: RunConfig,
    pub seed: u64,
    pub threads: usize,
    pub out: PathBuf,
}

impl Ctx {
    /// Pipeline artifacts live under the output directory; relative paths
    /// in artifact-role keys resolve there.
    pub fn artifact(&self, value: Option<String>, default: &str) -> PathBuf {
        let p = value.map(PathBuf::from).unwrap_or_else(|| PathBuf::from(default));
        if p.is_absolute() {
            p
        } else {
            self.out.join(p)
        }
    }

    /// Source data (slides, annotations, external commands) resolves
    /// against the working directory as typed.
    pub fn source(&self, value: &str) -> PathBuf {
        PathBuf::from(value)
    }

    /// Reproducibility record: config hash, seed, thread cap, crate
    /// version and a wall-clock stamp (the stamp is excluded from
    /// idempotency comparisons).
    pub fn write_run_record(&self, command: &str) -> CmdResult {
        let hash = histopipe_core::io::fnv1a64(self.config.raw_text.as_bytes());
        let timestamp = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let text = format!(
            "HISTOPIPE-RUN v1\ncommand: {command}\nconfig: {}\nconfig_hash: {hash:016x}\nseed: {}\nthreads: {}\nversion: {}\ntimestamp_unix: {timestamp}\n",
            self.config.path.display(),
            self.seed,
            self.threads,
            env!("CARGO_PKG_VERSION"),
        );
        let path = self.out.join(format!("run-{command}.txt"));
        std::fs::write(&path, text)
            .map_err(|e| CliError::Process(format!("writing {}: {e}", path.display())))
    }
}

pub fn require_input(path: &Path) -> CmdResult {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::MissingInput(path.to_path_buf()))
    }
}

/// Slide loader honoring an optional resolution override; without one
/// the sidecar is required.
pub fn load_slide(path: &Path, um_per_px: Option<f64>) -> Result<RasterImage, CliError> {
    require_input(path)?;
    match um_per_px {
        Some(res) => {
            let img = histopipe_core::io::read_image(path)?;
            img.with_resolution(res)
                .map_err(|e| CliError::Usage(format!("bad um_per_px: {e}")))
        }
        None => Ok(histopipe_core::io::read_image_with_meta(path)?),
    }
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest, CliError> {
    require_input(path)?;
    Ok(DatasetManifest::read(path)?)
}

/// Payload images for the given record indices, resolved against the
/// manifest's directory. PNG carries no um/px, so the resolution is
/// restored from each record's physical/pixel bookkeeping.
pub fn load_labeled_patches(
    manifest: &DatasetManifest,
    manifest_path: &Path,
    indices: &[usize],
) -> Result<Vec<(RasterImage, LabelClass)>, CliError> {
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    indices
        .iter()
        .map(|&i| {
            let record = &manifest.records[i];
            let path = base.join(&record.payload_path);
            require_input(&path)?;
            let img = histopipe_core::io::read_image(&path)?
                .with_resolution(record.um_per_px())
                .map_err(|e| CliError::Format(format!("{}: {e}", path.display())))?;
            Ok((img, record.label))
        })
        .collect()
}

pub fn parse_dtype(block: &mut KeyedBlock<'_>) -> Result<Dtype, CliError> {
    match block.take("dtype").as_deref() {
        None | Some("f32") => Ok(Dtype::F32),
        Some("f64") => Ok(Dtype::F64),
        Some(other) => Err(CliError::Usage(format!("dtype must be f32 or f64, got `{other}`"))),
    }
}

/// Network topology keys shared by train, evaluate, crossval and
/// segment: growth, blocks, initial_channels, bottleneck, compression,
/// pool.
pub fn parse_spec(block: &mut KeyedBlock<'_>) -> Result<NetworkSpec, CliError> {
    let growth = block.take_parsed_or("growth", 4usize)?;
    let blocks_raw = block.take("blocks").unwrap_or_else(|| "1".to_string());
    let block_layers: Vec<usize> = blocks_raw
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("bad blocks entry `{s}`")))
        })
        .collect::<Result<_, _>>()?;
    let initial_channels = block.take_parsed_or("initial_channels", 8usize)?;
    let bottleneck_factor = block.take_parsed_or("bottleneck", 4usize)?;
    let transition_compression = block.take_parsed_or("compression", 0.5f64)?;
    let transition_pool = match block.take("pool").as_deref() {
        None | Some("max") => TransitionPool::Max,
        Some("avg") => TransitionPool::Avg,
        Some(other) => return Err(CliError::Usage(format!("pool must be max or avg, got `{other}`"))),
    };
    let spec = NetworkSpec {
        input_channels: 3,
        num_classes: 4,
        initial_channels,
        growth_rate: growth,
        block_layers,
        bottleneck_factor,
        transition_compression,
        transition_pool,
    };
    spec.validate()?;
    Ok(spec)
}

/// Schedule keys: `phases: head:25:1e-3, full:250:2e-4`, `batch_size`,
/// `shuffle`, `lr_decay: 0.5:20`.
pub fn parse_schedule(block: &mut KeyedBlock<'_>) -> Result<TrainSchedule, CliError> {
    let phases_raw = block.take_required("phases")?;
    let mut phases = Vec::new();
    for part in phases_raw.split(',') {
        let fields: Vec<&str> = part.trim().split(':').collect();
        if fields.len() != 3 {
            return Err(CliError::Usage(format!(
                "phase `{part}` must be scope:epochs:lr"
            )));
        }
        let scope = Scope::from_name(fields[0])
            .ok_or_else(|| CliError::Usage(format!("unknown phase scope `{}`", fields[0])))?;
        let epochs: u32 = fields[1]
            .parse()
            .map_err(|_| CliError::Usage(format!("bad epochs `{}`", fields[1])))?;
        let learning_rate: f64 = fields[2]
            .parse()
            .map_err(|_| CliError::Usage(format!("bad learning rate `{}`", fields[2])))?;
        phases.push(Phase {
            scope,
            epochs,
            learning_rate,
        });
    }
    let batch_size = block.take_parsed_or("batch_size", 32usize)?;
    let shuffle_per_epoch = block.take_bool_or("shuffle", true)?;
    let lr_decay = match block.take("lr_decay") {
        None => None,
        Some(raw) => {
            let (f, n) = raw
                .split_once(':')
                .ok_or_else(|| CliError::Usage(format!("lr_decay `{raw}` must be factor:every_n")))?;
            Some(LrDecay {
                factor: f
                    .trim()
                    .parse()
                    .map_err(|_| CliError::Usage(format!("bad decay factor `{f}`")))?,
                every_n_epochs: n
                    .trim()
                    .parse()
                    .map_err(|_| CliError::Usage(format!("bad decay period `{n}`")))?,
            })
        }
    };
    let schedule = TrainSchedule {
        phases,
        batch_size,
        shuffle_per_epoch,
        lr_decay,
    };
    schedule.validate()?;
    Ok(schedule)
}

/// Augmentation keys, all optional behind `augment: on`.
pub fn parse_augmentation(
    block: &mut KeyedBlock<'_>,
) -> Result<Option<histopipe_core::augment::AugmentationConfig>, CliError> {
    use histopipe_core::augment::{AugmentationConfig, ColorJitterConfig};
    use histopipe_core::imaging::FillMode;
    let enabled = block.take_bool_or("augment", false)?;
    // Consume sub-keys either way so a disabled block is not "unknown".
    let rotate = block.take_bool_or("rotate", true)?;
    let flips = block.take_bool_or("flips", true)?;
    let scale_raw = block.take("scale").unwrap_or_else(|| "0.5,2.0".to_string());
    let shift = block.take_parsed_or("shift", 0.5f64)?;
    let fill = match block.take("fill").as_deref() {
        None | Some("nearest_edge") => FillMode::NearestEdge,
        Some("source_context") => FillMode::SourceContext,
        Some(other) => {
            return Err(CliError::Usage(format!(
                "fill must be nearest_edge or source_context, got `{other}`"
            )))
        }
    };
    let defaults = ColorJitterConfig::default();
    let color = ColorJitterConfig {
        max_brightness_delta: block.take_parsed_or("brightness", defaults.max_brightness_delta)?,
        max_saturation_delta: block.take_parsed_or("saturation", defaults.max_saturation_delta)?,
        max_hue_delta: block.take_parsed_or("hue", defaults.max_hue_delta)?,
        max_contrast_delta: block.take_parsed_or("contrast", defaults.max_contrast_delta)?,
    };
    if !enabled {
        return Ok(None);
    }
    let (lo, hi) = scale_raw
        .split_once(',')
        .ok_or_else(|| CliError::Usage(format!("scale `{scale_raw}` must be lo,hi")))?;
    let config = AugmentationConfig {
        rotate,
        flips,
        scale_range: (
            lo.trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("bad scale lo `{lo}`")))?,
            hi.trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("bad scale hi `{hi}`")))?,
        ),
        shift_fraction_max: shift,
        fill,
        color,
        seed: 0, // the training loop derives per-epoch seeds
    };
    config
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(Some(config))
}

/// Per-class cell census of a label map, for command summaries.
pub fn cell_census(map: &histopipe_core::LabelMap) -> [u64; 4] {
    let mut counts = [0u64; 4];
    for c in map.cells() {
        counts[c.code() as usize] += 1;
    }
    counts
}
