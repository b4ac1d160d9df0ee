//! `extract`: tissue mask, grid planning and labeled patch extraction
//! into a manifest plus PNG payloads.

use std::path::PathBuf;

use histopipe_core::annotations::{AnnotationSet, UnannotatedPolicy};
use histopipe_core::extraction::{
    extract_patches, plan_extraction_grid, write_patch_payloads, BackgroundRule, ExtractConfig,
    OriginOffset,
};
use histopipe_core::imaging::{resample, ResampleMethod};
use histopipe_core::manifest::DatasetManifest;
use histopipe_core::tissue::{coarse_mask_for_grid, compute_mask};

use super::{load_slide, require_input, CliError, CmdResult, Ctx};

pub fn run(ctx: &Ctx) -> CmdResult {
    let mut block = ctx.config.section("extract")?;
    let slide_path = ctx.source(&block.take_required("slide")?);
    let um_override = block.take_parsed::<f64>("um_per_px")?;
    let slide = load_slide(&slide_path, um_override)?;
    let slide_id = block.take("slide_id").unwrap_or_else(|| {
        slide_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "slide".to_string())
    });

    let policy = match block.take("unannotated").as_deref() {
        None | Some("normal") => UnannotatedPolicy::Normal,
        Some("exclude") => UnannotatedPolicy::Exclude,
        Some(other) => {
            return Err(CliError::Usage(format!(
                "unannotated must be normal or exclude, got `{other}`"
            )))
        }
    };
    let annotations = match block.take("annotations") {
        None => None,
        Some(raw) => {
            let path = ctx.source(&raw);
            require_input(&path)?;
            let text = std::fs::read_to_string(&path)
                .map_err(|e| CliError::Format(format!("{}: {e}", path.display())))?;
            let set = AnnotationSet::from_text(&slide_id, &text)
                .map_err(|e| CliError::Format(format!("{}: {e}", path.display())))?;
            Some(set.with_policy(policy))
        }
    };

    let patch_um: f64 = block
        .take_parsed("patch_um")?
        .ok_or_else(|| CliError::Usage("extract needs `patch_um`".into()))?;
    let patch_px: u32 = block
        .take_parsed("patch_px")?
        .ok_or_else(|| CliError::Usage("extract needs `patch_px`".into()))?;
    let spacing = block.take_parsed::<u32>("spacing_px")?;
    let origin = match block.take("offset").as_deref() {
        None | Some("random") => OriginOffset::Seeded(ctx.seed),
        Some(pair) => {
            let (x, y) = pair
                .split_once(',')
                .ok_or_else(|| CliError::Usage(format!("offset `{pair}` must be random or x,y")))?;
            OriginOffset::Fixed(
                x.trim()
                    .parse()
                    .map_err(|_| CliError::Usage(format!("bad offset x `{x}`")))?,
                y.trim()
                    .parse()
                    .map_err(|_| CliError::Usage(format!("bad offset y `{y}`")))?,
            )
        }
    };
    let min_foreground = block.take_parsed_or("min_foreground", 0.2f64)?;
    let background_kind = block
        .take("background")
        .unwrap_or_else(|| "patch_fraction".to_string());
    let require_labels = block.take_bool_or("require_labels", annotations.is_some())?;
    let manifest_path = ctx.artifact(block.take("manifest"), "manifest.txt");
    let patch_dir = PathBuf::from(block.take("patch_dir").unwrap_or_else(|| "patches".to_string()));
    block.finish()?;

    let background = match background_kind.as_str() {
        "none" => BackgroundRule::None,
        "patch_fraction" => BackgroundRule::PatchFraction { min_foreground },
        "coarse_pixel" => BackgroundRule::CoarsePixel,
        other => {
            return Err(CliError::Usage(format!(
                "background must be none, patch_fraction or coarse_pixel, got `{other}`"
            )))
        }
    };

    let config = ExtractConfig {
        patch_physical_um: patch_um,
        patch_pixel_size: patch_px,
        spacing,
        origin,
        background,
        require_labels,
    };

    // Build whichever mask the rule needs.
    let mask = match background {
        BackgroundRule::None => None,
        BackgroundRule::PatchFraction { .. } => Some(compute_mask(&slide).map_err(|e| {
            CliError::Process(format!("tissue mask: {e}"))
        })?),
        BackgroundRule::CoarsePixel => {
            let grid = plan_extraction_grid(&slide, &config)
                .map_err(histopipe_core::Error::Extract)?;
            let lowres = resample(&slide, grid.spacing() as f64, ResampleMethod::Bilinear)
                .map_err(histopipe_core::Error::Imaging)?;
            Some(
                coarse_mask_for_grid(&lowres, &grid, slide.resolution())
                    .map_err(|e| CliError::Process(format!("coarse mask: {e}")))?,
            )
        }
    };

    let extraction = extract_patches(&slide, &slide_id, annotations.as_ref(), mask.as_ref(), &config)?;
    if let Some(parent) = manifest_path.parent() {
        std::fs::create_dir_all(parent)
            .map_err(|e| CliError::Process(format!("creating {}: {e}", parent.display())))?;
    }
    let base = manifest_path
        .parent()
        .map(|p| p.to_path_buf())
        .unwrap_or_else(|| PathBuf::from("."));
    let records = write_patch_payloads(&extraction, &base, &patch_dir)?;
    let manifest = DatasetManifest::new(records, ctx.seed);
    manifest
        .check_consistency()
        .map_err(CliError::Process)?;
    manifest.write(&manifest_path)?;

    println!("{}", manifest.count_summary());
    println!(
        "grid: {}x{} centers, spacing {} px, offset ({}, {}), patch {} um -> {} px (downsample {:.4})",
        extraction.grid.shape().0,
        extraction.grid.shape().1,
        extraction.grid.spacing(),
        extraction.grid.origin_offset().0,
        extraction.grid.origin_offset().1,
        extraction.patch_physical_um,
        extraction.patch_pixel_size,
        extraction.downsample
    );
    println!("manifest: {}", manifest_path.display());
    ctx.write_run_record("extract")
}
