//! `segment` and `postprocess`: whole-slide inference into an indexed
//! label-map PNG, then median smoothing and priority dilation.

use histopipe_core::imaging::{resample, LabelClass, ResampleMethod};
use histopipe_core::net::{load_params, Dtype, NetworkBackend};
use histopipe_core::segmentation::{
    export_label_map, import_label_map, import_label_map_expecting, postprocess,
    ClassifierBackend, ExternalProcessBackend, PostprocessConfig, SegmentConfig, SmoothMode,
};
use histopipe_core::tissue::compute_mask;

use super::{
    cell_census, load_manifest, load_slide, parse_dtype, parse_spec, require_input, CliError,
    CmdResult, Ctx,
};

pub fn run_segment(ctx: &Ctx) -> CmdResult {
    let mut block = ctx.config.section("segment")?;
    let slide_path = ctx.source(&block.take_required("slide")?);
    let um_override = block.take_parsed::<f64>("um_per_px")?;
    let slide_id = block.take("slide_id").unwrap_or_else(|| {
        slide_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "slide".to_string())
    });
    let downsample = block.take_parsed_or("downsample", 4.5f64)?;
    let patch_px = block.take_parsed_or("patch_px", 157u32)?;
    let stride = block.take_parsed_or("stride", 32u32)?;
    let batch_size = block.take_parsed_or("batch_size", 64usize)?;
    let mask_mode = block.take("mask").unwrap_or_else(|| "auto".to_string());
    let backend_kind = block.take("backend").unwrap_or_else(|| "network".to_string());
    let expected_um = block.take_parsed::<f64>("expected_um_per_px")?;
    let map_path = ctx.artifact(block.take("map"), "labelmap.png");

    let slide = load_slide(&slide_path, um_override)?;
    let seg_config = SegmentConfig {
        downsample,
        patch_pixel_size: patch_px,
        stride,
        batch_size,
    };

    let map = match backend_kind.as_str() {
        "network" => {
            let weights_path = ctx.artifact(block.take("weights"), "weights.hpdn");
            let manifest_path = ctx.artifact(block.take("manifest"), "manifest.txt");
            let spec = parse_spec(&mut block)?;
            let dtype = parse_dtype(&mut block)?;
            block.finish()?;
            require_input(&weights_path)?;
            let manifest = load_manifest(&manifest_path)?;
            let stats = manifest.stats.clone().ok_or_else(|| {
                CliError::Usage(
                    "manifest has no [stats] section; segmentation needs the training statistics"
                        .into(),
                )
            })?;
            match dtype {
                Dtype::F32 => {
                    let (params, _) = load_params::<f32>(&weights_path)?;
                    params.validate_against(&spec)?;
                    let backend = NetworkBackend {
                        params,
                        spec,
                        stats,
                        patch_pixel_size: patch_px,
                        expected_um_per_px: expected_um,
                    };
                    segment_with(&slide, &slide_id, &backend, &seg_config, &mask_mode)?
                }
                Dtype::F64 => {
                    let (params, _) = load_params::<f64>(&weights_path)?;
                    params.validate_against(&spec)?;
                    let backend = NetworkBackend {
                        params,
                        spec,
                        stats,
                        patch_pixel_size: patch_px,
                        expected_um_per_px: expected_um,
                    };
                    segment_with(&slide, &slide_id, &backend, &seg_config, &mask_mode)?
                }
            }
        }
        "external" => {
            let command_raw = block.take_required("external_cmd")?;
            block.finish()?;
            let command: Vec<String> =
                command_raw.split_whitespace().map(|s| s.to_string()).collect();
            let backend = ExternalProcessBackend {
                command,
                patch_pixel_size: patch_px,
                expected_um_per_px: expected_um,
                work_dir: ctx.out.join("external_batches"),
            };
            segment_with(&slide, &slide_id, &backend, &seg_config, &mask_mode)?
        }
        other => {
            return Err(CliError::Usage(format!(
                "backend must be network or external, got `{other}`"
            )))
        }
    };

    if let Some(parent) = map_path.parent() {
        std::fs::create_dir_all(parent)
            .map_err(|e| CliError::Process(format!("creating {}: {e}", parent.display())))?;
    }
    export_label_map(&map, &map_path)?;
    let census = cell_census(&map);
    println!(
        "label map {}x{} cells (stride {stride}, total downsample {}): {} normal, {} benign, {} in situ, {} invasive",
        map.width(),
        map.height(),
        map.total_downsample(),
        census[0],
        census[1],
        census[2],
        census[3]
    );
    println!("map: {}", map_path.display());
    ctx.write_run_record("segment")
}

fn segment_with(
    slide: &histopipe_core::RasterImage,
    slide_id: &str,
    backend: &dyn ClassifierBackend,
    config: &SegmentConfig,
    mask_mode: &str,
) -> Result<histopipe_core::LabelMap, CliError> {
    let mask = match mask_mode {
        "none" => None,
        "auto" => {
            // Mask at classifier raster geometry, matching segment's own
            // downsampled raster.
            let raster = if config.downsample == 1.0 {
                slide.clone()
            } else {
                resample(slide, config.downsample, ResampleMethod::Bilinear)
                    .map_err(histopipe_core::Error::Imaging)?
            };
            Some(compute_mask(&raster).map_err(|e| CliError::Process(format!("tissue mask: {e}")))?)
        }
        other => {
            return Err(CliError::Usage(format!(
                "mask must be auto or none, got `{other}`"
            )))
        }
    };
    Ok(histopipe_core::segmentation::segment(
        slide,
        slide_id,
        backend,
        config,
        mask.as_ref(),
    )?)
}

pub fn run_postprocess(ctx: &Ctx) -> CmdResult {
    let mut block = ctx.config.section("postprocess")?;
    let map_path = ctx.artifact(block.take("map"), "labelmap.png");
    let median_window = block.take_parsed_or("median_window", 5u32)?;
    let dilate_radius = block.take_parsed_or("dilate_radius", 1u32)?;
    let smooth = match block.take("smooth").as_deref() {
        None | Some("median") => SmoothMode::Median,
        Some("majority") => SmoothMode::Majority,
        Some(other) => {
            return Err(CliError::Usage(format!(
                "smooth must be median or majority, got `{other}`"
            )))
        }
    };
    let expected_stride = block.take_parsed::<u32>("expected_stride")?;
    let expected_downsample = block.take_parsed::<f64>("expected_downsample")?;
    let out_path = ctx.artifact(block.take("out"), "labelmap_post.png");
    block.finish()?;

    require_input(&map_path)?;
    let map = match (expected_stride, expected_downsample) {
        (Some(stride), Some(downsample)) => {
            import_label_map_expecting(&map_path, stride, downsample)?
        }
        _ => import_label_map(&map_path)?,
    };
    let config = PostprocessConfig {
        median_window,
        dilate_radius,
        smooth,
    };
    let out = postprocess(&map, &config)?;
    export_label_map(&out, &out_path)?;

    let before = cell_census(&map);
    let after = cell_census(&out);
    for class in LabelClass::ALL {
        let c = class.code() as usize;
        println!(
            "{:>9}: {} -> {} cells",
            class.name(),
            before[c],
            after[c]
        );
    }
    println!("map: {}", out_path.display());
    ctx.write_run_record("postprocess")
}
