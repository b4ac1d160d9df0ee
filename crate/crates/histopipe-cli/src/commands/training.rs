//! `train`, `evaluate` and `crossval`: schedule-driven SGD over manifest
//! payloads, holdout evaluation and the k-fold experiment driver.

use std::path::Path;

use histopipe_core::augment::ContextPatch;
use histopipe_core::imaging::{
    crop_with_fill, normalize, resample, DatasetStats, FillMode, LabelClass, RasterImage,
    ResampleMethod, NORMALIZE_EPSILON,
};
use histopipe_core::manifest::{DatasetManifest, Split};
use histopipe_core::metrics::{run_cross_validation, ConfusionMatrix, ExperimentReport, ReportRow};
use histopipe_core::net::{
    class_weights, load_params, predict, save_params, train, ClassWeights, Dtype, NetworkSpec,
    Scalar, Tensor, TrainConfig, TrainingSet,
};

use super::{
    load_labeled_patches, load_manifest, load_slide, parse_augmentation, parse_dtype,
    parse_schedule, parse_spec, require_input, CliError, CmdResult, Ctx,
};

fn stats_or_usage(manifest: &DatasetManifest) -> Result<DatasetStats, CliError> {
    manifest.stats.clone().ok_or_else(|| {
        CliError::Usage("manifest has no [stats] section; run `histopipe stats` first".into())
    })
}

type LabeledSet = Vec<(RasterImage, LabelClass)>;

fn holdout_sets(
    manifest: &DatasetManifest,
    manifest_path: &Path,
) -> Result<(LabeledSet, LabeledSet), CliError> {
    let train_idx = manifest.split_indices(Split::Train).ok_or_else(|| {
        CliError::Usage("manifest has no holdout split; run `histopipe split` first".into())
    })?;
    let val_idx = manifest.split_indices(Split::Val).expect("holdout present");
    Ok((
        load_labeled_patches(manifest, manifest_path, &train_idx)?,
        load_labeled_patches(manifest, manifest_path, &val_idx)?,
    ))
}

/// Context rasters for source-context augmentation: a k-times-larger
/// window around each patch center, resampled to patch resolution from
/// the original slide. The multiplier covers the worst-case sampling
/// radius of the augmentation ranges.
fn build_contexts(
    manifest: &DatasetManifest,
    indices: &[usize],
    slide: &RasterImage,
    aug: &histopipe_core::augment::AugmentationConfig,
) -> Result<Vec<ContextPatch>, CliError> {
    let radius_patches = std::f64::consts::FRAC_1_SQRT_2 / aug.scale_range.0 + aug.shift_fraction_max;
    let k = ((2.0 * radius_patches).ceil() as u32 + 1).max(3) | 1; // odd multiplier centers exactly
    indices
        .iter()
        .map(|&i| {
            let record = &manifest.records[i];
            let size_l0 =
                (record.physical_um / slide.resolution() + 0.5).floor() as u32;
            let ctx_l0 = size_l0 * k;
            let ctx_px = record.pixel_px * k;
            let crop = crop_with_fill(slide, record.center, ctx_l0, FillMode::NearestEdge, None)
                .map_err(histopipe_core::Error::Imaging)?;
            let image = if ctx_l0 == ctx_px {
                crop
            } else {
                resample(&crop, ctx_l0 as f64 / ctx_px as f64, ResampleMethod::Bilinear)
                    .map_err(histopipe_core::Error::Imaging)?
            };
            // Pin the nominal payload resolution so the context/patch
            // equality check compares like with like; the geometry is
            // exact because both resamples share the realized factor.
            let image = image
                .with_resolution(record.um_per_px())
                .map_err(histopipe_core::Error::Imaging)?;
            let margin = ((ctx_px - record.pixel_px) / 2) as i64;
            Ok(ContextPatch {
                image,
                source_origin: (margin, margin),
            })
        })
        .collect::<Result<Vec<_>, histopipe_core::Error>>()
        .map_err(CliError::from)
}

pub fn run_train(ctx: &Ctx) -> CmdResult {
    let mut block = ctx.config.section("train")?;
    let manifest_path = ctx.artifact(block.take("manifest"), "manifest.txt");
    let spec = parse_spec(&mut block)?;
    let schedule = parse_schedule(&mut block)?;
    let augmentation = parse_augmentation(&mut block)?;
    let dtype = parse_dtype(&mut block)?;
    let weights_mode = block
        .take("class_weights")
        .unwrap_or_else(|| "none".to_string());
    let context_slide = block.take("context_slide");
    let context_um = block.take_parsed::<f64>("context_um_per_px")?;
    let weights_path = ctx.artifact(block.take("weights"), "weights.hpdn");
    let metrics_path = ctx.artifact(block.take("metrics"), "metrics.txt");
    block.finish()?;

    let manifest = load_manifest(&manifest_path)?;
    let stats = stats_or_usage(&manifest)?;
    let (train_set, val_set) = holdout_sets(&manifest, &manifest_path)?;

    let class_weights = match weights_mode.as_str() {
        "none" => None,
        "log_balanced" => Some(class_weights(manifest.per_class_counts)?),
        other => {
            return Err(CliError::Usage(format!(
                "class_weights must be none or log_balanced, got `{other}`"
            )))
        }
    };

    let mut data = TrainingSet::new(train_set, val_set, stats);
    if let Some(aug) = &augmentation {
        if aug.fill == FillMode::SourceContext {
            let slide_raw = context_slide.ok_or_else(|| {
                CliError::Usage(
                    "fill: source_context requires `context_slide` pointing at the original slide"
                        .into(),
                )
            })?;
            let slide = load_slide(&ctx.source(&slide_raw), context_um)?;
            let train_idx = manifest.split_indices(Split::Train).expect("checked above");
            let contexts = build_contexts(&manifest, &train_idx, &slide, aug)?;
            data = data.with_contexts(contexts);
        }
    }

    let config = TrainConfig {
        schedule,
        augmentation,
        class_weights,
        seed: ctx.seed,
    };

    let (best_epoch, best_metric, log) = match dtype {
        Dtype::F32 => {
            let outcome = train::<f32>(&data, &spec, &config)?;
            save_params(&outcome.params, &weights_path)?;
            (outcome.best_epoch, outcome.best_metric, outcome.log)
        }
        Dtype::F64 => {
            let outcome = train::<f64>(&data, &spec, &config)?;
            save_params(&outcome.params, &weights_path)?;
            (outcome.best_epoch, outcome.best_metric, outcome.log)
        }
    };
    log.write(&metrics_path)?;
    println!(
        "trained {} epochs; best checkpoint at epoch {best_epoch} with accuracy {:.4}",
        log.records.len(),
        best_metric
    );
    println!("weights: {}", weights_path.display());
    println!("metrics: {}", metrics_path.display());
    ctx.write_run_record("train")
}

fn predict_set<F: Scalar>(
    params: &histopipe_core::net::ParamStore<F>,
    spec: &NetworkSpec,
    set: &[(RasterImage, LabelClass)],
    stats: &DatasetStats,
    batch_size: usize,
) -> Result<Vec<LabelClass>, CliError> {
    let mut out = Vec::with_capacity(set.len());
    for chunk in set.chunks(batch_size.max(1)) {
        let floats = chunk
            .iter()
            .map(|(p, _)| normalize(p, stats, NORMALIZE_EPSILON))
            .collect::<Result<Vec<_>, _>>()
            .map_err(histopipe_core::Error::Imaging)?;
        let tensor = Tensor::<F>::from_float_images(&floats);
        for (class, _) in predict(params, spec, &tensor)? {
            out.push(class);
        }
    }
    Ok(out)
}

pub fn run_evaluate(ctx: &Ctx) -> CmdResult {
    let mut block = ctx.config.section("evaluate")?;
    let manifest_path = ctx.artifact(block.take("manifest"), "manifest.txt");
    let weights_path = ctx.artifact(block.take("weights"), "weights.hpdn");
    let spec = parse_spec(&mut block)?;
    let dtype = parse_dtype(&mut block)?;
    let subset = block.take("subset").unwrap_or_else(|| "val".to_string());
    let label = block
        .take("label")
        .unwrap_or_else(|| format!("densenet-g{}", spec.growth_rate));
    let pretraining = block.take("pretraining").unwrap_or_else(|| "none".to_string());
    let batch_size = block.take_parsed_or("batch_size", 64usize)?;
    let report_path = ctx.artifact(block.take("report"), "evaluation.txt");
    block.finish()?;

    let manifest = load_manifest(&manifest_path)?;
    let stats = stats_or_usage(&manifest)?;
    require_input(&weights_path)?;

    let indices: Vec<usize> = match subset.as_str() {
        "all" => (0..manifest.records.len()).collect(),
        "train" | "val" => {
            let side = if subset == "train" { Split::Train } else { Split::Val };
            manifest.split_indices(side).ok_or_else(|| {
                CliError::Usage("manifest has no holdout split; run `histopipe split` first".into())
            })?
        }
        other => {
            return Err(CliError::Usage(format!(
                "subset must be train, val or all, got `{other}`"
            )))
        }
    };
    let set = load_labeled_patches(&manifest, &manifest_path, &indices)?;
    let truths: Vec<LabelClass> = set.iter().map(|(_, l)| *l).collect();

    let preds = match dtype {
        Dtype::F32 => {
            let (params, report) = load_params::<f32>(&weights_path)?;
            if report.converted {
                println!(
                    "note: weights stored as {}, converted to f32",
                    report.source_dtype.name()
                );
            }
            params.validate_against(&spec)?;
            predict_set(&params, &spec, &set, &stats, batch_size)?
        }
        Dtype::F64 => {
            let (params, report) = load_params::<f64>(&weights_path)?;
            if report.converted {
                println!(
                    "note: weights stored as {}, converted to f64",
                    report.source_dtype.name()
                );
            }
            params.validate_against(&spec)?;
            predict_set(&params, &spec, &set, &stats, batch_size)?
        }
    };

    let confusion = ConfusionMatrix::from_pairs(&truths, &preds)
        .map_err(histopipe_core::Error::Metrics)?;
    println!("{}", confusion.to_text_block());
    println!("accuracy on {subset}: {:.4} ({} samples)", confusion.accuracy(), confusion.total());

    let report = ExperimentReport {
        rows: vec![ReportRow {
            architecture: label,
            pretraining,
            splitting: format!("holdout {subset}"),
            accuracy: confusion.accuracy(),
            per_fold: None,
        }],
    };
    report.write(&report_path)?;
    println!("report: {}", report_path.display());
    ctx.write_run_record("evaluate")
}

pub fn run_crossval(ctx: &Ctx) -> CmdResult {
    let mut block = ctx.config.section("crossval")?;
    let manifest_path = ctx.artifact(block.take("manifest"), "manifest.txt");
    let k = block.take_parsed_or("k", 5u32)?;
    let spec = parse_spec(&mut block)?;
    let schedule = parse_schedule(&mut block)?;
    let augmentation = parse_augmentation(&mut block)?;
    let dtype = parse_dtype(&mut block)?;
    let weights_mode = block
        .take("class_weights")
        .unwrap_or_else(|| "none".to_string());
    let label = block
        .take("label")
        .unwrap_or_else(|| format!("densenet-g{}", spec.growth_rate));
    let pretraining = block.take("pretraining").unwrap_or_else(|| "none".to_string());
    let report_path = ctx.artifact(block.take("report"), "crossval.txt");
    block.finish()?;

    let manifest = load_manifest(&manifest_path)?;
    let all: Vec<usize> = (0..manifest.records.len()).collect();
    let data = load_labeled_patches(&manifest, &manifest_path, &all)?;

    let use_log_weights = match weights_mode.as_str() {
        "none" => false,
        "log_balanced" => true,
        other => {
            return Err(CliError::Usage(format!(
                "class_weights must be none or log_balanced, got `{other}`"
            )))
        }
    };

    let seed = ctx.seed;
    let result = run_cross_validation(&data, k, seed, |fold, train_subset| {
        // Per-fold normalization statistics over the fold's own
        // training patches.
        let images: Vec<RasterImage> = train_subset.iter().map(|(p, _)| p.clone()).collect();
        let stats = histopipe_core::imaging::compute_dataset_stats(&images)?;
        let weights = if use_log_weights {
            let mut counts = [0u64; 4];
            for (_, l) in train_subset {
                counts[l.code() as usize] += 1;
            }
            Some(class_weights(counts).unwrap_or_else(|_| ClassWeights::unit()))
        } else {
            None
        };
        let config = TrainConfig {
            schedule: schedule.clone(),
            augmentation: augmentation.clone(),
            class_weights: weights,
            seed: seed.wrapping_add(fold as u64),
        };
        let training = TrainingSet::new(train_subset.to_vec(), Vec::new(), stats.clone());
        let spec = spec.clone();
        match dtype {
            Dtype::F32 => {
                let outcome = train::<f32>(&training, &spec, &config)?;
                let params = outcome.params;
                Ok(Box::new(move |patch: &RasterImage| {
                    classify_one::<f32>(&params, &spec, patch, &stats)
                }) as Box<dyn Fn(&RasterImage) -> LabelClass>)
            }
            Dtype::F64 => {
                let outcome = train::<f64>(&training, &spec, &config)?;
                let params = outcome.params;
                Ok(Box::new(move |patch: &RasterImage| {
                    classify_one::<f64>(&params, &spec, patch, &stats)
                }) as Box<dyn Fn(&RasterImage) -> LabelClass>)
            }
        }
    })?;

    println!(
        "{k}-fold cross-validation: per-fold {:?}, mean {:.4}, max {:.4}",
        result
            .per_fold_accuracy
            .iter()
            .map(|a| (a * 10000.0).round() / 10000.0)
            .collect::<Vec<_>>(),
        result.mean_accuracy(),
        result.max_accuracy()
    );
    if result.degraded {
        println!("warning: some class has fewer samples than folds");
    }
    println!("{}", result.merged_confusion().to_text_block());

    let report = ExperimentReport {
        rows: vec![result.to_report_row(&label, &pretraining)],
    };
    report.check_consistency().map_err(CliError::Process)?;
    report.write(&report_path)?;
    println!("{}", report.to_table());
    println!("report: {}", report_path.display());
    ctx.write_run_record("crossval")
}

fn classify_one<F: Scalar>(
    params: &histopipe_core::net::ParamStore<F>,
    spec: &NetworkSpec,
    patch: &RasterImage,
    stats: &DatasetStats,
) -> LabelClass {
    let float = normalize(patch, stats, NORMALIZE_EPSILON).expect("patch shape matches stats");
    let tensor = Tensor::<F>::from_float_images(&[float]);
    predict(params, spec, &tensor).expect("forward pass on validated spec")[0].0
}

#[cfg(test)]
mod tests {
    use super::*;
    use histopipe_core::extraction::{extract_patches, BackgroundRule, ExtractConfig, OriginOffset};
    use histopipe_core::fixtures::synthetic_slide;
    use histopipe_core::manifest::{DatasetManifest, PatchRecord};

    #[test]
    fn contexts_align_exactly_with_their_patches() {
        // The k-times context window resamples through the same realized
        // factor as the patch itself, so the patch must reappear
        // bit-identically at the margin offset inside its context.
        let slide = synthetic_slide("ctx", 200, 160, 1.0, 2, 5).image;
        let config = ExtractConfig {
            patch_physical_um: 20.0,
            patch_pixel_size: 10,
            spacing: Some(40),
            origin: OriginOffset::Fixed(20, 20),
            background: BackgroundRule::None,
            require_labels: false,
        };
        let extraction = extract_patches(&slide, "ctx", None, None, &config).unwrap();
        let records: Vec<PatchRecord> = extraction
            .patches
            .iter()
            .map(|p| PatchRecord {
                slide_id: "ctx".into(),
                center: p.center,
                label: p.label,
                physical_um: 20.0,
                pixel_px: 10,
                payload_path: String::new(),
            })
            .collect();
        let manifest = DatasetManifest::new(records, 0);
        let indices: Vec<usize> = (0..manifest.records.len()).collect();
        let aug = histopipe_core::augment::AugmentationConfig {
            fill: FillMode::SourceContext,
            ..histopipe_core::augment::AugmentationConfig::default()
        };
        let contexts = build_contexts(&manifest, &indices, &slide, &aug).unwrap();
        assert_eq!(contexts.len(), extraction.patches.len());
        for (ctx, patch) in contexts.iter().zip(&extraction.patches) {
            let (mx, my) = ctx.source_origin;
            assert!(mx > 0 && my > 0);
            for y in 0..10u32 {
                for x in 0..10u32 {
                    for c in 0..3u8 {
                        assert_eq!(
                            ctx.image.get(x + mx as u32, y + my as u32, c),
                            patch.image.get(x, y, c),
                            "context misaligned at ({x},{y}) ch {c}"
                        );
                    }
                }
            }
            // Resolution bookkeeping matches the payload's nominal value.
            assert_eq!(ctx.image.resolution(), 2.0);
        }
    }
}
