//! Library-level end-to-end run over synthetic fixtures: mask, extract,
//! split, stats, train, segment, post-process, evaluate.

use histopipe_core::annotations::AnnotationSet;
use histopipe_core::augment::AugmentationConfig;
use histopipe_core::extraction::{
    extract_patches, split_stratified, write_patch_payloads, BackgroundRule, ExtractConfig,
    OriginOffset,
};
use histopipe_core::fixtures::synthetic_slide;
use histopipe_core::imaging::{compute_dataset_stats, LabelClass};
use histopipe_core::manifest::{DatasetManifest, Split};
use histopipe_core::metrics::ConfusionMatrix;
use histopipe_core::net::{
    train, NetworkBackend, NetworkSpec, Phase, Scope, TrainConfig, TrainSchedule, TrainingSet,
};
use histopipe_core::segmentation::{
    postprocess, segment, GroundTruthBackend, PostprocessConfig, SegmentConfig, SmoothMode,
};
use histopipe_core::tissue::compute_mask;
use std::path::Path;

#[test]
fn fixture_pipeline_end_to_end() {
    let slide = synthetic_slide("fix_a", 320, 280, 1.0, 3, 77);
    let mask = compute_mask(&slide.image).unwrap();

    // Extraction with the patch-level background rule.
    let config = ExtractConfig {
        patch_physical_um: 32.0,
        patch_pixel_size: 16,
        spacing: Some(16),
        origin: OriginOffset::Seeded(5),
        background: BackgroundRule::PatchFraction { min_foreground: 0.2 },
        require_labels: true,
    };
    let extraction =
        extract_patches(&slide.image, "fix_a", Some(&slide.annotations), Some(&mask), &config)
            .unwrap();
    assert!(extraction.patches.len() > 100, "got {}", extraction.patches.len());
    // Background rule dropped the glass border patches.
    assert!(extraction.patches.len() < extraction.grid.len());

    // Persist and reload the manifest.
    let dir = tempfile::TempDir::new().unwrap();
    let records = write_patch_payloads(&extraction, dir.path(), Path::new("patches")).unwrap();
    let mut manifest = DatasetManifest::new(records, 5);
    manifest.check_consistency().unwrap();
    let split = split_stratified(&manifest, 0.8, 5).unwrap();
    manifest.split = Some(split);
    let stats_images: Vec<_> = extraction.patches.iter().map(|p| p.image.clone()).collect();
    manifest.stats = Some(compute_dataset_stats(&stats_images).unwrap());
    let manifest_path = dir.path().join("manifest.txt");
    manifest.write(&manifest_path).unwrap();
    let reloaded = DatasetManifest::read(&manifest_path).unwrap();
    assert_eq!(manifest, reloaded);

    // Train a toy network on the extracted patches.
    let train_idx = manifest.split_indices(Split::Train).unwrap();
    let val_idx = manifest.split_indices(Split::Val).unwrap();
    let load = |idx: &[usize]| -> Vec<(histopipe_core::RasterImage, LabelClass)> {
        idx.iter()
            .map(|&i| {
                let record = &manifest.records[i];
                let img =
                    histopipe_core::io::read_image(&dir.path().join(&record.payload_path)).unwrap();
                (img, record.label)
            })
            .collect()
    };
    let stats = manifest.stats.clone().unwrap();
    let data = TrainingSet::new(load(&train_idx), load(&val_idx), stats.clone());
    let spec = NetworkSpec::toy(4, vec![1], 8);
    let train_config = TrainConfig {
        schedule: TrainSchedule {
            phases: vec![
                Phase { scope: Scope::HeadOnly, epochs: 2, learning_rate: 5e-3 },
                Phase { scope: Scope::FullNetwork, epochs: 8, learning_rate: 5e-3 },
            ],
            batch_size: 32,
            shuffle_per_epoch: true,
            lr_decay: None,
        },
        augmentation: Some(AugmentationConfig::identity()),
        class_weights: Some(
            histopipe_core::net::class_weights(manifest.per_class_counts).unwrap(),
        ),
        seed: 5,
    };
    let outcome = train::<f32>(&data, &spec, &train_config).unwrap();
    assert_eq!(outcome.log.records.len(), 10);

    // Segment the slide with the trained backend and post-process.
    let backend = NetworkBackend {
        params: outcome.params,
        spec,
        stats,
        patch_pixel_size: 16,
        expected_um_per_px: None,
    };
    let seg_config = SegmentConfig {
        downsample: 2.0,
        patch_pixel_size: 16,
        stride: 8,
        batch_size: 64,
    };
    let map = segment(&slide.image, "fix_a", &backend, &seg_config, None).unwrap();
    assert_eq!(map.width(), (320_u32 / 2).div_ceil(8));
    let post = postprocess(
        &map,
        &PostprocessConfig {
            median_window: 3,
            dilate_radius: 1,
            smooth: SmoothMode::Median,
        },
    )
    .unwrap();
    assert_eq!(post.width(), map.width());

    // Ground-truth plumbing on the same geometry stays exact regardless
    // of the trained model.
    let gt_backend = GroundTruthBackend {
        annotations: &slide.annotations,
        patch_pixel_size: 16,
        downsample: 1.0,
    };
    let gt_config = SegmentConfig {
        downsample: 1.0,
        patch_pixel_size: 16,
        stride: 16,
        batch_size: 32,
    };
    let gt_map = segment(&slide.image, "fix_a", &gt_backend, &gt_config, None).unwrap();
    let grid = histopipe_core::segmentation::segment_grid(320, 280, 16).unwrap();
    let truth = slide.annotations.rasterize(&grid);
    assert_eq!(gt_map.cells(), truth.cells());
}

#[test]
fn trained_patch_accuracy_beats_chance_on_fixtures() {
    // Color-separable classes: even a few epochs should leave chance
    // (25%) far behind on held-out patches.
    let patches = histopipe_core::fixtures::synthetic_patch_set(16, 16, 31);
    let train_set: Vec<_> = patches.iter().step_by(2).cloned().collect();
    let val_set: Vec<_> = patches.iter().skip(1).step_by(2).cloned().collect();
    let stats = compute_dataset_stats(
        &train_set.iter().map(|(p, _)| p.clone()).collect::<Vec<_>>(),
    )
    .unwrap();
    let data = TrainingSet::new(train_set, val_set.clone(), stats);
    let spec = NetworkSpec::toy(4, vec![1], 8);
    let config = TrainConfig {
        schedule: TrainSchedule {
            phases: vec![Phase {
                scope: Scope::FullNetwork,
                epochs: 20,
                learning_rate: 1e-2,
            }],
            batch_size: 16,
            shuffle_per_epoch: true,
            lr_decay: None,
        },
        augmentation: None,
        class_weights: None,
        seed: 4,
    };
    let outcome = train::<f32>(&data, &spec, &config).unwrap();
    let acc = outcome.best_metric;
    assert!(acc > 0.6, "validation accuracy {acc} not above chance");

    // Confusion matrix bookkeeping on the final predictions.
    let preds: Vec<LabelClass> = val_set
        .iter()
        .map(|(p, _)| {
            let float = histopipe_core::imaging::normalize(
                p,
                &data.stats,
                histopipe_core::imaging::NORMALIZE_EPSILON,
            )
            .unwrap();
            let tensor = histopipe_core::net::Tensor::<f32>::from_float_images(&[float]);
            histopipe_core::net::predict(&outcome.params, &spec, &tensor).unwrap()[0].0
        })
        .collect();
    let truths: Vec<LabelClass> = val_set.iter().map(|(_, l)| *l).collect();
    let cm = ConfusionMatrix::from_pairs(&truths, &preds).unwrap();
    assert_eq!(cm.total() as usize, val_set.len());
    assert!((cm.accuracy() - outcome.best_metric).abs() <= 1.0);
}

#[test]
fn annotations_text_file_drives_extraction() {
    let slide = synthetic_slide("fix_b", 200, 200, 1.0, 2, 13);
    let text = slide.annotations.to_text();
    let parsed = AnnotationSet::from_text("fix_b", &text).unwrap();
    let config = ExtractConfig {
        patch_physical_um: 20.0,
        patch_pixel_size: 10,
        spacing: Some(20),
        origin: OriginOffset::Fixed(10, 10),
        background: BackgroundRule::None,
        require_labels: true,
    };
    let a = extract_patches(&slide.image, "fix_b", Some(&slide.annotations), None, &config).unwrap();
    let b = extract_patches(&slide.image, "fix_b", Some(&parsed), None, &config).unwrap();
    let labels_a: Vec<_> = a.patches.iter().map(|p| p.label).collect();
    let labels_b: Vec<_> = b.patches.iter().map(|p| p.label).collect();
    assert_eq!(labels_a, labels_b);
    assert!(labels_a.iter().any(|&l| l != LabelClass::Normal));
}
