//! `split` and `stats`: manifest bookkeeping stages between extraction
//! and training.

use histopipe_core::extraction::{kfold_split, split_grouped_by_slide, split_stratified};
use histopipe_core::imaging::compute_dataset_stats;
use histopipe_core::manifest::{Split, SplitAssignment};

use super::{load_labeled_patches, load_manifest, CliError, CmdResult, Ctx};

pub fn run_split(ctx: &Ctx) -> CmdResult {
    let mut block = ctx.config.section("split")?;
    let manifest_path = ctx.artifact(block.take("manifest"), "manifest.txt");
    let mode = block.take("mode").unwrap_or_else(|| "holdout".to_string());
    let train_fraction = block.take_parsed_or("train_fraction", 0.8f64)?;
    let k = block.take_parsed_or("k", 5u32)?;
    // Clinically strict mode: whole slides stay on one side.
    let group_by_slide = block.take_bool_or("group_by_slide", false)?;
    block.finish()?;

    let mut manifest = load_manifest(&manifest_path)?;
    let split = match (mode.as_str(), group_by_slide) {
        ("holdout", false) => split_stratified(&manifest, train_fraction, ctx.seed)
            .map_err(histopipe_core::Error::Extract)?,
        ("holdout", true) => split_grouped_by_slide(&manifest, train_fraction, ctx.seed)
            .map_err(histopipe_core::Error::Extract)?,
        ("kfold", false) => {
            kfold_split(&manifest, k, ctx.seed).map_err(histopipe_core::Error::Extract)?
        }
        ("kfold", true) => {
            return Err(CliError::Usage(
                "group_by_slide applies to holdout splits only".into(),
            ))
        }
        (other, _) => {
            return Err(CliError::Usage(format!(
                "mode must be holdout or kfold, got `{other}`"
            )))
        }
    };
    match &split {
        SplitAssignment::Holdout { assignment, .. } => {
            let train = assignment.iter().filter(|s| **s == Split::Train).count();
            println!(
                "holdout split: {train} train / {} val of {} records",
                assignment.len() - train,
                assignment.len()
            );
        }
        SplitAssignment::KFold { k, fold_of, degraded } => {
            let mut sizes = vec![0usize; *k as usize];
            for f in fold_of {
                sizes[*f as usize] += 1;
            }
            println!("{k}-fold split: fold sizes {sizes:?}");
            if *degraded {
                println!("warning: some class has fewer samples than folds; not every fold sees every class");
            }
        }
    }
    manifest.split = Some(split);
    manifest.check_consistency().map_err(CliError::Process)?;
    manifest.write(&manifest_path)?;
    println!("manifest: {}", manifest_path.display());
    ctx.write_run_record("split")
}

pub fn run_stats(ctx: &Ctx) -> CmdResult {
    let mut block = ctx.config.section("stats")?;
    let manifest_path = ctx.artifact(block.take("manifest"), "manifest.txt");
    block.finish()?;

    let mut manifest = load_manifest(&manifest_path)?;
    let all: Vec<usize> = (0..manifest.records.len()).collect();
    let patches = load_labeled_patches(&manifest, &manifest_path, &all)?;
    let images: Vec<_> = patches.into_iter().map(|(p, _)| p).collect();
    let stats = compute_dataset_stats(&images).map_err(histopipe_core::Error::Imaging)?;
    println!(
        "stats over {} patches: mean {:?}, std {:?}",
        stats.sample_count,
        stats
            .per_channel_mean
            .iter()
            .map(|v| (v * 1000.0).round() / 1000.0)
            .collect::<Vec<_>>(),
        stats
            .per_channel_std
            .iter()
            .map(|v| (v * 1000.0).round() / 1000.0)
            .collect::<Vec<_>>()
    );
    manifest.stats = Some(stats);
    manifest.write(&manifest_path)?;
    println!("manifest: {}", manifest_path.display());
    ctx.write_run_record("stats")
}
