//! SGD training with head-first fine-tuning phases, staged learning
//! rates, per-epoch shuffling and best-validation checkpointing.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::loss::{weighted_cross_entropy, ClassWeights};
use super::model::{backward, forward, forward_infer, softmax_rows};
use super::params::{init_xavier_uniform, ParamStore};
use super::scalar::Scalar;
use super::tensor::Tensor;
use super::{NetError, NetworkSpec};
use crate::augment::{augment_batch_seeded, AugmentationConfig, ContextPatch};
use crate::imaging::{normalize, DatasetStats, LabelClass, RasterImage, NORMALIZE_EPSILON};
use crate::io::FormatError;
use crate::Error;

/// Which parameters a phase updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    /// Only the fully-connected head (weights and bias).
    HeadOnly,
    FullNetwork,
}

impl Scope {
    pub fn name(self) -> &'static str {
        match self {
            Scope::HeadOnly => "head_only",
            Scope::FullNetwork => "full_network",
        }
    }

    pub fn from_name(name: &str) -> Option<Scope> {
        match name {
            "head_only" | "head" => Some(Scope::HeadOnly),
            "full_network" | "full" => Some(Scope::FullNetwork),
            _ => None,
        }
    }

    fn updates(self, param_name: &str) -> bool {
        match self {
            Scope::FullNetwork => true,
            Scope::HeadOnly => param_name.starts_with("fc."),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phase {
    pub scope: Scope,
    pub epochs: u32,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrDecay {
    pub factor: f64,
    pub every_n_epochs: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSchedule {
    pub phases: Vec<Phase>,
    pub batch_size: usize,
    pub shuffle_per_epoch: bool,
    pub lr_decay: Option<LrDecay>,
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<(), NetError> {
        if self.phases.is_empty() {
            return Err(NetError::BadSpec("schedule has no phases".into()));
        }
        for p in &self.phases {
            if p.epochs == 0 || !(p.learning_rate > 0.0) {
                return Err(NetError::BadSpec(format!(
                    "phase needs epochs > 0 and lr > 0, got {} @ {}",
                    p.epochs, p.learning_rate
                )));
            }
        }
        if self.batch_size == 0 {
            return Err(NetError::BadSpec("batch size must be positive".into()));
        }
        if let Some(d) = &self.lr_decay {
            if !(d.factor > 0.0) || d.every_n_epochs == 0 {
                return Err(NetError::BadSpec("lr decay needs factor > 0 and period > 0".into()));
            }
        }
        Ok(())
    }
}

/// Learning rate after applying the optional step decay within a phase.
pub fn effective_lr(base: f64, decay: Option<LrDecay>, epoch_in_phase: u32) -> f64 {
    match decay {
        None => base,
        Some(d) => base * d.factor.powi((epoch_in_phase / d.every_n_epochs) as i32),
    }
}

/// Labeled 8-bit patches plus the normalization statistics they were
/// trained under. Context rasters, when present, run parallel to the
/// training patches and feed source-context fill during augmentation.
pub struct TrainingSet {
    pub train: Vec<(RasterImage, LabelClass)>,
    pub val: Vec<(RasterImage, LabelClass)>,
    pub stats: DatasetStats,
    pub train_contexts: Option<Vec<ContextPatch>>,
}

impl TrainingSet {
    pub fn new(
        train: Vec<(RasterImage, LabelClass)>,
        val: Vec<(RasterImage, LabelClass)>,
        stats: DatasetStats,
    ) -> TrainingSet {
        TrainingSet {
            train,
            val,
            stats,
            train_contexts: None,
        }
    }

    pub fn with_contexts(mut self, contexts: Vec<ContextPatch>) -> TrainingSet {
        self.train_contexts = Some(contexts);
        self
    }
}

pub struct TrainConfig {
    pub schedule: TrainSchedule,
    pub augmentation: Option<AugmentationConfig>,
    pub class_weights: Option<ClassWeights>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: u32,
    pub phase: String,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

pub const METRICS_HEADER: &str = "HISTOPIPE-METRICS v1";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    pub records: Vec<EpochRecord>,
}

impl MetricsLog {
    pub fn best_val_acc(&self) -> Option<f64> {
        self.records
            .iter()
            .map(|r| r.val_acc)
            .fold(None, |best, v| Some(best.map_or(v, |b: f64| b.max(v))))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from(METRICS_HEADER);
        out.push('\n');
        out.push_str("epoch, phase, lr, train_loss, train_acc, val_acc\n");
        for r in &self.records {
            out.push_str(&format!(
                "{}, {}, {}, {}, {}, {}\n",
                r.epoch, r.phase, r.lr, r.train_loss, r.train_acc, r.val_acc
            ));
        }
        out
    }

    pub fn from_text(path: &std::path::Path, text: &str) -> Result<MetricsLog, FormatError> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or("").trim();
        if header != METRICS_HEADER {
            return Err(FormatError::BadHeader {
                path: path.to_path_buf(),
                expected: METRICS_HEADER.to_string(),
                found: header.to_string(),
            });
        }
        let mut records = Vec::new();
        for (i, raw) in lines.enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with("epoch,") {
                continue;
            }
            let parts: Vec<&str> = line.split(',').map(|s| s.trim()).collect();
            if parts.len() != 6 {
                return Err(FormatError::record(path, i + 2, "expected 6 fields"));
            }
            let bad = |field: &str| FormatError::record(path, i + 2, format!("bad {field}"));
            records.push(EpochRecord {
                epoch: parts[0].parse().map_err(|_| bad("epoch"))?,
                phase: parts[1].to_string(),
                lr: parts[2].parse().map_err(|_| bad("lr"))?,
                train_loss: parts[3].parse().map_err(|_| bad("train_loss"))?,
                train_acc: parts[4].parse().map_err(|_| bad("train_acc"))?,
                val_acc: parts[5].parse().map_err(|_| bad("val_acc"))?,
            });
        }
        Ok(MetricsLog { records })
    }

    pub fn write(&self, path: &std::path::Path) -> Result<(), FormatError> {
        crate::io::write_text(path, &self.to_text())
    }

    pub fn read(path: &std::path::Path) -> Result<MetricsLog, FormatError> {
        let text = std::fs::read_to_string(path).map_err(|e| FormatError::io(path, e))?;
        Self::from_text(path, &text)
    }
}

pub struct TrainOutcome<F> {
    /// Parameters of the epoch with the highest checkpoint metric
    /// (validation accuracy, or training accuracy when no validation
    /// split exists).
    pub params: ParamStore<F>,
    pub log: MetricsLog,
    pub best_epoch: u32,
    pub best_metric: f64,
}

fn mix_seed(seed: u64, epoch: u64, batch: u64) -> u64 {
    seed ^ epoch.wrapping_mul(0x9E3779B97F4A7C15) ^ batch.wrapping_mul(0xBF58476D1CE4E5B9)
}

fn assemble_batch<F: Scalar>(
    patches: &[&RasterImage],
    stats: &DatasetStats,
    augmentation: Option<&AugmentationConfig>,
    aug_seed: u64,
    contexts: Option<&[ContextPatch]>,
) -> Result<Tensor<F>, Error> {
    let owned: Vec<RasterImage> = patches.iter().map(|p| (*p).clone()).collect();
    let floats = match augmentation {
        Some(config) => augment_batch_seeded(&owned, config, stats, aug_seed, contexts)?,
        None => owned
            .iter()
            .map(|p| normalize(p, stats, NORMALIZE_EPSILON))
            .collect::<Result<_, _>>()?,
    };
    Ok(Tensor::from_float_images(&floats))
}

/// Accuracy over a labeled set, evaluated in inference mode.
pub fn evaluate_accuracy<F: Scalar>(
    params: &ParamStore<F>,
    spec: &NetworkSpec,
    set: &[(RasterImage, LabelClass)],
    stats: &DatasetStats,
    batch_size: usize,
) -> Result<f64, Error> {
    if set.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for chunk in set.chunks(batch_size.max(1)) {
        let patches: Vec<&RasterImage> = chunk.iter().map(|(p, _)| p).collect();
        let batch = assemble_batch::<F>(&patches, stats, None, 0, None)?;
        let logits = forward_infer(params, spec, &batch).map_err(Error::Net)?;
        for (probs, (_, label)) in softmax_rows(&logits).iter().zip(chunk) {
            if crate::segmentation::argmax_class(probs) == *label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / set.len() as f64)
}

/// Plain SGD over the schedule's phases. One epoch walks all full
/// batches of the shuffled training set (the final partial batch is
/// dropped), head-only phases update nothing outside the classifier
/// head, and the returned parameters are the checkpoint with the best
/// validation accuracy (earliest epoch on ties).
pub fn train<F: Scalar>(
    data: &TrainingSet,
    spec: &NetworkSpec,
    config: &TrainConfig,
) -> Result<TrainOutcome<F>, Error> {
    config.schedule.validate().map_err(Error::Net)?;
    if data.train.is_empty() {
        return Err(Error::Net(NetError::EmptyTrainingSet));
    }
    if config.schedule.batch_size > data.train.len() {
        return Err(Error::Net(NetError::BatchExceedsTrainingSet {
            batch: config.schedule.batch_size,
            train: data.train.len(),
        }));
    }
    if let Some(ctxs) = &data.train_contexts {
        if ctxs.len() != data.train.len() {
            return Err(Error::Net(NetError::CacheMismatch(format!(
                "{} context rasters for {} training patches",
                ctxs.len(),
                data.train.len()
            ))));
        }
    }
    if let Some(aug) = &config.augmentation {
        aug.validate().map_err(Error::Augment)?;
    }
    let weights = config.class_weights.unwrap_or_else(ClassWeights::unit);
    let mut params = init_xavier_uniform::<F>(spec, config.seed).map_err(Error::Net)?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    shuffle_rng.set_stream(0x5375666c65); // dedicated shuffle stream

    let mut log = MetricsLog::default();
    let mut best: Option<(f64, u32, ParamStore<F>)> = None;
    let mut indices: Vec<usize> = (0..data.train.len()).collect();
    let batch_size = config.schedule.batch_size;
    let mut global_epoch = 0u32;

    for phase in &config.schedule.phases {
        for epoch_in_phase in 0..phase.epochs {
            let lr = effective_lr(phase.learning_rate, config.schedule.lr_decay, epoch_in_phase);
            if config.schedule.shuffle_per_epoch {
                indices.shuffle(&mut shuffle_rng);
            }
            let mut epoch_loss = 0.0f64;
            let mut batches = 0usize;
            for (batch_idx, chunk) in indices.chunks_exact(batch_size).enumerate() {
                let patches: Vec<&RasterImage> = chunk.iter().map(|&i| &data.train[i].0).collect();
                let labels: Vec<LabelClass> = chunk.iter().map(|&i| data.train[i].1).collect();
                let aug_seed = mix_seed(config.seed, global_epoch as u64, batch_idx as u64);
                let batch_contexts: Option<Vec<ContextPatch>> = data
                    .train_contexts
                    .as_ref()
                    .map(|ctxs| chunk.iter().map(|&i| ctxs[i].clone()).collect());
                let batch = assemble_batch::<F>(
                    &patches,
                    &data.stats,
                    config.augmentation.as_ref(),
                    aug_seed,
                    batch_contexts.as_deref(),
                )?;
                let (logits, cache) = forward(&params, spec, &batch).map_err(Error::Net)?;
                let (loss, grad_logits) =
                    weighted_cross_entropy(&logits, &labels, &weights).map_err(Error::Net)?;
                epoch_loss += loss;
                batches += 1;
                let grads = backward(&params, spec, &cache, &grad_logits).map_err(Error::Net)?;
                let lr_f = F::from_f64(lr);
                for (name, tensor) in params.iter_mut() {
                    if !phase.scope.updates(name) {
                        continue;
                    }
                    let grad = grads.get(name).map_err(Error::Net)?;
                    for (w, &g) in tensor.data_mut().iter_mut().zip(grad.data()) {
                        *w -= lr_f * g;
                    }
                }
            }
            let train_loss = if batches > 0 { epoch_loss / batches as f64 } else { 0.0 };
            let train_acc =
                evaluate_accuracy::<F>(&params, spec, &data.train, &data.stats, batch_size)?;
            let val_acc = evaluate_accuracy::<F>(&params, spec, &data.val, &data.stats, batch_size)?;
            let metric = if data.val.is_empty() { train_acc } else { val_acc };
            log.records.push(EpochRecord {
                epoch: global_epoch,
                phase: phase.scope.name().to_string(),
                lr,
                train_loss,
                train_acc,
                val_acc,
            });
            let improved = match &best {
                None => true,
                Some((best_metric, _, _)) => metric > *best_metric,
            };
            if improved {
                best = Some((metric, global_epoch, params.clone()));
            }
            global_epoch += 1;
        }
    }
    let (best_metric, best_epoch, best_params) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        params: best_params,
        log,
        best_epoch,
        best_metric,
    })
}
