//! Densely connected convolutional network built from scratch: topology
//! descriptors, Xavier initialization, forward pass, analytic
//! backpropagation, weighted cross-entropy and SGD schedules.
//!
//! The topology follows a fixed stage list: a 7x7 stride-2 stem
//! convolution, a 3x3 stride-2 max pool, then one dense stage per block
//! (bottlenecked 1x1 -> 3x3 layers with concatenative connectivity,
//! closed by a 1x1 transition convolution and a full 2x2 pool), and a
//! classifier head of global average pooling plus a single
//! fully-connected layer. ReLU follows every convolution; there is no
//! batch normalization, dropout or weight decay.

mod backend;
mod loss;
mod model;
mod ops;
mod params;
mod scalar;
mod tensor;
mod train;

pub use backend::NetworkBackend;
pub use loss::{class_weights, weighted_cross_entropy, ClassWeights};
pub use model::{backward, forward, forward_infer, predict, softmax_rows, TrainCache};
pub use params::{init_xavier_uniform, load_params, save_params, xavier_bound, LoadReport, ParamStore};
pub use scalar::{Dtype, Scalar};
pub use tensor::Tensor;
pub use train::{
    effective_lr, evaluate_accuracy, train, EpochRecord, LrDecay, MetricsLog, Phase, Scope,
    TrainConfig, TrainOutcome, TrainSchedule, TrainingSet,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid network spec: {0}")]
    BadSpec(String),
    #[error("spatial underflow at stage `{stage}`: {height}x{width} input collapses")]
    SpatialUnderflow {
        stage: String,
        height: usize,
        width: usize,
    },
    #[error("{context}: expected shape {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("class {class} has zero samples; log-balanced weight undefined")]
    ZeroClassCount { class: usize },
    #[error("{labels} labels for {rows} logit rows")]
    LabelCount { labels: usize, rows: usize },
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("batch size {batch} exceeds training set of {train}; no full batch fits")]
    BatchExceedsTrainingSet { batch: usize, train: usize },
    #[error("weights file {path}: {message}")]
    WeightsFormat { path: String, message: String },
    #[error("parameter `{name}` missing from store")]
    MissingParam { name: String },
    #[error("forward cache does not match this backward call: {0}")]
    CacheMismatch(String),
}

/// Pooling flavor used by transition stages; the stem pool and the
/// classifier's global pool are fixed (max and average respectively).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TransitionPool {
    #[default]
    Max,
    Avg,
}

/// Topology descriptor; all tensor shapes derive from it.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub input_channels: usize,
    pub num_classes: usize,
    /// Stem convolution output channels.
    pub initial_channels: usize,
    pub growth_rate: usize,
    /// Dense layers per block; one transition follows every block.
    pub block_layers: Vec<usize>,
    /// The 1x1 bottleneck emits `bottleneck_factor * growth_rate` channels.
    pub bottleneck_factor: usize,
    /// Transition convolution emits `floor(in * compression)` channels.
    pub transition_compression: f64,
    pub transition_pool: TransitionPool,
}

impl NetworkSpec {
    /// Small configuration for tests and desk-scale training.
    pub fn toy(growth_rate: usize, block_layers: Vec<usize>, initial_channels: usize) -> NetworkSpec {
        NetworkSpec {
            input_channels: 3,
            num_classes: 4,
            initial_channels,
            growth_rate,
            block_layers,
            bottleneck_factor: 4,
            transition_compression: 0.5,
            transition_pool: TransitionPool::Max,
        }
    }

    /// The reference large descriptor: growth 48, blocks 6/12/36/24,
    /// 96 initial channels. Shipped for shape validation only.
    pub fn densenet161() -> NetworkSpec {
        NetworkSpec {
            input_channels: 3,
            num_classes: 4,
            initial_channels: 96,
            growth_rate: 48,
            block_layers: vec![6, 12, 36, 24],
            bottleneck_factor: 4,
            transition_compression: 0.5,
            transition_pool: TransitionPool::Max,
        }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if self.input_channels == 0
            || self.num_classes == 0
            || self.initial_channels == 0
            || self.growth_rate == 0
            || self.bottleneck_factor == 0
        {
            return Err(NetError::BadSpec("zero-sized dimension".into()));
        }
        if self.block_layers.is_empty() || self.block_layers.contains(&0) {
            return Err(NetError::BadSpec("blocks must be nonempty with >= 1 layer each".into()));
        }
        if !(self.transition_compression > 0.0 && self.transition_compression <= 1.0) {
            return Err(NetError::BadSpec(format!(
                "transition compression {} outside (0, 1]",
                self.transition_compression
            )));
        }
        Ok(())
    }

    /// Conceptual stage names: stem conv, stem pool, one dense stage per
    /// block, one classifier stage.
    pub fn stage_names(&self) -> Vec<String> {
        let mut names = vec!["stem_conv".to_string(), "stem_pool".to_string()];
        for b in 0..self.block_layers.len() {
            names.push(format!("dense_stage_{b}"));
        }
        names.push("classifier".to_string());
        names
    }

    /// Channels entering each dense layer of a block whose input has
    /// `c_in` channels: concatenation of the block input and all earlier
    /// layer outputs.
    pub fn layer_input_channels(&self, c_in: usize, layer: usize) -> usize {
        c_in + layer * self.growth_rate
    }

    /// Channels leaving a dense block with `c_in` input channels.
    pub fn block_output_channels(&self, block: usize, c_in: usize) -> usize {
        c_in + self.block_layers[block] * self.growth_rate
    }

    fn transition_output_channels(&self, c_in: usize) -> usize {
        ((c_in as f64 * self.transition_compression).floor() as usize).max(1)
    }

    /// Channel bookkeeping for every parameter tensor, in declaration
    /// order; validated structurally before any allocation.
    pub fn channel_plan(&self) -> Result<ChannelPlan, NetError> {
        self.validate()?;
        let mut tensors = Vec::new();
        tensors.push(TensorSpec::conv(
            "stem.conv",
            7,
            self.input_channels,
            self.initial_channels,
        ));
        let mut c = self.initial_channels;
        for (b, &layers) in self.block_layers.iter().enumerate() {
            for l in 0..layers {
                let c_in = self.layer_input_channels(c, l);
                let bottleneck = self.bottleneck_factor * self.growth_rate;
                tensors.push(TensorSpec::conv(
                    &format!("block{b}.layer{l}.conv1"),
                    1,
                    c_in,
                    bottleneck,
                ));
                tensors.push(TensorSpec::conv(
                    &format!("block{b}.layer{l}.conv2"),
                    3,
                    bottleneck,
                    self.growth_rate,
                ));
            }
            let block_out = self.block_output_channels(b, c);
            let trans_out = self.transition_output_channels(block_out);
            tensors.push(TensorSpec::conv(
                &format!("block{b}.transition.conv"),
                1,
                block_out,
                trans_out,
            ));
            c = trans_out;
        }
        tensors.push(TensorSpec::fc("fc", c, self.num_classes));
        Ok(ChannelPlan {
            tensors,
            feature_channels: c,
        })
    }

    /// Spatial shape propagation for an input of the given size; errors
    /// name the first stage that collapses to zero pixels.
    pub fn forward_shapes(&self, height: usize, width: usize) -> Result<Vec<StageShape>, NetError> {
        self.validate()?;
        let mut shapes = Vec::new();
        let mut h = height;
        let mut w = width;
        let mut c = self.input_channels;
        shapes.push(StageShape::new("input", h, w, c));
        let advance = |stage: &str, k: usize, s: usize, p: usize, h: &mut usize, w: &mut usize| {
            let out = |dim: usize| -> Option<usize> {
                let padded = dim + 2 * p;
                if padded < k {
                    None
                } else {
                    Some((padded - k) / s + 1)
                }
            };
            match (out(*h), out(*w)) {
                (Some(nh), Some(nw)) if nh > 0 && nw > 0 => {
                    *h = nh;
                    *w = nw;
                    Ok(())
                }
                _ => Err(NetError::SpatialUnderflow {
                    stage: stage.to_string(),
                    height: *h,
                    width: *w,
                }),
            }
        };
        advance("stem_conv", 7, 2, 3, &mut h, &mut w)?;
        c = self.initial_channels;
        shapes.push(StageShape::new("stem_conv", h, w, c));
        advance("stem_pool", 3, 2, 1, &mut h, &mut w)?;
        shapes.push(StageShape::new("stem_pool", h, w, c));
        for (b, _) in self.block_layers.iter().enumerate() {
            let block_out = self.block_output_channels(b, c);
            shapes.push(StageShape::new(&format!("block{b}.dense"), h, w, block_out));
            let trans_out = self.transition_output_channels(block_out);
            advance(&format!("block{b}.transition_pool"), 2, 2, 0, &mut h, &mut w)?;
            shapes.push(StageShape::new(&format!("block{b}.transition"), h, w, trans_out));
            c = trans_out;
        }
        shapes.push(StageShape::new("global_avg_pool", 1, 1, c));
        shapes.push(StageShape::new("fc", 1, 1, self.num_classes));
        Ok(shapes)
    }
}

/// Shape of one parameter tensor in the plan.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub weight_shape: Vec<usize>,
    pub bias_shape: Vec<usize>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl TensorSpec {
    fn conv(name: &str, k: usize, c_in: usize, c_out: usize) -> TensorSpec {
        TensorSpec {
            name: name.to_string(),
            weight_shape: vec![k, k, c_in, c_out],
            bias_shape: vec![c_out],
            fan_in: k * k * c_in,
            fan_out: k * k * c_out,
        }
    }

    fn fc(name: &str, c_in: usize, c_out: usize) -> TensorSpec {
        TensorSpec {
            name: name.to_string(),
            weight_shape: vec![c_in, c_out],
            bias_shape: vec![c_out],
            fan_in: c_in,
            fan_out: c_out,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelPlan {
    pub tensors: Vec<TensorSpec>,
    /// Channels reaching the classifier head.
    pub feature_channels: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageShape {
    pub stage: String,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl StageShape {
    fn new(stage: &str, height: usize, width: usize, channels: usize) -> StageShape {
        StageShape {
            stage: stage.to_string(),
            height,
            width,
            channels,
        }
    }
}
