//! Forward pass, cached activations and analytic backpropagation through
//! the dense topology.
//!
//! Within a dense block the running feature list starts at the block
//! input; every layer consumes the channel concatenation of the whole
//! list and appends its own growth-rate output. The backward pass splits
//! each consumer's input gradient back across the list, accumulating
//! wherever a feature fans out to several later layers.

use super::loss::softmax_row;
use super::ops::{
    conv2d_backward, conv2d_forward, fc_backward, fc_forward, global_avg_pool_backward,
    global_avg_pool_forward, maxpool_backward, maxpool_forward, relu_backward, relu_forward,
    ConvGeometry, DENSE_CONV1, DENSE_CONV3, STEM_CONV, STEM_POOL, TRANSITION_CONV, TRANSITION_POOL,
};
use super::params::ParamStore;
use super::scalar::Scalar;
use super::tensor::Tensor;
use super::{NetError, NetworkSpec, TransitionPool};
use crate::imaging::LabelClass;

struct LayerCache<F> {
    concat_in: Tensor<F>,
    pre1: Tensor<F>,
    act1: Tensor<F>,
    pre2: Tensor<F>,
}

struct BlockCache<F> {
    feats: Vec<Tensor<F>>,
    layers: Vec<LayerCache<F>>,
    concat_out: Tensor<F>,
    transition_pre: Tensor<F>,
    transition_act: Tensor<F>,
    pool_argmax: Vec<u32>,
    pool_out_shape: Vec<usize>,
}

/// Activations recorded during a training-mode forward pass.
pub struct TrainCache<F> {
    input: Tensor<F>,
    stem_pre: Tensor<F>,
    stem_act: Tensor<F>,
    stem_pool_argmax: Vec<u32>,
    stem_pool_shape: Vec<usize>,
    blocks: Vec<BlockCache<F>>,
    gap_in_shape: Vec<usize>,
    gap_out: Tensor<F>,
    batch: usize,
}

fn check_input<F: Scalar>(spec: &NetworkSpec, batch: &Tensor<F>) -> Result<(), NetError> {
    let shape = batch.shape();
    if shape.len() != 4 || shape[3] != spec.input_channels {
        return Err(NetError::ShapeMismatch {
            context: "network input".into(),
            expected: vec![0, 0, 0, spec.input_channels],
            got: shape.to_vec(),
        });
    }
    // Spatial survival check names the first collapsing stage.
    spec.forward_shapes(shape[1], shape[2])?;
    Ok(())
}

/// Average pool expressed through the shared geometry when transitions
/// are configured for averaging instead of the paper's max pooling.
fn avg_pool_forward<F: Scalar>(input: &Tensor<F>, geom: ConvGeometry) -> Tensor<F> {
    let [n, h, w, c]: [usize; 4] = input.shape().try_into().expect("pool input rank 4");
    let oh = geom.out_dim(h);
    let ow = geom.out_dim(w);
    let mut out = Tensor::zeros(vec![n, oh, ow, c]);
    let inv = F::from_f64(1.0 / (geom.kernel * geom.kernel) as f64);
    for ni in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for ci in 0..c {
                    let mut acc = F::ZERO;
                    for ky in 0..geom.kernel {
                        for kx in 0..geom.kernel {
                            let iy = oy * geom.stride + ky;
                            let ix = ox * geom.stride + kx;
                            if iy < h && ix < w {
                                acc += input.get4(ni, iy, ix, ci);
                            }
                        }
                    }
                    out.data_mut()[((ni * oh + oy) * ow + ox) * c + ci] = acc * inv;
                }
            }
        }
    }
    out
}

fn avg_pool_backward<F: Scalar>(
    grad_out: &Tensor<F>,
    input_shape: &[usize],
    geom: ConvGeometry,
) -> Tensor<F> {
    let [n, h, w, c]: [usize; 4] = input_shape.try_into().expect("pool input rank 4");
    let [gn, oh, ow, gc]: [usize; 4] = grad_out.shape().try_into().expect("grad rank 4");
    debug_assert_eq!((gn, gc), (n, c));
    let inv = F::from_f64(1.0 / (geom.kernel * geom.kernel) as f64);
    let mut grad_input = Tensor::zeros(input_shape.to_vec());
    for ni in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for ci in 0..c {
                    let g = grad_out.data()[((ni * oh + oy) * ow + ox) * c + ci] * inv;
                    for ky in 0..geom.kernel {
                        for kx in 0..geom.kernel {
                            let iy = oy * geom.stride + ky;
                            let ix = ox * geom.stride + kx;
                            if iy < h && ix < w {
                                let idx = ((ni * h + iy) * w + ix) * c + ci;
                                grad_input.data_mut()[idx] += g;
                            }
                        }
                    }
                }
            }
        }
    }
    grad_input
}

/// Training-mode forward pass: logits plus the cache [`backward`] needs.
pub fn forward<F: Scalar>(
    params: &ParamStore<F>,
    spec: &NetworkSpec,
    batch: &Tensor<F>,
) -> Result<(Tensor<F>, TrainCache<F>), NetError> {
    check_input(spec, batch)?;
    let stem_w = params.get("stem.conv.weight")?;
    let stem_b = params.get("stem.conv.bias")?;
    let stem_pre = conv2d_forward(batch, stem_w, stem_b, STEM_CONV);
    let stem_act = relu_forward(&stem_pre);
    let (mut x, stem_pool_argmax) = maxpool_forward(&stem_act, STEM_POOL);
    let stem_pool_shape = stem_act.shape().to_vec();

    let mut blocks = Vec::with_capacity(spec.block_layers.len());
    for (b, &layers) in spec.block_layers.iter().enumerate() {
        let mut feats = vec![x];
        let mut layer_caches = Vec::with_capacity(layers);
        for l in 0..layers {
            let refs: Vec<&Tensor<F>> = feats.iter().collect();
            let concat_in = Tensor::concat_channels(&refs);
            let w1 = params.get(&format!("block{b}.layer{l}.conv1.weight"))?;
            let b1 = params.get(&format!("block{b}.layer{l}.conv1.bias"))?;
            let pre1 = conv2d_forward(&concat_in, w1, b1, DENSE_CONV1);
            let act1 = relu_forward(&pre1);
            let w2 = params.get(&format!("block{b}.layer{l}.conv2.weight"))?;
            let b2 = params.get(&format!("block{b}.layer{l}.conv2.bias"))?;
            let pre2 = conv2d_forward(&act1, w2, b2, DENSE_CONV3);
            let act2 = relu_forward(&pre2);
            feats.push(act2);
            layer_caches.push(LayerCache {
                concat_in,
                pre1,
                act1,
                pre2,
            });
        }
        let refs: Vec<&Tensor<F>> = feats.iter().collect();
        let concat_out = Tensor::concat_channels(&refs);
        let wt = params.get(&format!("block{b}.transition.conv.weight"))?;
        let bt = params.get(&format!("block{b}.transition.conv.bias"))?;
        let transition_pre = conv2d_forward(&concat_out, wt, bt, TRANSITION_CONV);
        let transition_act = relu_forward(&transition_pre);
        let (pooled, pool_argmax) = match spec.transition_pool {
            TransitionPool::Max => maxpool_forward(&transition_act, TRANSITION_POOL),
            TransitionPool::Avg => (avg_pool_forward(&transition_act, TRANSITION_POOL), Vec::new()),
        };
        let pool_out_shape = transition_act.shape().to_vec();
        blocks.push(BlockCache {
            feats,
            layers: layer_caches,
            concat_out,
            transition_pre,
            transition_act,
            pool_argmax,
            pool_out_shape,
        });
        x = pooled;
    }

    let gap_in_shape = x.shape().to_vec();
    let gap_out = global_avg_pool_forward(&x);
    let logits = fc_forward(&gap_out, params.get("fc.weight")?, params.get("fc.bias")?);
    let batch_n = batch.shape()[0];
    Ok((
        logits,
        TrainCache {
            input: batch.clone(),
            stem_pre,
            stem_act,
            stem_pool_argmax,
            stem_pool_shape,
            blocks,
            gap_in_shape,
            gap_out,
            batch: batch_n,
        },
    ))
}

/// Inference-only forward pass; no cache is built.
pub fn forward_infer<F: Scalar>(
    params: &ParamStore<F>,
    spec: &NetworkSpec,
    batch: &Tensor<F>,
) -> Result<Tensor<F>, NetError> {
    // The cache amounts to holding activations the caller drops right
    // away; toy scale makes the shared path a fair trade for one code
    // path to test.
    forward(params, spec, batch).map(|(logits, _)| logits)
}

/// Gradients for every parameter tensor, mirroring the forward pass in
/// reverse. `grad_logits` is dLoss/dLogits from the loss layer.
pub fn backward<F: Scalar>(
    params: &ParamStore<F>,
    spec: &NetworkSpec,
    cache: &TrainCache<F>,
    grad_logits: &Tensor<F>,
) -> Result<ParamStore<F>, NetError> {
    if grad_logits.shape() != [cache.batch, spec.num_classes] {
        return Err(NetError::CacheMismatch(format!(
            "grad logits {:?} vs batch {} x {}",
            grad_logits.shape(),
            cache.batch,
            spec.num_classes
        )));
    }
    if cache.blocks.len() != spec.block_layers.len() {
        return Err(NetError::CacheMismatch(format!(
            "cache has {} blocks, spec {}",
            cache.blocks.len(),
            spec.block_layers.len()
        )));
    }
    let mut grads = params.zeros_like();

    // Classifier head.
    let fc_w = params.get("fc.weight")?;
    let (gap_grad, gw, gb) = fc_backward(&cache.gap_out, fc_w, grad_logits);
    *grads.get_mut("fc.weight")? = gw;
    *grads.get_mut("fc.bias")? = gb;
    let mut g = global_avg_pool_backward(&gap_grad, &cache.gap_in_shape);

    // Dense stages in reverse.
    for (b, block) in cache.blocks.iter().enumerate().rev() {
        g = match spec.transition_pool {
            TransitionPool::Max => maxpool_backward(&block.pool_argmax, &g, &block.pool_out_shape),
            TransitionPool::Avg => avg_pool_backward(&g, &block.pool_out_shape, TRANSITION_POOL),
        };
        debug_assert_eq!(block.transition_act.shape(), g.shape());
        g = relu_backward(&block.transition_pre, &g);
        let wt = params.get(&format!("block{b}.transition.conv.weight"))?;
        let (concat_grad, gw, gb) = conv2d_backward(&block.concat_out, wt, &g, TRANSITION_CONV);
        *grads.get_mut(&format!("block{b}.transition.conv.weight"))? = gw;
        *grads.get_mut(&format!("block{b}.transition.conv.bias"))? = gb;

        let feat_channels: Vec<usize> = block.feats.iter().map(|f| f.shape()[3]).collect();
        let mut feat_grads: Vec<Tensor<F>> = block
            .feats
            .iter()
            .map(|f| Tensor::zeros(f.shape().to_vec()))
            .collect();
        concat_grad.split_channels_accumulate(&feat_channels, &mut feat_grads);

        for (l, layer) in block.layers.iter().enumerate().rev() {
            let g2 = relu_backward(&layer.pre2, &feat_grads[l + 1]);
            let w2 = params.get(&format!("block{b}.layer{l}.conv2.weight"))?;
            let (g_act1, gw2, gb2) = conv2d_backward(&layer.act1, w2, &g2, DENSE_CONV3);
            *grads.get_mut(&format!("block{b}.layer{l}.conv2.weight"))? = gw2;
            *grads.get_mut(&format!("block{b}.layer{l}.conv2.bias"))? = gb2;
            let g1 = relu_backward(&layer.pre1, &g_act1);
            let w1 = params.get(&format!("block{b}.layer{l}.conv1.weight"))?;
            let (g_concat_in, gw1, gb1) = conv2d_backward(&layer.concat_in, w1, &g1, DENSE_CONV1);
            *grads.get_mut(&format!("block{b}.layer{l}.conv1.weight"))? = gw1;
            *grads.get_mut(&format!("block{b}.layer{l}.conv1.bias"))? = gb1;
            // Fan the concat gradient back across the feature list.
            let (earlier, _) = feat_grads.split_at_mut(l + 1);
            g_concat_in.split_channels_accumulate(&feat_channels[..=l], earlier);
        }
        g = feat_grads.swap_remove(0);
    }

    // Stem.
    g = maxpool_backward(&cache.stem_pool_argmax, &g, &cache.stem_pool_shape);
    debug_assert_eq!(cache.stem_act.shape(), g.shape());
    g = relu_backward(&cache.stem_pre, &g);
    let stem_w = params.get("stem.conv.weight")?;
    let (_, gw, gb) = conv2d_backward(&cache.input, stem_w, &g, STEM_CONV);
    *grads.get_mut("stem.conv.weight")? = gw;
    *grads.get_mut("stem.conv.bias")? = gb;
    Ok(grads)
}

/// Softmax of every logit row as f64.
pub fn softmax_rows<F: Scalar>(logits: &Tensor<F>) -> Vec<[f64; 4]> {
    let n = logits.shape()[0];
    (0..n)
        .map(|i| {
            let row: Vec<f64> = logits.data()[i * 4..(i + 1) * 4]
                .iter()
                .map(|v| v.to_f64())
                .collect();
            let p = softmax_row(&row);
            [p[0], p[1], p[2], p[3]]
        })
        .collect()
}

/// Argmax class per patch plus the full probability row; ties break to
/// the lowest class code.
pub fn predict<F: Scalar>(
    params: &ParamStore<F>,
    spec: &NetworkSpec,
    batch: &Tensor<F>,
) -> Result<Vec<(LabelClass, [f64; 4])>, NetError> {
    let logits = forward_infer(params, spec, batch)?;
    Ok(softmax_rows(&logits)
        .into_iter()
        .map(|p| (crate::segmentation::argmax_class(&p), p))
        .collect())
}
