//! Layer primitives over NHWC tensors: convolution, max pooling, global
//! average pooling, ReLU and the fully-connected head, each with its
//! analytic backward pass.
//!
//! Loops are plain and deterministic; batch-parallel paths collect
//! per-sample results and reduce them in index order so thread count
//! never changes a bit of output.

use rayon::prelude::*;

use super::scalar::Scalar;
use super::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_dim(&self, dim: usize) -> usize {
        (dim + 2 * self.padding - self.kernel) / self.stride + 1
    }
}

pub const STEM_CONV: ConvGeometry = ConvGeometry { kernel: 7, stride: 2, padding: 3 };
pub const STEM_POOL: ConvGeometry = ConvGeometry { kernel: 3, stride: 2, padding: 1 };
pub const DENSE_CONV1: ConvGeometry = ConvGeometry { kernel: 1, stride: 1, padding: 0 };
pub const DENSE_CONV3: ConvGeometry = ConvGeometry { kernel: 3, stride: 1, padding: 1 };
pub const TRANSITION_CONV: ConvGeometry = ConvGeometry { kernel: 1, stride: 1, padding: 0 };
pub const TRANSITION_POOL: ConvGeometry = ConvGeometry { kernel: 2, stride: 2, padding: 0 };

/// weight is [kh, kw, c_in, c_out], bias [c_out].
pub fn conv2d_forward<F: Scalar>(
    input: &Tensor<F>,
    weight: &Tensor<F>,
    bias: &Tensor<F>,
    geom: ConvGeometry,
) -> Tensor<F> {
    let [n, h, w, c_in]: [usize; 4] = input.shape().try_into().expect("conv input rank 4");
    let k = geom.kernel;
    debug_assert_eq!(weight.shape(), &[k, k, c_in, weight.shape()[3]]);
    let c_out = weight.shape()[3];
    let oh = geom.out_dim(h);
    let ow = geom.out_dim(w);
    let mut out = Tensor::zeros(vec![n, oh, ow, c_out]);
    let in_data = input.data();
    let w_data = weight.data();
    let b_data = bias.data();
    let per_sample_out = oh * ow * c_out;
    let per_sample_in = h * w * c_in;
    out.data_mut()
        .par_chunks_mut(per_sample_out)
        .enumerate()
        .for_each(|(ni, out_chunk)| {
            let in_chunk = &in_data[ni * per_sample_in..(ni + 1) * per_sample_in];
            for oy in 0..oh {
                for ox in 0..ow {
                    let acc = &mut out_chunk[(oy * ow + ox) * c_out..(oy * ow + ox + 1) * c_out];
                    acc.copy_from_slice(b_data);
                    for ky in 0..k {
                        let iy = (oy * geom.stride + ky) as isize - geom.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * geom.stride + kx) as isize - geom.padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let in_base = (iy as usize * w + ix as usize) * c_in;
                            let w_base = (ky * k + kx) * c_in * c_out;
                            for ci in 0..c_in {
                                let v = in_chunk[in_base + ci];
                                let w_row = &w_data[w_base + ci * c_out..w_base + (ci + 1) * c_out];
                                for (a, &wv) in acc.iter_mut().zip(w_row) {
                                    *a += v * wv;
                                }
                            }
                        }
                    }
                }
            }
        });
    out
}

/// Returns (grad_input, grad_weight, grad_bias).
pub fn conv2d_backward<F: Scalar>(
    input: &Tensor<F>,
    weight: &Tensor<F>,
    grad_out: &Tensor<F>,
    geom: ConvGeometry,
) -> (Tensor<F>, Tensor<F>, Tensor<F>) {
    let [n, h, w, c_in]: [usize; 4] = input.shape().try_into().expect("conv input rank 4");
    let k = geom.kernel;
    let c_out = weight.shape()[3];
    let [gn, oh, ow, gc]: [usize; 4] = grad_out.shape().try_into().expect("grad rank 4");
    assert_eq!((gn, gc), (n, c_out), "conv backward shape mismatch");
    let w_data = weight.data();
    let in_data = input.data();
    let g_data = grad_out.data();
    let per_in = h * w * c_in;
    let per_out = oh * ow * c_out;

    // grad wrt input: disjoint per sample, parallel over the batch.
    let mut grad_input = Tensor::zeros(vec![n, h, w, c_in]);
    grad_input
        .data_mut()
        .par_chunks_mut(per_in)
        .enumerate()
        .for_each(|(ni, gi_chunk)| {
            let go_chunk = &g_data[ni * per_out..(ni + 1) * per_out];
            for oy in 0..oh {
                for ox in 0..ow {
                    let go = &go_chunk[(oy * ow + ox) * c_out..(oy * ow + ox + 1) * c_out];
                    for ky in 0..k {
                        let iy = (oy * geom.stride + ky) as isize - geom.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * geom.stride + kx) as isize - geom.padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let gi_base = (iy as usize * w + ix as usize) * c_in;
                            let w_base = (ky * k + kx) * c_in * c_out;
                            for ci in 0..c_in {
                                let w_row = &w_data[w_base + ci * c_out..w_base + (ci + 1) * c_out];
                                let mut acc = F::ZERO;
                                for (&g, &wv) in go.iter().zip(w_row) {
                                    acc += g * wv;
                                }
                                gi_chunk[gi_base + ci] += acc;
                            }
                        }
                    }
                }
            }
        });

    // grad wrt weight and bias: per-sample contributions reduced in
    // batch order.
    let partials: Vec<(Vec<F>, Vec<F>)> = (0..n)
        .into_par_iter()
        .map(|ni| {
            let mut gw = vec![F::ZERO; w_data.len()];
            let mut gb = vec![F::ZERO; c_out];
            let in_chunk = &in_data[ni * per_in..(ni + 1) * per_in];
            let go_chunk = &g_data[ni * per_out..(ni + 1) * per_out];
            for oy in 0..oh {
                for ox in 0..ow {
                    let go = &go_chunk[(oy * ow + ox) * c_out..(oy * ow + ox + 1) * c_out];
                    for (b, &g) in gb.iter_mut().zip(go) {
                        *b += g;
                    }
                    for ky in 0..k {
                        let iy = (oy * geom.stride + ky) as isize - geom.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * geom.stride + kx) as isize - geom.padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let in_base = (iy as usize * w + ix as usize) * c_in;
                            let w_base = (ky * k + kx) * c_in * c_out;
                            for ci in 0..c_in {
                                let v = in_chunk[in_base + ci];
                                let gw_row = &mut gw[w_base + ci * c_out..w_base + (ci + 1) * c_out];
                                for (slot, &g) in gw_row.iter_mut().zip(go) {
                                    *slot += v * g;
                                }
                            }
                        }
                    }
                }
            }
            (gw, gb)
        })
        .collect();
    let mut grad_weight = Tensor::zeros(weight.shape().to_vec());
    let mut grad_bias = Tensor::zeros(vec![c_out]);
    for (gw, gb) in partials {
        for (slot, v) in grad_weight.data_mut().iter_mut().zip(gw) {
            *slot += v;
        }
        for (slot, v) in grad_bias.data_mut().iter_mut().zip(gb) {
            *slot += v;
        }
    }
    (grad_input, grad_weight, grad_bias)
}

pub fn relu_forward<F: Scalar>(input: &Tensor<F>) -> Tensor<F> {
    let data = input.data().iter().map(|&v| v.maxv(F::ZERO)).collect();
    Tensor::new(input.shape().to_vec(), data)
}

/// Mask against the pre-activation: gradient flows where pre > 0.
pub fn relu_backward<F: Scalar>(pre: &Tensor<F>, grad_out: &Tensor<F>) -> Tensor<F> {
    debug_assert_eq!(pre.shape(), grad_out.shape());
    let data = pre
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&p, &g)| if p > F::ZERO { g } else { F::ZERO })
        .collect();
    Tensor::new(pre.shape().to_vec(), data)
}

/// Max pool; returns the output and, per output element, the flat input
/// index of its argmax (first-in-scan-order on ties) for routing the
/// backward pass.
pub fn maxpool_forward<F: Scalar>(input: &Tensor<F>, geom: ConvGeometry) -> (Tensor<F>, Vec<u32>) {
    let [n, h, w, c]: [usize; 4] = input.shape().try_into().expect("pool input rank 4");
    let oh = geom.out_dim(h);
    let ow = geom.out_dim(w);
    let mut out = Tensor::zeros(vec![n, oh, ow, c]);
    let mut argmax = vec![0u32; n * oh * ow * c];
    let data = input.data();
    for ni in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for ci in 0..c {
                    let mut best: Option<(F, usize)> = None;
                    for ky in 0..geom.kernel {
                        let iy = (oy * geom.stride + ky) as isize - geom.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..geom.kernel {
                            let ix = (ox * geom.stride + kx) as isize - geom.padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = ((ni * h + iy as usize) * w + ix as usize) * c + ci;
                            let v = data[idx];
                            match best {
                                Some((bv, _)) if !(v > bv) => {}
                                _ => best = Some((v, idx)),
                            }
                        }
                    }
                    let (bv, bi) = best.expect("pool window never empty");
                    let oidx = ((ni * oh + oy) * ow + ox) * c + ci;
                    out.data_mut()[oidx] = bv;
                    argmax[oidx] = bi as u32;
                }
            }
        }
    }
    (out, argmax)
}

pub fn maxpool_backward<F: Scalar>(
    argmax: &[u32],
    grad_out: &Tensor<F>,
    input_shape: &[usize],
) -> Tensor<F> {
    let mut grad_input = Tensor::zeros(input_shape.to_vec());
    let gi = grad_input.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        gi[idx as usize] += g;
    }
    grad_input
}

/// [n, h, w, c] -> [n, c] spatial mean.
pub fn global_avg_pool_forward<F: Scalar>(input: &Tensor<F>) -> Tensor<F> {
    let [n, h, w, c]: [usize; 4] = input.shape().try_into().expect("gap input rank 4");
    let denom = F::from_f64((h * w) as f64);
    let mut out = Tensor::zeros(vec![n, c]);
    let data = input.data();
    for ni in 0..n {
        let acc = &mut out.data_mut()[ni * c..(ni + 1) * c];
        for pixel in 0..h * w {
            let row = &data[(ni * h * w + pixel) * c..(ni * h * w + pixel + 1) * c];
            for (a, &v) in acc.iter_mut().zip(row) {
                *a += v;
            }
        }
        for a in acc.iter_mut() {
            *a = *a / denom;
        }
    }
    out
}

pub fn global_avg_pool_backward<F: Scalar>(grad_out: &Tensor<F>, input_shape: &[usize]) -> Tensor<F> {
    let [n, h, w, c]: [usize; 4] = input_shape.try_into().expect("gap input rank 4");
    let denom = F::from_f64((h * w) as f64);
    let mut grad_input = Tensor::zeros(input_shape.to_vec());
    let gi = grad_input.data_mut();
    for ni in 0..n {
        let go = &grad_out.data()[ni * c..(ni + 1) * c];
        for pixel in 0..h * w {
            let row = &mut gi[(ni * h * w + pixel) * c..(ni * h * w + pixel + 1) * c];
            for (slot, &g) in row.iter_mut().zip(go) {
                *slot = g / denom;
            }
        }
    }
    grad_input
}

/// x [n, in] * w [in, out] + b [out].
pub fn fc_forward<F: Scalar>(input: &Tensor<F>, weight: &Tensor<F>, bias: &Tensor<F>) -> Tensor<F> {
    let [n, c_in]: [usize; 2] = input.shape().try_into().expect("fc input rank 2");
    let c_out = weight.shape()[1];
    assert_eq!(weight.shape()[0], c_in, "fc weight shape");
    let mut out = Tensor::zeros(vec![n, c_out]);
    for ni in 0..n {
        let x = &input.data()[ni * c_in..(ni + 1) * c_in];
        let acc = &mut out.data_mut()[ni * c_out..(ni + 1) * c_out];
        acc.copy_from_slice(bias.data());
        for (ci, &v) in x.iter().enumerate() {
            let w_row = &weight.data()[ci * c_out..(ci + 1) * c_out];
            for (a, &wv) in acc.iter_mut().zip(w_row) {
                *a += v * wv;
            }
        }
    }
    out
}

pub fn fc_backward<F: Scalar>(
    input: &Tensor<F>,
    weight: &Tensor<F>,
    grad_out: &Tensor<F>,
) -> (Tensor<F>, Tensor<F>, Tensor<F>) {
    let [n, c_in]: [usize; 2] = input.shape().try_into().expect("fc input rank 2");
    let c_out = weight.shape()[1];
    let mut grad_input = Tensor::zeros(vec![n, c_in]);
    let mut grad_weight = Tensor::zeros(weight.shape().to_vec());
    let mut grad_bias = Tensor::zeros(vec![c_out]);
    for ni in 0..n {
        let x = &input.data()[ni * c_in..(ni + 1) * c_in];
        let go = &grad_out.data()[ni * c_out..(ni + 1) * c_out];
        for (b, &g) in grad_bias.data_mut().iter_mut().zip(go) {
            *b += g;
        }
        for ci in 0..c_in {
            let w_row = &weight.data()[ci * c_out..(ci + 1) * c_out];
            let mut acc = F::ZERO;
            for (&g, &wv) in go.iter().zip(w_row) {
                acc += g * wv;
            }
            grad_input.data_mut()[ni * c_in + ci] = acc;
            let gw_row = &mut grad_weight.data_mut()[ci * c_out..(ci + 1) * c_out];
            let v = x[ci];
            for (slot, &g) in gw_row.iter_mut().zip(go) {
                *slot += v * g;
            }
        }
    }
    (grad_input, grad_weight, grad_bias)
}
