//! Dense row-major tensor, just enough for the network: activations are
//! NHWC, conv weights are [kh, kw, c_in, c_out], FC weights [in, out].

use super::scalar::Scalar;
use crate::imaging::FloatImage;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Tensor<F> {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data does not match shape {shape:?}"
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor<F> {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![F::ZERO; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    /// Flat index into an NHWC activation.
    #[inline]
    pub fn at4(&self, n: usize, y: usize, x: usize, c: usize) -> usize {
        debug_assert_eq!(self.shape.len(), 4);
        ((n * self.shape[1] + y) * self.shape[2] + x) * self.shape[3] + c
    }

    #[inline]
    pub fn get4(&self, n: usize, y: usize, x: usize, c: usize) -> F {
        self.data[self.at4(n, y, x, c)]
    }

    /// Batch of normalized patches stacked into an NHWC activation.
    pub fn from_float_images(images: &[FloatImage]) -> Tensor<F> {
        assert!(!images.is_empty(), "empty batch");
        let first = &images[0];
        let per = first.data.len();
        let mut data = Vec::with_capacity(images.len() * per);
        for img in images {
            assert_eq!(img.data.len(), per, "batch patches disagree in shape");
            data.extend(img.data.iter().map(|&v| F::from_f64(v)));
        }
        Tensor {
            shape: vec![
                images.len(),
                first.height as usize,
                first.width as usize,
                first.channels as usize,
            ],
            data,
        }
    }

    /// Concatenate along the channel axis (last dimension of NHWC).
    pub fn concat_channels(parts: &[&Tensor<F>]) -> Tensor<F> {
        assert!(!parts.is_empty());
        let (n, h, w) = (parts[0].shape[0], parts[0].shape[1], parts[0].shape[2]);
        let total_c: usize = parts.iter().map(|p| p.shape[3]).sum();
        for p in parts {
            assert_eq!(&p.shape[..3], &[n, h, w], "concat spatial mismatch");
        }
        let mut data = Vec::with_capacity(n * h * w * total_c);
        for pixel in 0..n * h * w {
            for p in parts {
                let c = p.shape[3];
                data.extend_from_slice(&p.data[pixel * c..(pixel + 1) * c]);
            }
        }
        Tensor {
            shape: vec![n, h, w, total_c],
            data,
        }
    }

    /// Split a channel-gradient back onto the concatenated parts,
    /// accumulating into each part's gradient buffer.
    pub fn split_channels_accumulate(&self, part_channels: &[usize], outputs: &mut [Tensor<F>]) {
        assert_eq!(part_channels.len(), outputs.len());
        let total_c: usize = part_channels.iter().sum();
        assert_eq!(self.shape[3], total_c, "split channel mismatch");
        let pixels = self.shape[0] * self.shape[1] * self.shape[2];
        for pixel in 0..pixels {
            let mut offset = 0usize;
            let row = &self.data[pixel * total_c..(pixel + 1) * total_c];
            for (part, &c) in outputs.iter_mut().zip(part_channels) {
                let dst = &mut part.data[pixel * c..(pixel + 1) * c];
                for (d, s) in dst.iter_mut().zip(&row[offset..offset + c]) {
                    *d += *s;
                }
                offset += c;
            }
        }
    }

    pub fn map_to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concat_and_split_roundtrip() {
        let a = Tensor::<f64>::new(vec![1, 2, 2, 2], (0..8).map(|v| v as f64).collect());
        let b = Tensor::<f64>::new(vec![1, 2, 2, 1], (10..14).map(|v| v as f64).collect());
        let cat = Tensor::concat_channels(&[&a, &b]);
        assert_eq!(cat.shape(), &[1, 2, 2, 3]);
        assert_eq!(cat.data()[0..3], [0.0, 1.0, 10.0]);
        let mut grads = vec![Tensor::<f64>::zeros(vec![1, 2, 2, 2]), Tensor::zeros(vec![1, 2, 2, 1])];
        cat.split_channels_accumulate(&[2, 1], &mut grads);
        assert_eq!(grads[0].data(), a.data());
        assert_eq!(grads[1].data(), b.data());
        // Accumulation adds on repeat.
        cat.split_channels_accumulate(&[2, 1], &mut grads);
        assert_eq!(grads[1].data()[0], 20.0);
    }

    #[test]
    fn from_float_images_stacks_batch() {
        let img = FloatImage {
            width: 2,
            height: 1,
            channels: 3,
            data: vec![0.5, -1.0, 2.0, 0.0, 1.0, -2.0],
        };
        let t = Tensor::<f32>::from_float_images(&[img.clone(), img]);
        assert_eq!(t.shape(), &[2, 1, 2, 3]);
        assert_eq!(t.get4(1, 0, 1, 2), -2.0f32);
    }
}
