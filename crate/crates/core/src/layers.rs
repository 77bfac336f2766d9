//! Dense layers with bias, and batch-norm folding into them.

use crate::error::{Error, Result};
use crate::tensor::{conv2d, conv_pw, BnParams, ConvKernels, Matrix, Padding, Tensor4};

/// Fully connected / 1x1 layer with an `out x in` weight.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Vec<f32>,
}

impl Linear {
    pub fn new(weight: Matrix, bias: Vec<f32>) -> Result<Self> {
        if bias.len() != weight.rows {
            return Err(Error::shape("Linear::new", weight.rows, bias.len()));
        }
        Ok(Self { weight, bias })
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: Matrix::zeros(out_dim, in_dim),
            bias: vec![0.0; out_dim],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows
    }

    pub fn forward(&self, x: &Tensor4) -> Result<Tensor4> {
        conv_pw(x, &self.weight, &self.bias)
    }

    /// Applies the layer to each row of `x`.
    pub fn forward_rows(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols != self.in_dim() {
            return Err(Error::shape("Linear::forward_rows", self.in_dim(), x.cols));
        }
        let mut out = Matrix::zeros(x.rows, self.out_dim());
        crate::tensor::gemm_nt(
            &x.data,
            x.rows,
            x.cols,
            &self.weight.data,
            self.out_dim(),
            Some(&self.bias),
            &mut out.data,
        );
        Ok(out)
    }

    /// Absorbs a batch norm applied to this layer's output.
    pub fn fold_bn(&self, bn: &BnParams) -> Result<Self> {
        bn.validate()?;
        if bn.channels() != self.out_dim() {
            return Err(Error::shape("Linear::fold_bn", self.out_dim(), bn.channels()));
        }
        let (scale, shift) = bn.scale_shift();
        let cols = self.in_dim();
        let mut weight = self.weight.clone();
        for (o, row) in weight.data.chunks_exact_mut(cols).enumerate() {
            row.iter_mut().for_each(|w| *w = (*w as f64 * scale[o]) as f32);
        }
        let bias = self
            .bias
            .iter()
            .enumerate()
            .map(|(o, &b)| (b as f64 * scale[o] + shift[o]) as f32)
            .collect();
        Ok(Self { weight, bias })
    }

    pub fn param_count(&self) -> usize {
        self.weight.data.len() + self.bias.len()
    }
}

/// Dense 2-D convolution with bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub kernels: ConvKernels,
    pub bias: Vec<f32>,
    pub stride: usize,
    pub pad: Padding,
}

impl Conv2d {
    pub fn forward(&self, x: &Tensor4) -> Result<Tensor4> {
        conv2d(x, &self.kernels, &self.bias, self.stride, self.pad)
    }

    pub fn fold_bn(&self, bn: &BnParams) -> Result<Self> {
        bn.validate()?;
        if bn.channels() != self.kernels.out_c {
            return Err(Error::shape("Conv2d::fold_bn", self.kernels.out_c, bn.channels()));
        }
        let (scale, shift) = bn.scale_shift();
        let fan = self.kernels.fan_in();
        let mut kernels = self.kernels.clone();
        for (o, filt) in kernels.data.chunks_exact_mut(fan).enumerate() {
            filt.iter_mut().for_each(|w| *w = (*w as f64 * scale[o]) as f32);
        }
        let bias = self
            .bias
            .iter()
            .enumerate()
            .map(|(o, &b)| (b as f64 * scale[o] + shift[o]) as f32)
            .collect();
        Ok(Self {
            kernels,
            bias,
            stride: self.stride,
            pad: self.pad,
        })
    }

    pub fn param_count(&self) -> usize {
        self.kernels.data.len() + self.bias.len()
    }

    /// Multiply-accumulates for an output of `out_pixels` positions.
    pub fn macs(&self, out_pixels: usize) -> u64 {
        (out_pixels * self.kernels.out_c * self.kernels.fan_in()) as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{batch_norm, Shape4};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_bn(c: usize, rng: &mut ChaCha8Rng) -> BnParams {
        BnParams {
            gamma: (0..c).map(|_| rng.gen_range(0.5..1.5)).collect(),
            beta: (0..c).map(|_| rng.gen_range(-0.5..0.5)).collect(),
            mean: (0..c).map(|_| rng.gen_range(-0.5..0.5)).collect(),
            var: (0..c).map(|_| rng.gen_range(0.1..2.0)).collect(),
            eps: 1e-5,
        }
    }

    #[test]
    fn linear_fold_matches_two_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lin = Linear::new(
            Matrix::new(5, 7, (0..35).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap(),
            (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let bn = random_bn(5, &mut rng);
        let x = Tensor4::from_fn(Shape4::new(1, 3, 3, 7), |_, _, _, _| rng.gen_range(-1.0..1.0));
        let two = batch_norm(&lin.forward(&x).unwrap(), &bn).unwrap();
        let one = lin.fold_bn(&bn).unwrap().forward(&x).unwrap();
        assert!(one.max_abs_diff(&two).unwrap() < 1e-5);
    }

    #[test]
    fn conv_fold_matches_two_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let conv = Conv2d {
            kernels: ConvKernels::new(4, 3, 3, 3, (0..108).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap(),
            bias: vec![0.1, -0.2, 0.3, 0.0],
            stride: 2,
            pad: Padding::uniform(1),
        };
        let bn = random_bn(4, &mut rng);
        let x = Tensor4::from_fn(Shape4::new(1, 8, 8, 3), |_, _, _, _| rng.gen_range(-1.0..1.0));
        let two = batch_norm(&conv.forward(&x).unwrap(), &bn).unwrap();
        let one = conv.fold_bn(&bn).unwrap().forward(&x).unwrap();
        assert!(one.max_abs_diff(&two).unwrap() < 1e-5);
    }

    #[test]
    fn forward_rows_matches_pointwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let lin = Linear::new(
            Matrix::new(2, 3, (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap(),
            vec![0.5, -0.5],
        )
        .unwrap();
        let x = Tensor4::from_fn(Shape4::new(1, 2, 2, 3), |_, _, _, _| rng.gen_range(-1.0..1.0));
        let rows = Matrix::new(4, 3, x.data().to_vec()).unwrap();
        assert_eq!(lin.forward_rows(&rows).unwrap().data, lin.forward(&x).unwrap().data());
    }
}
