//! Seeded weight initialisation.

use crate::layers::{Conv2d, Linear};
use crate::tensor::{BnParams, ConvKernels, DwKernels, Matrix, Padding, BN_EPS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub const INIT_STD: f32 = 0.02;

/// Deterministic weight source: N(0, std) for every kernel and matrix, zero
/// biases, and neutral batch-norm statistics unless `perturb_bn` is set.
pub struct WeightInit {
    rng: ChaCha8Rng,
    normal: Normal<f32>,
    perturb_bn: bool,
}

impl WeightInit {
    pub fn new(seed: u64) -> Self {
        Self::with_std(seed, INIT_STD)
    }

    pub fn with_std(seed: u64, std: f32) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            normal: Normal::new(0.0, std).expect("finite std"),
            perturb_bn: false,
        }
    }

    /// Random running statistics so folding is exercised non-trivially.
    pub fn perturb_bn(mut self, on: bool) -> Self {
        self.perturb_bn = on;
        self
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f32> {
        (0..n).map(|_| self.normal.sample(&mut self.rng)).collect()
    }

    pub fn dw(&mut self, channels: usize, kh: usize, kw: usize) -> DwKernels {
        let data = self.normal_vec(channels * kh * kw);
        DwKernels::new(channels, kh, kw, data).expect("sized")
    }

    pub fn linear(&mut self, in_dim: usize, out_dim: usize) -> Linear {
        let weight = Matrix::new(out_dim, in_dim, self.normal_vec(in_dim * out_dim)).expect("sized");
        Linear {
            weight,
            bias: vec![0.0; out_dim],
        }
    }

    pub fn conv(&mut self, in_c: usize, out_c: usize, k: usize, stride: usize) -> Conv2d {
        let data = self.normal_vec(out_c * in_c * k * k);
        Conv2d {
            kernels: ConvKernels::new(out_c, in_c, k, k, data).expect("sized"),
            bias: vec![0.0; out_c],
            stride,
            pad: Padding::uniform(k / 2),
        }
    }

    pub fn bn(&mut self, channels: usize) -> BnParams {
        if !self.perturb_bn {
            return BnParams::identity(channels);
        }
        let rng = &mut self.rng;
        BnParams {
            gamma: (0..channels).map(|_| rng.gen_range(0.5..1.5)).collect(),
            beta: (0..channels).map(|_| rng.gen_range(-0.2..0.2)).collect(),
            mean: (0..channels).map(|_| rng.gen_range(-0.2..0.2)).collect(),
            var: (0..channels).map(|_| rng.gen_range(0.5..2.0)).collect(),
            eps: BN_EPS,
        }
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}
