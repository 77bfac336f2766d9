//! Dense NHWC feature maps and the small operator set the network needs.
//!
//! Everything here is a pure function of its inputs. Channels are the
//! innermost dimension so that depthwise and pointwise kernels walk
//! contiguous memory.

mod conv;

pub use conv::{conv2d, conv_dw, conv_pw, ConvKernels, DwKernels, Padding};
pub(crate) use conv::{gemm_nn, gemm_nt};

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fmt;

/// Default batch-norm epsilon.
pub const BN_EPS: f32 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape4 {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl Shape4 {
    pub const fn new(n: usize, h: usize, w: usize, c: usize) -> Self {
        Self { n, h, w, c }
    }

    pub const fn numel(&self) -> usize {
        self.n * self.h * self.w * self.c
    }

    pub const fn pixels(&self) -> usize {
        self.n * self.h * self.w
    }
}

impl fmt::Display for Shape4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.h, self.w, self.c)
    }
}

/// Rank-4 f32 tensor in batch, row, column, channel order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    shape: Shape4,
    data: Vec<f32>,
}

impl Tensor4 {
    pub fn new(shape: Shape4, data: Vec<f32>) -> Result<Self> {
        if shape.n == 0 || shape.h == 0 || shape.w == 0 || shape.c == 0 {
            return Err(Error::invalid("Tensor4::new", format!("zero extent in {shape}")));
        }
        if data.len() != shape.numel() {
            return Err(Error::shape("Tensor4::new", shape.numel(), data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Shape4) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: Shape4, value: f32) -> Self {
        Self {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn from_fn(shape: Shape4, mut f: impl FnMut(usize, usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n {
            for y in 0..shape.h {
                for x in 0..shape.w {
                    for c in 0..shape.c {
                        data.push(f(n, y, x, c));
                    }
                }
            }
        }
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, n: usize, y: usize, x: usize, c: usize) -> usize {
        ((n * self.shape.h + y) * self.shape.w + x) * self.shape.c + c
    }

    #[inline]
    pub fn at(&self, n: usize, y: usize, x: usize, c: usize) -> f32 {
        self.data[self.index(n, y, x, c)]
    }

    /// Channel vector at one pixel.
    #[inline]
    pub fn pixel(&self, n: usize, y: usize, x: usize) -> &[f32] {
        let i = self.index(n, y, x, 0);
        &self.data[i..i + self.shape.c]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f32> {
        if self.shape != other.shape {
            return Err(Error::shape("max_abs_diff", self.shape, other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| {
                let d = (a - b).abs();
                // NaN must never compare as agreement.
                if d.is_nan() {
                    f32::INFINITY
                } else {
                    d
                }
            })
            .fold(0.0, f32::max))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Zero-pads bottom and right so both spatial extents are multiples of `m`.
    pub fn pad_to_multiple(&self, m: usize) -> Self {
        let s = self.shape;
        let h = s.h.div_ceil(m) * m;
        let w = s.w.div_ceil(m) * m;
        if h == s.h && w == s.w {
            return self.clone();
        }
        let mut out = Tensor4::zeros(Shape4::new(s.n, h, w, s.c));
        for n in 0..s.n {
            for y in 0..s.h {
                let src = self.index(n, y, 0, 0);
                let dst = out.index(n, y, 0, 0);
                out.data[dst..dst + s.w * s.c].copy_from_slice(&self.data[src..src + s.w * s.c]);
            }
        }
        out
    }
}

/// Row-major f32 matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape("Matrix::new", rows * cols, data.len()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn at(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }
}

/// Inference-mode batch-norm statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BnParams {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub eps: f32,
}

impl BnParams {
    pub fn identity(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            eps: BN_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.gamma.len();
        if self.beta.len() != c || self.mean.len() != c || self.var.len() != c {
            return Err(Error::invalid("BnParams", "statistic vectors differ in length"));
        }
        if !(self.eps >= 0.0) {
            return Err(Error::invalid("BnParams", "epsilon must be non-negative"));
        }
        if self.var.iter().any(|&v| v < 0.0) {
            return Err(Error::invalid("BnParams", "negative running variance"));
        }
        Ok(())
    }

    /// Per-channel `(scale, shift)` in f64 so that `bn(x) = scale * x + shift`.
    pub fn scale_shift(&self) -> (Vec<f64>, Vec<f64>) {
        let scale: Vec<f64> = self
            .gamma
            .iter()
            .zip(&self.var)
            .map(|(&g, &v)| g as f64 / (v as f64 + self.eps as f64).sqrt())
            .collect();
        let shift = self
            .beta
            .iter()
            .zip(&self.mean)
            .zip(&scale)
            .map(|((&b, &m), &s)| b as f64 - m as f64 * s)
            .collect();
        (scale, shift)
    }

    /// Stored scalars: four statistics per channel.
    pub fn param_count(&self) -> usize {
        4 * self.channels()
    }
}

pub fn batch_norm(x: &Tensor4, p: &BnParams) -> Result<Tensor4> {
    p.validate()?;
    let c = x.shape.c;
    if p.channels() != c {
        return Err(Error::shape("batch_norm", c, p.channels()));
    }
    let inv: Vec<f32> = p
        .gamma
        .iter()
        .zip(&p.var)
        .map(|(&g, &v)| g / (v + p.eps).sqrt())
        .collect();
    let mut out = x.clone();
    for px in out.data.chunks_exact_mut(c) {
        for (i, v) in px.iter_mut().enumerate() {
            *v = (*v - p.mean[i]) * inv[i] + p.beta[i];
        }
    }
    Ok(out)
}

#[inline]
pub fn gelu_scalar(x: f32) -> f32 {
    0.5 * x * (1.0 + libm::erff(x * std::f32::consts::FRAC_1_SQRT_2))
}

/// Exact (erf) GELU.
pub fn gelu(x: &Tensor4) -> Tensor4 {
    x.map(gelu_scalar)
}

pub fn gelu_inplace(x: &mut Tensor4) {
    x.data.iter_mut().for_each(|v| *v = gelu_scalar(*v));
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(m: &Matrix) -> Result<Matrix> {
    if m.cols == 0 {
        return Err(Error::invalid("softmax_rows", "rows must have at least one entry"));
    }
    let mut out = m.clone();
    softmax_rows_inplace(&mut out.data, m.cols);
    Ok(out)
}

pub(crate) fn softmax_rows_inplace(data: &mut [f32], cols: usize) {
    for row in data.chunks_exact_mut(cols) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = 1.0 / sum;
        row.iter_mut().for_each(|v| *v *= inv);
    }
}

/// Mean over spatial positions, one row per batch item.
pub fn global_avg_pool(x: &Tensor4) -> Matrix {
    let s = x.shape;
    let mut out = Matrix::zeros(s.n, s.c);
    let hw = s.h * s.w;
    for n in 0..s.n {
        let mut acc = vec![0.0f64; s.c];
        let base = n * hw * s.c;
        for px in x.data[base..base + hw * s.c].chunks_exact(s.c) {
            for (a, &v) in acc.iter_mut().zip(px) {
                *a += v as f64;
            }
        }
        for (o, a) in out.data[n * s.c..(n + 1) * s.c].iter_mut().zip(acc) {
            *o = (a / hw as f64) as f32;
        }
    }
    out
}

pub fn upsample_nearest2x(x: &Tensor4) -> Tensor4 {
    let s = x.shape;
    let os = Shape4::new(s.n, s.h * 2, s.w * 2, s.c);
    let mut out = Tensor4::zeros(os);
    for n in 0..s.n {
        for y in 0..os.h {
            for xx in 0..os.w {
                let src = x.index(n, y / 2, xx / 2, 0);
                let dst = out.index(n, y, xx, 0);
                out.data[dst..dst + s.c].copy_from_slice(&x.data[src..src + s.c]);
            }
        }
    }
    out
}

pub fn add(a: &Tensor4, b: &Tensor4) -> Result<Tensor4> {
    let mut out = a.clone();
    add_assign(&mut out, b)?;
    Ok(out)
}

pub fn add_assign(a: &mut Tensor4, b: &Tensor4) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::shape("add", a.shape, b.shape));
    }
    a.data.iter_mut().zip(&b.data).for_each(|(x, y)| *x += y);
    Ok(())
}

pub fn concat_channels(parts: &[&Tensor4]) -> Result<Tensor4> {
    let first = parts
        .first()
        .ok_or_else(|| Error::invalid("concat_channels", "no inputs"))?
        .shape;
    for p in parts {
        let s = p.shape;
        if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
            return Err(Error::shape("concat_channels", first, s));
        }
    }
    let c: usize = parts.iter().map(|p| p.shape.c).sum();
    let mut data = Vec::with_capacity(first.pixels() * c);
    for px in 0..first.pixels() {
        for p in parts {
            let pc = p.shape.c;
            data.extend_from_slice(&p.data[px * pc..(px + 1) * pc]);
        }
    }
    Tensor4::new(Shape4::new(first.n, first.h, first.w, c), data)
}

/// Splits channels into `parts` equal contiguous groups.
pub fn chunk_channels(x: &Tensor4, parts: usize) -> Result<Vec<Tensor4>> {
    let s = x.shape;
    if parts == 0 || s.c % parts != 0 {
        return Err(Error::invalid(
            "chunk_channels",
            format!("{} channels not divisible into {parts} parts", s.c),
        ));
    }
    let g = s.c / parts;
    let mut out: Vec<Vec<f32>> = (0..parts).map(|_| Vec::with_capacity(s.pixels() * g)).collect();
    for px in x.data.chunks_exact(s.c) {
        for (i, o) in out.iter_mut().enumerate() {
            o.extend_from_slice(&px[i * g..(i + 1) * g]);
        }
    }
    out.into_iter()
        .map(|d| Tensor4::new(Shape4::new(s.n, s.h, s.w, g), d))
        .collect()
}
