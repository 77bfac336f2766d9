use super::{Matrix, Shape4, Tensor4};
use crate::error::{Error, Result};

/// Zero padding per side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Padding {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

impl Padding {
    pub const fn uniform(p: usize) -> Self {
        Self {
            top: p,
            left: p,
            bottom: p,
            right: p,
        }
    }

    /// Centre-aligned padding for a `kh x kw` kernel with odd extents.
    pub const fn centered(kh: usize, kw: usize) -> Self {
        Self {
            top: kh / 2,
            left: kw / 2,
            bottom: kh / 2,
            right: kw / 2,
        }
    }
}

fn out_extent(
    op: &'static str,
    input: usize,
    pad_a: usize,
    pad_b: usize,
    k: usize,
    stride: usize,
) -> Result<usize> {
    let padded = input + pad_a + pad_b;
    if k > padded {
        return Err(Error::invalid(
            op,
            format!("kernel extent {k} exceeds padded input {padded}"),
        ));
    }
    Ok((padded - k) / stride + 1)
}

/// One `kh x kw` kernel per channel, stored tap-major with channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct DwKernels {
    pub channels: usize,
    pub kh: usize,
    pub kw: usize,
    data: Vec<f32>,
}

impl DwKernels {
    /// `data` is laid out `[kh][kw][channels]`.
    pub fn new(channels: usize, kh: usize, kw: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * kh * kw {
            return Err(Error::shape("DwKernels::new", channels * kh * kw, data.len()));
        }
        Ok(Self {
            channels,
            kh,
            kw,
            data,
        })
    }

    pub fn zeros(channels: usize, kh: usize, kw: usize) -> Self {
        Self {
            channels,
            kh,
            kw,
            data: vec![0.0; channels * kh * kw],
        }
    }

    pub fn from_fn(
        channels: usize,
        kh: usize,
        kw: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * kh * kw);
        for i in 0..kh {
            for j in 0..kw {
                for c in 0..channels {
                    data.push(f(c, i, j));
                }
            }
        }
        Self {
            channels,
            kh,
            kw,
            data,
        }
    }

    #[inline]
    pub fn get(&self, c: usize, i: usize, j: usize) -> f32 {
        self.data[(i * self.kw + j) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, c: usize, i: usize, j: usize, v: f32) {
        self.data[(i * self.kw + j) * self.channels + c] = v;
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Depthwise cross-correlation with zero padding.
pub fn conv_dw(
    x: &Tensor4,
    kernels: &DwKernels,
    bias: &[f32],
    stride: usize,
    pad: Padding,
) -> Result<Tensor4> {
    let s = x.shape();
    let c = s.c;
    if kernels.channels != c {
        return Err(Error::shape("conv_dw", c, kernels.channels));
    }
    if bias.len() != c {
        return Err(Error::shape("conv_dw bias", c, bias.len()));
    }
    if stride == 0 {
        return Err(Error::invalid("conv_dw", "stride must be positive"));
    }
    let (kh, kw) = (kernels.kh, kernels.kw);
    let oh = out_extent("conv_dw", s.h, pad.top, pad.bottom, kh, stride)?;
    let ow = out_extent("conv_dw", s.w, pad.left, pad.right, kw, stride)?;
    let os = Shape4::new(s.n, oh, ow, c);
    let mut out = vec![0.0f32; os.numel()];
    let xd = x.data();
    let kd = kernels.data();

    for n in 0..s.n {
        for oy in 0..oh {
            let y0 = (oy * stride) as isize - pad.top as isize;
            let ky_lo = (-y0).max(0) as usize;
            let ky_hi = ((s.h as isize - y0).min(kh as isize)).max(0) as usize;
            for ox in 0..ow {
                let x0 = (ox * stride) as isize - pad.left as isize;
                let kx_lo = (-x0).max(0) as usize;
                let kx_hi = ((s.w as isize - x0).min(kw as isize)).max(0) as usize;
                let o_at = ((n * oh + oy) * ow + ox) * c;
                let o = &mut out[o_at..o_at + c];
                o.copy_from_slice(bias);
                for ky in ky_lo..ky_hi {
                    let iy = (y0 + ky as isize) as usize;
                    let row = (n * s.h + iy) * s.w;
                    for kx in kx_lo..kx_hi {
                        let ix = (x0 + kx as isize) as usize;
                        let i_at = (row + ix) * c;
                        let inp = &xd[i_at..i_at + c];
                        let w = &kd[(ky * kw + kx) * c..(ky * kw + kx + 1) * c];
                        for ((o, &a), &b) in o.iter_mut().zip(inp).zip(w) {
                            *o += a * b;
                        }
                    }
                }
            }
        }
    }
    Tensor4::new(os, out)
}

/// `out[m x n] = a[m x k] * w^T + bias`, where `w` is `n x k` row-major.
pub(crate) fn gemm_nt(a: &[f32], m: usize, k: usize, w: &[f32], n: usize, bias: Option<&[f32]>, out: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(w.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    match bias {
        Some(b) => out.chunks_exact_mut(n).for_each(|r| r.copy_from_slice(b)),
        None => out.fill(0.0),
    }
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    // SAFETY: slice lengths are checked above and the strides describe
    // row-major `a`, transposed `w` and row-major `out` within those bounds.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            w.as_ptr(),
            1,
            k as isize,
            1.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `out[m x n] = a[m x k] * b[k x n]`, all row-major.
pub(crate) fn gemm_nn(a: &[f32], m: usize, k: usize, b: &[f32], n: usize, out: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.fill(0.0);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    // SAFETY: as in `gemm_nt`, with `b` read row-major.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// 1x1 convolution: a per-pixel affine map with `weight` of shape `Cout x Cin`.
pub fn conv_pw(x: &Tensor4, weight: &Matrix, bias: &[f32]) -> Result<Tensor4> {
    let s = x.shape();
    if weight.cols != s.c {
        return Err(Error::shape("conv_pw", s.c, weight.cols));
    }
    if bias.len() != weight.rows {
        return Err(Error::shape("conv_pw bias", weight.rows, bias.len()));
    }
    let os = Shape4::new(s.n, s.h, s.w, weight.rows);
    let mut out = vec![0.0f32; os.numel()];
    gemm_nt(x.data(), s.pixels(), s.c, &weight.data, weight.rows, Some(bias), &mut out);
    Tensor4::new(os, out)
}

/// Dense convolution kernels laid out `[out][kh][kw][in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernels {
    pub out_c: usize,
    pub in_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub data: Vec<f32>,
}

impl ConvKernels {
    pub fn new(out_c: usize, in_c: usize, kh: usize, kw: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != out_c * in_c * kh * kw {
            return Err(Error::shape("ConvKernels::new", out_c * in_c * kh * kw, data.len()));
        }
        Ok(Self {
            out_c,
            in_c,
            kh,
            kw,
            data,
        })
    }

    pub fn zeros(out_c: usize, in_c: usize, kh: usize, kw: usize) -> Self {
        Self {
            out_c,
            in_c,
            kh,
            kw,
            data: vec![0.0; out_c * in_c * kh * kw],
        }
    }

    #[inline]
    pub fn get(&self, o: usize, i: usize, j: usize, ci: usize) -> f32 {
        self.data[((o * self.kh + i) * self.kw + j) * self.in_c + ci]
    }

    /// Length of one output filter.
    pub fn fan_in(&self) -> usize {
        self.kh * self.kw * self.in_c
    }
}

/// Dense cross-correlation, lowered one output row at a time to a GEMM.
pub fn conv2d(
    x: &Tensor4,
    kernels: &ConvKernels,
    bias: &[f32],
    stride: usize,
    pad: Padding,
) -> Result<Tensor4> {
    let s = x.shape();
    if kernels.in_c != s.c {
        return Err(Error::shape("conv2d", s.c, kernels.in_c));
    }
    if bias.len() != kernels.out_c {
        return Err(Error::shape("conv2d bias", kernels.out_c, bias.len()));
    }
    if stride == 0 {
        return Err(Error::invalid("conv2d", "stride must be positive"));
    }
    let (kh, kw, cin, cout) = (kernels.kh, kernels.kw, kernels.in_c, kernels.out_c);
    let oh = out_extent("conv2d", s.h, pad.top, pad.bottom, kh, stride)?;
    let ow = out_extent("conv2d", s.w, pad.left, pad.right, kw, stride)?;
    let os = Shape4::new(s.n, oh, ow, cout);
    let mut out = vec![0.0f32; os.numel()];
    let fan = kernels.fan_in();
    let mut patches = vec![0.0f32; ow * fan];
    let xd = x.data();

    for n in 0..s.n {
        for oy in 0..oh {
            patches.fill(0.0);
            for ox in 0..ow {
                let prow = &mut patches[ox * fan..(ox + 1) * fan];
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - pad.top as isize;
                    if iy < 0 || iy >= s.h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - pad.left as isize;
                        if ix < 0 || ix >= s.w as isize {
                            continue;
                        }
                        let src = ((n * s.h + iy as usize) * s.w + ix as usize) * cin;
                        let dst = (ky * kw + kx) * cin;
                        prow[dst..dst + cin].copy_from_slice(&xd[src..src + cin]);
                    }
                }
            }
            let o_at = (n * oh + oy) * ow * cout;
            gemm_nt(
                &patches,
                ow,
                fan,
                &kernels.data,
                cout,
                Some(bias),
                &mut out[o_at..o_at + ow * cout],
            );
        }
    }
    Tensor4::new(os, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Shape4, rng: &mut ChaCha8Rng) -> Tensor4 {
        Tensor4::from_fn(shape, |_, _, _, _| rng.gen_range(-1.0..1.0))
    }

    /// Direct nested-loop depthwise oracle, f64 accumulation.
    fn dw_oracle(x: &Tensor4, k: &DwKernels, bias: &[f32], stride: usize, pad: Padding) -> Tensor4 {
        let s = x.shape();
        let oh = (s.h + pad.top + pad.bottom - k.kh) / stride + 1;
        let ow = (s.w + pad.left + pad.right - k.kw) / stride + 1;
        Tensor4::from_fn(Shape4::new(s.n, oh, ow, s.c), |n, oy, ox, c| {
            let mut acc = bias[c] as f64;
            for i in 0..k.kh {
                for j in 0..k.kw {
                    let iy = (oy * stride + i) as isize - pad.top as isize;
                    let ix = (ox * stride + j) as isize - pad.left as isize;
                    if iy >= 0 && ix >= 0 && (iy as usize) < s.h && (ix as usize) < s.w {
                        acc += x.at(n, iy as usize, ix as usize, c) as f64 * k.get(c, i, j) as f64;
                    }
                }
            }
            acc as f32
        })
    }

    fn dense_oracle(x: &Tensor4, k: &ConvKernels, bias: &[f32], stride: usize, pad: Padding) -> Tensor4 {
        let s = x.shape();
        let oh = (s.h + pad.top + pad.bottom - k.kh) / stride + 1;
        let ow = (s.w + pad.left + pad.right - k.kw) / stride + 1;
        Tensor4::from_fn(Shape4::new(s.n, oh, ow, k.out_c), |n, oy, ox, o| {
            let mut acc = bias[o] as f64;
            for i in 0..k.kh {
                for j in 0..k.kw {
                    let iy = (oy * stride + i) as isize - pad.top as isize;
                    let ix = (ox * stride + j) as isize - pad.left as isize;
                    if iy >= 0 && ix >= 0 && (iy as usize) < s.h && (ix as usize) < s.w {
                        for ci in 0..s.c {
                            acc += x.at(n, iy as usize, ix as usize, ci) as f64 * k.get(o, i, j, ci) as f64;
                        }
                    }
                }
            }
            acc as f32
        })
    }

    fn pw_oracle(x: &Tensor4, w: &Matrix, bias: &[f32]) -> Tensor4 {
        let s = x.shape();
        Tensor4::from_fn(Shape4::new(s.n, s.h, s.w, w.rows), |n, y, xx, o| {
            let mut acc = bias[o] as f64;
            for ci in 0..s.c {
                acc += w.at(o, ci) as f64 * x.at(n, y, xx, ci) as f64;
            }
            acc as f32
        })
    }

    #[test]
    fn ones_kernel_counts_overlaps() {
        let x = Tensor4::full(Shape4::new(1, 4, 4, 1), 1.0);
        let k = DwKernels::new(1, 3, 3, vec![1.0; 9]).unwrap();
        let y = conv_dw(&x, &k, &[0.0], 1, Padding::uniform(1)).unwrap();
        #[rustfmt::skip]
        let expect = [
            4.0, 6.0, 6.0, 4.0,
            6.0, 9.0, 9.0, 6.0,
            6.0, 9.0, 9.0, 6.0,
            4.0, 6.0, 6.0, 4.0,
        ];
        assert_eq!(y.data(), &expect);
    }

    #[test]
    fn unit_1x1_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(Shape4::new(2, 5, 3, 6), &mut rng);
        let k = DwKernels::new(6, 1, 1, vec![1.0; 6]).unwrap();
        assert_eq!(conv_dw(&x, &k, &[0.0; 6], 1, Padding::default()).unwrap(), x);
    }

    #[test]
    fn dw_stride2_7x7_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(Shape4::new(1, 8, 8, 4), &mut rng);
        let k = DwKernels::from_fn(4, 7, 7, |_, _, _| rng.gen_range(-1.0..1.0));
        let bias = [0.0; 4];
        let pad = Padding::uniform(3);
        let y = conv_dw(&x, &k, &bias, 2, pad).unwrap();
        let o = dw_oracle(&x, &k, &bias, 2, pad);
        assert_eq!(y.shape(), Shape4::new(1, 4, 4, 4));
        assert!(y.max_abs_diff(&o).unwrap() < 1e-6);
    }

    #[test]
    fn dw_errors() {
        let x = Tensor4::zeros(Shape4::new(1, 2, 2, 2));
        let k = DwKernels::zeros(3, 1, 1);
        assert!(conv_dw(&x, &k, &[0.0; 3], 1, Padding::default()).is_err());
        let k = DwKernels::zeros(2, 1, 1);
        assert!(conv_dw(&x, &k, &[0.0; 2], 0, Padding::default()).is_err());
        let k = DwKernels::zeros(2, 5, 5);
        assert!(conv_dw(&x, &k, &[0.0; 2], 1, Padding::uniform(1)).is_err());
    }

    #[test]
    fn pw_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(Shape4::new(1, 3, 3, 4), &mut rng);
        assert_eq!(conv_pw(&x, &Matrix::identity(4), &[0.0; 4]).unwrap(), x);

        let x = Tensor4::new(Shape4::new(1, 1, 1, 2), vec![1.0, 2.0]).unwrap();
        let w = Matrix::new(1, 2, vec![3.0, 4.0]).unwrap();
        assert_eq!(conv_pw(&x, &w, &[0.5]).unwrap().data(), &[11.5]);

        assert!(conv_pw(&x, &Matrix::identity(3), &[0.0; 3]).is_err());
    }

    #[test]
    fn pw_matches_per_pixel_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random(Shape4::new(1, 5, 5, 8), &mut rng);
        let w = Matrix::new(6, 8, (0..48).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let b: Vec<f32> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y = conv_pw(&x, &w, &b).unwrap();
        assert!(y.max_abs_diff(&pw_oracle(&x, &w, &b)).unwrap() < 1e-6);
    }

    #[test]
    fn conv2d_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random(Shape4::new(2, 9, 7, 3), &mut rng);
        let k = ConvKernels::new(5, 3, 3, 3, (0..135).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let b: Vec<f32> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for (stride, pad) in [(1, Padding::uniform(1)), (2, Padding::uniform(1)), (2, Padding { top: 0, left: 1, bottom: 1, right: 0 })] {
            let y = conv2d(&x, &k, &b, stride, pad).unwrap();
            let o = dense_oracle(&x, &k, &b, stride, pad);
            assert!(y.max_abs_diff(&o).unwrap() < 1e-5);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        #[test]
        fn dw_agrees_with_oracle(
            seed in any::<u64>(),
            h in 1usize..10, w in 1usize..10, c in 1usize..9,
            kh in 1usize..6, kw in 1usize..6,
            stride in 1usize..4,
            pt in 0usize..3, pl in 0usize..3, pb in 0usize..3, pr in 0usize..3,
        ) {
            let pad = Padding { top: pt, left: pl, bottom: pb, right: pr };
            prop_assume!(h + pt + pb >= kh && w + pl + pr >= kw);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(Shape4::new(1, h, w, c), &mut rng);
            let k = DwKernels::from_fn(c, kh, kw, |_, _, _| rng.gen_range(-1.0..1.0));
            let b: Vec<f32> = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let y = conv_dw(&x, &k, &b, stride, pad).unwrap();
            prop_assert!(y.max_abs_diff(&dw_oracle(&x, &k, &b, stride, pad)).unwrap() <= 1e-5);
        }

        #[test]
        fn pw_agrees_with_oracle(
            seed in any::<u64>(),
            n in 1usize..3, h in 1usize..6, w in 1usize..6, cin in 1usize..12, cout in 1usize..12,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(Shape4::new(n, h, w, cin), &mut rng);
            let m = Matrix::new(cout, cin, (0..cin * cout).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let b: Vec<f32> = (0..cout).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let y = conv_pw(&x, &m, &b).unwrap();
            prop_assert!(y.max_abs_diff(&pw_oracle(&x, &m, &b)).unwrap() <= 1e-5);
        }

        #[test]
        fn ops_are_pure(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(Shape4::new(1, 6, 6, 4), &mut rng);
            let k = DwKernels::from_fn(4, 3, 3, |_, _, _| rng.gen_range(-1.0..1.0));
            let a = conv_dw(&x, &k, &[0.1; 4], 2, Padding::uniform(1)).unwrap();
            let b = conv_dw(&x, &k, &[0.1; 4], 2, Padding::uniform(1)).unwrap();
            prop_assert_eq!(a.data(), b.data());
        }
    }
}
