//! Multi-scale depthwise reparameterization.
//!
//! A [`DwKernelSet`] is the training-time form of the multi-scale depthwise
//! mixer: the channels are split into four equal groups, each group runs its
//! own small depthwise branch (or passes through untouched), the groups are
//! concatenated, a full `k x k` depthwise convolution over all channels is
//! added, and one batch norm closes the block.
//!
//! Every branch is linear and centre-aligned, so the whole thing collapses
//! into a single `k x k` depthwise convolution with a per-channel bias
//! ([`FusedDwConv`]). [`fuse_repmsdw`] performs that collapse and
//! [`verify_equivalence`] checks it numerically.

use crate::error::{Error, Result};
use crate::init::WeightInit;
use crate::tensor::{
    add_assign, batch_norm, chunk_channels, concat_channels, conv_dw, BnParams, DwKernels,
    Padding, Shape4, Tensor4,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Extent of the square branch for a largest extent `k`: `k / 2`, stepped
/// down to the nearest odd number so it stays centre-alignable.
pub fn square_branch_extent(k: usize) -> usize {
    let s = k / 2;
    if s % 2 == 1 {
        s
    } else {
        s.saturating_sub(1).max(1)
    }
}

/// Unfused multi-branch depthwise weights.
#[derive(Debug, Clone, PartialEq)]
pub struct DwKernelSet {
    pub k: usize,
    pub s: usize,
    pub stride: usize,
    /// `k x k` over all channels.
    pub main: DwKernels,
    /// `s x s` on the first channel quarter.
    pub branch1: DwKernels,
    /// `1 x k` and `k x 1` on the second quarter.
    pub branch2a: DwKernels,
    pub branch2b: DwKernels,
    /// `3 x k` and `k x 3` on the third quarter.
    pub branch3a: DwKernels,
    pub branch3b: DwKernels,
    pub bn: BnParams,
}

impl DwKernelSet {
    pub fn zeros(channels: usize, k: usize, stride: usize) -> Result<Self> {
        check_geometry(channels, k, stride)?;
        let q = channels / 4;
        let s = square_branch_extent(k);
        Ok(Self {
            k,
            s,
            stride,
            main: DwKernels::zeros(channels, k, k),
            branch1: DwKernels::zeros(q, s, s),
            branch2a: DwKernels::zeros(q, 1, k),
            branch2b: DwKernels::zeros(q, k, 1),
            branch3a: DwKernels::zeros(q, 3, k),
            branch3b: DwKernels::zeros(q, k, 3),
            bn: BnParams::identity(channels),
        })
    }

    pub fn init(channels: usize, k: usize, stride: usize, init: &mut WeightInit) -> Result<Self> {
        check_geometry(channels, k, stride)?;
        let q = channels / 4;
        let s = square_branch_extent(k);
        Ok(Self {
            k,
            s,
            stride,
            main: init.dw(channels, k, k),
            branch1: init.dw(q, s, s),
            branch2a: init.dw(q, 1, k),
            branch2b: init.dw(q, k, 1),
            branch3a: init.dw(q, 3, k),
            branch3b: init.dw(q, k, 3),
            bn: init.bn(channels),
        })
    }

    pub fn channels(&self) -> usize {
        self.main.channels
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        check_geometry(c, self.k, self.stride)?;
        if self.s != square_branch_extent(self.k) {
            return Err(Error::Config(format!(
                "square branch extent {} does not match k={}",
                self.s, self.k
            )));
        }
        let q = c / 4;
        let k = self.k;
        let expect = [
            ("main", &self.main, c, k, k),
            ("branch1", &self.branch1, q, self.s, self.s),
            ("branch2a", &self.branch2a, q, 1, k),
            ("branch2b", &self.branch2b, q, k, 1),
            ("branch3a", &self.branch3a, q, 3, k),
            ("branch3b", &self.branch3b, q, k, 3),
        ];
        for (name, ker, ec, eh, ew) in expect {
            if (ker.channels, ker.kh, ker.kw) != (ec, eh, ew) {
                return Err(Error::Config(format!(
                    "{name}: expected {ec}x{eh}x{ew}, got {}x{}x{}",
                    ker.channels, ker.kh, ker.kw
                )));
            }
        }
        self.bn.validate()?;
        if self.bn.channels() != c {
            return Err(Error::shape("DwKernelSet bn", c, self.bn.channels()));
        }
        Ok(())
    }

    /// Stored scalars of the unfused form.
    pub fn param_count(&self) -> usize {
        let (c, k, s) = (self.channels(), self.k, self.s);
        c * k * k + c * (s * s + 2 * k + 6 * k) / 4 + 4 * c
    }

    pub fn out_extent(&self, input: usize) -> usize {
        (input - 1) / self.stride + 1
    }

    /// Multiply-accumulates of the branchy form for an `h x w` input.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let px = (self.out_extent(h) * self.out_extent(w)) as u64;
        let (c, k, s) = (self.channels() as u64, self.k as u64, self.s as u64);
        px * (c * k * k + c / 4 * (s * s + 8 * k))
    }

    /// Literal multi-branch evaluation: chunk, branch, concat, add main, BN.
    pub fn forward(&self, x: &Tensor4) -> Result<Tensor4> {
        self.validate()?;
        if x.shape().c != self.channels() {
            return Err(Error::shape("repmsdw", self.channels(), x.shape().c));
        }
        let st = self.stride;
        let q = self.channels() / 4;
        let zero = vec![0.0f32; q];
        let branch = |x: &Tensor4, ker: &DwKernels| {
            conv_dw(x, ker, &zero, st, Padding::centered(ker.kh, ker.kw))
        };

        let parts = chunk_channels(x, 4)?;
        let y1 = branch(&parts[0], &self.branch1)?;
        let mut y2 = branch(&parts[1], &self.branch2a)?;
        add_assign(&mut y2, &branch(&parts[1], &self.branch2b)?)?;
        let mut y3 = branch(&parts[2], &self.branch3a)?;
        add_assign(&mut y3, &branch(&parts[2], &self.branch3b)?)?;
        let y4 = branch(&parts[3], &DwKernels::new(q, 1, 1, vec![1.0; q])?)?;

        let mut out = conv_dw(
            x,
            &self.main,
            &vec![0.0; self.channels()],
            st,
            Padding::centered(self.k, self.k),
        )?;
        add_assign(&mut out, &concat_channels(&[&y1, &y2, &y3, &y4])?)?;
        batch_norm(&out, &self.bn)
    }
}

/// Branch layout of a [`SingleScaleSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SingleScale {
    /// `k x k` plus an `s x s` kernel and identity, all over every channel.
    Square,
    /// The `k x k` kernel alone.
    Plain,
}

/// Depthwise mixer without the channel split: a `k x k` kernel, optionally a
/// smaller square kernel and an identity path, then one batch norm. Used for
/// ablations against the multi-scale set.
#[derive(Debug, Clone, PartialEq)]
pub struct SingleScaleSet {
    pub k: usize,
    pub stride: usize,
    pub main: DwKernels,
    /// `s x s` with `s = square_branch_extent(k)`.
    pub square: Option<DwKernels>,
    pub identity: bool,
    pub bn: BnParams,
}

impl SingleScaleSet {
    pub fn init(channels: usize, k: usize, stride: usize, layout: SingleScale, init: &mut WeightInit) -> Result<Self> {
        check_geometry(channels, k, stride)?;
        let main = init.dw(channels, k, k);
        let square = match layout {
            SingleScale::Square => {
                let s = square_branch_extent(k);
                Some(init.dw(channels, s, s))
            }
            SingleScale::Plain => None,
        };
        let set = Self {
            k,
            stride,
            main,
            square,
            identity: layout == SingleScale::Square,
            bn: init.bn(channels),
        };
        set.validate()?;
        Ok(set)
    }

    pub fn layout(&self) -> SingleScale {
        if self.square.is_some() {
            SingleScale::Square
        } else {
            SingleScale::Plain
        }
    }

    pub fn channels(&self) -> usize {
        self.main.channels
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        check_geometry(c, self.k, self.stride)?;
        if (self.main.kh, self.main.kw) != (self.k, self.k) {
            return Err(Error::Config(format!("main kernel is {}x{}, expected {k}x{k}", self.main.kh, self.main.kw, k = self.k)));
        }
        if let Some(sq) = &self.square {
            let s = square_branch_extent(self.k);
            if (sq.channels, sq.kh, sq.kw) != (c, s, s) {
                return Err(Error::Config(format!(
                    "square: expected {c}x{s}x{s}, got {}x{}x{}",
                    sq.channels, sq.kh, sq.kw
                )));
            }
        }
        if self.identity && self.stride != 1 {
            return Err(Error::Config("identity path needs stride 1".into()));
        }
        self.bn.validate()?;
        if self.bn.channels() != c {
            return Err(Error::shape("SingleScaleSet bn", c, self.bn.channels()));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.main.len() + self.square.as_ref().map_or(0, DwKernels::len) + self.bn.param_count()
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let oh = (h - 1) / self.stride + 1;
        let ow = (w - 1) / self.stride + 1;
        let per_px = self.main.len() + self.square.as_ref().map_or(0, DwKernels::len);
        (oh * ow * per_px) as u64
    }

    pub fn forward(&self, x: &Tensor4) -> Result<Tensor4> {
        self.validate()?;
        let c = self.channels();
        let zero = vec![0.0f32; c];
        let mut out = conv_dw(x, &self.main, &zero, self.stride, Padding::centered(self.k, self.k))?;
        if let Some(sq) = &self.square {
            add_assign(&mut out, &conv_dw(x, sq, &zero, self.stride, Padding::centered(sq.kh, sq.kw))?)?;
        }
        if self.identity {
            add_assign(&mut out, x)?;
        }
        batch_norm(&out, &self.bn)
    }
}

/// Collapses a [`SingleScaleSet`] into one `k x k` depthwise convolution.
pub fn fuse_single_scale(set: &SingleScaleSet) -> Result<FusedDwConv> {
    set.validate()?;
    let (c, k) = (set.channels(), set.k);
    let mut acc: Vec<f64> = set.main.data().iter().map(|&v| v as f64).collect();
    let mut extra = Vec::new();
    if let Some(sq) = &set.square {
        extra.push(embed_kernel(sq, k)?);
    }
    if set.identity {
        extra.push(identity_kernel(k, c)?);
    }
    for e in &extra {
        for (dst, &v) in acc.iter_mut().zip(e.data()) {
            *dst += v as f64;
        }
    }
    let (scale, shift) = set.bn.scale_shift();
    let data = acc
        .chunks_exact(c)
        .flat_map(|tap| tap.iter().zip(&scale).map(|(&w, &s)| (w * s) as f32))
        .collect();
    Ok(FusedDwConv {
        k,
        stride: set.stride,
        kernels: DwKernels::new(c, k, k, data)?,
        bias: shift.iter().map(|&b| b as f32).collect(),
    })
}

fn check_geometry(channels: usize, k: usize, stride: usize) -> Result<()> {
    if k < 3 || k % 2 == 0 {
        return Err(Error::Config(format!("kernel extent {k} must be odd and >= 3")));
    }
    if channels == 0 || channels % 4 != 0 {
        return Err(Error::Config(format!(
            "channel count {channels} must be a positive multiple of 4"
        )));
    }
    if stride != 1 && stride != 2 {
        return Err(Error::Config(format!("stride {stride} must be 1 or 2")));
    }
    Ok(())
}

/// Deploy-time single depthwise convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedDwConv {
    pub k: usize,
    pub stride: usize,
    pub kernels: DwKernels,
    pub bias: Vec<f32>,
}

impl FusedDwConv {
    pub fn channels(&self) -> usize {
        self.kernels.channels
    }

    pub fn forward(&self, x: &Tensor4) -> Result<Tensor4> {
        conv_dw(x, &self.kernels, &self.bias, self.stride, Padding::centered(self.k, self.k))
    }

    pub fn param_count(&self) -> usize {
        self.kernels.len() + self.bias.len()
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let oh = (h - 1) / self.stride + 1;
        let ow = (w - 1) / self.stride + 1;
        (oh * ow * self.channels() * self.k * self.k) as u64
    }
}

/// Centre-aligns each channel's `a x b` kernel inside a zero `k x k` grid.
pub fn embed_kernel(small: &DwKernels, k: usize) -> Result<DwKernels> {
    let (a, b) = (small.kh, small.kw);
    if a % 2 == 0 || b % 2 == 0 {
        return Err(Error::invalid("embed_kernel", format!("even extent {a}x{b}")));
    }
    if a > k || b > k {
        return Err(Error::invalid("embed_kernel", format!("{a}x{b} exceeds {k}x{k}")));
    }
    let (oy, ox) = ((k - a) / 2, (k - b) / 2);
    let mut out = DwKernels::zeros(small.channels, k, k);
    for c in 0..small.channels {
        for i in 0..a {
            for j in 0..b {
                out.set(c, oy + i, ox + j, small.get(c, i, j));
            }
        }
    }
    Ok(out)
}

/// Centre tap 1, zeros elsewhere.
pub fn identity_kernel(k: usize, channels: usize) -> Result<DwKernels> {
    if k % 2 == 0 {
        return Err(Error::invalid("identity_kernel", format!("even extent {k}")));
    }
    let mut out = DwKernels::zeros(channels, k, k);
    for c in 0..channels {
        out.set(c, k / 2, k / 2, 1.0);
    }
    Ok(out)
}

/// Absorbs a following batch norm into depthwise kernels and bias.
pub fn fold_bn(kernels: &DwKernels, bias: &[f32], bn: &BnParams) -> Result<(DwKernels, Vec<f32>)> {
    bn.validate()?;
    let c = kernels.channels;
    if bn.channels() != c || bias.len() != c {
        return Err(Error::shape("fold_bn", c, format!("bn {} / bias {}", bn.channels(), bias.len())));
    }
    let (scale, shift) = bn.scale_shift();
    let mut out = kernels.clone();
    for tap in out.data_mut().chunks_exact_mut(c) {
        for (ch, w) in tap.iter_mut().enumerate() {
            *w = (*w as f64 * scale[ch]) as f32;
        }
    }
    let bias = (0..c)
        .map(|ch| (bias[ch] as f64 * scale[ch] + shift[ch]) as f32)
        .collect();
    Ok((out, bias))
}

/// Collapses the multi-branch set into one `k x k` depthwise convolution.
///
/// Accumulation happens in f64 and is truncated to f32 once at the end.
pub fn fuse_repmsdw(set: &DwKernelSet) -> Result<FusedDwConv> {
    set.validate()?;
    let (c, k) = (set.channels(), set.k);
    let q = c / 4;
    let mut acc: Vec<f64> = set.main.data().iter().map(|&v| v as f64).collect();

    let mut add_group = |group: usize, ker: &DwKernels| -> Result<()> {
        let e = embed_kernel(ker, k)?;
        for (tap, src) in acc.chunks_exact_mut(c).zip(e.data().chunks_exact(q)) {
            for (dst, &v) in tap[group * q..(group + 1) * q].iter_mut().zip(src) {
                *dst += v as f64;
            }
        }
        Ok(())
    };
    add_group(0, &set.branch1)?;
    add_group(1, &set.branch2a)?;
    add_group(1, &set.branch2b)?;
    add_group(2, &set.branch3a)?;
    add_group(2, &set.branch3b)?;
    add_group(3, &identity_kernel(k, q)?)?;

    let (scale, shift) = set.bn.scale_shift();
    let data = acc
        .chunks_exact(c)
        .flat_map(|tap| tap.iter().zip(&scale).map(|(&w, &s)| (w * s) as f32))
        .collect();
    Ok(FusedDwConv {
        k,
        stride: set.stride,
        kernels: DwKernels::new(c, k, k, data)?,
        bias: shift.iter().map(|&b| b as f32).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub trials: usize,
    pub tol: f32,
    pub max_abs_diff: f32,
    pub pass: bool,
}

/// Spatial extent of the random probes used by [`verify_equivalence`].
pub const PROBE_EXTENT: usize = 14;

/// Runs seeded random inputs through the branchy set and a fused conv.
pub fn compare_forms(
    set: &DwKernelSet,
    fused: &FusedDwConv,
    trials: usize,
    tol: f32,
    seed: u64,
) -> Result<EquivalenceReport> {
    if trials == 0 {
        return Err(Error::invalid("verify_equivalence", "trials must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = Shape4::new(1, PROBE_EXTENT, PROBE_EXTENT, set.channels());
    let mut max = 0.0f32;
    for _ in 0..trials {
        let x = Tensor4::from_fn(shape, |_, _, _, _| rng.gen_range(-1.0..1.0));
        let d = set.forward(&x)?.max_abs_diff(&fused.forward(&x)?)?;
        max = max.max(d);
    }
    Ok(EquivalenceReport {
        trials,
        tol,
        max_abs_diff: max,
        pass: max <= tol,
    })
}

pub fn verify_equivalence(set: &DwKernelSet, trials: usize, tol: f32, seed: u64) -> Result<EquivalenceReport> {
    compare_forms(set, &fuse_repmsdw(set)?, trials, tol, seed)
}
