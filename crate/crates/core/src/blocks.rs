//! Network building blocks.
//!
//! Each block holds its weights in either the training-time (branchy, with
//! separate batch norms) or the deploy-time (fused) form. `fuse` produces the
//! deploy form as a new value; `forward` evaluates whichever form is held.

use crate::error::{Error, Result};
use crate::init::WeightInit;
use crate::layers::{Conv2d, Linear};
use crate::reparam::{fuse_repmsdw, fuse_single_scale, DwKernelSet, FusedDwConv, SingleScale, SingleScaleSet};
use crate::tensor::{
    add_assign, batch_norm, concat_channels, gelu_inplace, gelu_scalar, gemm_nn, gemm_nt,
    global_avg_pool, softmax_rows_inplace, BnParams, Matrix, Shape4, Tensor4,
};
use serde::{Deserialize, Serialize};

/// Query and key width of the single attention head.
pub const QK_DIM: usize = 16;

/// Value width: `floor(0.215 * channels)`.
pub fn value_dim(channels: usize) -> usize {
    channels * 215 / 1000
}

pub const DEFAULT_FFN_RATIO: usize = 3;
pub const HEAD_HIDDEN: usize = 1280;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MixerKind {
    RepMsdw { k: usize },
    RepSa { k: usize },
    /// Square-only reparameterization, for ablations.
    SquareDw { k: usize },
    /// Single `k x k` depthwise kernel, for ablations.
    PlainDw { k: usize },
}

impl MixerKind {
    pub fn kernel(&self) -> usize {
        match *self {
            MixerKind::RepMsdw { k } | MixerKind::RepSa { k } | MixerKind::SquareDw { k } | MixerKind::PlainDw { k } => k,
        }
    }

    pub fn is_attention(&self) -> bool {
        matches!(self, MixerKind::RepSa { .. })
    }

    /// Short label, e.g. `M7` or `A7`.
    pub fn label(&self) -> String {
        match *self {
            MixerKind::RepMsdw { k } => format!("M{k}"),
            MixerKind::RepSa { k } => format!("A{k}"),
            MixerKind::SquareDw { k } => format!("Q{k}"),
            MixerKind::PlainDw { k } => format!("D{k}"),
        }
    }

    fn dw_conv(&self, channels: usize, init: &mut WeightInit) -> Result<DwConv> {
        Ok(match *self {
            MixerKind::RepMsdw { k } | MixerKind::RepSa { k } => DwConv::Branchy(DwKernelSet::init(channels, k, 1, init)?),
            MixerKind::SquareDw { k } => {
                DwConv::SingleScale(SingleScaleSet::init(channels, k, 1, SingleScale::Square, init)?)
            }
            MixerKind::PlainDw { k } => {
                DwConv::SingleScale(SingleScaleSet::init(channels, k, 1, SingleScale::Plain, init)?)
            }
        })
    }
}

/// A reparameterizable depthwise convolution in either form.
#[derive(Debug, Clone, PartialEq)]
pub enum DwConv {
    Branchy(DwKernelSet),
    SingleScale(SingleScaleSet),
    Fused(FusedDwConv),
}

impl DwConv {
    pub fn forward(&self, x: &Tensor4) -> Result<Tensor4> {
        match self {
            DwConv::Branchy(set) => set.forward(x),
            DwConv::SingleScale(set) => set.forward(x),
            DwConv::Fused(f) => f.forward(x),
        }
    }

    pub fn fuse(&self) -> Result<Self> {
        match self {
            DwConv::Branchy(set) => Ok(DwConv::Fused(fuse_repmsdw(set)?)),
            DwConv::SingleScale(set) => Ok(DwConv::Fused(fuse_single_scale(set)?)),
            DwConv::Fused(_) => Err(Error::AlreadyFused),
        }
    }

    pub fn is_fused(&self) -> bool {
        matches!(self, DwConv::Fused(_))
    }

    pub fn channels(&self) -> usize {
        match self {
            DwConv::Branchy(set) => set.channels(),
            DwConv::SingleScale(set) => set.channels(),
            DwConv::Fused(f) => f.channels(),
        }
    }

    pub fn stride(&self) -> usize {
        match self {
            DwConv::Branchy(set) => set.stride,
            DwConv::SingleScale(set) => set.stride,
            DwConv::Fused(f) => f.stride,
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            DwConv::Branchy(set) => set.param_count(),
            DwConv::SingleScale(set) => set.param_count(),
            DwConv::Fused(f) => f.param_count(),
        }
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        match self {
            DwConv::Branchy(set) => set.macs(h, w),
            DwConv::SingleScale(set) => set.macs(h, w),
            DwConv::Fused(f) => f.macs(h, w),
        }
    }
}

/// Evaluates the multi-scale depthwise mixer, literally or through its fused form.
pub fn repmsdw_forward(x: &Tensor4, set: &DwKernelSet, fused: bool) -> Result<Tensor4> {
    if x.shape().c != set.channels() {
        return Err(Error::shape("repmsdw_forward", set.channels(), x.shape().c));
    }
    if fused {
        fuse_repmsdw(set)?.forward(x)
    } else {
        set.forward(x)
    }
}

/// Two fully connected layers with GELU in between, applied per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct FfnParams {
    pub expand: Linear,
    pub reduce: Linear,
}

impl FfnParams {
    pub fn init(channels: usize, ratio: usize, init: &mut WeightInit) -> Self {
        Self {
            expand: init.linear(channels, ratio * channels),
            reduce: init.linear(ratio * channels, channels),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.expand.in_dim();
        if self.reduce.in_dim() != self.expand.out_dim() || self.reduce.out_dim() != c {
            return Err(Error::Config(format!(
                "ffn shapes {}->{} / {}->{} are inconsistent",
                c,
                self.expand.out_dim(),
                self.reduce.in_dim(),
                self.reduce.out_dim()
            )));
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.expand.in_dim()
    }

    pub fn ratio(&self) -> usize {
        self.expand.out_dim() / self.expand.in_dim()
    }

    pub fn param_count(&self) -> usize {
        self.expand.param_count() + self.reduce.param_count()
    }

    pub fn macs(&self, pixels: usize) -> u64 {
        (pixels * 2 * self.expand.in_dim() * self.expand.out_dim()) as u64
    }
}

pub fn ffn_forward(x: &Tensor4, p: &FfnParams) -> Result<Tensor4> {
    p.validate()?;
    let mut hidden = p.expand.forward(x)?;
    gelu_inplace(&mut hidden);
    p.reduce.forward(&hidden)
}

/// Single-head attention weights of the attention mixer.
#[derive(Debug, Clone, PartialEq)]
pub struct SaParams {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    /// Projects `concat(local, attention)` back to the input width.
    pub o: Linear,
}

impl SaParams {
    pub fn init(channels: usize, init: &mut WeightInit) -> Result<Self> {
        let dv = value_dim(channels);
        if dv < 1 {
            return Err(Error::Config(format!("{channels} channels give an empty value head")));
        }
        Ok(Self {
            q: init.linear(channels, QK_DIM),
            k: init.linear(channels, QK_DIM),
            v: init.linear(channels, dv),
            o: init.linear(channels + dv, channels),
        })
    }

    pub fn zeros(channels: usize) -> Self {
        let dv = value_dim(channels);
        Self {
            q: Linear::zeros(channels, QK_DIM),
            k: Linear::zeros(channels, QK_DIM),
            v: Linear::zeros(channels, dv),
            o: Linear::zeros(channels + dv, channels),
        }
    }

    pub fn channels(&self) -> usize {
        self.q.in_dim()
    }

    pub fn value_dim(&self) -> usize {
        self.v.out_dim()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        let dv = self.value_dim();
        if dv < 1 {
            return Err(Error::Config("value width must be at least 1".into()));
        }
        if self.k.in_dim() != c || self.v.in_dim() != c || self.q.out_dim() != self.k.out_dim() {
            return Err(Error::Config("query/key/value projections disagree".into()));
        }
        if self.o.in_dim() != c + dv || self.o.out_dim() != c {
            return Err(Error::shape("attention output projection", format!("{}->{c}", c + dv), format!("{}->{}", self.o.in_dim(), self.o.out_dim())));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.q.param_count() + self.k.param_count() + self.v.param_count() + self.o.param_count()
    }

    pub fn macs(&self, tokens: usize) -> u64 {
        let (c, dq, dv) = (self.channels(), self.q.out_dim(), self.value_dim());
        let t = tokens;
        (t * c * (2 * dq + dv) + t * t * (dq + dv) + t * (c + dv) * c) as u64
    }

    /// Attention over all spatial positions of each batch item.
    ///
    /// Returns the `H x W x d_v` attention output and, per batch item, the
    /// `HW x HW` row-stochastic score matrix.
    pub fn attend(&self, u: &Tensor4) -> Result<(Tensor4, Vec<Matrix>)> {
        self.validate()?;
        let s = u.shape();
        if s.c != self.channels() {
            return Err(Error::shape("attention", self.channels(), s.c));
        }
        let t = s.h * s.w;
        let (dq, dv) = (self.q.out_dim(), self.value_dim());
        let scale = 1.0 / (dq as f32).sqrt();
        let mut attn = vec![0.0f32; s.n * t * dv];
        let mut scores = Vec::with_capacity(s.n);
        let (mut q, mut k, mut v) = (vec![0.0; t * dq], vec![0.0; t * dq], vec![0.0; t * dv]);
        for n in 0..s.n {
            let tokens = &u.data()[n * t * s.c..(n + 1) * t * s.c];
            gemm_nt(tokens, t, s.c, &self.q.weight.data, dq, Some(&self.q.bias), &mut q);
            gemm_nt(tokens, t, s.c, &self.k.weight.data, dq, Some(&self.k.bias), &mut k);
            gemm_nt(tokens, t, s.c, &self.v.weight.data, dv, Some(&self.v.bias), &mut v);
            let mut a = Matrix::zeros(t, t);
            gemm_nt(&q, t, dq, &k, t, None, &mut a.data);
            a.data.iter_mut().for_each(|x| *x *= scale);
            softmax_rows_inplace(&mut a.data, t);
            gemm_nn(&a.data, t, t, &v, dv, &mut attn[n * t * dv..(n + 1) * t * dv]);
            scores.push(a);
        }
        Ok((Tensor4::new(Shape4::new(s.n, s.h, s.w, dv), attn)?, scores))
    }
}

/// Local multi-scale path followed by single-head global attention; the two
/// are concatenated and projected back to the input width.
pub fn repsa_forward(x: &Tensor4, set: &DwKernelSet, sa: &SaParams, fused: bool) -> Result<Tensor4> {
    let u = repmsdw_forward(x, set, fused)?;
    repsa_tail(&u, sa)
}

fn repsa_tail(u: &Tensor4, sa: &SaParams) -> Result<Tensor4> {
    let (attn, _) = sa.attend(u)?;
    sa.o.forward(&concat_channels(&[u, &attn])?)
}

/// Token mixer of a block.
#[derive(Debug, Clone, PartialEq)]
pub enum TokenMixer {
    /// The depthwise set's own batch norm doubles as the residual branch norm.
    RepMsdw(DwConv),
    RepSa {
        local: DwConv,
        sa: SaParams,
        /// Residual-branch norm; folded into `sa.o` once fused.
        norm: Option<BnParams>,
    },
}

impl TokenMixer {
    pub fn forward(&self, x: &Tensor4) -> Result<Tensor4> {
        match self {
            TokenMixer::RepMsdw(dw) => dw.forward(x),
            TokenMixer::RepSa { local, sa, norm } => {
                let u = local.forward(x)?;
                let y = repsa_tail(&u, sa)?;
                match norm {
                    Some(bn) => batch_norm(&y, bn),
                    None => Ok(y),
                }
            }
        }
    }

    pub fn kernel(&self) -> usize {
        match self {
            TokenMixer::RepMsdw(dw) | TokenMixer::RepSa { local: dw, .. } => match dw {
                DwConv::Branchy(s) => s.k,
                DwConv::SingleScale(s) => s.k,
                DwConv::Fused(f) => f.k,
            },
        }
    }

    /// `None` for a fused depthwise mixer: its branch layout is gone.
    pub fn kind(&self) -> Option<MixerKind> {
        let k = self.kernel();
        match self {
            TokenMixer::RepSa { .. } => Some(MixerKind::RepSa { k }),
            TokenMixer::RepMsdw(DwConv::Branchy(_)) => Some(MixerKind::RepMsdw { k }),
            TokenMixer::RepMsdw(DwConv::SingleScale(s)) => Some(match s.layout() {
                SingleScale::Square => MixerKind::SquareDw { k },
                SingleScale::Plain => MixerKind::PlainDw { k },
            }),
            TokenMixer::RepMsdw(DwConv::Fused(_)) => None,
        }
    }

    pub fn fuse(&self) -> Result<Self> {
        Ok(match self {
            TokenMixer::RepMsdw(dw) => TokenMixer::RepMsdw(dw.fuse()?),
            TokenMixer::RepSa { local, sa, norm } => {
                let mut sa = sa.clone();
                if let Some(bn) = norm {
                    sa.o = sa.o.fold_bn(bn)?;
                }
                TokenMixer::RepSa {
                    local: local.fuse()?,
                    sa,
                    norm: None,
                }
            }
        })
    }

    pub fn is_fused(&self) -> bool {
        match self {
            TokenMixer::RepMsdw(dw) => dw.is_fused(),
            TokenMixer::RepSa { local, .. } => local.is_fused(),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            TokenMixer::RepMsdw(dw) => dw.param_count(),
            TokenMixer::RepSa { local, sa, norm } => {
                local.param_count() + sa.param_count() + norm.as_ref().map_or(0, |b| b.param_count())
            }
        }
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        match self {
            TokenMixer::RepMsdw(dw) => dw.macs(h, w),
            TokenMixer::RepSa { local, sa, .. } => local.macs(h, w) + sa.macs(h * w),
        }
    }
}

/// Two residual sub-blocks: token mixing then channel mixing, each normalised.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub mixer: TokenMixer,
    pub ffn: FfnParams,
    /// Norm after the FFN; folded into `ffn.reduce` once fused.
    pub ffn_norm: Option<BnParams>,
}

impl Block {
    pub fn init(channels: usize, kind: MixerKind, ffn_ratio: usize, init: &mut WeightInit) -> Result<Self> {
        let mixer = if kind.is_attention() {
            TokenMixer::RepSa {
                local: kind.dw_conv(channels, init)?,
                sa: SaParams::init(channels, init)?,
                norm: Some(init.bn(channels)),
            }
        } else {
            TokenMixer::RepMsdw(kind.dw_conv(channels, init)?)
        };
        Ok(Self {
            mixer,
            ffn: FfnParams::init(channels, ffn_ratio, init),
            ffn_norm: Some(init.bn(channels)),
        })
    }

    pub fn channels(&self) -> usize {
        self.ffn.channels()
    }

    pub fn forward(&self, x: &Tensor4) -> Result<Tensor4> {
        if x.shape().c != self.channels() {
            return Err(Error::shape("block", self.channels(), x.shape().c));
        }
        let mut x1 = x.clone();
        add_assign(&mut x1, &self.mixer.forward(x)?)?;
        let mut y = ffn_forward(&x1, &self.ffn)?;
        if let Some(bn) = &self.ffn_norm {
            y = batch_norm(&y, bn)?;
        }
        add_assign(&mut x1, &y)?;
        Ok(x1)
    }

    pub fn fuse(&self) -> Result<Self> {
        let mut ffn = self.ffn.clone();
        if let Some(bn) = &self.ffn_norm {
            ffn.reduce = ffn.reduce.fold_bn(bn)?;
        }
        Ok(Self {
            mixer: self.mixer.fuse()?,
            ffn,
            ffn_norm: None,
        })
    }

    pub fn is_fused(&self) -> bool {
        self.mixer.is_fused()
    }

    pub fn param_count(&self) -> usize {
        self.mixer.param_count() + self.ffn.param_count() + self.ffn_norm.as_ref().map_or(0, |b| b.param_count())
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.mixer.macs(h, w) + self.ffn.macs(h * w)
    }
}

/// Evaluates a block in the requested form; the fused form is derived on the fly
/// when `p` holds training-time weights.
pub fn ravit_block(x: &Tensor4, p: &Block, fused: bool) -> Result<Tensor4> {
    match (fused, p.is_fused()) {
        (true, false) => p.fuse()?.forward(x),
        (false, true) => Err(Error::AlreadyFused),
        _ => p.forward(x),
    }
}

/// A conv layer followed by an optional norm (folded once fused) and GELU.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBnAct {
    pub conv: Conv2d,
    pub norm: Option<BnParams>,
}

impl ConvBnAct {
    pub fn forward(&self, x: &Tensor4) -> Result<Tensor4> {
        let mut y = self.conv.forward(x)?;
        if let Some(bn) = &self.norm {
            y = batch_norm(&y, bn)?;
        }
        gelu_inplace(&mut y);
        Ok(y)
    }

    pub fn fuse(&self) -> Result<Self> {
        let conv = match &self.norm {
            Some(bn) => self.conv.fold_bn(bn)?,
            None => self.conv.clone(),
        };
        Ok(Self { conv, norm: None })
    }

    pub fn param_count(&self) -> usize {
        self.conv.param_count() + self.norm.as_ref().map_or(0, |b| b.param_count())
    }
}

/// Stack of 3x3 stride-2 convolutions; channels double at each step and the
/// last one reaches the first stage width.
#[derive(Debug, Clone, PartialEq)]
pub struct Stem {
    pub layers: Vec<ConvBnAct>,
}

impl Stem {
    pub fn channel_plan(out_channels: usize, convs: usize) -> Vec<usize> {
        (0..convs).map(|i| out_channels >> (convs - 1 - i)).collect()
    }

    pub fn init(in_channels: usize, out_channels: usize, convs: usize, init: &mut WeightInit) -> Result<Self> {
        if convs == 0 {
            return Err(Error::Config("stem needs at least one convolution".into()));
        }
        let plan = Self::channel_plan(out_channels, convs);
        if plan[0] == 0 || out_channels % (1 << (convs - 1)) != 0 {
            return Err(Error::Config(format!("stem width {out_channels} cannot halve {} times", convs - 1)));
        }
        let mut cin = in_channels;
        let mut layers = Vec::with_capacity(convs);
        for &c in &plan {
            layers.push(ConvBnAct {
                conv: init.conv(cin, c, 3, 2),
                norm: Some(init.bn(c)),
            });
            cin = c;
        }
        Ok(Self { layers })
    }

    pub fn stride(&self) -> usize {
        1 << self.layers.len()
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map_or(0, |l| l.conv.kernels.out_c)
    }

    pub fn forward(&self, x: &Tensor4) -> Result<Tensor4> {
        let s = x.shape();
        if s.h % self.stride() != 0 || s.w % self.stride() != 0 {
            return Err(Error::invalid(
                "stem",
                format!("input {}x{} is not divisible by {}", s.h, s.w, self.stride()),
            ));
        }
        self.layers.iter().try_fold(x.clone(), |y, l| l.forward(&y))
    }

    pub fn fuse(&self) -> Result<Self> {
        Ok(Self {
            layers: self.layers.iter().map(|l| l.fuse()).collect::<Result<_>>()?,
        })
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.param_count()).sum()
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let (mut h, mut w, mut total) = (h, w, 0);
        for l in &self.layers {
            h /= 2;
            w /= 2;
            total += l.conv.macs(h * w);
        }
        total
    }
}

pub fn stem_forward(x: &Tensor4, stem: &Stem) -> Result<Tensor4> {
    stem.forward(x)
}

/// Stride-2 multi-scale depthwise conv, pointwise expansion, norm, GELU.
#[derive(Debug, Clone, PartialEq)]
pub struct Downsample {
    pub dw: DwConv,
    pub pw: Linear,
    pub norm: Option<BnParams>,
}

pub const DOWNSAMPLE_KERNEL: usize = 7;

impl Downsample {
    pub fn init(in_channels: usize, out_channels: usize, init: &mut WeightInit) -> Result<Self> {
        Ok(Self {
            dw: DwConv::Branchy(DwKernelSet::init(in_channels, DOWNSAMPLE_KERNEL, 2, init)?),
            pw: init.linear(in_channels, out_channels),
            norm: Some(init.bn(out_channels)),
        })
    }

    pub fn forward(&self, x: &Tensor4) -> Result<Tensor4> {
        if self.dw.stride() != 2 {
            return Err(Error::Config("downsample needs a stride-2 depthwise set".into()));
        }
        let y = self.dw.forward(x)?;
        let mut y = self.pw.forward(&y)?;
        if let Some(bn) = &self.norm {
            y = batch_norm(&y, bn)?;
        }
        gelu_inplace(&mut y);
        Ok(y)
    }

    pub fn fuse(&self) -> Result<Self> {
        let pw = match &self.norm {
            Some(bn) => self.pw.fold_bn(bn)?,
            None => self.pw.clone(),
        };
        Ok(Self {
            dw: self.dw.fuse()?,
            pw,
            norm: None,
        })
    }

    pub fn param_count(&self) -> usize {
        self.dw.param_count() + self.pw.param_count() + self.norm.as_ref().map_or(0, |b| b.param_count())
    }

    /// MACs for an `h x w` input.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let px = (h.div_ceil(2) * w.div_ceil(2)) as u64;
        self.dw.macs(h, w) + px * (self.pw.in_dim() * self.pw.out_dim()) as u64
    }
}

pub fn downsample_forward(x: &Tensor4, ds: &Downsample) -> Result<Tensor4> {
    ds.forward(x)
}

/// Average pool, hidden FC with GELU, then class logits. An optional second
/// classifier on the same hidden features is averaged in.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub hidden: Linear,
    pub classifier: Linear,
    pub distill: Option<Linear>,
}

impl ClassifierHead {
    pub fn init(in_dim: usize, hidden: usize, classes: usize, distill: bool, init: &mut WeightInit) -> Self {
        Self {
            hidden: init.linear(in_dim, hidden),
            classifier: init.linear(hidden, classes),
            distill: distill.then(|| init.linear(hidden, classes)),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.out_dim()
    }

    pub fn forward(&self, x: &Tensor4) -> Result<Matrix> {
        let pooled = global_avg_pool(x);
        let mut h = self.hidden.forward_rows(&pooled)?;
        h.data.iter_mut().for_each(|v| *v = gelu_scalar(*v));
        let mut logits = self.classifier.forward_rows(&h)?;
        if let Some(d) = &self.distill {
            let other = d.forward_rows(&h)?;
            logits.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a = 0.5 * (*a + b));
        }
        Ok(logits)
    }

    pub fn param_count(&self) -> usize {
        self.hidden.param_count()
            + self.classifier.param_count()
            + self.distill.as_ref().map_or(0, |d| d.param_count())
    }

    pub fn macs(&self) -> u64 {
        let hid = self.hidden.in_dim() * self.hidden.out_dim();
        let cls = self.classifier.in_dim() * self.classifier.out_dim();
        (hid + cls * if self.distill.is_some() { 2 } else { 1 }) as u64
    }
}

pub fn classifier_head(x: &Tensor4, head: &ClassifierHead, num_classes: usize) -> Result<Matrix> {
    if head.num_classes() != num_classes {
        return Err(Error::shape("classifier_head", num_classes, head.num_classes()));
    }
    if x.shape().c != head.hidden.in_dim() {
        return Err(Error::shape("classifier_head", head.hidden.in_dim(), x.shape().c));
    }
    head.forward(x)
}
