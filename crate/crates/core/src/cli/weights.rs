//! Binary weight container and the mapping between models and named tensors.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "RAVW" version count
//! count x { name_len name_utf8 rank extent[rank] f32[prod(extent)] }
//! ```

use crate::backbone::{Model, Stage, VariantConfig};
use crate::blocks::{Block, ClassifierHead, ConvBnAct, Downsample, DwConv, FfnParams, SaParams, Stem, TokenMixer};
use crate::detector::{DetectorConfig, FastCos, FpnLevel, HeadParams, RepFpnParams};
use crate::error::{Error, Result};
use crate::layers::{Conv2d, Linear};
use crate::reparam::{DwKernelSet, FusedDwConv, SingleScaleSet};
use crate::tensor::{BnParams, ConvKernels, DwKernels, Matrix, Padding};
use std::collections::HashMap;

pub const MAGIC: &[u8; 4] = b"RAVW";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Ordered collection of uniquely named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorStore {
    entries: Vec<NamedTensor>,
    index: HashMap<String, usize>,
    taken: Vec<bool>,
}

impl TensorStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[NamedTensor] {
        &self.entries
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut NamedTensor> {
        self.index.get(name).map(|&i| &mut self.entries[i])
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<()> {
        let name = name.into();
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::WeightFormat(format!("{name}: shape {shape:?} holds {n} values, got {}", data.len())));
        }
        if self.index.contains_key(&name) {
            return Err(Error::WeightFormat(format!("duplicate tensor {name}")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(NamedTensor { name, shape, data });
        self.taken.push(false);
        Ok(())
    }

    /// Removes a tensor, checking its shape.
    pub fn take(&mut self, name: &str, shape: &[usize]) -> Result<Vec<f32>> {
        let &i = self.index.get(name).ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        if self.taken[i] {
            return Err(Error::WeightFormat(format!("{name} read twice")));
        }
        let e = &mut self.entries[i];
        if e.shape != shape {
            return Err(Error::WeightFormat(format!("{name}: expected shape {shape:?}, found {:?}", e.shape)));
        }
        self.taken[i] = true;
        Ok(std::mem::take(&mut e.data))
    }

    /// Shape of a tensor not yet taken.
    pub fn shape_of(&self, name: &str) -> Result<&[usize]> {
        self.get(name)
            .map(|e| e.shape.as_slice())
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    /// Errors if any tensor was never taken.
    pub fn finish(&self) -> Result<()> {
        match self.taken.iter().position(|t| !t) {
            Some(i) => Err(Error::WeightFormat(format!("unused tensor {}", self.entries[i].name))),
            None => Ok(()),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for &d in &e.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::WeightFormat("missing RAVW magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::WeightFormat(format!("unsupported version {version}")));
        }
        let count = r.u32()?;
        let mut store = Self::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::WeightFormat(format!("tensor name at byte {} is not UTF-8", r.pos - len)))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| Error::WeightFormat(format!("{name}: shape overflows")))?;
            let data = r
                .take(n)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            store.insert(name, shape, data)?;
        }
        if r.pos != bytes.len() {
            return Err(Error::WeightFormat(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(store)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::WeightFormat(format!("truncated at byte {}: wanted {n} more", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

// Writing.

fn put_linear(s: &mut TensorStore, p: &str, l: &Linear) -> Result<()> {
    s.insert(format!("{p}.weight"), vec![l.out_dim(), l.in_dim()], l.weight.data.clone())?;
    s.insert(format!("{p}.bias"), vec![l.out_dim()], l.bias.clone())
}

fn put_conv(s: &mut TensorStore, p: &str, c: &Conv2d) -> Result<()> {
    let k = &c.kernels;
    s.insert(format!("{p}.weight"), vec![k.out_c, k.kh, k.kw, k.in_c], k.data.clone())?;
    s.insert(format!("{p}.bias"), vec![k.out_c], c.bias.clone())
}

fn put_bn(s: &mut TensorStore, p: &str, bn: &BnParams) -> Result<()> {
    let c = bn.channels();
    s.insert(format!("{p}.gamma"), vec![c], bn.gamma.clone())?;
    s.insert(format!("{p}.beta"), vec![c], bn.beta.clone())?;
    s.insert(format!("{p}.mean"), vec![c], bn.mean.clone())?;
    s.insert(format!("{p}.var"), vec![c], bn.var.clone())?;
    s.insert(format!("{p}.eps"), vec![1], vec![bn.eps])
}

fn put_opt_bn(s: &mut TensorStore, p: &str, bn: &Option<BnParams>) -> Result<()> {
    match bn {
        Some(bn) => put_bn(s, p, bn),
        None => Ok(()),
    }
}

fn put_dw_kernels(s: &mut TensorStore, name: String, k: &DwKernels) -> Result<()> {
    s.insert(name, vec![k.kh, k.kw, k.channels], k.data().to_vec())
}

fn put_dw(s: &mut TensorStore, p: &str, dw: &DwConv) -> Result<()> {
    match dw {
        DwConv::Branchy(set) => {
            put_dw_kernels(s, format!("{p}.main"), &set.main)?;
            put_dw_kernels(s, format!("{p}.square"), &set.branch1)?;
            put_dw_kernels(s, format!("{p}.row1"), &set.branch2a)?;
            put_dw_kernels(s, format!("{p}.col1"), &set.branch2b)?;
            put_dw_kernels(s, format!("{p}.row3"), &set.branch3a)?;
            put_dw_kernels(s, format!("{p}.col3"), &set.branch3b)?;
            put_bn(s, &format!("{p}.bn"), &set.bn)
        }
        DwConv::SingleScale(set) => {
            put_dw_kernels(s, format!("{p}.main"), &set.main)?;
            if let Some(sq) = &set.square {
                put_dw_kernels(s, format!("{p}.square"), sq)?;
            }
            put_bn(s, &format!("{p}.bn"), &set.bn)
        }
        DwConv::Fused(f) => {
            put_dw_kernels(s, format!("{p}.kernel"), &f.kernels)?;
            s.insert(format!("{p}.bias"), vec![f.bias.len()], f.bias.clone())
        }
    }
}

fn put_block(s: &mut TensorStore, p: &str, b: &Block) -> Result<()> {
    match &b.mixer {
        TokenMixer::RepMsdw(dw) => put_dw(s, &format!("{p}.mixer.dw"), dw)?,
        TokenMixer::RepSa { local, sa, norm } => {
            put_dw(s, &format!("{p}.mixer.dw"), local)?;
            put_linear(s, &format!("{p}.mixer.q"), &sa.q)?;
            put_linear(s, &format!("{p}.mixer.k"), &sa.k)?;
            put_linear(s, &format!("{p}.mixer.v"), &sa.v)?;
            put_linear(s, &format!("{p}.mixer.o"), &sa.o)?;
            put_opt_bn(s, &format!("{p}.mixer.norm"), norm)?;
        }
    }
    put_linear(s, &format!("{p}.ffn.expand"), &b.ffn.expand)?;
    put_linear(s, &format!("{p}.ffn.reduce"), &b.ffn.reduce)?;
    put_opt_bn(s, &format!("{p}.ffn.norm"), &b.ffn_norm)
}

pub fn put_backbone(s: &mut TensorStore, p: &str, m: &Model) -> Result<()> {
    for (i, l) in m.stem.layers.iter().enumerate() {
        put_conv(s, &format!("{p}stem.{i}.conv"), &l.conv)?;
        put_opt_bn(s, &format!("{p}stem.{i}.bn"), &l.norm)?;
    }
    for (si, st) in m.stages.iter().enumerate() {
        if let Some(d) = &st.downsample {
            let q = format!("{p}stages.{si}.down");
            put_dw(s, &format!("{q}.dw"), &d.dw)?;
            put_linear(s, &format!("{q}.pw"), &d.pw)?;
            put_opt_bn(s, &format!("{q}.bn"), &d.norm)?;
        }
        for (bi, b) in st.blocks.iter().enumerate() {
            put_block(s, &format!("{p}stages.{si}.blocks.{bi}"), b)?;
        }
    }
    if let Some(h) = &m.head {
        put_linear(s, &format!("{p}head.hidden"), &h.hidden)?;
        put_linear(s, &format!("{p}head.cls"), &h.classifier)?;
        if let Some(d) = &h.distill {
            put_linear(s, &format!("{p}head.distill"), d)?;
        }
    }
    Ok(())
}

pub fn model_to_store(m: &Model) -> Result<TensorStore> {
    let mut s = TensorStore::new();
    put_backbone(&mut s, "", m)?;
    Ok(s)
}

pub fn detector_to_store(d: &FastCos) -> Result<TensorStore> {
    let mut s = TensorStore::new();
    put_backbone(&mut s, "backbone.", &d.backbone)?;
    for (i, l) in d.neck.levels.iter().enumerate() {
        put_linear(&mut s, &format!("neck.{i}.lateral"), &l.lateral)?;
        put_dw(&mut s, &format!("neck.{i}.dw"), &l.dw)?;
        put_linear(&mut s, &format!("neck.{i}.refine"), &l.refine)?;
    }
    let h = &d.head;
    for (i, c) in h.cls_tower.iter().enumerate() {
        put_conv(&mut s, &format!("det_head.cls_tower.{i}"), c)?;
    }
    for (i, c) in h.reg_tower.iter().enumerate() {
        put_conv(&mut s, &format!("det_head.reg_tower.{i}"), c)?;
    }
    put_linear(&mut s, "det_head.cls_out", &h.cls_out)?;
    put_linear(&mut s, "det_head.reg_out", &h.reg_out)?;
    put_linear(&mut s, "det_head.ctr_out", &h.ctr_out)?;
    s.insert("det_head.scales", vec![h.scales.len()], h.scales.clone())?;
    Ok(s)
}

// Reading.

fn take_linear(s: &mut TensorStore, p: &str, in_dim: usize, out_dim: usize) -> Result<Linear> {
    let w = s.take(&format!("{p}.weight"), &[out_dim, in_dim])?;
    let b = s.take(&format!("{p}.bias"), &[out_dim])?;
    Linear::new(Matrix::new(out_dim, in_dim, w)?, b)
}

fn take_conv(s: &mut TensorStore, p: &str, in_c: usize, out_c: usize, k: usize, stride: usize) -> Result<Conv2d> {
    let w = s.take(&format!("{p}.weight"), &[out_c, k, k, in_c])?;
    Ok(Conv2d {
        kernels: ConvKernels::new(out_c, in_c, k, k, w)?,
        bias: s.take(&format!("{p}.bias"), &[out_c])?,
        stride,
        pad: Padding::uniform(k / 2),
    })
}

fn take_bn(s: &mut TensorStore, p: &str, c: usize) -> Result<BnParams> {
    let bn = BnParams {
        gamma: s.take(&format!("{p}.gamma"), &[c])?,
        beta: s.take(&format!("{p}.beta"), &[c])?,
        mean: s.take(&format!("{p}.mean"), &[c])?,
        var: s.take(&format!("{p}.var"), &[c])?,
        eps: s.take(&format!("{p}.eps"), &[1])?[0],
    };
    bn.validate()?;
    Ok(bn)
}

fn take_opt_bn(s: &mut TensorStore, p: &str, c: usize) -> Result<Option<BnParams>> {
    if s.contains(&format!("{p}.gamma")) {
        take_bn(s, p, c).map(Some)
    } else {
        Ok(None)
    }
}

fn take_dw_kernels(s: &mut TensorStore, name: &str, c: usize) -> Result<DwKernels> {
    let shape = s.shape_of(name)?.to_vec();
    if shape.len() != 3 || shape[2] != c {
        return Err(Error::WeightFormat(format!("{name}: expected [kh, kw, {c}], found {shape:?}")));
    }
    let data = s.take(name, &shape)?;
    DwKernels::new(c, shape[0], shape[1], data)
}

fn take_dw(s: &mut TensorStore, p: &str, c: usize, stride: usize) -> Result<DwConv> {
    if s.contains(&format!("{p}.kernel")) {
        let kernels = take_dw_kernels(s, &format!("{p}.kernel"), c)?;
        let bias = s.take(&format!("{p}.bias"), &[c])?;
        if kernels.kh != kernels.kw {
            return Err(Error::WeightFormat(format!("{p}.kernel is not square")));
        }
        return Ok(DwConv::Fused(FusedDwConv {
            k: kernels.kh,
            stride,
            kernels,
            bias,
        }));
    }
    let main = take_dw_kernels(s, &format!("{p}.main"), c)?;
    let k = main.kh;
    if !s.contains(&format!("{p}.row1")) {
        let square = if s.contains(&format!("{p}.square")) {
            Some(take_dw_kernels(s, &format!("{p}.square"), c)?)
        } else {
            None
        };
        let set = SingleScaleSet {
            k,
            stride,
            main,
            identity: square.is_some(),
            square,
            bn: take_bn(s, &format!("{p}.bn"), c)?,
        };
        set.validate()
            .map_err(|e| Error::WeightFormat(format!("{p}: {e}")))?;
        return Ok(DwConv::SingleScale(set));
    }
    let mut set = DwKernelSet::zeros(c, k, stride)?;
    set.main = main;
    set.branch1 = take_dw_kernels(s, &format!("{p}.square"), c / 4)?;
    set.branch2a = take_dw_kernels(s, &format!("{p}.row1"), c / 4)?;
    set.branch2b = take_dw_kernels(s, &format!("{p}.col1"), c / 4)?;
    set.branch3a = take_dw_kernels(s, &format!("{p}.row3"), c / 4)?;
    set.branch3b = take_dw_kernels(s, &format!("{p}.col3"), c / 4)?;
    set.bn = take_bn(s, &format!("{p}.bn"), c)?;
    set.validate()
        .map_err(|e| Error::WeightFormat(format!("{p}: {e}")))?;
    Ok(DwConv::Branchy(set))
}

fn take_block(s: &mut TensorStore, p: &str, c: usize, cfg: &VariantConfig, mixer_is_sa: bool) -> Result<Block> {
    let local = take_dw(s, &format!("{p}.mixer.dw"), c, 1)?;
    let mixer = if mixer_is_sa {
        let q_out = s.shape_of(&format!("{p}.mixer.q.weight"))?[0];
        let dv = s.shape_of(&format!("{p}.mixer.v.weight"))?[0];
        let sa = SaParams {
            q: take_linear(s, &format!("{p}.mixer.q"), c, q_out)?,
            k: take_linear(s, &format!("{p}.mixer.k"), c, q_out)?,
            v: take_linear(s, &format!("{p}.mixer.v"), c, dv)?,
            o: take_linear(s, &format!("{p}.mixer.o"), c + dv, c)?,
        };
        TokenMixer::RepSa {
            local,
            sa,
            norm: take_opt_bn(s, &format!("{p}.mixer.norm"), c)?,
        }
    } else {
        TokenMixer::RepMsdw(local)
    };
    let hidden = cfg.ffn_ratio * c;
    Ok(Block {
        mixer,
        ffn: FfnParams {
            expand: take_linear(s, &format!("{p}.ffn.expand"), c, hidden)?,
            reduce: take_linear(s, &format!("{p}.ffn.reduce"), hidden, c)?,
        },
        ffn_norm: take_opt_bn(s, &format!("{p}.ffn.norm"), c)?,
    })
}

pub fn take_backbone(s: &mut TensorStore, p: &str, cfg: &VariantConfig) -> Result<Model> {
    cfg.validate()?;
    let plan = Stem::channel_plan(cfg.stages[0].dim, cfg.stem.convs);
    let mut cin = cfg.in_channels;
    let mut layers = Vec::new();
    for (i, &c) in plan.iter().enumerate() {
        layers.push(ConvBnAct {
            conv: take_conv(s, &format!("{p}stem.{i}.conv"), cin, c, 3, 2)?,
            norm: take_opt_bn(s, &format!("{p}stem.{i}.bn"), c)?,
        });
        cin = c;
    }
    let mut stages = Vec::new();
    let mut prev = cfg.stages[0].dim;
    for (si, stage) in cfg.stages.iter().enumerate() {
        let downsample = if si > 0 {
            let q = format!("{p}stages.{si}.down");
            Some(Downsample {
                dw: take_dw(s, &format!("{q}.dw"), prev, 2)?,
                pw: take_linear(s, &format!("{q}.pw"), prev, stage.dim)?,
                norm: take_opt_bn(s, &format!("{q}.bn"), stage.dim)?,
            })
        } else {
            None
        };
        let is_sa = stage.mixer.is_attention();
        let blocks = (0..stage.depth)
            .map(|bi| take_block(s, &format!("{p}stages.{si}.blocks.{bi}"), stage.dim, cfg, is_sa))
            .collect::<Result<Vec<_>>>()?;
        for (bi, b) in blocks.iter().enumerate() {
            let matches = match b.mixer.kind() {
                Some(kind) => kind == stage.mixer,
                None => b.mixer.kernel() == stage.mixer.kernel() && !is_sa,
            };
            if !matches {
                return Err(Error::WeightFormat(format!(
                    "{p}stages.{si}.blocks.{bi}: mixer {:?} does not match config {:?}",
                    b.mixer.kind(),
                    stage.mixer
                )));
            }
        }
        stages.push(Stage { downsample, blocks });
        prev = stage.dim;
    }
    let head = match cfg.head {
        Some(h) => Some(ClassifierHead {
            hidden: take_linear(s, &format!("{p}head.hidden"), prev, h.hidden)?,
            classifier: take_linear(s, &format!("{p}head.cls"), h.hidden, h.num_classes)?,
            distill: if h.distill {
                Some(take_linear(s, &format!("{p}head.distill"), h.hidden, h.num_classes)?)
            } else {
                None
            },
        }),
        None => None,
    };
    Ok(Model {
        config: cfg.clone(),
        stem: Stem { layers },
        stages,
        head,
    })
}

pub fn model_from_store(mut s: TensorStore, cfg: &VariantConfig) -> Result<Model> {
    let m = take_backbone(&mut s, "", cfg)?;
    s.finish()?;
    Ok(m)
}

pub fn detector_from_store(mut s: TensorStore, cfg: &DetectorConfig) -> Result<FastCos> {
    let backbone = take_backbone(&mut s, "backbone.", &cfg.backbone)?;
    let d = cfg.backbone.dims();
    let w = cfg.neck_width;
    let levels = (0..3)
        .map(|i| {
            Ok(FpnLevel {
                lateral: take_linear(&mut s, &format!("neck.{i}.lateral"), d[i + 1], w)?,
                dw: take_dw(&mut s, &format!("neck.{i}.dw"), w, 1)?,
                refine: take_linear(&mut s, &format!("neck.{i}.refine"), w, w)?,
            })
        })
        .collect::<Result<_>>()?;
    let tower = |s: &mut TensorStore, name: &str| {
        (0..cfg.tower_depth)
            .map(|i| take_conv(s, &format!("det_head.{name}.{i}"), w, w, 3, 1))
            .collect::<Result<Vec<_>>>()
    };
    let head = HeadParams {
        cls_tower: tower(&mut s, "cls_tower")?,
        reg_tower: tower(&mut s, "reg_tower")?,
        cls_out: take_linear(&mut s, "det_head.cls_out", w, cfg.num_classes)?,
        reg_out: take_linear(&mut s, "det_head.reg_out", w, 4)?,
        ctr_out: take_linear(&mut s, "det_head.ctr_out", w, 1)?,
        scales: s.take("det_head.scales", &[3])?,
    };
    s.finish()?;
    Ok(FastCos {
        config: cfg.clone(),
        backbone,
        neck: RepFpnParams { levels },
        head,
    })
}
