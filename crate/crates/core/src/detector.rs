//! Detector: multi-scale neck, shared anchor-free head, decoding and suppression.

use crate::backbone::{build_with, fuse_model, CostReport, FeaturePyramidOut, Model, PartCost, VariantConfig};
use crate::blocks::DwConv;
use crate::error::{Error, Result};
use crate::init::WeightInit;
use crate::layers::{Conv2d, Linear};
use crate::reparam::DwKernelSet;
use crate::tensor::{add_assign, gelu_inplace, upsample_nearest2x, Tensor4};
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;

pub const STRIDES: [usize; 3] = [8, 16, 32];
pub const NECK_KERNEL: usize = 7;
pub const DEFAULT_NECK_WIDTH: usize = 256;
pub const DEFAULT_TOWER_DEPTH: usize = 4;
/// Ten object categories of the driving-scene benchmark.
pub const DEFAULT_NUM_CLASSES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InferenceParams {
    pub score_thresh: f32,
    pub top_k: usize,
    pub iou_thresh: f32,
    pub max_out: usize,
}

impl Default for InferenceParams {
    fn default() -> Self {
        Self {
            score_thresh: 0.05,
            top_k: 1000,
            iou_thresh: 0.6,
            max_out: 100,
        }
    }
}

/// One neck level: lateral projection, then multi-scale depthwise conv and a
/// 1x1 refinement after the top-down merge.
#[derive(Debug, Clone, PartialEq)]
pub struct FpnLevel {
    pub lateral: Linear,
    pub dw: DwConv,
    pub refine: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepFpnParams {
    /// Finest level first.
    pub levels: Vec<FpnLevel>,
}

impl RepFpnParams {
    pub fn init(in_dims: [usize; 3], width: usize, init: &mut WeightInit) -> Result<Self> {
        if width == 0 || width % 4 != 0 {
            return Err(Error::Config(format!("neck width {width} must be a positive multiple of 4")));
        }
        let levels = in_dims
            .iter()
            .map(|&c| {
                Ok(FpnLevel {
                    lateral: init.linear(c, width),
                    dw: DwConv::Branchy(DwKernelSet::init(width, NECK_KERNEL, 1, init)?),
                    refine: init.linear(width, width),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { levels })
    }

    pub fn width(&self) -> usize {
        self.levels[0].refine.out_dim()
    }

    pub fn fuse(&self) -> Result<Self> {
        Ok(Self {
            levels: self
                .levels
                .iter()
                .map(|l| {
                    Ok(FpnLevel {
                        lateral: l.lateral.clone(),
                        dw: l.dw.fuse()?,
                        refine: l.refine.clone(),
                    })
                })
                .collect::<Result<_>>()?,
        })
    }

    pub fn is_fused(&self) -> bool {
        self.levels.iter().any(|l| l.dw.is_fused())
    }

    pub fn param_count(&self) -> usize {
        self.levels
            .iter()
            .map(|l| l.lateral.param_count() + l.dw.param_count() + l.refine.param_count())
            .sum()
    }

    pub fn macs(&self, level_hw: &[(usize, usize)]) -> u64 {
        self.levels
            .iter()
            .zip(level_hw)
            .map(|(l, &(h, w))| {
                let px = (h * w) as u64;
                px * (l.lateral.in_dim() * l.lateral.out_dim() + l.refine.in_dim() * l.refine.out_dim()) as u64
                    + l.dw.macs(h, w)
            })
            .sum()
    }
}

/// Top-down merge of the three backbone levels; returns P3, P4, P5.
pub fn repfpn_forward(f: &FeaturePyramidOut, p: &RepFpnParams, fused: bool) -> Result<[Tensor4; 3]> {
    let feats = [&f.f3, &f.f4, &f.f5];
    for i in 0..2 {
        let (a, b) = (feats[i].shape(), feats[i + 1].shape());
        if a.n != b.n || a.h != 2 * b.h || a.w != 2 * b.w {
            return Err(Error::shape("repfpn_forward", format!("level {} at half of {a}", i + 1), b));
        }
    }
    if p.levels.len() != 3 {
        return Err(Error::Config(format!("neck needs 3 levels, has {}", p.levels.len())));
    }
    let fused_params;
    let p = match (fused, p.is_fused()) {
        (true, false) => {
            fused_params = p.fuse()?;
            &fused_params
        }
        (false, true) => return Err(Error::AlreadyFused),
        _ => p,
    };
    let mut merged: Vec<Tensor4> = Vec::with_capacity(3);
    for i in (0..3).rev() {
        let mut m = p.levels[i].lateral.forward(feats[i])?;
        if let Some(coarser) = merged.last() {
            add_assign(&mut m, &upsample_nearest2x(coarser))?;
        }
        merged.push(m);
    }
    merged.reverse();
    let mut out = Vec::with_capacity(3);
    for (m, level) in merged.iter().zip(&p.levels) {
        out.push(level.refine.forward(&level.dw.forward(m)?)?);
    }
    Ok(out.try_into().expect("three levels"))
}

/// Per-level regression ranges over the largest of the four box distances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangeTable {
    pub bounds: Vec<(f32, f32)>,
}

impl Default for RangeTable {
    fn default() -> Self {
        Self {
            bounds: vec![(0.0, 128.0), (128.0, 256.0), (256.0, 512.0)],
        }
    }
}

impl RangeTable {
    pub fn validate(&self) -> Result<()> {
        for (i, &(lo, hi)) in self.bounds.iter().enumerate() {
            if !(lo < hi) {
                return Err(Error::Config(format!("range {i} is empty")));
            }
            if i > 0 && self.bounds[i - 1].1 != lo {
                return Err(Error::Config(format!("range {i} does not start where range {} ends", i - 1)));
            }
        }
        Ok(())
    }
}

/// Level whose half-open range `(low, high]` contains `max(l, t, r, b)`.
pub fn assign_level(l: f32, t: f32, r: f32, b: f32, table: &RangeTable) -> Result<Option<usize>> {
    if [l, t, r, b].iter().any(|d| !(*d >= 0.0)) {
        return Err(Error::invalid("assign_level", format!("negative distance in ({l}, {t}, {r}, {b})")));
    }
    let m = l.max(t).max(r).max(b);
    Ok(table.bounds.iter().position(|&(lo, hi)| lo < m && m <= hi))
}

pub fn centerness_target(l: f32, t: f32, r: f32, b: f32) -> Result<f32> {
    if !(l >= 0.0 && t >= 0.0 && r >= 0.0 && b >= 0.0) || l + r <= 0.0 || t + b <= 0.0 {
        return Err(Error::invalid("centerness_target", format!("degenerate target ({l}, {t}, {r}, {b})")));
    }
    Ok(((l.min(r) / l.max(r)) * (t.min(b) / t.max(b))).sqrt())
}

/// Distances from `(px, py)` to the box sides. Differences are taken in
/// double precision so that `decode` recovers the box exactly.
pub fn encode(bx: [f32; 4], px: f32, py: f32) -> [f64; 4] {
    let (px, py) = (px as f64, py as f64);
    [px - bx[0] as f64, py - bx[1] as f64, bx[2] as f64 - px, bx[3] as f64 - py]
}

pub fn decode(px: f32, py: f32, d: [f64; 4]) -> [f32; 4] {
    let (px, py) = (px as f64, py as f64);
    [(px - d[0]) as f32, (py - d[1]) as f32, (px + d[2]) as f32, (py + d[3]) as f32]
}

/// Location of output cell `(x, y)` in input pixels.
pub fn location(x: usize, y: usize, stride: usize) -> (f32, f32) {
    let s = stride as f32;
    (s / 2.0 + x as f32 * s, s / 2.0 + y as f32 * s)
}

/// Shared classification and regression towers with per-level regression scale.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub cls_tower: Vec<Conv2d>,
    pub reg_tower: Vec<Conv2d>,
    pub cls_out: Linear,
    pub reg_out: Linear,
    /// Centre-ness branch, fed by the regression tower.
    pub ctr_out: Linear,
    pub scales: Vec<f32>,
}

impl HeadParams {
    pub fn init(width: usize, num_classes: usize, depth: usize, init: &mut WeightInit) -> Self {
        let tower = |init: &mut WeightInit| (0..depth).map(|_| init.conv(width, width, 3, 1)).collect();
        let cls_tower = tower(init);
        let reg_tower = tower(init);
        Self {
            cls_tower,
            reg_tower,
            cls_out: init.linear(width, num_classes),
            reg_out: init.linear(width, 4),
            ctr_out: init.linear(width, 1),
            scales: vec![1.0; STRIDES.len()],
        }
    }

    pub fn width(&self) -> usize {
        self.cls_out.in_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.cls_out.out_dim()
    }

    pub fn param_count(&self) -> usize {
        self.cls_tower.iter().chain(&self.reg_tower).map(|c| c.param_count()).sum::<usize>()
            + self.cls_out.param_count()
            + self.reg_out.param_count()
            + self.ctr_out.param_count()
            + self.scales.len()
    }

    pub fn macs(&self, level_hw: &[(usize, usize)]) -> u64 {
        level_hw
            .iter()
            .map(|&(h, w)| {
                let px = h * w;
                self.cls_tower.iter().chain(&self.reg_tower).map(|c| c.macs(px)).sum::<u64>()
                    + (px * self.width() * (self.num_classes() + 5)) as u64
            })
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevelOutput {
    pub cls: Tensor4,
    /// Positive (l, t, r, b) distances in input pixels.
    pub boxes: Tensor4,
    pub ctr: Tensor4,
}

fn tower_forward(x: &Tensor4, tower: &[Conv2d]) -> Result<Tensor4> {
    tower.iter().try_fold(x.clone(), |y, c| {
        let mut z = c.forward(&y)?;
        gelu_inplace(&mut z);
        Ok(z)
    })
}

/// Applies the shared head to each level; level `i` uses `p.scales[i]`.
pub fn head_forward(levels: &[Tensor4], p: &HeadParams) -> Result<Vec<LevelOutput>> {
    if levels.len() > p.scales.len() {
        return Err(Error::shape("head_forward levels", p.scales.len(), levels.len()));
    }
    levels
        .iter()
        .zip(&p.scales)
        .map(|(x, &scale)| {
            if x.shape().c != p.width() {
                return Err(Error::shape("head_forward", p.width(), x.shape().c));
            }
            let cls = p.cls_out.forward(&tower_forward(x, &p.cls_tower)?)?;
            let reg = tower_forward(x, &p.reg_tower)?;
            let boxes = p.reg_out.forward(&reg)?.map(|v| (scale * v).exp());
            let ctr = p.ctr_out.forward(&reg)?;
            Ok(LevelOutput { cls, boxes, ctr })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// `x1, y1, x2, y2` in input pixels.
    #[serde(rename = "box")]
    pub bbox: [f32; 4],
    pub score: f32,
    pub class: usize,
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

fn by_score_desc(a: &Detection, b: &Detection) -> Ordering {
    b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal)
}

/// Turns per-level head outputs for batch item `n` into scored, clipped boxes.
///
/// Within each level, candidates are ranked by score (ties keep row-major,
/// then class order) and the best `top_k` kept.
pub fn decode_boxes(
    levels: &[LevelOutput],
    strides: &[usize],
    n: usize,
    image_hw: (usize, usize),
    score_thresh: f32,
    top_k: usize,
) -> Result<Vec<Detection>> {
    if levels.len() != strides.len() {
        return Err(Error::shape("decode_boxes strides", levels.len(), strides.len()));
    }
    let (ih, iw) = (image_hw.0 as f32, image_hw.1 as f32);
    let mut out = Vec::new();
    for (lvl, &stride) in levels.iter().zip(strides) {
        let s = lvl.cls.shape();
        if n >= s.n {
            return Err(Error::invalid("decode_boxes", format!("batch index {n} out of {}", s.n)));
        }
        let mut cands = Vec::new();
        for y in 0..s.h {
            for x in 0..s.w {
                let ctr = sigmoid(lvl.ctr.at(n, y, x, 0));
                let (px, py) = location(x, y, stride);
                let d = lvl.boxes.pixel(n, y, x);
                for (class, &logit) in lvl.cls.pixel(n, y, x).iter().enumerate() {
                    let score = sigmoid(logit) * ctr;
                    if score < score_thresh {
                        continue;
                    }
                    let b = decode(px, py, [d[0] as f64, d[1] as f64, d[2] as f64, d[3] as f64]);
                    cands.push(Detection {
                        bbox: [b[0].clamp(0.0, iw), b[1].clamp(0.0, ih), b[2].clamp(0.0, iw), b[3].clamp(0.0, ih)],
                        score,
                        class,
                    });
                }
            }
        }
        cands.sort_by(by_score_desc);
        cands.truncate(top_k);
        out.extend(cands);
    }
    Ok(out)
}

pub fn iou(a: &[f32; 4], b: &[f32; 4]) -> f32 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let area = |r: &[f32; 4]| (r[2] - r[0]).max(0.0) * (r[3] - r[1]).max(0.0);
    let union = area(a) + area(b) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Greedy per-class suppression. Survivors are ordered by score, ties by input order.
pub fn nms(dets: &[Detection], iou_thresh: f32, max_out: usize) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| by_score_desc(&dets[i], &dets[j]));
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        if kept.len() == max_out {
            break;
        }
        let d = dets[i];
        if kept.iter().all(|k| k.class != d.class || iou(&k.bbox, &d.bbox) <= iou_thresh) {
            kept.push(d);
        }
    }
    kept
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub backbone: VariantConfig,
    pub neck_width: usize,
    pub tower_depth: usize,
    pub num_classes: usize,
    pub ranges: RangeTable,
    pub inference: InferenceParams,
}

impl DetectorConfig {
    /// Detector over a backbone preset, with the classifier head removed.
    pub fn for_backbone(name: &str) -> Result<Self> {
        let mut backbone = VariantConfig::preset(name)?;
        backbone.head = None;
        Ok(Self {
            backbone,
            neck_width: DEFAULT_NECK_WIDTH,
            tower_depth: DEFAULT_TOWER_DEPTH,
            num_classes: DEFAULT_NUM_CLASSES,
            ranges: RangeTable::default(),
            inference: InferenceParams::default(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FastCos {
    pub config: DetectorConfig,
    pub backbone: Model,
    pub neck: RepFpnParams,
    pub head: HeadParams,
}

/// Output of one detector pass over a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorOut {
    pub pyramid: [Tensor4; 3],
    pub levels: Vec<LevelOutput>,
    /// Per batch item.
    pub detections: Vec<Vec<Detection>>,
}

pub fn build_detector(cfg: &DetectorConfig, init: &mut WeightInit) -> Result<FastCos> {
    cfg.ranges.validate()?;
    if cfg.backbone.stages.len() != 4 || cfg.backbone.stem.convs != 2 {
        return Err(Error::Config(format!("{} cannot feed a stride 8/16/32 pyramid", cfg.backbone.name)));
    }
    let backbone = build_with(&cfg.backbone, init)?;
    let d = cfg.backbone.dims();
    let neck = RepFpnParams::init([d[1], d[2], d[3]], cfg.neck_width, init)?;
    let head = HeadParams::init(cfg.neck_width, cfg.num_classes, cfg.tower_depth, init);
    Ok(FastCos {
        config: cfg.clone(),
        backbone,
        neck,
        head,
    })
}

impl FastCos {
    pub fn is_fused(&self) -> bool {
        self.backbone.is_fused() || self.neck.is_fused()
    }

    pub fn fuse(&self) -> Result<Self> {
        Ok(Self {
            config: self.config.clone(),
            backbone: fuse_model(&self.backbone)?,
            neck: self.neck.fuse()?,
            head: self.head.clone(),
        })
    }

    pub fn cost(&self, h: usize, w: usize) -> CostReport {
        let mut parts = crate::backbone::count_params_flops(&self.backbone, h, w).parts;
        let hw: Vec<(usize, usize)> = STRIDES.iter().map(|s| (h.div_ceil(*s), w.div_ceil(*s))).collect();
        parts.push(PartCost {
            name: "neck".into(),
            params: self.neck.param_count(),
            macs: self.neck.macs(&hw),
        });
        parts.push(PartCost {
            name: "det_head".into(),
            params: self.head.param_count(),
            macs: self.head.macs(&hw),
        });
        CostReport::from_parts(parts)
    }
}

/// Runs the full detector. Inputs whose extents are not multiples of 32 are
/// zero-padded at the bottom and right; boxes are clipped to the original extent.
pub fn fastcos_forward(det: &FastCos, image: &Tensor4) -> Result<DetectorOut> {
    let s = image.shape();
    let padded = image.pad_to_multiple(crate::backbone::INPUT_MULTIPLE);
    let features = det.backbone.features(&padded)?;
    let pyramid = repfpn_forward(&features, &det.neck, det.neck.is_fused())?;
    let levels = head_forward(&pyramid, &det.head)?;
    let inf = det.config.inference;
    let detections = (0..s.n)
        .map(|n| {
            let cands = decode_boxes(&levels, &STRIDES, n, (s.h, s.w), inf.score_thresh, inf.top_k)?;
            Ok(nms(&cands, inf.iou_thresh, inf.max_out))
        })
        .collect::<Result<_>>()?;
    Ok(DetectorOut {
        pyramid,
        levels,
        detections,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: String,
    pub class: usize,
    pub score: f32,
    #[serde(rename = "box")]
    pub bbox: [f32; 4],
}

/// One JSON object per line.
pub fn to_jsonl(image_id: &str, dets: &[Detection]) -> Result<String> {
    let mut out = String::new();
    for d in dets {
        let rec = DetectionRecord {
            image_id: image_id.to_string(),
            class: d.class,
            score: d.score,
            bbox: d.bbox,
        };
        out.push_str(&serde_json::to_string(&rec)?);
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Padding, Shape4};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: Shape4, seed: u64, scale: f32) -> Tensor4 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor4::from_fn(shape, |_, _, _, _| rng.gen_range(-scale..scale))
    }

    fn pyramid(c: [usize; 3], h: usize, seed: u64) -> FeaturePyramidOut {
        FeaturePyramidOut {
            f3: rand_tensor(Shape4::new(1, h, h, c[0]), seed, 1.0),
            f4: rand_tensor(Shape4::new(1, h / 2, h / 2, c[1]), seed + 1, 1.0),
            f5: rand_tensor(Shape4::new(1, h / 4, h / 4, c[2]), seed + 2, 1.0),
        }
    }

    #[test]
    fn zero_laterals_give_zero_levels() {
        let mut neck = RepFpnParams::init([8, 16, 32], 8, &mut WeightInit::new(0)).unwrap();
        for l in &mut neck.levels {
            l.lateral = Linear::zeros(l.lateral.in_dim(), 8);
        }
        let out = repfpn_forward(&pyramid([8, 16, 32], 8, 1), &neck, false).unwrap();
        for p in &out {
            assert!(p.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn coarse_level_reaches_every_output() {
        let mut neck = RepFpnParams::init([8, 16, 32], 8, &mut WeightInit::with_std(3, 0.3)).unwrap();
        for l in &mut neck.levels {
            l.lateral.bias.iter_mut().for_each(|b| *b = 0.0);
        }
        let mut f = pyramid([8, 16, 32], 8, 2);
        f.f3 = Tensor4::zeros(f.f3.shape());
        f.f4 = Tensor4::zeros(f.f4.shape());
        let with = repfpn_forward(&f, &neck, false).unwrap();
        f.f5 = Tensor4::zeros(f.f5.shape());
        let without = repfpn_forward(&f, &neck, false).unwrap();
        for (a, b) in with.iter().zip(&without) {
            assert!(a.max_abs_diff(b).unwrap() > 1e-3);
        }
    }

    #[test]
    fn neck_fusion_and_shape_checks() {
        let neck = RepFpnParams::init([16, 32, 64], 16, &mut WeightInit::with_std(4, 0.2).perturb_bn(true)).unwrap();
        let f = pyramid([16, 32, 64], 16, 5);
        let a = repfpn_forward(&f, &neck, false).unwrap();
        let b = repfpn_forward(&f, &neck, true).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!(x.max_abs_diff(y).unwrap() <= 1e-4);
        }
        assert_eq!(a[0].shape(), Shape4::new(1, 16, 16, 16));
        assert_eq!(a[2].shape(), Shape4::new(1, 4, 4, 16));
        let mut bad = f.clone();
        bad.f4 = rand_tensor(Shape4::new(1, 7, 8, 32), 0, 1.0);
        assert!(repfpn_forward(&bad, &neck, false).is_err());
    }

    #[test]
    fn level_assignment_examples() {
        let t = RangeTable::default();
        assert_eq!(assign_level(100.0, 5.0, 5.0, 5.0, &t).unwrap(), Some(0));
        assert_eq!(assign_level(1.0, 200.0, 5.0, 5.0, &t).unwrap(), Some(1));
        assert_eq!(assign_level(600.0, 0.0, 0.0, 0.0, &t).unwrap(), None);
        assert_eq!(assign_level(128.0, 0.0, 0.0, 0.0, &t).unwrap(), Some(0));
        assert_eq!(assign_level(256.0, 0.0, 0.0, 0.0, &t).unwrap(), Some(1));
        assert_eq!(assign_level(512.0, 0.0, 0.0, 0.0, &t).unwrap(), Some(2));
        assert_eq!(assign_level(0.0, 0.0, 0.0, 0.0, &t).unwrap(), None);
        assert!(assign_level(-1.0, 0.0, 0.0, 0.0, &t).is_err());
    }

    #[test]
    fn centerness_examples() {
        assert_eq!(centerness_target(3.0, 2.0, 3.0, 2.0).unwrap(), 1.0);
        assert_eq!(centerness_target(0.0, 2.0, 3.0, 2.0).unwrap(), 0.0);
        assert_eq!(centerness_target(1.0, 2.0, 4.0, 2.0).unwrap(), 0.5);
        assert!(centerness_target(0.0, 1.0, 0.0, 1.0).is_err());
    }

    fn zero_head(width: usize, classes: usize) -> HeadParams {
        let conv = || Conv2d {
            kernels: crate::tensor::ConvKernels::zeros(width, width, 3, 3),
            bias: vec![0.0; width],
            stride: 1,
            pad: Padding::uniform(1),
        };
        HeadParams {
            cls_tower: (0..2).map(|_| conv()).collect(),
            reg_tower: (0..2).map(|_| conv()).collect(),
            cls_out: Linear::zeros(width, classes),
            reg_out: Linear::zeros(width, 4),
            ctr_out: Linear::zeros(width, 1),
            scales: vec![1.0; 3],
        }
    }

    #[test]
    fn zero_head_outputs() {
        let head = zero_head(8, 3);
        let out = head_forward(&[rand_tensor(Shape4::new(1, 4, 4, 8), 0, 1.0)], &head).unwrap();
        assert!(out[0].cls.data().iter().all(|&v| v == 0.0));
        assert!(out[0].boxes.data().iter().all(|&v| v == 1.0));
        assert!(head_forward(&[rand_tensor(Shape4::new(1, 4, 4, 4), 0, 1.0)], &head).is_err());
    }

    #[test]
    fn head_is_shared_across_levels() {
        let head = HeadParams::init(8, 3, 2, &mut WeightInit::with_std(6, 0.3));
        let a = rand_tensor(Shape4::new(1, 8, 8, 8), 7, 1.0);
        let b = rand_tensor(Shape4::new(1, 4, 4, 8), 8, 1.0);
        let c = rand_tensor(Shape4::new(1, 2, 2, 8), 9, 1.0);
        let fwd = head_forward(&[a.clone(), b.clone(), c.clone()], &head).unwrap();
        let rev = head_forward(&[c, b, a], &head).unwrap();
        assert_eq!(fwd[0], rev[2]);
        assert_eq!(fwd[1], rev[1]);
        assert_eq!(fwd[2], rev[0]);
    }

    fn level(h: usize, w: usize, classes: usize, seed: u64) -> LevelOutput {
        LevelOutput {
            cls: rand_tensor(Shape4::new(1, h, w, classes), seed, 4.0),
            boxes: rand_tensor(Shape4::new(1, h, w, 4), seed + 1, 3.0).map(f32::exp),
            ctr: rand_tensor(Shape4::new(1, h, w, 1), seed + 2, 4.0),
        }
    }

    #[test]
    fn decode_single_location() {
        let lvl = LevelOutput {
            cls: Tensor4::full(Shape4::new(1, 1, 1, 1), 10.0),
            boxes: Tensor4::full(Shape4::new(1, 1, 1, 4), 4.0),
            ctr: Tensor4::full(Shape4::new(1, 1, 1, 1), 10.0),
        };
        let d = decode_boxes(&[lvl.clone()], &[8], 0, (64, 64), 0.05, 1000).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].bbox, [0.0, 0.0, 8.0, 8.0]);
        let mut low = lvl;
        low.cls = Tensor4::full(Shape4::new(1, 1, 1, 1), -10.0);
        assert!(decode_boxes(&[low], &[8], 0, (64, 64), 0.05, 1000).unwrap().is_empty());
    }

    #[test]
    fn decode_matches_enumeration() {
        let levels = vec![level(4, 4, 3, 10), level(2, 2, 3, 20)];
        let got = decode_boxes(&levels, &[8, 16], 0, (30, 32), 0.2, 1000).unwrap();
        let mut expect = Vec::new();
        for (lvl, stride) in levels.iter().zip([8.0f64, 16.0]) {
            let s = lvl.cls.shape();
            for y in 0..s.h {
                for x in 0..s.w {
                    for c in 0..3 {
                        let sig = |v: f32| 1.0 / (1.0 + (-v).exp());
                        let score = sig(lvl.cls.at(0, y, x, c)) * sig(lvl.ctr.at(0, y, x, 0));
                        if score >= 0.2 {
                            let cx = stride / 2.0 + x as f64 * stride;
                            let cy = stride / 2.0 + y as f64 * stride;
                            let d: Vec<f64> = (0..4).map(|i| lvl.boxes.at(0, y, x, i) as f64).collect();
                            let b = [
                                ((cx - d[0]) as f32).clamp(0.0, 32.0),
                                ((cy - d[1]) as f32).clamp(0.0, 30.0),
                                ((cx + d[2]) as f32).clamp(0.0, 32.0),
                                ((cy + d[3]) as f32).clamp(0.0, 30.0),
                            ];
                            expect.push((b.map(f32::to_bits), score.to_bits(), c));
                        }
                    }
                }
            }
        }
        let mut got: Vec<_> = got.iter().map(|d| (d.bbox.map(f32::to_bits), d.score.to_bits(), d.class)).collect();
        got.sort();
        expect.sort();
        assert_eq!(got, expect);
        let capped = decode_boxes(&levels, &[8, 16], 0, (30, 32), 0.0, 5).unwrap();
        assert_eq!(capped.len(), 10);
    }

    fn det(b: [f32; 4], score: f32, class: usize) -> Detection {
        Detection { bbox: b, score, class }
    }

    #[test]
    fn nms_examples() {
        let b = [0.0, 0.0, 10.0, 10.0];
        let out = nms(&[det(b, 0.8, 0), det(b, 0.9, 0)], 0.6, 100);
        assert_eq!(out, vec![det(b, 0.9, 0)]);
        let out = nms(&[det(b, 0.8, 0), det([20.0, 20.0, 30.0, 30.0], 0.9, 0)], 0.6, 100);
        assert_eq!(out.len(), 2);
        assert_eq!(nms(&[det(b, 0.8, 0), det(b, 0.9, 1)], 0.6, 100).len(), 2);
        let many: Vec<_> = (0..300).map(|i| det([i as f32 * 20.0, 0.0, i as f32 * 20.0 + 10.0, 10.0], 0.5, 0)).collect();
        let out = nms(&many, 0.6, 100);
        assert_eq!(out.len(), 100);
        assert_eq!(out[0], many[0]);
        assert_eq!(out[99], many[99]);
    }

    /// Repeatedly take the best remaining box and strike out its overlaps.
    fn nms_reference(dets: &[Detection], thr: f32, max_out: usize) -> Vec<Detection> {
        let mut alive = vec![true; dets.len()];
        let mut out = Vec::new();
        while out.len() < max_out {
            let mut best: Option<usize> = None;
            for i in 0..dets.len() {
                if alive[i] && best.map_or(true, |b| dets[i].score > dets[b].score) {
                    best = Some(i);
                }
            }
            let Some(b) = best else { break };
            alive[b] = false;
            for j in 0..dets.len() {
                if alive[j] && dets[j].class == dets[b].class && iou(&dets[b].bbox, &dets[j].bbox) > thr {
                    alive[j] = false;
                }
            }
            out.push(dets[b]);
        }
        out
    }

    fn random_dets(n: usize, seed: u64) -> Vec<Detection> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let x = rng.gen_range(0.0..200.0f32);
                let y = rng.gen_range(0.0..200.0f32);
                let w = rng.gen_range(5.0..80.0f32);
                let h = rng.gen_range(5.0..80.0f32);
                // Coarse scores so ties occur.
                let score = (rng.gen_range(0..20) as f32) / 20.0;
                det([x, y, x + w, y + h], score, rng.gen_range(0..3))
            })
            .collect()
    }

    #[test]
    fn nms_matches_reference() {
        for seed in 0..20 {
            let dets = random_dets(200, seed);
            for (thr, cap) in [(0.6, 100), (0.3, 100), (0.6, 10)] {
                let got = nms(&dets, thr, cap);
                assert_eq!(got, nms_reference(&dets, thr, cap), "seed {seed}");
                assert!(got.windows(2).all(|w| w[0].score >= w[1].score));
                for (i, a) in got.iter().enumerate() {
                    for b in &got[i + 1..] {
                        assert!(a.class != b.class || iou(&a.bbox, &b.bbox) <= thr);
                    }
                }
            }
        }
    }

    #[test]
    fn jsonl_format() {
        let s = to_jsonl("img", &[det([1.0, 2.0, 3.0, 4.0], 0.5, 2)]).unwrap();
        let v: serde_json::Value = serde_json::from_str(s.trim()).unwrap();
        assert_eq!(v["image_id"], "img");
        assert_eq!(v["class"], 2);
        assert_eq!(v["box"], serde_json::json!([1.0, 2.0, 3.0, 4.0]));
    }

    #[test]
    fn tiny_detector_end_to_end() {
        let mut cfg = DetectorConfig::for_backbone("S26").unwrap();
        cfg.backbone.stages.iter_mut().for_each(|s| s.depth = 1);
        cfg.neck_width = 16;
        cfg.tower_depth = 1;
        let det = build_detector(&cfg, &mut WeightInit::new(1)).unwrap();
        let img = rand_tensor(Shape4::new(1, 70, 96, 3), 3, 1.0);
        let out = fastcos_forward(&det, &img).unwrap();
        assert_eq!(out.pyramid[0].shape(), Shape4::new(1, 12, 12, 16));
        assert_eq!(out.pyramid[2].shape(), Shape4::new(1, 3, 3, 16));
        assert!(out.detections[0].len() <= 100);
        for d in &out.detections[0] {
            assert!(d.bbox[2] <= 96.0 && d.bbox[3] <= 70.0);
            assert!(d.bbox[0] <= d.bbox[2] && d.bbox[1] <= d.bbox[3]);
        }
        assert_eq!(fastcos_forward(&det, &img).unwrap(), out);
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(
            x1 in 0.0f32..1000.0, y1 in 0.0f32..1000.0,
            w in 0.5f32..500.0, h in 0.5f32..500.0,
            fx in 0.0f32..1.0, fy in 0.0f32..1.0,
        ) {
            let b = [x1, y1, x1 + w, y1 + h];
            let px = b[0] + fx * (b[2] - b[0]);
            let py = b[1] + fy * (b[3] - b[1]);
            prop_assert_eq!(decode(px, py, encode(b, px, py)), b);
        }

        #[test]
        fn ranges_partition(m in 1u32..=600) {
            let t = RangeTable::default();
            let got = assign_level(m as f32, 0.0, 0.0, 0.0, &t).unwrap();
            let hits: Vec<usize> = (0..3).filter(|&i| t.bounds[i].0 < m as f32 && m as f32 <= t.bounds[i].1).collect();
            prop_assert!(hits.len() <= 1);
            prop_assert_eq!(got, hits.first().copied());
            prop_assert_eq!(got.is_some(), m <= 512);
        }
    }
}
