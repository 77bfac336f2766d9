//! Variant presets and the staged backbone.

use crate::blocks::{Block, ClassifierHead, Downsample, MixerKind, Stem, DEFAULT_FFN_RATIO, HEAD_HIDDEN};
use crate::error::{Error, Result};
use crate::init::WeightInit;
use crate::tensor::{Matrix, Tensor4};
use serde::{Deserialize, Serialize};

pub const IMAGENET_CLASSES: usize = 1000;
/// Input extents must be a multiple of this.
pub const INPUT_MULTIPLE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub dim: usize,
    pub depth: usize,
    pub mixer: MixerKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StemSpec {
    /// Number of 3x3 stride-2 convolutions.
    pub convs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub hidden: usize,
    pub num_classes: usize,
    /// Second classifier whose logits are averaged with the first.
    pub distill: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariantConfig {
    pub name: String,
    pub in_channels: usize,
    pub stem: StemSpec,
    pub stages: Vec<StageSpec>,
    /// Absent when the backbone only feeds a detector.
    pub head: Option<HeadSpec>,
    pub ffn_ratio: usize,
}

pub const PRESETS: [&str; 11] = ["T26", "S22", "S26", "M26", "V1", "V2", "V3", "V4", "V5", "V3-SQUARE", "V3-PLAIN"];

fn m(k: usize) -> MixerKind {
    MixerKind::RepMsdw { k }
}

fn a(k: usize) -> MixerKind {
    MixerKind::RepSa { k }
}

fn q(k: usize) -> MixerKind {
    MixerKind::SquareDw { k }
}

fn d(k: usize) -> MixerKind {
    MixerKind::PlainDw { k }
}

impl VariantConfig {
    fn four_stage(name: &str, dims: [usize; 4], depths: [usize; 4], mixers: [MixerKind; 4]) -> Self {
        Self {
            name: name.to_string(),
            in_channels: 3,
            stem: StemSpec { convs: 2 },
            stages: (0..4)
                .map(|i| StageSpec {
                    dim: dims[i],
                    depth: depths[i],
                    mixer: mixers[i],
                })
                .collect(),
            head: Some(HeadSpec {
                hidden: HEAD_HIDDEN,
                num_classes: IMAGENET_CLASSES,
                distill: true,
            }),
            ffn_ratio: DEFAULT_FFN_RATIO,
        }
    }

    /// Looks up a named preset (case-insensitive).
    pub fn preset(name: &str) -> Result<Self> {
        const SMALL: [usize; 4] = [48, 96, 192, 384];
        const STD: [MixerKind; 4] = [MixerKind::RepMsdw { k: 3 }, MixerKind::RepMsdw { k: 3 }, MixerKind::RepMsdw { k: 7 }, MixerKind::RepSa { k: 7 }];
        let cfg = match name.to_ascii_uppercase().as_str() {
            "T26" => Self::four_stage("T26", [40, 80, 120, 320], [2, 4, 16, 4], STD),
            "S22" => Self::four_stage("S22", SMALL, [2, 4, 12, 4], STD),
            "S26" => Self::four_stage("S26", SMALL, [2, 4, 16, 4], STD),
            "M26" => Self::four_stage("M26", [64, 128, 256, 512], [2, 4, 16, 4], STD),
            "V1" => {
                let mut c = Self::four_stage("V1", [96, 192, 384, 0], [4, 16, 4, 0], [m(3); 4]);
                c.stages.truncate(3);
                c.stem.convs = 4;
                c
            }
            "V2" => Self::four_stage("V2", SMALL, [2, 4, 12, 4], [m(3); 4]),
            "V3" => Self::four_stage("V3", SMALL, [2, 4, 12, 4], [m(3), m(3), m(7), m(7)]),
            "V4" => Self::four_stage("V4", SMALL, [2, 4, 12, 4], STD),
            "V5" => Self::four_stage("V5", SMALL, [2, 4, 12, 4], [m(3), m(3), a(7), a(7)]),
            // V3 with simpler token mixers.
            "V3-SQUARE" => Self::four_stage("V3-SQUARE", SMALL, [2, 4, 12, 4], [q(3), q(3), q(7), q(7)]),
            "V3-PLAIN" => Self::four_stage("V3-PLAIN", SMALL, [2, 4, 12, 4], [d(3), d(3), d(7), d(7)]),
            _ => {
                return Err(Error::Config(format!(
                    "unknown variant {name:?}; expected one of {}",
                    PRESETS.join(", ")
                )))
            }
        };
        Ok(cfg)
    }

    pub fn dims(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.dim).collect()
    }

    pub fn depths(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.depth).collect()
    }

    pub fn mixer_labels(&self) -> Vec<String> {
        self.stages.iter().map(|s| s.mixer.label()).collect()
    }

    /// Overall downsampling factor of the last stage.
    pub fn output_stride(&self) -> usize {
        (1 << self.stem.convs) << self.stages.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("at least one stage is required".into()));
        }
        let head_ok = self.head.map_or(true, |h| h.hidden > 0 && h.num_classes > 0);
        if self.in_channels == 0 || self.ffn_ratio == 0 || !head_ok {
            return Err(Error::Config("channel counts and ratios must be positive".into()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.dim == 0 || s.dim % 4 != 0 {
                return Err(Error::Config(format!("stage {} width {} is not a positive multiple of 4", i + 1, s.dim)));
            }
            let k = s.mixer.kernel();
            if k < 3 || k % 2 == 0 {
                return Err(Error::Config(format!("stage {} kernel {k} must be odd and at least 3", i + 1)));
            }
        }
        let c1 = self.stages[0].dim;
        if self.stem.convs == 0 || c1 % (1 << (self.stem.convs - 1)) != 0 {
            return Err(Error::Config(format!("stem of {} convolutions cannot reach width {c1}", self.stem.convs)));
        }
        Ok(())
    }
}

/// What a forward pass should return.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Want {
    Logits,
    Features,
    Both,
}

/// Outputs of the last three stages, at strides 8, 16 and 32.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramidOut {
    pub f3: Tensor4,
    pub f4: Tensor4,
    pub f5: Tensor4,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOut {
    pub logits: Option<Matrix>,
    pub features: Option<FeaturePyramidOut>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    /// Absent for the first stage.
    pub downsample: Option<Downsample>,
    pub blocks: Vec<Block>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: VariantConfig,
    pub stem: Stem,
    pub stages: Vec<Stage>,
    pub head: Option<ClassifierHead>,
}

/// Builds a preset or custom configuration with seeded weights, unfused.
pub fn build_variant(cfg: &VariantConfig, seed: u64) -> Result<Model> {
    build_with(cfg, &mut WeightInit::new(seed))
}

/// Builds with an explicit weight source (e.g. perturbed norm statistics).
pub fn build_with(cfg: &VariantConfig, init: &mut WeightInit) -> Result<Model> {
    cfg.validate()?;
    let stem = Stem::init(cfg.in_channels, cfg.stages[0].dim, cfg.stem.convs, init)?;
    let mut stages = Vec::with_capacity(cfg.stages.len());
    let mut prev = cfg.stages[0].dim;
    for (i, s) in cfg.stages.iter().enumerate() {
        let downsample = if i > 0 { Some(Downsample::init(prev, s.dim, init)?) } else { None };
        let blocks = (0..s.depth)
            .map(|_| Block::init(s.dim, s.mixer, cfg.ffn_ratio, init))
            .collect::<Result<_>>()?;
        stages.push(Stage { downsample, blocks });
        prev = s.dim;
    }
    let head = cfg
        .head
        .map(|h| ClassifierHead::init(prev, h.hidden, h.num_classes, h.distill, init));
    Ok(Model {
        config: cfg.clone(),
        stem,
        stages,
        head,
    })
}

impl Model {
    pub fn is_fused(&self) -> bool {
        self.stages.iter().flat_map(|s| &s.blocks).any(|b| b.is_fused())
            || self.stages.iter().filter_map(|s| s.downsample.as_ref()).any(|d| d.dw.is_fused())
    }

    fn check_input(&self, x: &Tensor4) -> Result<()> {
        let s = x.shape();
        if s.c != self.config.in_channels {
            return Err(Error::shape("backbone input channels", self.config.in_channels, s.c));
        }
        if s.h % INPUT_MULTIPLE != 0 || s.w % INPUT_MULTIPLE != 0 {
            return Err(Error::invalid(
                "backbone",
                format!("input {}x{} is not a multiple of {INPUT_MULTIPLE}", s.h, s.w),
            ));
        }
        Ok(())
    }

    /// Output of every stage, in order.
    pub fn stage_outputs(&self, x: &Tensor4) -> Result<Vec<Tensor4>> {
        self.check_input(x)?;
        let mut y = self.stem.forward(x)?;
        let mut outs = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            if let Some(ds) = &stage.downsample {
                y = ds.forward(&y)?;
            }
            for b in &stage.blocks {
                y = b.forward(&y)?;
            }
            outs.push(y.clone());
        }
        Ok(outs)
    }

    pub fn forward(&self, x: &Tensor4, want: Want) -> Result<ForwardOut> {
        if want != Want::Logits && (self.stages.len() != 4 || self.config.stem.convs != 2) {
            return Err(Error::Config(format!(
                "variant {} does not produce a stride 8/16/32 pyramid",
                self.config.name
            )));
        }
        let mut outs = self.stage_outputs(x)?;
        let logits = match want {
            Want::Features => None,
            _ => {
                let head = self
                    .head
                    .as_ref()
                    .ok_or_else(|| Error::Config(format!("variant {} has no classifier head", self.config.name)))?;
                Some(head.forward(outs.last().expect("at least one stage"))?)
            }
        };
        let features = match want {
            Want::Logits => None,
            _ => {
                let f5 = outs.pop().expect("four stages");
                let f4 = outs.pop().expect("four stages");
                let f3 = outs.pop().expect("four stages");
                Some(FeaturePyramidOut { f3, f4, f5 })
            }
        };
        Ok(ForwardOut { logits, features })
    }

    pub fn logits(&self, x: &Tensor4) -> Result<Matrix> {
        Ok(self.forward(x, Want::Logits)?.logits.expect("requested"))
    }

    pub fn features(&self, x: &Tensor4) -> Result<FeaturePyramidOut> {
        Ok(self.forward(x, Want::Features)?.features.expect("requested"))
    }

    pub fn param_count(&self) -> usize {
        count_params_flops(self, 224, 224).params
    }
}

/// Returns the deploy-time model: every multi-branch kernel set collapsed and
/// every norm folded into the preceding linear map.
pub fn fuse_model(model: &Model) -> Result<Model> {
    if model.is_fused() {
        return Err(Error::AlreadyFused);
    }
    let stages = model
        .stages
        .iter()
        .map(|s| {
            Ok(Stage {
                downsample: s.downsample.as_ref().map(|d| d.fuse()).transpose()?,
                blocks: s.blocks.iter().map(|b| b.fuse()).collect::<Result<_>>()?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Model {
        config: model.config.clone(),
        stem: model.stem.fuse()?,
        stages,
        head: model.head.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartCost {
    pub name: String,
    pub params: usize,
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub params: usize,
    pub macs: u64,
    /// Two floating point operations per multiply-accumulate.
    pub flops: u64,
    pub parts: Vec<PartCost>,
}

impl CostReport {
    pub fn from_parts(parts: Vec<PartCost>) -> Self {
        let params = parts.iter().map(|p| p.params).sum();
        let macs = parts.iter().map(|p| p.macs).sum();
        Self {
            params,
            macs,
            flops: 2 * macs,
            parts,
        }
    }
}

/// Exact stored-parameter count and multiply-accumulate count for an
/// `h x w` input. Norm and activation arithmetic is not counted.
pub fn count_params_flops(model: &Model, h: usize, w: usize) -> CostReport {
    let mut parts = vec![PartCost {
        name: "stem".into(),
        params: model.stem.param_count(),
        macs: model.stem.macs(h, w),
    }];
    let (mut h, mut w) = (h >> model.stem.layers.len(), w >> model.stem.layers.len());
    for (i, stage) in model.stages.iter().enumerate() {
        let mut params = 0;
        let mut macs = 0;
        if let Some(ds) = &stage.downsample {
            params += ds.param_count();
            macs += ds.macs(h, w);
            h = h.div_ceil(2);
            w = w.div_ceil(2);
        }
        for b in &stage.blocks {
            params += b.param_count();
            macs += b.macs(h, w);
        }
        parts.push(PartCost {
            name: format!("stage{}", i + 1),
            params,
            macs,
        });
    }
    if let Some(head) = &model.head {
        parts.push(PartCost {
            name: "head".into(),
            params: head.param_count(),
            macs: head.macs(),
        });
    }
    CostReport::from_parts(parts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::Linear;
    use crate::tensor::Shape4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn image(h: usize, w: usize, seed: u64) -> Tensor4 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor4::from_fn(Shape4::new(1, h, w, 3), |_, _, _, _| rng.gen_range(-2.0..2.0))
    }

    #[test]
    fn presets_match_table() {
        let s26 = VariantConfig::preset("S26").unwrap();
        assert_eq!(s26.dims(), vec![48, 96, 192, 384]);
        assert_eq!(s26.depths(), vec![2, 4, 16, 4]);
        assert_eq!(s26.mixer_labels(), vec!["M3", "M3", "M7", "A7"]);
        let m26 = VariantConfig::preset("m26").unwrap();
        assert_eq!(m26.dims(), vec![64, 128, 256, 512]);
        assert_eq!(m26.depths(), vec![2, 4, 16, 4]);
        assert_eq!(m26.mixer_labels(), s26.mixer_labels());
        let t26 = VariantConfig::preset("T26").unwrap();
        assert_eq!(t26.dims(), vec![40, 80, 120, 320]);
        assert_eq!(t26.depths(), vec![2, 4, 16, 4]);
        let s22 = VariantConfig::preset("S22").unwrap();
        assert_eq!(s22.depths(), vec![2, 4, 12, 4]);
        assert_eq!(s22.dims(), s26.dims());
        for name in PRESETS {
            let c = VariantConfig::preset(name).unwrap();
            c.validate().unwrap();
            assert!(c.dims().iter().all(|d| d % 4 == 0));
        }
        assert!(VariantConfig::preset("X1").is_err());
    }

    #[test]
    fn ablation_presets() {
        let v1 = VariantConfig::preset("V1").unwrap();
        assert_eq!(v1.stages.len(), 3);
        assert_eq!(v1.stem.convs, 4);
        assert_eq!(v1.depths(), vec![4, 16, 4]);
        assert_eq!(v1.mixer_labels(), vec!["M3"; 3]);
        assert_eq!(VariantConfig::preset("V3").unwrap().mixer_labels(), vec!["M3", "M3", "M7", "M7"]);
        assert_eq!(VariantConfig::preset("V5").unwrap().mixer_labels(), vec!["M3", "M3", "A7", "A7"]);
        assert_eq!(VariantConfig::preset("V4").unwrap().stages, VariantConfig::preset("S22").unwrap().stages);
        assert_eq!(VariantConfig::preset("v3-square").unwrap().mixer_labels(), vec!["Q3", "Q3", "Q7", "Q7"]);
        assert_eq!(VariantConfig::preset("V3-PLAIN").unwrap().mixer_labels(), vec!["D3", "D3", "D7", "D7"]);
    }

    #[test]
    fn single_scale_presets_fuse_exactly() {
        let v3 = build_variant(&VariantConfig::preset("V3").unwrap(), 0).unwrap();
        let deployed = fuse_model(&v3).unwrap().param_count();
        let mut prev = v3.param_count();
        let x = image(64, 64, 2);
        for name in ["V3-SQUARE", "V3-PLAIN"] {
            let model = build_with(&VariantConfig::preset(name).unwrap(), &mut WeightInit::new(4).perturb_bn(true)).unwrap();
            assert!(model.param_count() < prev, "{name}");
            prev = model.param_count();
            let fused = fuse_model(&model).unwrap();
            assert_eq!(fused.param_count(), deployed, "{name}");
            let la = model.logits(&x).unwrap();
            let lb = fused.logits(&x).unwrap();
            let d = la.data.iter().zip(&lb.data).map(|(p, q)| (p - q).abs()).fold(0.0f32, f32::max);
            assert!(d <= 5e-4, "{name}: {d}");
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = VariantConfig::preset("S26").unwrap();
        c.stages[1].dim = 90;
        assert!(build_variant(&c, 0).is_err());
        let mut c = VariantConfig::preset("S26").unwrap();
        c.stages[2].mixer = MixerKind::RepMsdw { k: 4 };
        assert!(build_variant(&c, 0).is_err());
        let json = serde_json::to_string(&VariantConfig::preset("S26").unwrap())
            .unwrap()
            .replace("rep_sa", "rep_conv");
        assert!(serde_json::from_str::<VariantConfig>(&json).is_err());
    }

    #[test]
    fn feature_shapes_small_input() {
        let model = build_variant(&VariantConfig::preset("S26").unwrap(), 1).unwrap();
        let f = model.features(&image(64, 64, 2)).unwrap();
        assert_eq!(f.f3.shape(), Shape4::new(1, 8, 8, 96));
        assert_eq!(f.f4.shape(), Shape4::new(1, 4, 4, 192));
        assert_eq!(f.f5.shape(), Shape4::new(1, 2, 2, 384));
        assert!(model.features(&image(48, 64, 2)).is_err());
    }

    #[test]
    fn deterministic_build() {
        let cfg = VariantConfig::preset("T26").unwrap();
        assert_eq!(build_variant(&cfg, 9).unwrap(), build_variant(&cfg, 9).unwrap());
        assert_ne!(build_variant(&cfg, 9).unwrap(), build_variant(&cfg, 10).unwrap());
    }

    #[test]
    fn fusion_reduces_params_and_rejects_twice() {
        let model = build_variant(&VariantConfig::preset("S26").unwrap(), 3).unwrap();
        let fused = fuse_model(&model).unwrap();
        assert!(fused.param_count() < model.param_count());
        assert!(fused.is_fused());
        assert!(matches!(fuse_model(&fused), Err(Error::AlreadyFused)));
    }

    #[test]
    fn fused_model_matches_at_small_input() {
        let cfg = VariantConfig::preset("S22").unwrap();
        let model = build_with(&cfg, &mut WeightInit::new(5).perturb_bn(true)).unwrap();
        let fused = fuse_model(&model).unwrap();
        let x = image(64, 96, 6);
        let a = model.forward(&x, Want::Both).unwrap();
        let b = fused.forward(&x, Want::Both).unwrap();
        let la = a.logits.unwrap();
        let lb = b.logits.unwrap();
        let d = la.data.iter().zip(&lb.data).map(|(p, q)| (p - q).abs()).fold(0.0f32, f32::max);
        assert!(d <= 5e-4, "{d}");
        assert!(a.features.unwrap().f5.max_abs_diff(&b.features.unwrap().f5).unwrap() <= 5e-4);
    }

    #[test]
    fn v1_builds_and_runs_logits_only() {
        let model = build_variant(&VariantConfig::preset("V1").unwrap(), 0).unwrap();
        assert_eq!(model.stem.layers.len(), 4);
        let x = image(64, 64, 1);
        assert_eq!(model.logits(&x).unwrap().cols, 1000);
        assert!(model.features(&x).is_err());
    }

    #[test]
    fn pointwise_cost_hand_count() {
        let layer = Linear::zeros(2, 3);
        let report = CostReport::from_parts(vec![PartCost {
            name: "pw".into(),
            params: layer.param_count(),
            macs: (4 * 4 * 2 * 3) as u64,
        }]);
        assert_eq!((report.params, report.flops), (9, 192));
    }

    #[test]
    fn cost_parts_sum() {
        let model = build_variant(&VariantConfig::preset("S26").unwrap(), 0).unwrap();
        let r = count_params_flops(&model, 224, 224);
        assert_eq!(r.parts.len(), 6);
        assert_eq!(r.params, r.parts.iter().map(|p| p.params).sum::<usize>());
        assert_eq!(r.flops, 2 * r.macs);
    }
}
