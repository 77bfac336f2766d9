//! Commands behind the `ravit` binary, plus the on-disk formats they use.
//!
//! A saved network is a weight file and a JSON sidecar next to it (same path
//! with `.json` appended) holding the architecture, seed, fusion state and
//! input normalisation.

pub mod ppm;
pub mod report;
pub mod weights;

use crate::backbone::{build_with, count_params_flops, fuse_model, CostReport, Model, VariantConfig, INPUT_MULTIPLE};
use crate::blocks::{Block, Downsample, Stem};
use crate::detector::{build_detector, fastcos_forward, head_forward, repfpn_forward, to_jsonl, DetectorConfig, FastCos, FpnLevel, LevelOutput};
use crate::error::{Error, Result};
use crate::init::WeightInit;
use crate::tensor::{Shape4, Tensor4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use report::{BenchReport, LatencyStats, Report};
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::path::{Path, PathBuf};
use std::time::Instant;
use weights::TensorStore;

pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];
pub const DEFAULT_BLOCK_TOL: f32 = 1e-4;
pub const DEFAULT_MODEL_TOL: f32 = 5e-4;
/// Resolution at which detector latency is customarily reported.
pub const DETECTOR_BENCH_HW: (usize, usize) = (720, 1280);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    Backbone { variant: VariantConfig },
    Detector { detector: DetectorConfig },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    #[serde(flatten)]
    pub arch: Architecture,
    pub seed: u64,
    pub fused: bool,
    pub normalization: Normalization,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Network {
    Backbone(Model),
    Detector(FastCos),
}

impl Network {
    pub fn build(arch: &Architecture, seed: u64) -> Result<Self> {
        let mut init = WeightInit::new(seed);
        Ok(match arch {
            Architecture::Backbone { variant } => Network::Backbone(build_with(variant, &mut init)?),
            Architecture::Detector { detector } => Network::Detector(build_detector(detector, &mut init)?),
        })
    }

    pub fn name(&self) -> &str {
        match self {
            Network::Backbone(m) => &m.config.name,
            Network::Detector(d) => &d.config.backbone.name,
        }
    }

    pub fn is_fused(&self) -> bool {
        match self {
            Network::Backbone(m) => m.is_fused(),
            Network::Detector(d) => d.is_fused(),
        }
    }

    pub fn fuse(&self) -> Result<Self> {
        if self.is_fused() {
            return Err(Error::AlreadyFused);
        }
        Ok(match self {
            Network::Backbone(m) => Network::Backbone(fuse_model(m)?),
            Network::Detector(d) => Network::Detector(d.fuse()?),
        })
    }

    pub fn to_store(&self) -> Result<TensorStore> {
        match self {
            Network::Backbone(m) => weights::model_to_store(m),
            Network::Detector(d) => weights::detector_to_store(d),
        }
    }

    pub fn from_store(store: TensorStore, arch: &Architecture) -> Result<Self> {
        Ok(match arch {
            Architecture::Backbone { variant } => Network::Backbone(weights::model_from_store(store, variant)?),
            Architecture::Detector { detector } => Network::Detector(weights::detector_from_store(store, detector)?),
        })
    }

    pub fn cost(&self, h: usize, w: usize) -> CostReport {
        match self {
            Network::Backbone(m) => count_params_flops(m, h, w),
            Network::Detector(d) => d.cost(h, w),
        }
    }

    /// Default input extent for checks and benchmarks.
    pub fn default_hw(&self) -> (usize, usize) {
        match self {
            Network::Backbone(_) => (224, 224),
            Network::Detector(_) => DETECTOR_BENCH_HW,
        }
    }

    /// Outputs compared between fused and unfused forms, flattened.
    pub fn probe(&self, x: &Tensor4) -> Result<Vec<f32>> {
        match self {
            Network::Backbone(m) => Ok(m.logits(x)?.data),
            Network::Detector(d) => {
                let f = d.backbone.features(&x.pad_to_multiple(INPUT_MULTIPLE))?;
                let p = repfpn_forward(&f, &d.neck, d.neck.is_fused())?;
                let levels = head_forward(&p, &d.head)?;
                Ok(flatten_levels(&levels))
            }
        }
    }
}

fn flatten_levels(levels: &[LevelOutput]) -> Vec<f32> {
    let mut out = Vec::new();
    for l in levels {
        out.extend_from_slice(l.cls.data());
        out.extend_from_slice(l.ctr.data());
        out.extend_from_slice(l.boxes.data());
    }
    out
}

pub fn sidecar_path(weights: &Path) -> PathBuf {
    let mut s = weights.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes weights and sidecar; returns the weight file size in bytes.
pub fn save(path: &Path, sidecar: &Sidecar, net: &Network) -> Result<u64> {
    let bytes = net.to_store()?.to_bytes();
    std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    std::fs::write(&side, serde_json::to_string_pretty(sidecar)? + "\n").map_err(|e| Error::io(&side, e))?;
    Ok(bytes.len() as u64)
}

pub fn load(path: &Path) -> Result<(Sidecar, Network)> {
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let sidecar: Sidecar = serde_json::from_str(&text)?;
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let net = Network::from_store(TensorStore::from_bytes(&bytes)?, &sidecar.arch)?;
    if net.is_fused() != sidecar.fused {
        return Err(Error::WeightFormat(format!(
            "sidecar says fused={} but the tensors say fused={}",
            sidecar.fused,
            net.is_fused()
        )));
    }
    Ok((sidecar, net))
}

fn random_input(shape: Shape4, rng: &mut ChaCha8Rng) -> Tensor4 {
    Tensor4::from_fn(shape, |_, _, _, _| rng.gen_range(-2.0..2.0))
}

fn max_diff(a: &[f32], b: &[f32]) -> f32 {
    if a.len() != b.len() {
        return f32::INFINITY;
    }
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = (x - y).abs();
            if d.is_nan() {
                f32::INFINITY
            } else {
                d
            }
        })
        .fold(0.0, f32::max)
}

fn cost_json(c: &CostReport) -> serde_json::Value {
    json!({
        "params": c.params,
        "params_m": c.params as f64 / 1e6,
        "macs": c.macs,
        "flops": c.flops,
        "gflops": c.flops as f64 / 1e9,
        "parts": c.parts,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildArgs {
    pub variant: String,
    pub seed: u64,
    pub detector: bool,
    pub out: PathBuf,
}

pub fn cmd_build(args: &BuildArgs) -> Result<Report> {
    let arch = if args.detector {
        Architecture::Detector {
            detector: DetectorConfig::for_backbone(&args.variant)?,
        }
    } else {
        Architecture::Backbone {
            variant: VariantConfig::preset(&args.variant)?,
        }
    };
    let net = Network::build(&arch, args.seed)?;
    let sidecar = Sidecar {
        arch,
        seed: args.seed,
        fused: false,
        normalization: Normalization::default(),
    };
    let bytes = save(&args.out, &sidecar, &net)?;
    let (h, w) = net.default_hw();
    let mut results = cost_json(&net.cost(h, w));
    results["input"] = json!([h, w]);
    results["file_bytes"] = json!(bytes);
    if let Network::Backbone(m) = &net {
        results["stages"] = json!(m.stages.len());
        results["stem_convs"] = json!(m.stem.layers.len());
    }
    Report::new("build", args, results)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FuseArgs {
    pub input: PathBuf,
    pub out: PathBuf,
    pub trials: usize,
    pub seed: u64,
}

/// Seeded spot check of fused against unfused outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub trials: usize,
    pub input: [usize; 2],
    pub tol: f32,
    pub max_abs_diff: f32,
    pub pass: bool,
}

pub fn certify(unfused: &Network, fused: &Network, trials: usize, hw: (usize, usize), seed: u64) -> Result<Certificate> {
    if trials == 0 {
        return Err(Error::invalid("certify", "trials must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f32;
    for _ in 0..trials {
        let x = random_input(Shape4::new(1, hw.0, hw.1, 3), &mut rng);
        worst = worst.max(max_diff(&unfused.probe(&x)?, &fused.probe(&x)?));
    }
    Ok(Certificate {
        trials,
        input: [hw.0, hw.1],
        tol: DEFAULT_MODEL_TOL,
        max_abs_diff: worst,
        pass: worst <= DEFAULT_MODEL_TOL,
    })
}

fn certificate_hw(net: &Network) -> (usize, usize) {
    match net {
        Network::Backbone(_) => (224, 224),
        Network::Detector(_) => (256, 256),
    }
}

pub fn cmd_fuse(args: &FuseArgs) -> Result<Report> {
    let (mut sidecar, net) = load(&args.input)?;
    if net.is_fused() {
        return Err(Error::AlreadyFused);
    }
    let fused = net.fuse()?;
    let cert = certify(&net, &fused, args.trials, certificate_hw(&net), args.seed)?;
    sidecar.fused = true;
    let before = std::fs::metadata(&args.input).map_err(|e| Error::io(&args.input, e))?.len();
    let after = save(&args.out, &sidecar, &fused)?;
    let (h, w) = net.default_hw();
    let results = json!({
        "params_unfused": net.cost(h, w).params,
        "params_fused": fused.cost(h, w).params,
        "bytes_unfused": before,
        "bytes_fused": after,
        "certificate": cert,
    });
    Report::new("fuse", args, results)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyArgs {
    pub input: PathBuf,
    pub reference: Option<PathBuf>,
    pub trials: usize,
    pub tol: f32,
    pub model_tol: f32,
    pub model_trials: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitCheck {
    pub name: String,
    pub max_abs_diff: f32,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyOutcome {
    pub blocks: Vec<UnitCheck>,
    pub failed: Vec<String>,
    pub model: UnitCheck,
    pub pass: bool,
}

enum Unit<'a> {
    Stem(&'a Stem),
    Down(&'a Downsample, usize),
    Block(&'a Block),
    Neck(&'a FpnLevel),
}

impl Unit<'_> {
    fn input_shape(&self) -> Shape4 {
        match self {
            Unit::Stem(s) => Shape4::new(1, 8 * s.stride(), 8 * s.stride(), s.layers[0].conv.kernels.in_c),
            Unit::Down(_, c) => Shape4::new(1, 14, 14, *c),
            Unit::Block(b) => Shape4::new(1, 8, 8, b.channels()),
            Unit::Neck(l) => Shape4::new(1, 8, 8, l.lateral.out_dim()),
        }
    }

    fn forward(&self, x: &Tensor4) -> Result<Tensor4> {
        match self {
            Unit::Stem(s) => s.forward(x),
            Unit::Down(d, _) => d.forward(x),
            Unit::Block(b) => b.forward(x),
            Unit::Neck(l) => l.refine.forward(&l.dw.forward(x)?),
        }
    }
}

fn backbone_units<'a>(m: &'a Model, prefix: &str, out: &mut Vec<(String, Unit<'a>)>) {
    out.push((format!("{prefix}stem"), Unit::Stem(&m.stem)));
    for (si, st) in m.stages.iter().enumerate() {
        if let Some(d) = &st.downsample {
            out.push((format!("{prefix}stages.{si}.down"), Unit::Down(d, d.pw.in_dim())));
        }
        for (bi, b) in st.blocks.iter().enumerate() {
            out.push((format!("{prefix}stages.{si}.blocks.{bi}"), Unit::Block(b)));
        }
    }
}

fn units(net: &Network) -> Vec<(String, Unit<'_>)> {
    let mut out = Vec::new();
    match net {
        Network::Backbone(m) => backbone_units(m, "", &mut out),
        Network::Detector(d) => {
            backbone_units(&d.backbone, "backbone.", &mut out);
            for (i, l) in d.neck.levels.iter().enumerate() {
                out.push((format!("neck.{i}"), Unit::Neck(l)));
            }
        }
    }
    out
}

/// Compares the fused network against its training-time form, unit by unit
/// and end to end. With a reference file the two forms come from disk;
/// otherwise the input must be unfused and is fused in memory.
pub fn verify(args: &VerifyArgs) -> Result<VerifyOutcome> {
    if args.trials == 0 || args.model_trials == 0 {
        return Err(Error::invalid("verify", "trials must be at least 1"));
    }
    let (side, net) = load(&args.input)?;
    let (unfused, fused) = match &args.reference {
        Some(r) => {
            let (rside, rnet) = load(r)?;
            if rside.arch != side.arch {
                return Err(Error::Config("reference has a different architecture".into()));
            }
            match (net.is_fused(), rnet.is_fused()) {
                (true, false) => (rnet, net),
                (false, true) => (net, rnet),
                _ => return Err(Error::Config("exactly one of input and reference must be fused".into())),
            }
        }
        None if net.is_fused() => {
            return Err(Error::Config("fused weights can only be verified against an unfused --reference".into()))
        }
        None => {
            let f = net.fuse()?;
            (net, f)
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut blocks = Vec::new();
    for ((name, u), (_, f)) in units(&unfused).iter().zip(units(&fused).iter()) {
        let mut worst = 0.0f32;
        for _ in 0..args.trials {
            let x = random_input(u.input_shape(), &mut rng);
            let d = match (u.forward(&x), f.forward(&x)) {
                (Ok(a), Ok(b)) => max_diff(a.data(), b.data()),
                _ => f32::INFINITY,
            };
            worst = worst.max(d);
        }
        blocks.push(UnitCheck {
            name: name.clone(),
            max_abs_diff: worst,
            pass: worst <= args.tol,
        });
    }
    let cert = certify(&unfused, &fused, args.model_trials, certificate_hw(&unfused), args.seed ^ 0x5eed)?;
    let model = UnitCheck {
        name: "model".into(),
        max_abs_diff: cert.max_abs_diff,
        pass: cert.max_abs_diff <= args.model_tol,
    };
    let failed: Vec<String> = blocks.iter().filter(|b| !b.pass).map(|b| b.name.clone()).collect();
    let pass = failed.is_empty() && model.pass;
    Ok(VerifyOutcome {
        blocks,
        failed,
        model,
        pass,
    })
}

pub fn cmd_verify(args: &VerifyArgs) -> Result<(Report, bool)> {
    let outcome = verify(args)?;
    let pass = outcome.pass;
    Ok((Report::new("verify", args, outcome)?, pass))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchArgs {
    pub input: PathBuf,
    /// `(h, w)`; defaults to 224x224 for backbones and 720x1280 for detectors.
    pub hw: Option<(usize, usize)>,
    pub warmup: usize,
    pub iters: usize,
    /// `Some(true)` fuses an unfused file in memory; `Some(false)` requires unfused weights.
    pub fused: Option<bool>,
    pub seed: u64,
}

pub fn bench_network(net: &Network, name: &str, hw: (usize, usize), warmup: usize, iters: usize, seed: u64) -> Result<BenchReport> {
    if iters == 0 {
        return Err(Error::invalid("bench", "iters must be at least 1"));
    }
    let (h, w) = hw;
    if h == 0 || w == 0 {
        return Err(Error::invalid("bench", "input extent must be positive"));
    }
    if matches!(net, Network::Backbone(_)) && (h % INPUT_MULTIPLE != 0 || w % INPUT_MULTIPLE != 0) {
        return Err(Error::invalid("bench", format!("input {h}x{w} is not a multiple of {INPUT_MULTIPLE}")));
    }
    let x = random_input(Shape4::new(1, h, w, 3), &mut ChaCha8Rng::seed_from_u64(seed));
    let run = |x: &Tensor4| -> Result<()> {
        match net {
            Network::Backbone(m) => m.logits(x).map(|_| ()),
            Network::Detector(d) => fastcos_forward(d, x).map(|_| ()),
        }
    };
    for _ in 0..warmup {
        run(&x)?;
    }
    let mut latencies_ms = Vec::with_capacity(iters);
    for _ in 0..iters {
        let t = Instant::now();
        run(&x)?;
        latencies_ms.push(t.elapsed().as_secs_f64() * 1e3);
    }
    let note = match net {
        Network::Detector(_) if hw == DETECTOR_BENCH_HW => {
            Some("1280x720 input: the customary detector latency resolution".to_string())
        }
        _ => None,
    };
    Ok(BenchReport {
        config: name.to_string(),
        fused: net.is_fused(),
        input: [1, h, w, 3],
        warmup,
        iters,
        threads: 1,
        stats: LatencyStats::from_latencies(&latencies_ms, 1)?,
        latencies_ms,
        note,
    })
}

pub fn cmd_bench(args: &BenchArgs) -> Result<(Report, BenchReport)> {
    let (_, net) = load(&args.input)?;
    let net = match (args.fused, net.is_fused()) {
        (Some(true), false) => net.fuse()?,
        (Some(false), true) => {
            return Err(Error::Config("weights are fused; the unfused form cannot be recovered".into()))
        }
        _ => net,
    };
    let hw = args.hw.unwrap_or(net.default_hw());
    let bench = bench_network(&net, net.name(), hw, args.warmup, args.iters, args.seed)?;
    Ok((Report::new("bench", args, &bench)?, bench))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectArgs {
    pub input: PathBuf,
    pub image: PathBuf,
    pub out: PathBuf,
    pub score_thresh: Option<f32>,
    pub iou: Option<f32>,
}

pub fn cmd_detect(args: &DetectArgs) -> Result<Report> {
    let (side, net) = load(&args.input)?;
    let Network::Detector(mut det) = net else {
        return Err(Error::Config("detect needs detector weights".into()));
    };
    if let Some(t) = args.score_thresh {
        det.config.inference.score_thresh = t;
    }
    if let Some(t) = args.iou {
        det.config.inference.iou_thresh = t;
    }
    let bytes = std::fs::read(&args.image).map_err(|e| Error::io(&args.image, e))?;
    let img = ppm::parse_ppm(&bytes)?;
    let x = ppm::to_tensor(&img, side.normalization.mean, side.normalization.std);
    let out = fastcos_forward(&det, &x)?;
    let image_id = args
        .image
        .file_stem()
        .map_or_else(|| "image".to_string(), |s| s.to_string_lossy().into_owned());
    let dets = &out.detections[0];
    std::fs::write(&args.out, to_jsonl(&image_id, dets)?).map_err(|e| Error::io(&args.out, e))?;
    let results = json!({
        "image_id": image_id,
        "image": [img.height, img.width],
        "detections": dets.len(),
        "inference": det.config.inference,
    });
    Report::new("detect", args, results)
}
