//! Reference implementations shared by the integration tests. They favour
//! directness over speed and use double precision where it matters.
#![allow(dead_code)]

use ravit::blocks::SaParams;
use ravit::detector::{Detection, LevelOutput};
use ravit::layers::Linear;
use ravit::tensor::{Shape4, Tensor4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rand_tensor(shape: Shape4, seed: u64, scale: f32) -> Tensor4 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor4::from_fn(shape, |_, _, _, _| rng.gen_range(-scale..scale))
}

fn project(lin: &Linear, tok: &[f32]) -> Vec<f64> {
    (0..lin.out_dim())
        .map(|o| {
            lin.bias[o] as f64
                + tok
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| lin.weight.at(o, i) as f64 * v as f64)
                    .sum::<f64>()
        })
        .collect()
}

/// Attention scores (row-major `T x T`) and the projected output of the
/// attention mixer given its local-path output `u`, over flattened tokens.
pub fn dense_attention(u: &Tensor4, sa: &SaParams) -> (Vec<f64>, Vec<f64>) {
    let s = u.shape();
    assert_eq!(s.n, 1);
    let t = s.h * s.w;
    let toks: Vec<&[f32]> = u.data().chunks_exact(s.c).collect();
    let q: Vec<Vec<f64>> = toks.iter().map(|x| project(&sa.q, x)).collect();
    let k: Vec<Vec<f64>> = toks.iter().map(|x| project(&sa.k, x)).collect();
    let v: Vec<Vec<f64>> = toks.iter().map(|x| project(&sa.v, x)).collect();
    let dq = q[0].len() as f64;
    let mut scores = vec![0.0; t * t];
    let mut out = Vec::with_capacity(t * s.c);
    for i in 0..t {
        let logits: Vec<f64> = (0..t)
            .map(|j| q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() / dq.sqrt())
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = e.iter().sum();
        for j in 0..t {
            scores[i * t + j] = e[j] / z;
        }
        let attn: Vec<f64> = (0..v[0].len())
            .map(|d| (0..t).map(|j| scores[i * t + j] * v[j][d]).sum())
            .collect();
        let cat64: Vec<f64> = toks[i].iter().map(|&x| x as f64).chain(attn).collect();
        for o in 0..s.c {
            out.push(
                sa.o.bias[o] as f64
                    + cat64
                        .iter()
                        .enumerate()
                        .map(|(c, x)| sa.o.weight.at(o, c) as f64 * x)
                        .sum::<f64>(),
            );
        }
    }
    (scores, out)
}

/// Every (location, class) pair above threshold, as bit patterns for exact comparison.
pub fn enumerate_candidates(
    levels: &[LevelOutput],
    strides: &[usize],
    hw: (usize, usize),
    thresh: f32,
) -> Vec<([u32; 4], u32, usize)> {
    let sig = |v: f32| 1.0 / (1.0 + (-v).exp());
    let (ih, iw) = (hw.0 as f32, hw.1 as f32);
    let mut out = Vec::new();
    for (lvl, &stride) in levels.iter().zip(strides) {
        let s = lvl.cls.shape();
        let st = stride as f64;
        for y in 0..s.h {
            for x in 0..s.w {
                for c in 0..s.c {
                    let score = sig(lvl.cls.at(0, y, x, c)) * sig(lvl.ctr.at(0, y, x, 0));
                    if score < thresh {
                        continue;
                    }
                    let cx = st / 2.0 + x as f64 * st;
                    let cy = st / 2.0 + y as f64 * st;
                    let d = |i| lvl.boxes.at(0, y, x, i) as f64;
                    let b = [
                        ((cx - d(0)) as f32).clamp(0.0, iw),
                        ((cy - d(1)) as f32).clamp(0.0, ih),
                        ((cx + d(2)) as f32).clamp(0.0, iw),
                        ((cy + d(3)) as f32).clamp(0.0, ih),
                    ];
                    out.push((b.map(f32::to_bits), score.to_bits(), c));
                }
            }
        }
    }
    out.sort();
    out
}

pub fn iou_ref(a: &[f32; 4], b: &[f32; 4]) -> f32 {
    let x1 = a[0].max(b[0]);
    let y1 = a[1].max(b[1]);
    let x2 = a[2].min(b[2]);
    let y2 = a[3].min(b[3]);
    let inter = if x2 > x1 && y2 > y1 { (x2 - x1) * (y2 - y1) } else { 0.0 };
    let area_a = (a[2] - a[0]).max(0.0) * (a[3] - a[1]).max(0.0);
    let area_b = (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0);
    let union = area_a + area_b - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Quadratic greedy suppression: pick the earliest best-scoring live box,
/// strike out same-class overlaps, repeat.
pub fn nms_quadratic(dets: &[Detection], thr: f32, max_out: usize) -> Vec<Detection> {
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
            if alive[j] && dets[j].class == dets[b].class && iou_ref(&dets[b].bbox, &dets[j].bbox) > thr {
                alive[j] = false;
            }
        }
        out.push(dets[b]);
    }
    out
}

pub fn random_detections(n: usize, seed: u64) -> Vec<Detection> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let x = rng.gen_range(0.0..300.0f32);
            let y = rng.gen_range(0.0..300.0f32);
            let w = rng.gen_range(4.0..120.0f32);
            let h = rng.gen_range(4.0..120.0f32);
            Detection {
                bbox: [x, y, x + w, y + h],
                score: rng.gen_range(0..50) as f32 / 50.0,
                class: rng.gen_range(0..4),
            }
        })
        .collect()
}

/// Level for a largest distance under the three default ranges.
pub fn level_oracle(m: u32) -> Option<usize> {
    if m == 0 {
        None
    } else if m <= 128 {
        Some(0)
    } else if m <= 256 {
        Some(1)
    } else if m <= 512 {
        Some(2)
    } else {
        None
    }
}

/// Binary PPM bytes.
pub fn ppm_bytes(w: usize, h: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}
