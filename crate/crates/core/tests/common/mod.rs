//! Independent reference implementations used as test oracles. Written from the
//! definitions, without calling the library code they check.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sonoseg::prompting::InteractionTrace;
use sonoseg::{BinaryMask, MaskLogits};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn sig(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

pub fn dice_oracle(z: &[f64], y: &[u8], smooth: f64) -> f64 {
    let mut inter = 0.0;
    let mut psum = 0.0;
    let mut ysum = 0.0;
    for i in 0..z.len() {
        let p = sig(z[i]);
        let t = y[i] as f64;
        inter += p * t;
        psum += p;
        ysum += t;
    }
    1.0 - (2.0 * inter + smooth) / (psum + ysum + smooth)
}

pub fn focal_oracle(z: &[f64], y: &[u8], gamma: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..z.len() {
        let p = sig(z[i]);
        let pt = if y[i] == 1 { p } else { 1.0 - p };
        total += -(1.0 - pt).powf(gamma) * pt.ln();
    }
    total / z.len() as f64
}

pub fn kl_oracle(student: &[f64], teacher: &[f64], eps: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..student.len() {
        let s = sig(student[i]).clamp(eps, 1.0 - eps);
        let t = sig(teacher[i]).clamp(eps, 1.0 - eps);
        total += t * (t.ln() - s.ln()) + (1.0 - t) * ((1.0 - t).ln() - (1.0 - s).ln());
    }
    total / student.len() as f64
}

pub fn dicefocal_oracle(z: &[f64], y: &[u8], gamma: f64, wd: f64, wf: f64, smooth: f64) -> f64 {
    wd * dice_oracle(z, y, smooth) + wf * focal_oracle(z, y, gamma)
}

/// Central finite differences of `f` at `x`.
pub fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest component error relative to the largest numeric component.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = numeric
        .iter()
        .chain(analytic)
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-12);
    analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()))
        / scale
}

/// An 8x8 logit map and a non-degenerate binary target.
pub fn random_instance(r: &mut impl Rng) -> (Vec<f64>, Vec<u8>) {
    loop {
        let z: Vec<f64> = (0..64).map(|_| r.random_range(-3.0..3.0)).collect();
        let y: Vec<u8> = (0..64).map(|_| u8::from(r.random_bool(0.4))).collect();
        let ones = y.iter().filter(|&&v| v == 1).count();
        if ones > 0 && ones < 64 {
            return (z, y);
        }
    }
}

pub fn logits(z: &[f64]) -> MaskLogits {
    MaskLogits::new(8, 8, z.to_vec()).unwrap()
}

pub fn target(y: &[u8]) -> BinaryMask {
    BinaryMask::new(8, 8, y.to_vec()).unwrap()
}

pub fn dsc_oracle(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        na += x as usize;
        nb += y as usize;
        inter += (x & y) as usize;
    }
    if na + nb == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (na + nb) as f64
    }
}

/// Brute-force click metrics over raw traces.
#[derive(Debug, PartialEq)]
pub struct BruteMetrics {
    pub noc80: f64,
    pub noc90: f64,
    pub fr80: f64,
    pub fr90: f64,
    pub max_dsc: f64,
    pub curve: Vec<f64>,
}

pub fn brute_metrics(traces: &[Vec<f64>], budget: usize, cap: usize) -> BruteMetrics {
    let n = traces.len();
    let noc = |th: f64| {
        let mut total = 0usize;
        for t in traces {
            let mut clicks = cap;
            for (i, &d) in t.iter().enumerate() {
                if d >= th {
                    clicks = std::cmp::min(i + 1, cap);
                    break;
                }
            }
            total += clicks;
        }
        total as f64 / n as f64
    };
    let fr = |th: f64| {
        let mut failed = 0usize;
        for t in traces {
            let mut reached = false;
            for i in 0..std::cmp::min(budget, t.len()) {
                if t[i] >= th {
                    reached = true;
                }
            }
            if !reached {
                failed += 1;
            }
        }
        failed as f64 / n as f64
    };
    let mut curve = Vec::new();
    for k in 0..budget {
        let mut sum = 0.0;
        for t in traces {
            let idx = if k < t.len() { k } else { t.len() - 1 };
            sum += t[idx];
        }
        curve.push(sum / n as f64);
    }
    let mut max_dsc = curve[0];
    for &c in &curve {
        if c > max_dsc {
            max_dsc = c;
        }
    }
    BruteMetrics {
        noc80: noc(0.8),
        noc90: noc(0.9),
        fr80: fr(0.8),
        fr90: fr(0.9),
        max_dsc,
        curve,
    }
}

/// Random trace lengths and DSC values, with some values exactly on the thresholds.
pub fn random_trace_set(r: &mut impl Rng, budget: usize) -> Vec<InteractionTrace> {
    let count = r.random_range(1..40);
    (0..count)
        .map(|i| {
            let len = r.random_range(1..=budget);
            let dsc = (0..len)
                .map(|_| match r.random_range(0..10) {
                    0 => 0.8,
                    1 => 0.9,
                    _ => r.random_range(0.0..1.0),
                })
                .collect();
            InteractionTrace {
                image_id: format!("img{i}"),
                dsc_per_click: dsc,
                prompts: Vec::new(),
            }
        })
        .collect()
}

pub fn rect_mask(h: usize, w: usize, x0: usize, y0: usize, x1: usize, y1: usize) -> BinaryMask {
    BinaryMask::from_fn(h, w, |y, x| x >= x0 && x < x1 && y >= y0 && y < y1)
}

/// `base` plus the first `extra` background pixels in row-major order.
pub fn with_extra(base: &BinaryMask, extra: usize) -> BinaryMask {
    let mut out = base.clone();
    let mut left = extra;
    for y in 0..base.height() {
        for x in 0..base.width() {
            if left > 0 && !base.get(y, x) {
                out.set(y, x, true);
                left -= 1;
            }
        }
    }
    assert_eq!(left, 0, "not enough background");
    out
}

/// Tight bounding box `(x0, y0, x1, y1)` with exclusive upper bounds.
pub fn tight_bbox(m: &BinaryMask) -> (usize, usize, usize, usize) {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..m.height() {
        for x in 0..m.width() {
            if m.get(y, x) {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
    }
    (x0, y0, x1, y1)
}

pub fn centroid(m: &BinaryMask) -> (f64, f64) {
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
    for y in 0..m.height() {
        for x in 0..m.width() {
            if m.get(y, x) {
                sx += x as f64;
                sy += y as f64;
                n += 1.0;
            }
        }
    }
    (sx / n, sy / n)
}

/// Small architecture that keeps model-level tests fast.
pub fn tiny_config() -> sonoseg::model::ModelConfig {
    sonoseg::model::ModelConfig {
        patch_size: 8,
        embed_dim: 16,
        encoder_depth: 1,
        encoder_heads: 2,
        encoder_mlp_ratio: 2,
        decoder_depth: 1,
        decoder_heads: 2,
        decoder_mlp_ratio: 2,
        prompt_embed_dim: 16,
        mask_threshold: 0.5,
    }
}

pub fn tiny_samples(seed: u64, count: usize) -> Vec<sonoseg::io::Sample> {
    let cfg = sonoseg::synth::SynthConfig {
        seed,
        ..Default::default()
    };
    sonoseg::synth::generate_samples(&cfg, count).unwrap()
}

pub fn param_bits(model: &sonoseg::model::PromptSegModel) -> Vec<(String, Vec<u32>)> {
    model
        .params()
        .iter()
        .map(|(k, v)| {
            let bits = v
                .as_tensor()
                .flatten_all()
                .unwrap()
                .to_vec1::<f32>()
                .unwrap()
                .iter()
                .map(|x| x.to_bits())
                .collect();
            (k.clone(), bits)
        })
        .collect()
}
