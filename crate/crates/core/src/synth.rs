//! Synthetic ultrasound-like images: speckled tissue with echogenic blob objects, optionally
//! cut to a sector-shaped scan cone.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BinaryMask, ImageGrid};
use crate::io::{
    save_manifest, write_image, write_mask, DatasetManifest, ManifestRecord, MaskRef, Split,
};
use crate::tracking::CineLoop;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeFamily {
    Ellipse,
    /// Ellipse with a sinusoidal boundary perturbation.
    Bean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Echogenicity {
    Hypo,
    Hyper,
    Anechoic,
}

impl Echogenicity {
    fn mean_intensity(self) -> f64 {
        match self {
            Echogenicity::Hypo => 0.22,
            Echogenicity::Hyper => 0.85,
            Echogenicity::Anechoic => 0.04,
        }
    }
}

/// Sector geometry: apex above the top edge, opening downward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConeConfig {
    /// Apex column as a fraction of the width.
    pub apex_x: f64,
    /// Apex row in pixels (negative = above the image).
    pub apex_y: f64,
    pub half_angle_deg: f64,
}

impl Default for ConeConfig {
    fn default() -> Self {
        Self {
            apex_x: 0.5,
            apex_y: -8.0,
            half_angle_deg: 38.0,
        }
    }
}

impl ConeConfig {
    pub fn mask(&self, height: usize, width: usize) -> BinaryMask {
        let ax = self.apex_x * width as f64;
        let half = self.half_angle_deg.to_radians();
        BinaryMask::from_fn(height, width, |y, x| {
            let dx = x as f64 + 0.5 - ax;
            let dy = y as f64 + 0.5 - self.apex_y;
            dy > 0.0 && dx.atan2(dy).abs() <= half
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub shapes: Vec<ShapeFamily>,
    pub echogenicity: Vec<Echogenicity>,
    /// Semi-axis range in pixels.
    pub min_radius: f64,
    pub max_radius: f64,
    /// 0 disables speckle; 1 is fully developed multiplicative speckle.
    pub speckle_strength: f64,
    /// Gaussian sigma (pixels) of the boundary blur.
    pub boundary_blur: f64,
    pub cone: Option<ConeConfig>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            min_objects: 1,
            max_objects: 2,
            shapes: vec![ShapeFamily::Ellipse, ShapeFamily::Bean],
            echogenicity: vec![
                Echogenicity::Hypo,
                Echogenicity::Hyper,
                Echogenicity::Anechoic,
            ],
            min_radius: 6.0,
            max_radius: 14.0,
            speckle_strength: 0.6,
            boundary_blur: 1.5,
            cone: None,
            seed: 0,
        }
    }
}

pub const MIN_OBJECT_AREA: usize = 64;

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.height < 16 || self.width < 16 {
            return bad("synthetic images must be at least 16x16".into());
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return bad("object count range must satisfy 1 <= min <= max".into());
        }
        if self.shapes.is_empty() || self.echogenicity.is_empty() {
            return bad("shape and echogenicity lists must be non-empty".into());
        }
        if !(self.min_radius > 0.0 && self.min_radius <= self.max_radius) {
            return bad("radius range must satisfy 0 < min <= max".into());
        }
        if PI * self.max_radius * self.max_radius < MIN_OBJECT_AREA as f64 {
            return bad(format!("max_radius too small for the {MIN_OBJECT_AREA} px minimum area"));
        }
        if !(0.0..=1.0).contains(&self.speckle_strength) {
            return bad("speckle_strength must lie in [0, 1]".into());
        }
        if self.boundary_blur < 0.0 {
            return bad("boundary_blur must be >= 0".into());
        }
        Ok(())
    }

    /// Checks that the image size suits a model with the given patch size.
    pub fn check_patch(&self, patch: usize) -> Result<()> {
        if !self.height.is_multiple_of(patch) || !self.width.is_multiple_of(patch) {
            return Err(Error::Config(format!(
                "synthetic size {}x{} not divisible by patch size {patch}",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthObject {
    pub object_id: String,
    pub echogenicity: Echogenicity,
    pub mask: BinaryMask,
}

#[derive(Debug, Clone)]
pub struct SynthSample {
    pub image: ImageGrid,
    pub objects: Vec<SynthObject>,
    pub cone: Option<BinaryMask>,
}

/// Per-index stream so every sample is a pure function of `(seed, index)`.
pub(crate) fn index_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

#[derive(Debug, Clone, Copy)]
struct Blob {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    theta: f64,
    bumps: f64,
    amplitude: f64,
    phase: f64,
}

impl Blob {
    fn random(rng: &mut ChaCha8Rng, cfg: &SynthConfig, shape: ShapeFamily) -> Self {
        let a = rng.random_range(cfg.min_radius..=cfg.max_radius);
        let b = rng.random_range(cfg.min_radius..=cfg.max_radius);
        let margin = 2.0;
        let cx = rng.random_range(margin..(cfg.width as f64 - margin));
        let cy = rng.random_range(margin..(cfg.height as f64 - margin));
        let (bumps, amplitude) = match shape {
            ShapeFamily::Ellipse => (0.0, 0.0),
            ShapeFamily::Bean => (
                rng.random_range(2..=3) as f64,
                rng.random_range(0.1..0.22),
            ),
        };
        Self {
            cx,
            cy,
            a,
            b,
            theta: rng.random_range(0.0..PI),
            bumps,
            amplitude,
            phase: rng.random_range(0.0..2.0 * PI),
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.theta.sin_cos();
        let u = (dx * c + dy * s) / self.a;
        let v = (-dx * s + dy * c) / self.b;
        let rho = (u * u + v * v).sqrt();
        let boundary = 1.0 + self.amplitude * (self.bumps * v.atan2(u) + self.phase).sin();
        rho <= boundary
    }

    fn rasterize(&self, height: usize, width: usize) -> BinaryMask {
        BinaryMask::from_fn(height, width, |y, x| {
            self.contains(x as f64 + 0.5, y as f64 + 0.5)
        })
    }
}

fn dilate(mask: &BinaryMask, radius: usize) -> BinaryMask {
    let (h, w) = mask.shape();
    BinaryMask::from_fn(h, w, |y, x| {
        let (y0, y1) = (y.saturating_sub(radius), (y + radius + 1).min(h));
        let (x0, x1) = (x.saturating_sub(radius), (x + radius + 1).min(w));
        (y0..y1).any(|yy| (x0..x1).any(|xx| mask.get(yy, xx)))
    })
}

fn gaussian_blur(data: &[f64], height: usize, width: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return data.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for y in 0..height as i64 {
            for x in 0..width as i64 {
                let mut acc = 0.0;
                let mut norm = 0.0;
                for (k, weight) in kernel.iter().enumerate() {
                    let off = k as i64 - radius;
                    let (sy, sx) = if horizontal { (y, x + off) } else { (y + off, x) };
                    if sy < 0 || sx < 0 || sy >= height as i64 || sx >= width as i64 {
                        continue;
                    }
                    acc += weight * src[(sy as usize) * width + sx as usize];
                    norm += weight;
                }
                out[(y as usize) * width + x as usize] = acc / norm;
            }
        }
        out
    };
    pass(&pass(data, true), false)
}

fn background(rng: &mut ChaCha8Rng, height: usize, width: usize) -> Vec<f64> {
    let base = rng.random_range(0.42..0.55);
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.02..0.06),
                rng.random_range(-0.15..0.15),
                rng.random_range(-0.15..0.15),
                rng.random_range(0.0..2.0 * PI),
            )
        })
        .collect();
    let mut out = Vec::with_capacity(height * width);
    for y in 0..height {
        for x in 0..width {
            let v: f64 = waves
                .iter()
                .map(|&(amp, fx, fy, ph)| amp * (fx * x as f64 + fy * y as f64 + ph).sin())
                .sum();
            out.push(base + v);
        }
    }
    out
}

/// Multiplicative Rayleigh speckle, low-pass filtered into grain and normalized to mean 1.
fn speckle_field(rng: &mut ChaCha8Rng, height: usize, width: usize) -> Vec<f64> {
    // magnitude of a circular complex Gaussian phasor sum
    let raw: Vec<f64> = (0..height * width)
        .map(|_| {
            let re: f64 = StandardNormal.sample(rng);
            let im: f64 = StandardNormal.sample(rng);
            re.hypot(im)
        })
        .collect();
    let grain = gaussian_blur(&raw, height, width, 0.7);
    let mean = grain.iter().sum::<f64>() / grain.len() as f64;
    grain.into_iter().map(|v| v / mean).collect()
}

fn compose(
    rng: &mut ChaCha8Rng,
    cfg: &SynthConfig,
    objects: &[(BinaryMask, Echogenicity)],
    cone: Option<&BinaryMask>,
) -> Result<ImageGrid> {
    let (h, w) = (cfg.height, cfg.width);
    let mut mean = background(rng, h, w);
    for (mask, echo) in objects {
        let level = (echo.mean_intensity() + rng.random_range(-0.04..0.04)).clamp(0.0, 1.0);
        for (i, v) in mask.data().iter().enumerate() {
            if *v != 0 {
                mean[i] = level;
            }
        }
    }
    let mean = gaussian_blur(&mean, h, w, cfg.boundary_blur);
    let speckle = speckle_field(rng, h, w);
    let data: Vec<f32> = mean
        .iter()
        .zip(&speckle)
        .enumerate()
        .map(|(i, (m, s))| {
            let inside = cone.is_none_or(|c| c.data()[i] != 0);
            if !inside {
                return 0.0;
            }
            let v = m * (1.0 + cfg.speckle_strength * (s - 1.0));
            v.clamp(0.0, 1.0) as f32
        })
        .collect();
    ImageGrid::new(h, w, data)
}

/// Generates sample `index`; the result depends only on `(config, index)`.
pub fn generate_sample(config: &SynthConfig, index: u64) -> Result<SynthSample> {
    config.validate()?;
    let (h, w) = (config.height, config.width);
    let mut rng = index_rng(config.seed, index);
    let cone = config.cone.map(|c| c.mask(h, w));
    let count = rng.random_range(config.min_objects..=config.max_objects);
    let mut occupied = BinaryMask::empty(h, w);
    let mut placed: Vec<(BinaryMask, Echogenicity)> = Vec::new();
    let mut attempts = 0;
    while placed.len() < count {
        attempts += 1;
        if attempts > 500 {
            if placed.is_empty() {
                return Err(Error::Config(
                    "could not place any object; check radius range and image size".into(),
                ));
            }
            break;
        }
        let shape = config.shapes[rng.random_range(0..config.shapes.len())];
        let echo = config.echogenicity[rng.random_range(0..config.echogenicity.len())];
        let blob = Blob::random(&mut rng, config, shape);
        let mut mask = blob.rasterize(h, w);
        if let Some(c) = &cone {
            mask = BinaryMask::new(
                h,
                w,
                mask.data()
                    .iter()
                    .zip(c.data())
                    .map(|(m, c)| m & c)
                    .collect(),
            )?;
        }
        if mask.count() < MIN_OBJECT_AREA || mask.intersection_count(&occupied) > 0 {
            continue;
        }
        let halo = dilate(&mask, 2);
        occupied = BinaryMask::new(
            h,
            w,
            occupied
                .data()
                .iter()
                .zip(halo.data())
                .map(|(a, b)| a | b)
                .collect(),
        )?;
        placed.push((mask, echo));
    }
    let image = compose(&mut rng, config, &placed, cone.as_ref())?;
    let objects = placed
        .into_iter()
        .enumerate()
        .map(|(i, (mask, echogenicity))| SynthObject {
            object_id: format!("obj{i}"),
            echogenicity,
            mask,
        })
        .collect();
    Ok(SynthSample {
        image,
        objects,
        cone,
    })
}

/// Writes `count` samples under `out_dir` and returns the saved manifest.
///
/// Layout: `images/NNNNN.png`, `masks/NNNNN_objK.png`, `manifest.json`.
pub fn generate_dataset(
    config: &SynthConfig,
    count: usize,
    out_dir: &Path,
    split: Split,
    dataset_id: &str,
) -> Result<DatasetManifest> {
    if count == 0 {
        return Err(Error::Config("count must be at least 1".into()));
    }
    config.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut records = Vec::with_capacity(count);
    for index in 0..count {
        let sample = generate_sample(config, index as u64)?;
        let id = format!("{index:05}");
        let image_rel = format!("images/{id}.png");
        write_image(&sample.image, &out_dir.join(&image_rel))?;
        let mut masks = Vec::new();
        for obj in &sample.objects {
            let rel = format!("masks/{id}_{}.png", obj.object_id);
            write_mask(&obj.mask, &out_dir.join(&rel))?;
            masks.push(MaskRef {
                object_id: obj.object_id.clone(),
                path: rel.into(),
            });
        }
        records.push(ManifestRecord {
            id,
            image: image_rel.into(),
            masks,
            split,
        });
    }
    let manifest = DatasetManifest {
        dataset_id: dataset_id.to_string(),
        provenance: format!(
            "synthetic speckle phantom, seed {}, {}x{}",
            config.seed, config.height, config.width
        ),
        records,
    };
    save_manifest(&manifest, &out_dir.join("manifest.json"))?;
    Ok(manifest)
}

/// In-memory samples, one per `(image, object)` pair, in index order.
pub fn generate_samples(config: &SynthConfig, count: usize) -> Result<Vec<crate::io::Sample>> {
    let mut out = Vec::new();
    for index in 0..count {
        let sample = generate_sample(config, index as u64)?;
        for obj in sample.objects {
            out.push(crate::io::Sample {
                id: format!("{index:05}/{}", obj.object_id),
                image: sample.image.clone(),
                gt: obj.mask,
            });
        }
    }
    Ok(out)
}

/// Motion of one structure in a synthetic cine loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CineObjectSpec {
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
    /// Translation per frame in pixels.
    pub vx: f64,
    pub vy: f64,
    /// Relative size oscillation amplitude over the loop.
    pub pulsation: f64,
    pub echogenicity: Echogenicity,
}

/// Cine loop of ellipses that translate and pulsate; frames share one speckle stream per
/// frame index.
pub fn generate_cine_loop(
    config: &SynthConfig,
    objects: &[(String, CineObjectSpec)],
    frames: usize,
    view: &str,
) -> Result<CineLoop> {
    config.validate()?;
    if frames == 0 {
        return Err(Error::Config("a cine loop needs at least one frame".into()));
    }
    let (h, w) = (config.height, config.width);
    let cone = config.cone.map(|c| c.mask(h, w));
    let mut images = Vec::with_capacity(frames);
    let mut gt: Vec<(String, Vec<BinaryMask>)> =
        objects.iter().map(|(id, _)| (id.clone(), Vec::new())).collect();
    for t in 0..frames {
        let phase = 2.0 * PI * t as f64 / frames as f64;
        let mut placed = Vec::new();
        for (k, (_, spec)) in objects.iter().enumerate() {
            let scale = 1.0 + spec.pulsation * phase.sin();
            let blob = Blob {
                cx: spec.cx + spec.vx * t as f64,
                cy: spec.cy + spec.vy * t as f64,
                a: spec.a * scale,
                b: spec.b * scale,
                theta: 0.0,
                bumps: 0.0,
                amplitude: 0.0,
                phase: 0.0,
            };
            let mut mask = blob.rasterize(h, w);
            if let Some(c) = &cone {
                mask = mask.minus(&mask.minus(c));
            }
            gt[k].1.push(mask.clone());
            placed.push((mask, spec.echogenicity));
        }
        let mut rng = index_rng(config.seed, t as u64);
        images.push(compose(&mut rng, config, &placed, cone.as_ref())?);
    }
    CineLoop::new(view.to_string(), images, gt)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let cfg = SynthConfig {
            seed: 11,
            ..Default::default()
        };
        let a = generate_sample(&cfg, 3).unwrap();
        let b = generate_sample(&cfg, 3).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.objects.len(), b.objects.len());
        let c = generate_sample(&cfg, 4).unwrap();
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn objects_meet_minimum_area_and_are_disjoint() {
        let cfg = SynthConfig {
            max_objects: 3,
            ..Default::default()
        };
        for i in 0..30 {
            let s = generate_sample(&cfg, i).unwrap();
            for (k, o) in s.objects.iter().enumerate() {
                assert!(o.mask.count() >= MIN_OBJECT_AREA);
                for other in &s.objects[k + 1..] {
                    assert_eq!(o.mask.intersection_count(&other.mask), 0);
                }
            }
        }
    }

    #[test]
    fn anechoic_objects_are_darker_than_surroundings() {
        let cfg = SynthConfig {
            echogenicity: vec![Echogenicity::Anechoic],
            seed: 5,
            ..Default::default()
        };
        let (mut inside, mut outside, mut n_in, mut n_out) = (0.0, 0.0, 0usize, 0usize);
        for i in 0..100 {
            let s = generate_sample(&cfg, i).unwrap();
            let mut any = BinaryMask::empty(cfg.height, cfg.width);
            for o in &s.objects {
                for (x, y) in o.mask.foreground() {
                    any.set(y, x, true);
                }
            }
            for (i, v) in s.image.data().iter().enumerate() {
                if any.data()[i] != 0 {
                    inside += *v as f64;
                    n_in += 1;
                } else {
                    outside += *v as f64;
                    n_out += 1;
                }
            }
        }
        assert!(inside / (n_in as f64) < outside / (n_out as f64));
    }

    #[test]
    fn cone_clips_masks_and_zeroes_outside() {
        let cfg = SynthConfig {
            cone: Some(ConeConfig::default()),
            ..Default::default()
        };
        let cone = ConeConfig::default().mask(cfg.height, cfg.width);
        for i in 0..40 {
            let s = generate_sample(&cfg, i).unwrap();
            for o in &s.objects {
                assert!(o.mask.minus(&cone).is_empty());
            }
            for (i, v) in s.image.data().iter().enumerate() {
                if cone.data()[i] == 0 {
                    assert_eq!(*v, 0.0);
                }
            }
        }
    }

    #[test]
    fn dataset_files_are_byte_identical_across_runs() {
        let cfg = SynthConfig {
            seed: 2,
            ..Default::default()
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ma = generate_dataset(&cfg, 3, a.path(), Split::Train, "d").unwrap();
        generate_dataset(&cfg, 3, b.path(), Split::Train, "d").unwrap();
        for rec in &ma.records {
            let fa = std::fs::read(a.path().join(&rec.image)).unwrap();
            let fb = std::fs::read(b.path().join(&rec.image)).unwrap();
            assert_eq!(fa, fb);
            for m in &rec.masks {
                assert_eq!(
                    std::fs::read(a.path().join(&m.path)).unwrap(),
                    std::fs::read(b.path().join(&m.path)).unwrap()
                );
            }
        }
        assert_eq!(
            std::fs::read(a.path().join("manifest.json")).unwrap(),
            std::fs::read(b.path().join("manifest.json")).unwrap()
        );
    }

    #[test]
    fn unwritable_directory_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("occupied");
        std::fs::write(&file, b"x").unwrap();
        let err = generate_dataset(&SynthConfig::default(), 1, &file.join("sub"), Split::Train, "d")
            .unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }
}
