//! Seeded synthetic modalities: band-limited textures with inserted blob
//! and stroke defects.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::manifest::{render_manifest, Sample, SplitTag};
use super::pgm::{quantize, write_pgm, GrayImage};
use crate::error::{Error, Result};
use crate::{fsutil, rng};

const WAVES: usize = 24;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextureProfile {
    pub name: String,
    /// Mean spatial frequency in cycles per image.
    pub base_frequency: f64,
    pub contrast: f64,
    pub noise_scale: f64,
    /// When false, masks are withheld (classification-only modality).
    #[serde(default = "yes")]
    pub masks: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DefectConfig {
    pub count_min: usize,
    pub count_max: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    pub intensity_delta: f64,
}

impl Default for DefectConfig {
    fn default() -> Self {
        DefectConfig {
            count_min: 1,
            count_max: 2,
            radius_min: 3.0,
            radius_max: 8.0,
            intensity_delta: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub modalities: Vec<TextureProfile>,
    pub image_size: usize,
    pub defects: DefectConfig,
    /// Unlabeled normal references per modality.
    pub normals: usize,
    /// Labeled training candidates per modality, half anomalous.
    pub labeled: usize,
    /// Test samples per modality, half anomalous.
    pub test: usize,
    pub seed: u64,
}

pub fn default_profiles() -> Vec<TextureProfile> {
    vec![
        TextureProfile {
            name: "texture-a".into(),
            base_frequency: 3.0,
            contrast: 0.12,
            noise_scale: 0.02,
            masks: true,
        },
        TextureProfile {
            name: "texture-b".into(),
            base_frequency: 8.0,
            contrast: 0.10,
            noise_scale: 0.04,
            masks: true,
        },
        TextureProfile {
            name: "texture-c".into(),
            base_frequency: 16.0,
            contrast: 0.08,
            noise_scale: 0.06,
            masks: true,
        },
    ]
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            modalities: default_profiles(),
            image_size: 64,
            defects: DefectConfig::default(),
            normals: 200,
            labeled: 32,
            test: 100,
            seed: 42,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.modalities.is_empty() {
            return Err(Error::Config("at least one modality is required".into()));
        }
        let mut names: Vec<&str> = self.modalities.iter().map(|m| m.name.as_str()).collect();
        names.sort();
        names.dedup();
        if names.len() != self.modalities.len() || names.iter().any(|n| n.trim().is_empty()) {
            return Err(Error::Config("modality names must be unique and nonempty".into()));
        }
        if self.normals == 0 || self.labeled < 2 || self.test < 2 {
            return Err(Error::Config(
                "need ≥1 normal reference and ≥2 labeled and test samples per modality".into(),
            ));
        }
        if self.image_size < 8 {
            return Err(Error::Config(format!("image size {} is too small", self.image_size)));
        }
        let d = &self.defects;
        if d.count_min == 0 || d.count_min > d.count_max {
            return Err(Error::Config("defect count range must satisfy 1 ≤ min ≤ max".into()));
        }
        if !(d.radius_min > 0.0 && d.radius_min <= d.radius_max && 2.0 * d.radius_max < self.image_size as f64) {
            return Err(Error::Config("defect radius range does not fit the image".into()));
        }
        if !(d.intensity_delta > 0.0 && d.intensity_delta <= 1.0) {
            return Err(Error::Config("intensity delta must lie in (0, 1]".into()));
        }
        for m in &self.modalities {
            if !(m.base_frequency > 0.0 && m.contrast >= 0.0 && m.noise_scale >= 0.0) {
                return Err(Error::Config(format!("texture profile {:?} has invalid parameters", m.name)));
            }
        }
        Ok(())
    }
}

/// One generated sample before it is written out.
#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub modality: String,
    pub split: SplitTag,
    pub index: usize,
    pub label: u8,
    pub image: GrayImage,
    /// Always produced; withheld from the manifest for mask-less profiles.
    pub mask: GrayImage,
}

/// Band-limited texture in `[0, 1]`: a sum of plane waves with random
/// orientation and phase around the profile frequency, plus white noise.
pub fn texture(profile: &TextureProfile, size: usize, gen: &mut ChaCha8Rng) -> Vec<f64> {
    let waves: Vec<(f64, f64, f64)> = (0..WAVES)
        .map(|_| {
            let f = profile.base_frequency * gen.random_range(0.75..1.25);
            let angle = gen.random_range(0.0..PI);
            let phase = gen.random_range(0.0..2.0 * PI);
            (f * angle.cos(), f * angle.sin(), phase)
        })
        .collect();
    let norm = (WAVES as f64 / 2.0).sqrt();
    let noise = rng::normals(gen, size * size, profile.noise_scale);
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (u, v) = (x as f64 / size as f64, y as f64 / size as f64);
            let s: f64 = waves
                .iter()
                .map(|(fx, fy, ph)| (2.0 * PI * (fx * u + fy * v) + ph).cos())
                .sum();
            out.push((0.5 + profile.contrast * s / norm + noise[y * size + x]).clamp(0.0, 1.0));
        }
    }
    out
}

enum Shape {
    Ellipse { cx: f64, cy: f64, a: f64, b: f64, theta: f64 },
    Stroke { x0: f64, y0: f64, x1: f64, y1: f64, half_width: f64 },
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Ellipse { cx, cy, a, b, theta } => {
                let (dx, dy) = (x - cx, y - cy);
                let (c, s) = (theta.cos(), theta.sin());
                let u = (dx * c + dy * s) / a;
                let v = (-dx * s + dy * c) / b;
                u * u + v * v <= 1.0
            }
            Shape::Stroke { x0, y0, x1, y1, half_width } => {
                let (vx, vy) = (x1 - x0, y1 - y0);
                let len2 = vx * vx + vy * vy;
                let t = (((x - x0) * vx + (y - y0) * vy) / len2).clamp(0.0, 1.0);
                let (px, py) = (x0 + t * vx, y0 + t * vy);
                (x - px).powi(2) + (y - py).powi(2) <= half_width * half_width
            }
        }
    }
}

fn random_shape(cfg: &DefectConfig, size: usize, gen: &mut ChaCha8Rng) -> Shape {
    let s = size as f64;
    let r_max = cfg.radius_max;
    if gen.random_bool(0.6) {
        Shape::Ellipse {
            cx: gen.random_range(r_max..s - r_max),
            cy: gen.random_range(r_max..s - r_max),
            a: gen.random_range(cfg.radius_min..=r_max),
            b: gen.random_range(cfg.radius_min..=r_max),
            theta: gen.random_range(0.0..PI),
        }
    } else {
        let len = gen.random_range(2.0 * cfg.radius_min..=3.0 * r_max).min(0.6 * s);
        let angle = gen.random_range(0.0..2.0 * PI);
        let (dx, dy) = (len * angle.cos(), len * angle.sin());
        let x0 = gen.random_range(dx.abs() / 2.0 + 1.0..s - dx.abs() / 2.0 - 1.0) - dx / 2.0;
        let y0 = gen.random_range(dy.abs() / 2.0 + 1.0..s - dy.abs() / 2.0 - 1.0) - dy / 2.0;
        Shape::Stroke {
            x0,
            y0,
            x1: x0 + dx,
            y1: y0 + dy,
            half_width: gen.random_range(1.0..=(cfg.radius_min / 2.0).max(1.5)),
        }
    }
}

/// Mean absolute pixel change inside and outside the mask.
pub fn defect_contrast(base: &[u8], defective: &[u8], mask: &[u8]) -> (f64, f64) {
    let (mut inside, mut n_in, mut outside, mut n_out) = (0.0, 0usize, 0.0, 0usize);
    for ((&a, &b), &m) in base.iter().zip(defective).zip(mask) {
        let d = (a as f64 - b as f64).abs();
        if m >= 128 {
            inside += d;
            n_in += 1;
        } else {
            outside += d;
            n_out += 1;
        }
    }
    (inside / n_in.max(1) as f64, outside / n_out.max(1) as f64)
}

fn insert_defects(base: &[f64], cfg: &DefectConfig, size: usize, gen: &mut ChaCha8Rng) -> Result<(Vec<u8>, Vec<u8>)> {
    let count = gen.random_range(cfg.count_min..=cfg.count_max);
    let defects: Vec<(Shape, f64)> = (0..count)
        .map(|_| {
            let shape = random_shape(cfg, size, gen);
            let sign = if gen.random_bool(0.5) { 1.0 } else { -1.0 };
            (shape, sign * cfg.intensity_delta * gen.random_range(0.8..1.2))
        })
        .collect();
    let quantized_base = quantize(base);
    for flip in [1.0, -1.0] {
        let mut img = base.to_vec();
        let mut mask = vec![0u8; size * size];
        for y in 0..size {
            for x in 0..size {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                for (shape, delta) in &defects {
                    if shape.contains(px, py) {
                        img[y * size + x] += flip * delta;
                        mask[y * size + x] = 255;
                    }
                }
            }
        }
        if !mask.contains(&255) {
            continue;
        }
        let img = quantize(&img);
        let (inside, outside) = defect_contrast(&quantized_base, &img, &mask);
        if inside > outside {
            return Ok((img, mask));
        }
    }
    Err(Error::Data("could not insert a visible defect".into()))
}

fn generate_one(cfg: &SynthConfig, profile: &TextureProfile, split: SplitTag, index: usize, label: u8) -> Result<Generated> {
    let tag = match split {
        SplitTag::Pool => "pool",
        SplitTag::Train => "train",
        SplitTag::Test => "test",
    };
    let size = cfg.image_size;
    let mut gen = rng::stream(cfg.seed, &format!("synth:{}:{tag}:{index}", profile.name));
    let base = texture(profile, size, &mut gen);
    let (pixels, mask) = if label == 1 {
        // retry with fresh shapes if a defect fell entirely into clipping
        let mut result = None;
        for _ in 0..8 {
            if let Ok(r) = insert_defects(&base, &cfg.defects, size, &mut gen) {
                result = Some(r);
                break;
            }
        }
        result.ok_or_else(|| Error::Data(format!("{}: no visible defect for {tag} {index}", profile.name)))?
    } else {
        (quantize(&base), vec![0u8; size * size])
    };
    Ok(Generated {
        modality: profile.name.clone(),
        split,
        index,
        label,
        image: GrayImage::new(size, size, pixels)?,
        mask: GrayImage::new(size, size, mask)?,
    })
}

/// The whole dataset in memory; a pure function of `cfg`.
pub fn generate(cfg: &SynthConfig) -> Result<Vec<Generated>> {
    cfg.validate()?;
    let mut jobs = Vec::new();
    for profile in &cfg.modalities {
        for i in 0..cfg.normals {
            jobs.push((profile, SplitTag::Pool, i, 0u8));
        }
        for (split, n) in [(SplitTag::Train, cfg.labeled), (SplitTag::Test, cfg.test)] {
            for i in 0..n {
                // first half anomalous
                let label = u8::from(i < n / 2);
                jobs.push((profile, split, i, label));
            }
        }
    }
    jobs.par_iter()
        .map(|&(p, split, i, label)| generate_one(cfg, p, split, i, label))
        .collect()
}

fn relative_paths(g: &Generated) -> (PathBuf, PathBuf) {
    let tag = match g.split {
        SplitTag::Pool => "pool",
        SplitTag::Train => "train",
        SplitTag::Test => "test",
    };
    let dir = PathBuf::from(&g.modality).join(tag);
    (
        dir.join(format!("{tag}_{:04}.pgm", g.index)),
        dir.join(format!("{tag}_{:04}_mask.pgm", g.index)),
    )
}

pub const MANIFEST_NAME: &str = "manifest.jsonl";

/// Writes every image (and mask, for masked profiles) under `out_dir` and
/// a manifest `out_dir/manifest.jsonl`. Returns the manifest entries.
pub fn gen_dataset(cfg: &SynthConfig, out_dir: &Path) -> Result<Vec<Sample>> {
    let items = generate(cfg)?;
    let masked = |m: &str| cfg.modalities.iter().any(|p| p.name == m && p.masks);
    let samples: Vec<Sample> = items
        .par_iter()
        .enumerate()
        .map(|(i, g)| {
            let (img_rel, mask_rel) = relative_paths(g);
            write_pgm(&out_dir.join(&img_rel), &g.image)?;
            let mask = if masked(&g.modality) {
                write_pgm(&out_dir.join(&mask_rel), &g.mask)?;
                Some(out_dir.join(mask_rel))
            } else {
                None
            };
            Ok(Sample {
                image: out_dir.join(img_rel),
                label: g.label,
                mask,
                modality: g.modality.clone(),
                split: Some(g.split),
                line: i + 1,
            })
        })
        .collect::<Result<_>>()?;
    let text = render_manifest(&samples, out_dir)?;
    fsutil::atomic_write(&out_dir.join(MANIFEST_NAME), text.as_bytes())?;
    Ok(samples)
}
