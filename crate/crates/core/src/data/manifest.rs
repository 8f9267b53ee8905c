//! JSON-lines manifests and the zero-shot / few-shot splits.

use std::path::{Path, PathBuf};

use mvfa_autograd::{DType, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::pgm::{read_pgm, GrayImage};
use crate::error::{Error, Result};
use crate::{fsutil, rng};

/// Role a generated sample plays. Manifests without the key leave every
/// sample available to any role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    /// Unlabeled-normal reference pool (memory-bank candidates).
    Pool,
    /// Labeled training candidates.
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sample {
    pub image: PathBuf,
    pub label: u8,
    /// Required key; `null` for classification-only samples.
    #[serde(deserialize_with = "required_nullable")]
    pub mask: Option<PathBuf>,
    pub modality: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitTag>,
    /// 1-based manifest line, for error messages.
    #[serde(skip)]
    pub line: usize,
}

fn required_nullable<'de, D>(d: D) -> std::result::Result<Option<PathBuf>, D::Error>
where
    D: serde::Deserializer<'de>,
{
    Option::<PathBuf>::deserialize(d)
}

pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let mut s: Sample = serde_json::from_str(raw).map_err(|e| Error::Manifest {
            line,
            reason: e.to_string(),
        })?;
        if s.label > 1 {
            return Err(Error::Manifest {
                line,
                reason: format!("label {} is not 0 or 1", s.label),
            });
        }
        if s.modality.trim().is_empty() {
            return Err(Error::Manifest {
                line,
                reason: "empty modality".into(),
            });
        }
        s.image = base.join(&s.image);
        s.mask = s.mask.map(|m| base.join(m));
        s.line = line;
        out.push(s);
    }
    if out.is_empty() {
        return Err(Error::Data("manifest lists no samples".into()));
    }
    Ok(out)
}

/// Reads a manifest; relative paths resolve against its directory.
pub fn load_manifest(path: &Path) -> Result<Vec<Sample>> {
    let base = path.parent().unwrap_or(Path::new("."));
    parse_manifest(&fsutil::read_to_string(path)?, base)
}

/// Serializes samples with paths made relative to `base` where possible.
pub fn render_manifest(samples: &[Sample], base: &Path) -> Result<String> {
    let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).to_path_buf();
    let mut out = String::new();
    for s in samples {
        let entry = Sample {
            image: rel(&s.image),
            mask: s.mask.as_deref().map(rel),
            ..s.clone()
        };
        out.push_str(&serde_json::to_string(&entry).map_err(|e| Error::Data(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

pub fn modalities(samples: &[Sample]) -> Vec<String> {
    let mut m: Vec<String> = samples.iter().map(|s| s.modality.clone()).collect();
    m.sort();
    m.dedup();
    m
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    /// Train on every other modality, test on the target.
    ZeroShot,
    /// `k` labeled target samples for training and `k` target normals for
    /// the memory bank.
    FewShot { k: usize },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Split {
    pub train: Vec<Sample>,
    pub bank: Vec<Sample>,
    pub test: Vec<Sample>,
}

fn pick(mut candidates: Vec<Sample>, n: usize, seed: u64, label: &str) -> Result<(Vec<Sample>, Vec<Sample>)> {
    if n > candidates.len() {
        return Err(Error::Data(format!(
            "{label}: need {n} samples but only {} are available",
            candidates.len()
        )));
    }
    let mut gen = rng::stream(seed, label);
    candidates.shuffle(&mut gen);
    let rest = candidates.split_off(n);
    candidates.sort_by_key(|a| a.line);
    Ok((candidates, rest))
}

pub fn split(samples: &[Sample], target: &str, protocol: Protocol, seed: u64) -> Result<Split> {
    if !samples.iter().any(|s| s.modality == target) {
        return Err(Error::Data(format!(
            "unknown target modality {target:?}; manifest has {:?}",
            modalities(samples)
        )));
    }
    let (own, other): (Vec<&Sample>, Vec<&Sample>) = samples.iter().partition(|s| s.modality == target);
    match protocol {
        Protocol::ZeroShot => {
            let train: Vec<Sample> = other
                .into_iter()
                .filter(|s| matches!(s.split, None | Some(SplitTag::Train)))
                .cloned()
                .collect();
            if train.is_empty() {
                return Err(Error::Data(format!("no training samples outside {target:?}")));
            }
            let test = own
                .into_iter()
                .filter(|s| matches!(s.split, None | Some(SplitTag::Test)))
                .cloned()
                .collect();
            Ok(Split {
                train,
                bank: Vec::new(),
                test,
            })
        }
        Protocol::FewShot { k } => {
            if k == 0 {
                return Err(Error::Config("few-shot needs k ≥ 1".into()));
            }
            let labeled: Vec<Sample> = own
                .iter()
                .filter(|s| matches!(s.split, None | Some(SplitTag::Train)))
                .map(|s| (*s).clone())
                .collect();
            let (abn, nor): (Vec<Sample>, Vec<Sample>) = labeled.into_iter().partition(|s| s.label == 1);
            let n_abn = k.div_ceil(2);
            let (mut train, _) = pick(abn, n_abn, seed, &format!("few-shot:{target}:anomalous"))?;
            let (train_nor, _) = pick(nor, k - n_abn, seed, &format!("few-shot:{target}:normal"))?;
            train.extend(train_nor);
            train.sort_by_key(|a| a.line);

            // bank candidates: the pool, or untagged normals not used above
            let used: Vec<&Path> = train.iter().map(|s| s.image.as_path()).collect();
            let pool: Vec<Sample> = own
                .iter()
                .filter(|s| s.label == 0)
                .filter(|s| match s.split {
                    Some(SplitTag::Pool) => true,
                    None => !used.contains(&s.image.as_path()),
                    _ => false,
                })
                .map(|s| (*s).clone())
                .collect();
            let (bank, _) = pick(pool, k, seed, &format!("few-shot:{target}:bank"))?;

            let taken: Vec<&Path> = train.iter().chain(&bank).map(|s| s.image.as_path()).collect();
            let test: Vec<Sample> = own
                .into_iter()
                .filter(|s| match s.split {
                    Some(SplitTag::Test) => true,
                    None => !taken.contains(&s.image.as_path()),
                    _ => false,
                })
                .cloned()
                .collect();
            if test.is_empty() {
                return Err(Error::Data(format!("no test samples left for {target:?}")));
            }
            Ok(Split { train, bank, test })
        }
    }
}

/// `h×w×1` intensities in `[0, 1]`.
pub fn image_tensor(img: &GrayImage) -> Result<Tensor> {
    let data = img.pixels.iter().map(|&p| p as f64 / 255.0).collect();
    Ok(Tensor::new_in(&[img.height, img.width, 1], data, DType::F32)?)
}

/// `h×w` binary mask; pixels ≥ 128 are positive.
pub fn mask_tensor(img: &GrayImage) -> Result<Tensor> {
    let data = img.pixels.iter().map(|&p| if p >= 128 { 1.0 } else { 0.0 }).collect();
    Ok(Tensor::new_in(&[img.height, img.width], data, DType::F32)?)
}

/// A sample with its pixels loaded.
#[derive(Debug, Clone)]
pub struct LoadedSample {
    pub sample: Sample,
    pub image: Tensor,
    pub mask: Option<Tensor>,
}

/// Loads image and mask, checking sizes and label/mask agreement.
pub fn load_sample(sample: &Sample, size: usize) -> Result<LoadedSample> {
    let bad = |reason: String| Error::Manifest {
        line: sample.line,
        reason,
    };
    let img = read_pgm(&sample.image)?;
    if img.width != size || img.height != size {
        return Err(bad(format!(
            "image {} is {}×{}, expected {size}×{size}",
            sample.image.display(),
            img.width,
            img.height
        )));
    }
    let mask = match &sample.mask {
        Some(p) => {
            let m = read_pgm(p)?;
            if m.width != img.width || m.height != img.height {
                return Err(bad(format!("mask {} does not match the image size", p.display())));
            }
            let positive = m.pixels.iter().any(|&v| v >= 128);
            if positive != (sample.label == 1) {
                return Err(bad(format!(
                    "label {} disagrees with mask {}",
                    sample.label,
                    p.display()
                )));
            }
            Some(mask_tensor(&m)?)
        }
        None => None,
    };
    Ok(LoadedSample {
        sample: sample.clone(),
        image: image_tensor(&img)?,
        mask,
    })
}
