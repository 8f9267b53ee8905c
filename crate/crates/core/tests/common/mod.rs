//! Oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use std::sync::OnceLock;

use mvfa_autograd::gradcheck::{central_difference, compare};
use mvfa_autograd::{DType, Tensor};
use mvfa_core::adaptation::{adapt_forward, ModelOptions, MvfaParams};
use mvfa_core::backbone::{BackboneConfig, FrozenBackbone};
use mvfa_core::data::{gen_dataset, Sample, SynthConfig};
use mvfa_core::objective::{total_loss, LevelMask, LossWeights};
use mvfa_core::rng;
use mvfa_core::textbank::{build_text_features_in, PromptSet};
use rand::Rng;

/// Pairwise win counting, ties worth one half.
pub fn brute_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

pub fn unit(v: &[f64]) -> Vec<f64> {
    let mut sq = 0.0;
    for x in v {
        sq += x * x;
    }
    let norm = sq.sqrt();
    v.iter().map(|x| x / norm).collect()
}

/// `1 − max_j cos(q_i, b_j)` by an explicit double loop over unit rows.
pub fn nn_oracle(query: &[f64], bank: &[f64], d: usize) -> Vec<f64> {
    let bank_rows: Vec<Vec<f64>> = bank.chunks(d).map(unit).collect();
    query
        .chunks(d)
        .map(|q| {
            let q = unit(q);
            let mut best = f64::NEG_INFINITY;
            for b in &bank_rows {
                let mut dot = 0.0;
                for k in 0..d {
                    dot += q[k] * b[k];
                }
                best = best.max(dot);
            }
            1.0 - best
        })
        .collect()
}

/// Image 8, patch 4: a 2×2 grid (G = 4) of width 8.
pub fn toy_config() -> BackboneConfig {
    BackboneConfig {
        image_size: 8,
        patch_size: 4,
        channels: 1,
        dim: 8,
        stages: 4,
        blocks_per_stage: 1,
        heads: 2,
        seed: 11,
    }
}

pub fn random_image(seed: u64, size: usize, dtype: DType) -> Tensor {
    let mut gen = rng::stream(seed, "image");
    let v = (0..size * size).map(|_| gen.random_range(0.0..1.0)).collect();
    Tensor::new_in(&[size, size, 1], v, dtype).unwrap()
}

/// Binary mask with a filled square in the upper-left quadrant.
pub fn square_mask(size: usize, dtype: DType) -> Tensor {
    let v = (0..size * size)
        .map(|i| {
            let (r, c) = (i / size, i % size);
            if r >= 1 && r < size / 2 + 1 && c >= 1 && c < size / 2 { 1.0 } else { 0.0 }
        })
        .collect();
    Tensor::new_in(&[size, size], v, dtype).unwrap()
}

/// Replaces every parameter with seeded values of the given scale so that
/// zero-initialized maps carry gradient too.
pub fn randomized(params: &MvfaParams, seed: u64, scale: f64) -> MvfaParams {
    let mut i = 0u64;
    params
        .try_map(|t| {
            i += 1;
            let mut gen = rng::stream(seed, &format!("param{i}"));
            let v = (0..t.numel()).map(|_| gen.random_range(-scale..scale)).collect();
            Ok(t.with_data(v)?)
        })
        .unwrap()
}

pub fn text64(dim: usize) -> Tensor {
    build_text_features_in(&PromptSet::default(), "toy", 5, dim, DType::F64)
        .unwrap()
        .f_text
}

pub const GRAD_STEP: f64 = 1e-3;
pub const GRAD_REL_TOL: f64 = 1e-4;
/// Entry-wise floor for near-zero gradients, the same as the op suite.
pub const GRAD_ABS_TOL: f64 = 1e-6;

/// `‖a − n‖ / ‖n‖` over the whole gradient.
pub fn normwise_error(a: &[f64], n: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(n).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let norm: f64 = n.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / norm
}

/// Analytic L_adapt gradient of every parameter entry against central
/// differences in 64-bit arithmetic. Returns the norm-wise relative error.
pub fn l_adapt_gradcheck(opts: &ModelOptions, seed: u64, mask: bool) -> Result<f64, String> {
    let (a, n) = l_adapt_grads(opts, seed, mask, GRAD_STEP);
    if let Err(d) = compare(&a, &n, GRAD_REL_TOL, GRAD_ABS_TOL) {
        return Err(format!("entry mismatch: {d:?}"));
    }
    let rel = normwise_error(&a, &n);
    if !(rel <= GRAD_REL_TOL) {
        return Err(format!("norm-wise relative error {rel:e}"));
    }
    Ok(rel)
}

/// Analytic and numeric gradients, flattened in parameter order.
pub fn l_adapt_grads(opts: &ModelOptions, seed: u64, mask: bool, step: f64) -> (Vec<f64>, Vec<f64>) {
    let cfg = toy_config();
    let backbone = FrozenBackbone::new_in(&cfg, DType::F64).unwrap();
    let base = MvfaParams::init_in(cfg.dim, opts, seed, DType::F64).unwrap();
    let params = randomized(&base, seed, 0.5);
    let image = random_image(seed, cfg.image_size, DType::F64);
    let text = text64(cfg.dim);
    let m = square_mask(cfg.image_size, DType::F64);
    let mask = mask.then_some(&m);
    let weights = LossWeights::default();
    let levels = LevelMask::all();
    let tau = 0.07;

    let loss_of = |p: &MvfaParams| {
        let (f, _) = adapt_forward(&backbone, p, &image).unwrap();
        total_loss(&f, &text, 1, mask, &weights, tau, &levels).unwrap()
    };
    let grads = loss_of(&params).backward().unwrap();
    let tensors: Vec<Tensor> = params.tensors().into_iter().cloned().collect();
    let mut analytic = Vec::new();
    let mut x = Vec::new();
    for t in &tensors {
        analytic.extend_from_slice(grads.get(t).unwrap_or(&vec![0.0; t.numel()]));
        x.extend_from_slice(t.data());
    }
    let rebuild = |v: &[f64]| {
        let mut off = 0;
        let named = tensors
            .iter()
            .map(|t| {
                let n = t.numel();
                let out = Tensor::parameter(t.name().unwrap(), t.shape(), v[off..off + n].to_vec(), DType::F64).unwrap();
                off += n;
                out
            })
            .collect();
        MvfaParams::from_named(named, params.gamma, params.feed).unwrap()
    };
    let numeric = central_difference(|v| loss_of(&rebuild(v)).item().unwrap(), &x, step);
    (analytic, numeric)
}

pub struct Dataset {
    pub dir: tempfile::TempDir,
    pub samples: Vec<Sample>,
}

/// The default synthetic dataset, generated once per test binary.
pub fn default_dataset() -> &'static Dataset {
    static DATA: OnceLock<Dataset> = OnceLock::new();
    DATA.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let samples = gen_dataset(&SynthConfig::default(), dir.path()).unwrap();
        Dataset { dir, samples }
    })
}

/// A small dataset and matching configuration for fast pipeline runs.
pub fn tiny_config() -> mvfa_core::config::RunConfig {
    let mut cfg = mvfa_core::config::RunConfig::default();
    cfg.backbone = BackboneConfig {
        image_size: 16,
        patch_size: 4,
        channels: 1,
        dim: 16,
        stages: 4,
        blocks_per_stage: 1,
        heads: 2,
        seed: 1,
    };
    cfg.data.image_size = 16;
    cfg.data.defects.radius_min = 2.0;
    cfg.data.defects.radius_max = 4.0;
    cfg.data.normals = 6;
    cfg.data.labeled = 8;
    cfg.data.test = 8;
    cfg.inference.k = 2;
    cfg.train.epochs = 2;
    cfg.train.batch_size = 4;
    cfg
}
