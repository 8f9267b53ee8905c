//! Frozen ViT-style encoder with four stages and hook points between them.
//!
//! The weights are a pure function of [`BackboneConfig`]: every matrix is a
//! seeded Gaussian draw scaled by `1/sqrt(fan_in)`, positional encodings are
//! sinusoidal, and nothing here ever requires gradients. Gradients still
//! flow *through* the encoder to whatever the hook inserts between stages.

use mvfa_autograd::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const STAGES: usize = 4;
const MLP_RATIO: usize = 4;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub dim: usize,
    pub stages: usize,
    pub blocks_per_stage: usize,
    pub heads: usize,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            image_size: 64,
            patch_size: 8,
            channels: 1,
            dim: 64,
            stages: STAGES,
            blocks_per_stage: 2,
            heads: 4,
            seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.patch_size == 0 || self.image_size == 0 {
            return fail("image_size and patch_size must be positive".into());
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return fail(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.stages != STAGES {
            return fail(format!("the encoder has exactly {STAGES} stages, got {}", self.stages));
        }
        if self.blocks_per_stage == 0 {
            return fail("blocks_per_stage must be at least 1".into());
        }
        if self.heads == 0 || self.dim == 0 || !self.dim.is_multiple_of(self.heads) {
            return fail(format!("dim {} is not divisible by heads {}", self.dim, self.heads));
        }
        if self.dim < 4 {
            return fail("dim must be at least 4 so adapters have a bottleneck".into());
        }
        if !matches!(self.channels, 1 | 3) {
            return fail(format!("channels must be 1 or 3, got {}", self.channels));
        }
        Ok(())
    }

    /// Patches per side.
    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Token count `G`.
    pub fn grid_len(&self) -> usize {
        self.grid_side() * self.grid_side()
    }
}

/// Per-level encoder outputs: `levels[0..3]` are the outputs of stages
/// 1–3 before any hook is applied, `vis` is the output of stage 4.
#[derive(Debug, Clone)]
pub struct StageFeatures {
    pub levels: [Tensor; 3],
    pub vis: Tensor,
}

impl StageFeatures {
    pub fn level(&self, l: usize) -> &Tensor {
        if l < 3 {
            &self.levels[l]
        } else {
            &self.vis
        }
    }
}

#[derive(Debug, Clone)]
struct Head {
    q: Tensor,
    k: Tensor,
    v: Tensor,
    o: Tensor,
}

#[derive(Debug, Clone)]
struct Block {
    ln1_gamma: Tensor,
    ln1_beta: Tensor,
    heads: Vec<Head>,
    ln2_gamma: Tensor,
    ln2_beta: Tensor,
    fc1: Tensor,
    fc2: Tensor,
}

#[derive(Debug, Clone)]
pub struct FrozenBackbone {
    config: BackboneConfig,
    dtype: DType,
    patch_embed: Tensor,
    positions: Tensor,
    blocks: Vec<Block>,
}

/// `G×d` sinusoidal table.
pub fn sinusoidal_positions(tokens: usize, dim: usize) -> Vec<f64> {
    let mut table = vec![0.0; tokens * dim];
    for pos in 0..tokens {
        for i in 0..dim / 2 {
            let freq = 1.0 / 10_000f64.powf(2.0 * i as f64 / dim as f64);
            table[pos * dim + 2 * i] = (pos as f64 * freq).sin();
            table[pos * dim + 2 * i + 1] = (pos as f64 * freq).cos();
        }
    }
    table
}

impl FrozenBackbone {
    pub fn new(config: &BackboneConfig) -> Result<Self> {
        Self::new_in(config, DType::F32)
    }

    pub fn new_in(config: &BackboneConfig, dtype: DType) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let head_dim = d / config.heads;
        let hidden = d * MLP_RATIO;
        let mut gen = rng::stream(config.seed, "backbone");
        let mut matrix = |rows: usize, cols: usize| -> Result<Tensor> {
            let data = rng::normals(&mut gen, rows * cols, 1.0 / (rows as f64).sqrt());
            Ok(Tensor::new_in(&[rows, cols], data, dtype)?)
        };

        let patch_in = config.patch_size * config.patch_size * config.channels;
        let patch_embed = matrix(patch_in, d)?;
        let mut blocks = Vec::with_capacity(STAGES * config.blocks_per_stage);
        for _ in 0..STAGES * config.blocks_per_stage {
            let mut heads = Vec::with_capacity(config.heads);
            for _ in 0..config.heads {
                heads.push(Head {
                    q: matrix(d, head_dim)?,
                    k: matrix(d, head_dim)?,
                    v: matrix(d, head_dim)?,
                    o: matrix(head_dim, d)?,
                });
            }
            blocks.push(Block {
                ln1_gamma: Tensor::full(&[d], 1.0, dtype)?,
                ln1_beta: Tensor::zeros(&[d], dtype)?,
                heads,
                ln2_gamma: Tensor::full(&[d], 1.0, dtype)?,
                ln2_beta: Tensor::zeros(&[d], dtype)?,
                fc1: matrix(d, hidden)?,
                fc2: matrix(hidden, d)?,
            });
        }
        let positions = Tensor::new_in(
            &[config.grid_len(), d],
            sinusoidal_positions(config.grid_len(), d),
            dtype,
        )?;
        Ok(FrozenBackbone {
            config: config.clone(),
            dtype,
            patch_embed,
            positions,
            blocks,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// Every weight tensor, in a fixed order.
    pub fn weights(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.patch_embed, &self.positions];
        for b in &self.blocks {
            out.extend([&b.ln1_gamma, &b.ln1_beta]);
            for h in &b.heads {
                out.extend([&h.q, &h.k, &h.v, &h.o]);
            }
            out.extend([&b.ln2_gamma, &b.ln2_beta, &b.fc1, &b.fc2]);
        }
        out
    }

    /// Splits an `h×w×c` image in `[0, 1]` into standardized, row-major
    /// `G × (p·p·c)` patch rows.
    pub fn patchify(&self, image: &Tensor) -> Result<Tensor> {
        let cfg = &self.config;
        let (size, c, p) = (cfg.image_size, cfg.channels, cfg.patch_size);
        if image.shape() != [size, size, c] {
            return Err(Error::Contract(format!(
                "image shape {:?} does not match the encoder input {size}×{size}×{c}",
                image.shape()
            )));
        }
        let side = cfg.grid_side();
        let x = image.data();
        let mut rows = Vec::with_capacity(size * size * c);
        for py in 0..side {
            for px in 0..side {
                for dy in 0..p {
                    for dx in 0..p {
                        let base = ((py * p + dy) * size + px * p + dx) * c;
                        rows.extend(x[base..base + c].iter().map(|v| (v - 0.5) / 0.25));
                    }
                }
            }
        }
        Ok(Tensor::new_in(&[side * side, p * p * c], rows, self.dtype)?)
    }

    fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
        Ok(x.layer_norm_rows(LN_EPS)?.mul_row(gamma)?.add_row(beta)?)
    }

    fn block(&self, b: &Block, x: &Tensor) -> Result<Tensor> {
        let scale = 1.0 / ((self.config.dim / self.config.heads) as f64).sqrt();
        let h = Self::layer_norm(x, &b.ln1_gamma, &b.ln1_beta)?;
        let mut attn: Option<Tensor> = None;
        for head in &b.heads {
            let q = h.matmul(&head.q)?;
            let k = h.matmul(&head.k)?;
            let v = h.matmul(&head.v)?;
            let weights = q.matmul(&k.transpose()?)?.scale(scale).softmax_rows()?;
            let out = weights.matmul(&v)?.matmul(&head.o)?;
            attn = Some(match attn {
                None => out,
                Some(acc) => acc.add(&out)?,
            });
        }
        let x = x.add(&attn.expect("at least one head"))?;
        let h = Self::layer_norm(&x, &b.ln2_gamma, &b.ln2_beta)?;
        let mlp = h.matmul(&b.fc1)?.gelu().matmul(&b.fc2)?;
        Ok(x.add(&mlp)?)
    }

    fn run_stage(&self, stage: usize, mut x: Tensor) -> Result<Tensor> {
        let n = self.config.blocks_per_stage;
        for b in &self.blocks[stage * n..(stage + 1) * n] {
            x = self.block(b, &x)?;
        }
        Ok(x)
    }

    /// Runs all four stages. After stage `l` (0-based, `l < 3`) the hook
    /// receives the raw stage output and returns the tensor fed to stage
    /// `l + 1`. The returned features are the raw (pre-hook) stage outputs.
    pub fn forward_with_hooks<H>(&self, image: &Tensor, mut hook: H) -> Result<StageFeatures>
    where
        H: FnMut(usize, &Tensor) -> Result<Tensor>,
    {
        let tokens = self.patchify(image)?;
        let mut x = tokens.matmul(&self.patch_embed)?.add(&self.positions)?;
        let expected = [self.config.grid_len(), self.config.dim];
        let mut levels = Vec::with_capacity(3);
        for stage in 0..3 {
            let f = self.run_stage(stage, x)?;
            let next = hook(stage, &f)?;
            if next.shape() != expected {
                return Err(Error::Contract(format!(
                    "hook at level {} returned shape {:?}, expected {expected:?}",
                    stage + 1,
                    next.shape()
                )));
            }
            levels.push(f);
            x = next;
        }
        let vis = self.run_stage(3, x)?;
        let levels: [Tensor; 3] = levels.try_into().expect("three levels");
        Ok(StageFeatures { levels, vis })
    }

    /// Plain frozen forward pass.
    pub fn forward(&self, image: &Tensor) -> Result<StageFeatures> {
        self.forward_with_hooks(image, |_, f| Ok(f.clone()))
    }

    /// Runs one stage on an arbitrary token matrix; exposed for tests that
    /// recompute later stages from modified inputs.
    pub fn stage(&self, stage: usize, x: &Tensor) -> Result<Tensor> {
        if stage >= STAGES {
            return Err(Error::Contract(format!("stage {stage} out of range")));
        }
        self.run_stage(stage, x.clone())
    }
}
