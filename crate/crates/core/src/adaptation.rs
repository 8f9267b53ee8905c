//! Residual bottleneck adapters on encoder levels 1–3 and the linear
//! projector on level 4.
//!
//! At each of the first three levels a dual adapter produces a
//! classification-oriented and a segmentation-oriented feature, both mixed
//! residually with the raw stage output:
//!
//! ```text
//! A(F)      = relu(F · W1) · W2
//! F_branch  = γ · A_branch(F) + (1 − γ) · F
//! ```
//!
//! The tensor handed to the next encoder stage is the same residual mix
//! applied to the branch average (or one branch, see [`FeedMode`]), so the
//! adapters of earlier levels receive gradients through every later stage.
//! Level 4 projects the final encoder output with `W_cls` and `W_seg`.

use std::collections::BTreeMap;

use mvfa_autograd::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::backbone::{FrozenBackbone, StageFeatures};
use crate::error::{Error, Result};
use crate::rng;

pub const LEVELS: usize = 4;
pub const DEFAULT_GAMMA: f64 = 0.1;
pub const DEFAULT_TAU: f64 = 0.07;

/// Which adapted output enters the next encoder stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeedMode {
    #[default]
    Mean,
    Cls,
    Seg,
}

/// Adapters inserted into the encoder, or isolated per-level linear
/// projectors that leave the encoder untouched.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    #[default]
    Adapter,
    Projector,
}

/// Separate cls/seg modules per level, or one module shared by both.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdapterLayout {
    #[default]
    Dual,
    Single,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelOptions {
    pub gamma: f64,
    pub architecture: Architecture,
    pub layout: AdapterLayout,
    pub feed: FeedMode,
}

impl Default for ModelOptions {
    fn default() -> Self {
        ModelOptions {
            gamma: DEFAULT_GAMMA,
            architecture: Architecture::Adapter,
            layout: AdapterLayout::Dual,
            feed: FeedMode::Mean,
        }
    }
}

/// Gamma is kept at checkpoint precision so a saved model reloads exactly.
fn stored_gamma(gamma: f64) -> f64 {
    gamma as f32 as f64
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Config(format!("residual ratio {gamma} is outside [0, 1]")));
    }
    Ok(())
}

/// Two-layer bottleneck: `d → r → d`.
#[derive(Debug, Clone)]
pub struct Adapter {
    pub w1: Tensor,
    pub w2: Tensor,
}

impl Adapter {
    /// `w1` ~ N(0, 1/d), `w2` = 0, so a fresh adapter outputs zeros.
    pub fn init(name: &str, dim: usize, bottleneck: usize, seed: u64, dtype: DType) -> Result<Self> {
        let mut gen = rng::stream(seed, name);
        let w1 = rng::normals(&mut gen, dim * bottleneck, 1.0 / (dim as f64).sqrt());
        Ok(Adapter {
            w1: Tensor::parameter(format!("{name}.w1"), &[dim, bottleneck], w1, dtype)?,
            w2: Tensor::parameter(
                format!("{name}.w2"),
                &[bottleneck, dim],
                vec![0.0; bottleneck * dim],
                dtype,
            )?,
        })
    }

    pub fn param_count(&self) -> usize {
        self.w1.numel() + self.w2.numel()
    }
}

#[derive(Debug, Clone)]
pub struct DualAdapter {
    pub cls: Adapter,
    pub seg: Adapter,
}

/// Linear maps into the text space. `w_seg` is absent when one map serves
/// both branches.
#[derive(Debug, Clone)]
pub struct Projector {
    pub w_cls: Tensor,
    pub w_seg: Option<Tensor>,
}

impl Projector {
    /// Identity-initialized, so an untrained projector passes features
    /// through unchanged.
    fn init(prefix: &str, dim: usize, layout: AdapterLayout, dtype: DType) -> Result<Self> {
        let eye: Vec<f64> = (0..dim * dim)
            .map(|i| if i / dim == i % dim { 1.0 } else { 0.0 })
            .collect();
        let w = |branch: &str| {
            Tensor::parameter(format!("{prefix}.{branch}.proj"), &[dim, dim], eye.clone(), dtype)
        };
        Ok(match layout {
            AdapterLayout::Dual => Projector {
                w_cls: w("cls")?,
                w_seg: Some(w("seg")?),
            },
            AdapterLayout::Single => Projector {
                w_cls: w("shared")?,
                w_seg: None,
            },
        })
    }
}

/// Trainable module attached to one of the first three levels.
#[derive(Debug, Clone)]
pub enum LevelModule {
    Dual(DualAdapter),
    Single(Adapter),
    Projector(Projector),
}

/// The complete trainable state together with the options that shape the
/// forward pass.
#[derive(Debug, Clone)]
pub struct MvfaParams {
    pub levels: Vec<LevelModule>,
    pub proj: Projector,
    pub gamma: f64,
    pub feed: FeedMode,
}

/// Bottleneck width used for every adapter: `d / 4`.
pub fn bottleneck_width(dim: usize) -> usize {
    (dim / 4).max(1)
}

impl MvfaParams {
    pub fn init(dim: usize, options: &ModelOptions, seed: u64) -> Result<Self> {
        Self::init_in(dim, options, seed, DType::F32)
    }

    pub fn init_in(dim: usize, options: &ModelOptions, seed: u64, dtype: DType) -> Result<Self> {
        check_gamma(options.gamma)?;
        let r = bottleneck_width(dim);
        if r >= dim {
            return Err(Error::Config(format!("feature width {dim} is too small for a bottleneck")));
        }
        let mut levels = Vec::with_capacity(3);
        for l in 1..=3 {
            let prefix = format!("level{l}");
            let module = match (options.architecture, options.layout) {
                (Architecture::Adapter, AdapterLayout::Dual) => LevelModule::Dual(DualAdapter {
                    cls: Adapter::init(&format!("{prefix}.cls"), dim, r, seed, dtype)?,
                    seg: Adapter::init(&format!("{prefix}.seg"), dim, r, seed, dtype)?,
                }),
                (Architecture::Adapter, AdapterLayout::Single) => {
                    LevelModule::Single(Adapter::init(&format!("{prefix}.shared"), dim, r, seed, dtype)?)
                }
                (Architecture::Projector, layout) => {
                    LevelModule::Projector(Projector::init(&prefix, dim, layout, dtype)?)
                }
            };
            levels.push(module);
        }
        Ok(MvfaParams {
            levels,
            proj: Projector::init("level4", dim, options.layout, dtype)?,
            gamma: stored_gamma(options.gamma),
            feed: options.feed,
        })
    }

    pub fn architecture(&self) -> Architecture {
        match self.levels.first() {
            Some(LevelModule::Projector(_)) => Architecture::Projector,
            _ => Architecture::Adapter,
        }
    }

    pub fn layout(&self) -> AdapterLayout {
        if self.proj.w_seg.is_some() {
            AdapterLayout::Dual
        } else {
            AdapterLayout::Single
        }
    }

    pub fn options(&self) -> ModelOptions {
        ModelOptions {
            gamma: self.gamma,
            architecture: self.architecture(),
            layout: self.layout(),
            feed: self.feed,
        }
    }

    pub fn dim(&self) -> usize {
        self.proj.w_cls.shape()[0]
    }

    /// All trainable tensors in a fixed order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for m in &self.levels {
            match m {
                LevelModule::Dual(d) => out.extend([&d.cls.w1, &d.cls.w2, &d.seg.w1, &d.seg.w2]),
                LevelModule::Single(a) => out.extend([&a.w1, &a.w2]),
                LevelModule::Projector(p) => {
                    out.push(&p.w_cls);
                    out.extend(p.w_seg.as_ref());
                }
            }
        }
        out.push(&self.proj.w_cls);
        out.extend(self.proj.w_seg.as_ref());
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    /// Rebuilds the parameter set with every tensor replaced by `f(tensor)`,
    /// visiting tensors in the order of [`MvfaParams::tensors`].
    pub fn try_map<F>(&self, mut f: F) -> Result<Self>
    where
        F: FnMut(&Tensor) -> Result<Tensor>,
    {
        fn adapter<F: FnMut(&Tensor) -> Result<Tensor>>(a: &Adapter, f: &mut F) -> Result<Adapter> {
            Ok(Adapter {
                w1: f(&a.w1)?,
                w2: f(&a.w2)?,
            })
        }
        fn projector<F: FnMut(&Tensor) -> Result<Tensor>>(p: &Projector, f: &mut F) -> Result<Projector> {
            let w_cls = f(&p.w_cls)?;
            let w_seg = match &p.w_seg {
                Some(w) => Some(f(w)?),
                None => None,
            };
            Ok(Projector { w_cls, w_seg })
        }
        let mut levels = Vec::with_capacity(self.levels.len());
        for m in &self.levels {
            levels.push(match m {
                LevelModule::Dual(d) => LevelModule::Dual(DualAdapter {
                    cls: adapter(&d.cls, &mut f)?,
                    seg: adapter(&d.seg, &mut f)?,
                }),
                LevelModule::Single(a) => LevelModule::Single(adapter(a, &mut f)?),
                LevelModule::Projector(p) => LevelModule::Projector(projector(p, &mut f)?),
            });
        }
        Ok(MvfaParams {
            levels,
            proj: projector(&self.proj, &mut f)?,
            gamma: self.gamma,
            feed: self.feed,
        })
    }

    /// Constant copies of every tensor; forward passes through the result
    /// record no graph.
    pub fn frozen(&self) -> Self {
        self.try_map(|t| Ok(t.detach())).expect("detach is infallible")
    }

    /// Reassembles parameters from named tensors, as stored in a checkpoint.
    /// Architecture and layout follow from the names present.
    pub fn from_named(named: Vec<Tensor>, gamma: f64, feed: FeedMode) -> Result<Self> {
        check_gamma(gamma)?;
        let mut map: BTreeMap<String, Tensor> = BTreeMap::new();
        for t in named {
            let name = t
                .name()
                .ok_or_else(|| Error::Contract("unnamed parameter tensor".into()))?
                .to_string();
            if map.insert(name.clone(), t).is_some() {
                return Err(Error::Contract(format!("duplicate parameter tensor `{name}`")));
            }
        }
        let layout = if map.contains_key("level4.seg.proj") {
            AdapterLayout::Dual
        } else {
            AdapterLayout::Single
        };
        let projector_arch =
            map.contains_key("level1.cls.proj") || map.contains_key("level1.shared.proj");
        let mut levels = Vec::with_capacity(3);
        for l in 1..=3 {
            let prefix = format!("level{l}");
            levels.push(match (projector_arch, layout) {
                (true, _) => LevelModule::Projector(take_projector(&mut map, &prefix, layout)?),
                (false, AdapterLayout::Dual) => LevelModule::Dual(DualAdapter {
                    cls: take_adapter(&mut map, &format!("{prefix}.cls"))?,
                    seg: take_adapter(&mut map, &format!("{prefix}.seg"))?,
                }),
                (false, AdapterLayout::Single) => {
                    LevelModule::Single(take_adapter(&mut map, &format!("{prefix}.shared"))?)
                }
            });
        }
        let proj = take_projector(&mut map, "level4", layout)?;
        if let Some(extra) = map.keys().next() {
            return Err(Error::Contract(format!("unexpected parameter tensor `{extra}`")));
        }
        let params = MvfaParams {
            levels,
            proj,
            gamma: stored_gamma(gamma),
            feed,
        };
        params.check_shapes()?;
        Ok(params)
    }

    fn check_shapes(&self) -> Result<()> {
        let d = self.proj.w_cls.shape().first().copied().unwrap_or(0);
        for t in self.tensors() {
            let name = t.name().unwrap_or("?");
            let ok = match t.shape() {
                [a, b] if name.ends_with(".proj") => *a == d && *b == d,
                [a, r] if name.ends_with(".w1") => *a == d && *r > 0,
                [r, b] if name.ends_with(".w2") => *b == d && *r > 0,
                _ => false,
            };
            if !ok {
                return Err(Error::Contract(format!(
                    "parameter `{name}` has shape {:?} for feature width {d}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}

fn take(map: &mut BTreeMap<String, Tensor>, name: String) -> Result<Tensor> {
    let t = map
        .remove(&name)
        .ok_or_else(|| Error::Contract(format!("missing parameter tensor `{name}`")))?;
    Ok(Tensor::parameter(name, t.shape(), t.data().to_vec(), t.dtype())?)
}

fn take_adapter(map: &mut BTreeMap<String, Tensor>, prefix: &str) -> Result<Adapter> {
    Ok(Adapter {
        w1: take(map, format!("{prefix}.w1"))?,
        w2: take(map, format!("{prefix}.w2"))?,
    })
}

fn take_projector(
    map: &mut BTreeMap<String, Tensor>,
    prefix: &str,
    layout: AdapterLayout,
) -> Result<Projector> {
    Ok(match layout {
        AdapterLayout::Dual => Projector {
            w_cls: take(map, format!("{prefix}.cls.proj"))?,
            w_seg: Some(take(map, format!("{prefix}.seg.proj"))?),
        },
        AdapterLayout::Single => Projector {
            w_cls: take(map, format!("{prefix}.shared.proj"))?,
            w_seg: None,
        },
    })
}

/// Projected features for all four levels. For the single layout `seg`
/// holds the same tensors as `cls`.
#[derive(Debug, Clone)]
pub struct AdaptedFeatures {
    pub cls: Vec<Tensor>,
    pub seg: Vec<Tensor>,
}

/// `relu(F · W1) · W2`
pub fn apply_adapter(f: &Tensor, adapter: &Adapter) -> Result<Tensor> {
    Ok(f.matmul(&adapter.w1)?.relu().matmul(&adapter.w2)?)
}

/// `γ · adapted + (1 − γ) · f`
pub fn residual_mix(adapted: &Tensor, f: &Tensor, gamma: f64) -> Result<Tensor> {
    check_gamma(gamma)?;
    Ok(adapted.scale(gamma).add(&f.scale(1.0 - gamma))?)
}

/// Applies one level module to the raw stage output and returns the
/// `(cls, seg, next)` triple, `next` being the input of the next stage.
fn level_outputs(
    module: &LevelModule,
    f: &Tensor,
    gamma: f64,
    feed: FeedMode,
) -> Result<(Tensor, Tensor, Tensor)> {
    match module {
        LevelModule::Dual(d) => {
            let cls = residual_mix(&apply_adapter(f, &d.cls)?, f, gamma)?;
            let seg = residual_mix(&apply_adapter(f, &d.seg)?, f, gamma)?;
            let next = match feed {
                FeedMode::Mean => cls.add(&seg)?.scale(0.5),
                FeedMode::Cls => cls.clone(),
                FeedMode::Seg => seg.clone(),
            };
            Ok((cls, seg, next))
        }
        LevelModule::Single(a) => {
            let out = residual_mix(&apply_adapter(f, a)?, f, gamma)?;
            Ok((out.clone(), out.clone(), out))
        }
        LevelModule::Projector(p) => {
            let (cls, seg) = project(f, p)?;
            Ok((cls, seg, f.clone()))
        }
    }
}

fn project(f: &Tensor, p: &Projector) -> Result<(Tensor, Tensor)> {
    let cls = f.matmul(&p.w_cls)?;
    let seg = match &p.w_seg {
        Some(w) => f.matmul(w)?,
        None => cls.clone(),
    };
    Ok((cls, seg))
}

/// Forward pass of the frozen encoder with the trainable modules attached.
/// Returns the adapted features and the raw stage outputs.
pub fn adapt_forward(
    backbone: &FrozenBackbone,
    params: &MvfaParams,
    image: &Tensor,
) -> Result<(AdaptedFeatures, StageFeatures)> {
    if params.dim() != backbone.config().dim {
        return Err(Error::Contract(format!(
            "parameters have width {}, backbone has {}",
            params.dim(),
            backbone.config().dim
        )));
    }
    if params.levels.len() != 3 {
        return Err(Error::Contract(format!(
            "expected 3 level modules, found {}",
            params.levels.len()
        )));
    }
    let mut cls = Vec::with_capacity(LEVELS);
    let mut seg = Vec::with_capacity(LEVELS);
    let raw = backbone.forward_with_hooks(image, |stage, f| {
        let (c, s, next) = level_outputs(&params.levels[stage], f, params.gamma, params.feed)?;
        cls.push(c);
        seg.push(s);
        Ok(next)
    })?;
    let (c4, s4) = project(&raw.vis, &params.proj)?;
    cls.push(c4);
    seg.push(s4);
    Ok((AdaptedFeatures { cls, seg }, raw))
}

/// `normalize(F) · normalize(T)ᵀ / τ`, an `N×K` logit matrix.
pub fn similarity_logits(features: &Tensor, text: &Tensor, tau: f64) -> Result<Tensor> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Config(format!("temperature {tau} must be positive")));
    }
    let f = features.l2_normalize_rows()?;
    let t = text.l2_normalize_rows()?;
    Ok(f.matmul(&t.transpose()?)?.scale(1.0 / tau))
}

/// Per-row anomaly probability: the softmax weight of column 1 (abnormal)
/// against column 0 (normal). Returns an `N×1` column.
pub fn anomaly_probability(features: &Tensor, text: &Tensor, tau: f64) -> Result<Tensor> {
    if text.shape().first() != Some(&2) {
        return Err(Error::Contract(format!(
            "text embeddings must have two rows (normal, abnormal), got shape {:?}",
            text.shape()
        )));
    }
    Ok(similarity_logits(features, text, tau)?.softmax_rows()?.select_col(1)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new_in(shape, v.to_vec(), DType::F64).unwrap()
    }

    fn small_backbone() -> FrozenBackbone {
        let config = BackboneConfig {
            image_size: 16,
            patch_size: 4,
            channels: 1,
            dim: 16,
            stages: 4,
            blocks_per_stage: 1,
            heads: 2,
            seed: 3,
        };
        FrozenBackbone::new_in(&config, DType::F64).unwrap()
    }

    fn image(seed: u64) -> Tensor {
        let mut g = rng::stream(seed, "img");
        let v = rng::normals(&mut g, 256, 0.2).into_iter().map(|x| 0.5 + x).collect();
        Tensor::new_in(&[16, 16, 1], v, DType::F64).unwrap()
    }

    #[test]
    fn adapter_matches_hand_computation() {
        let f = t(&[2, 4], &[1.0, 0.0, -1.0, 2.0, 0.5, 1.0, 0.0, -1.0]);
        let a = Adapter {
            w1: t(&[4, 2], &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, -1.0]),
            w2: t(&[2, 4], &[1.0, 2.0, 0.0, -1.0, 0.0, 1.0, 1.0, 0.0]),
        };
        let out = apply_adapter(&f, &a).unwrap();
        assert_eq!(out.data(), &[0.0, 0.0, 0.0, 0.0, 0.5, 3.0, 2.0, -0.5]);
    }

    #[test]
    fn fresh_adapter_outputs_zero() {
        let a = Adapter::init("x", 8, 2, 1, DType::F64).unwrap();
        let f = t(&[3, 8], &(0..24).map(|i| i as f64 - 11.0).collect::<Vec<_>>());
        assert!(apply_adapter(&f, &a).unwrap().data().iter().all(|&v| v == 0.0));
        let zero = Tensor::zeros(&[3, 8], DType::F64).unwrap();
        let b = Adapter {
            w1: a.w1.clone(),
            w2: Tensor::full(&[2, 8], 0.3, DType::F64).unwrap(),
        };
        assert!(apply_adapter(&zero, &b).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn residual_mix_limits() {
        let f = t(&[1, 3], &[1.0, -2.0, 4.0]);
        let a = t(&[1, 3], &[10.0, 20.0, 30.0]);
        assert_eq!(residual_mix(&a, &f, 0.0).unwrap().data(), f.data());
        assert_eq!(residual_mix(&a, &f, 1.0).unwrap().data(), a.data());
        let zero = Tensor::zeros(&[1, 3], DType::F64).unwrap();
        let mixed = residual_mix(&zero, &f, 0.1).unwrap();
        for (m, x) in mixed.data().iter().zip(f.data()) {
            assert!((m - 0.9 * x).abs() < 1e-15);
        }
        assert!(matches!(residual_mix(&a, &f, 1.5), Err(Error::Config(_))));
        assert!(matches!(residual_mix(&a, &f, -0.1), Err(Error::Config(_))));
    }

    #[test]
    fn similarity_and_probability() {
        // cos to normal 0.9, cos to abnormal 1.0
        let text = t(&[2, 2], &[0.9, (1.0f64 - 0.81).sqrt(), 2.0, 0.0]);
        let f = t(&[1, 2], &[3.0, 0.0]);
        let logits = similarity_logits(&f, &text, 0.07).unwrap();
        assert!((logits.at(0, 0) - 0.9 / 0.07).abs() < 1e-12);
        assert!((logits.at(0, 1) - 1.0 / 0.07).abs() < 1e-12);
        let p = anomaly_probability(&f, &text, 0.07).unwrap();
        assert_eq!(p.shape(), &[1, 1]);
        assert!((p.data()[0] - 0.806_68).abs() < 1e-5);
        assert!(similarity_logits(&f, &text, 0.0).is_err());
        let three = t(&[3, 2], &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        assert!(anomaly_probability(&f, &three, 0.07).is_err());
    }

    #[test]
    fn parameter_counts() {
        let d = 16;
        let r = bottleneck_width(d);
        let p = MvfaParams::init(d, &ModelOptions::default(), 0).unwrap();
        assert_eq!(p.tensors().len(), 3 * 4 + 2);
        assert_eq!(p.param_count(), 3 * 2 * (2 * d * r) + 2 * d * d);
        let single = ModelOptions {
            layout: AdapterLayout::Single,
            ..Default::default()
        };
        let p = MvfaParams::init(d, &single, 0).unwrap();
        assert_eq!(p.param_count(), 3 * (2 * d * r) + d * d);
        let proj = ModelOptions {
            architecture: Architecture::Projector,
            ..Default::default()
        };
        let p = MvfaParams::init(d, &proj, 0).unwrap();
        assert_eq!(p.param_count(), 4 * 2 * d * d);
        assert!(p.tensors().iter().all(|t| t.requires_grad()));
    }

    #[test]
    fn untrained_adapters_scale_the_features() {
        // zero second layer: every adapted level equals (1 − γ)·F
        let bb = small_backbone();
        let p = MvfaParams::init_in(16, &ModelOptions::default(), 0, DType::F64).unwrap();
        let img = image(1);
        let (adapted, raw) = adapt_forward(&bb, &p, &img).unwrap();
        assert_eq!(adapted.cls.len(), LEVELS);
        for l in 0..3 {
            for (a, f) in adapted.cls[l].data().iter().zip(raw.levels[l].data()) {
                assert!((a - 0.9 * f).abs() < 1e-6);
            }
            assert!(adapted.cls[l].bit_eq(&adapted.seg[l]));
        }
        // identity projector on level 4
        assert_eq!(adapted.cls[3].data(), raw.vis.data());
        // the next stage consumed the mixed features
        let mixed = raw.levels[0].scale(1.0 - p.gamma);
        let expected = bb.stage(1, &adapted.cls[0]).unwrap();
        assert!(adapted.cls[0].data().iter().zip(mixed.data()).all(|(a, b)| (a - b).abs() < 1e-12));
        assert_eq!(expected.data(), raw.levels[1].data());
    }

    #[test]
    fn projector_architecture_leaves_encoder_untouched() {
        let bb = small_backbone();
        let opts = ModelOptions {
            architecture: Architecture::Projector,
            ..Default::default()
        };
        let p = MvfaParams::init_in(16, &opts, 0, DType::F64).unwrap();
        let img = image(2);
        let (adapted, raw) = adapt_forward(&bb, &p, &img).unwrap();
        let plain = bb.forward(&img).unwrap();
        assert!(raw.vis.bit_eq(&plain.vis));
        for l in 0..3 {
            assert_eq!(adapted.cls[l].data(), plain.levels[l].data());
        }
    }

    #[test]
    fn early_adapters_get_gradient_from_the_last_level() {
        let bb = small_backbone();
        let p = MvfaParams::init_in(16, &ModelOptions::default(), 0, DType::F64).unwrap();
        // non-zero second layers so first layers also receive gradient
        let p = p
            .try_map(|t| {
                let v = t.data().iter().enumerate().map(|(i, x)| x + 0.01 * ((i % 7) as f64 - 3.0)).collect();
                Ok(Tensor::parameter(t.name().unwrap(), t.shape(), v, DType::F64)?)
            })
            .unwrap();
        let (adapted, _) = adapt_forward(&bb, &p, &image(3)).unwrap();
        let loss = adapted.cls[3].mul(&adapted.cls[3]).unwrap().sum();
        let g = loss.backward().unwrap();
        for name in ["level1.cls.w1", "level1.cls.w2", "level1.seg.w2", "level3.seg.w1"] {
            let t = p.tensors().into_iter().find(|t| t.name() == Some(name)).unwrap();
            let grad = g.get(t).unwrap_or_else(|| panic!("{name} has no gradient"));
            assert!(grad.iter().any(|v| v.abs() > 0.0), "{name}");
        }
        assert!(!g.contains(&p.proj.w_seg.clone().unwrap()));
    }

    #[test]
    fn feed_mode_selects_the_next_stage_input() {
        let bb = small_backbone();
        let base = MvfaParams::init_in(16, &ModelOptions::default(), 0, DType::F64).unwrap();
        let p = base
            .try_map(|t| {
                let v = t.data().iter().map(|x| x + 0.05).collect();
                Ok(Tensor::parameter(t.name().unwrap(), t.shape(), v, DType::F64)?)
            })
            .unwrap();
        let img = image(4);
        for feed in [FeedMode::Mean, FeedMode::Cls, FeedMode::Seg] {
            let p = MvfaParams { feed, ..p.clone() };
            let (adapted, raw) = adapt_forward(&bb, &p, &img).unwrap();
            let fed = match feed {
                FeedMode::Mean => adapted.cls[0].add(&adapted.seg[0]).unwrap().scale(0.5),
                FeedMode::Cls => adapted.cls[0].clone(),
                FeedMode::Seg => adapted.seg[0].clone(),
            };
            assert!(bb.stage(1, &fed).unwrap().bit_eq(&raw.levels[1]));
        }
    }

    #[test]
    fn named_roundtrip_and_frozen_copy() {
        for opts in [
            ModelOptions::default(),
            ModelOptions { layout: AdapterLayout::Single, ..Default::default() },
            ModelOptions { architecture: Architecture::Projector, ..Default::default() },
            ModelOptions {
                architecture: Architecture::Projector,
                layout: AdapterLayout::Single,
                ..Default::default()
            },
        ] {
            let p = MvfaParams::init(16, &opts, 9).unwrap();
            let named: Vec<Tensor> = p.tensors().into_iter().cloned().collect();
            let back = MvfaParams::from_named(named, p.gamma, p.feed).unwrap();
            assert_eq!(back.options(), p.options());
            for (a, b) in p.tensors().iter().zip(back.tensors()) {
                assert_eq!(a.name(), b.name());
                assert!(a.bit_eq(b));
            }
            let frozen = p.frozen();
            assert!(frozen.tensors().iter().all(|t| !t.requires_grad()));
        }
        let p = MvfaParams::init(16, &ModelOptions::default(), 9).unwrap();
        let mut named: Vec<Tensor> = p.tensors().into_iter().cloned().collect();
        named.pop();
        assert!(MvfaParams::from_named(named, 0.1, FeedMode::Mean).is_err());
        assert!(MvfaParams::init(16, &ModelOptions { gamma: 2.0, ..Default::default() }, 0).is_err());
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let bb = small_backbone();
        let p = MvfaParams::init(32, &ModelOptions::default(), 0).unwrap();
        assert!(matches!(adapt_forward(&bb, &p, &image(0)), Err(Error::Contract(_))));
    }
}
