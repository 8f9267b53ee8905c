//! Multi-level alignment loss and the Adam training loop.
//!
//! Per level the segmentation branch is scored at full image resolution
//! with Dice + Focal against the mask, and the classification branch with
//! BCE on the largest grid-cell anomaly probability. The total is the sum
//! over enabled levels.

use mvfa_autograd::{GradientMap, Tensor, TensorError};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::adaptation::{adapt_forward, anomaly_probability, AdaptedFeatures, MvfaParams, DEFAULT_TAU, LEVELS};
use crate::backbone::FrozenBackbone;
use crate::error::{Error, Result};
use crate::rng;

pub const PROB_CLAMP: f64 = 1e-7;
pub const DICE_EPS: f64 = 1.0;
pub const FOCAL_GAMMA: i32 = 2;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("lambda3", self.lambda3)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a nonnegative number, got {v}")));
            }
        }
        Ok(())
    }
}

/// Which of the four levels contribute to the loss (and, at inference, to
/// the ensemble).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct LevelMask([bool; LEVELS]);

impl Default for LevelMask {
    fn default() -> Self {
        LevelMask([true; LEVELS])
    }
}

impl LevelMask {
    pub fn all() -> Self {
        Self::default()
    }

    pub fn only(level: usize) -> Result<Self> {
        Self::try_from(vec![level])
    }

    /// 1-based level numbers.
    pub fn levels(&self) -> Vec<usize> {
        (0..LEVELS).filter(|&l| self.0[l]).map(|l| l + 1).collect()
    }

    /// 0-based check.
    pub fn enabled(&self, l: usize) -> bool {
        l < LEVELS && self.0[l]
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    /// Parses a comma-separated list such as `1,2,4`.
    pub fn parse(text: &str) -> Result<Self> {
        let levels = text
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Config(format!("bad level {s:?} in {text:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::try_from(levels)
    }
}

impl TryFrom<Vec<usize>> for LevelMask {
    type Error = Error;

    fn try_from(levels: Vec<usize>) -> Result<Self> {
        let mut mask = [false; LEVELS];
        for l in levels {
            if !(1..=LEVELS).contains(&l) {
                return Err(Error::Config(format!("level {l} is outside 1..={LEVELS}")));
            }
            mask[l - 1] = true;
        }
        if !mask.iter().any(|&b| b) {
            return Err(Error::Config("level mask selects no level".into()));
        }
        Ok(LevelMask(mask))
    }
}

impl From<LevelMask> for Vec<usize> {
    fn from(m: LevelMask) -> Self {
        m.levels()
    }
}

impl std::fmt::Display for LevelMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.levels().iter().map(|l| l.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub gamma: f64,
    pub weights: LossWeights,
    pub tau: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 16,
            epochs: 50,
            seed: 42,
            gamma: crate::adaptation::DEFAULT_GAMMA,
            weights: LossWeights::default(),
            tau: DEFAULT_TAU,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be nonnegative", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma {} is outside [0, 1]", self.gamma)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau {} must be positive", self.tau)));
        }
        self.weights.validate()
    }
}

fn same_shape(op: &str, p: &Tensor, s: &Tensor) -> Result<()> {
    if p.shape() != s.shape() {
        return Err(Error::Contract(format!(
            "{op}: prediction shape {:?} does not match mask shape {:?}",
            p.shape(),
            s.shape()
        )));
    }
    Ok(())
}

/// `1 − (2·Σp·s + ε) / (Σp + Σs + ε)`
pub fn dice_loss(p: &Tensor, s: &Tensor) -> Result<Tensor> {
    same_shape("dice", p, s)?;
    let num = p.mul(s)?.sum().scale(2.0).add_scalar(DICE_EPS);
    let den = p.sum().add(&s.sum())?.add_scalar(DICE_EPS);
    Ok(num.div(&den)?.scale(-1.0).add_scalar(1.0))
}

/// Mean over pixels of `−(1 − p_t)² · ln p_t`.
pub fn focal_loss(p: &Tensor, s: &Tensor) -> Result<Tensor> {
    same_shape("focal", p, s)?;
    let pc = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    // p_t = p·(2s − 1) + (1 − s)
    let sign = Tensor::new_in(s.shape(), s.data().iter().map(|v| 2.0 * v - 1.0).collect(), s.dtype())?;
    let offset = Tensor::new_in(s.shape(), s.data().iter().map(|v| 1.0 - v).collect(), s.dtype())?;
    let pt = pc.mul(&sign)?.add(&offset)?;
    let miss = pt.scale(-1.0).add_scalar(1.0);
    let mut weight = miss.clone();
    for _ in 1..FOCAL_GAMMA {
        weight = weight.mul(&miss)?;
    }
    Ok(weight.mul(&pt.ln())?.mean().scale(-1.0))
}

/// `−[c·ln p + (1 − c)·ln(1 − p)]` on a single probability.
pub fn bce_image(prob: &Tensor, label: u8) -> Result<Tensor> {
    if prob.numel() != 1 {
        return Err(Error::Contract(format!("bce expects one probability, got shape {:?}", prob.shape())));
    }
    let pc = prob.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let loss = match label {
        0 => pc.scale(-1.0).add_scalar(1.0).ln().scale(-1.0),
        1 => pc.ln().scale(-1.0),
        other => return Err(Error::Contract(format!("label {other} is not 0 or 1"))),
    };
    Ok(loss.sum())
}

/// Grid anomaly probabilities reshaped to `√G×√G`.
pub fn grid_map(features: &Tensor, text: &Tensor, tau: f64) -> Result<Tensor> {
    let g = features.shape()[0];
    let side = (g as f64).sqrt().round() as usize;
    if side * side != g {
        return Err(Error::Contract(format!("{g} tokens do not form a square grid")));
    }
    Ok(anomaly_probability(features, text, tau)?.reshape(&[side, side])?)
}

/// One level of the alignment loss. `mask` is `h×w`; when absent, only the
/// classification term is computed.
#[allow(clippy::too_many_arguments)]
pub fn level_loss(
    cls: &Tensor,
    seg: &Tensor,
    text: &Tensor,
    label: u8,
    mask: Option<&Tensor>,
    weights: &LossWeights,
    tau: f64,
) -> Result<Tensor> {
    let cls_max = anomaly_probability(cls, text, tau)?.max_axis(0)?;
    let mut loss = bce_image(&cls_max, label)?.scale(weights.lambda3);
    if let Some(s) = mask {
        if s.rank() != 2 {
            return Err(Error::Contract(format!("mask must be h×w, got {:?}", s.shape())));
        }
        let map = grid_map(seg, text, tau)?.bilinear_upsample(s.shape()[0], s.shape()[1])?;
        if weights.lambda1 != 0.0 {
            loss = loss.add(&dice_loss(&map, s)?.scale(weights.lambda1))?;
        }
        if weights.lambda2 != 0.0 {
            loss = loss.add(&focal_loss(&map, s)?.scale(weights.lambda2))?;
        }
    }
    Ok(loss)
}

/// Sum of `level_loss` over the enabled levels.
pub fn total_loss(
    features: &AdaptedFeatures,
    text: &Tensor,
    label: u8,
    mask: Option<&Tensor>,
    weights: &LossWeights,
    tau: f64,
    levels: &LevelMask,
) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for l in 0..LEVELS {
        if !levels.enabled(l) {
            continue;
        }
        let term = level_loss(&features.cls[l], &features.seg[l], text, label, mask, weights, tau)?;
        total = Some(match total {
            Some(t) => t.add(&term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::Config("level mask selects no level".into()))
}

/// First and second moments per parameter, in [`MvfaParams::tensors`] order.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &MvfaParams) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. Every parameter must have a gradient.
pub fn adam_step(params: &MvfaParams, grads: &GradientMap, state: &mut AdamState, lr: f64) -> Result<MvfaParams> {
    let tensors = params.tensors();
    if state.m.len() != tensors.len() || state.v.len() != tensors.len() {
        return Err(Error::Contract("optimizer state does not match parameters".into()));
    }
    for (i, t) in tensors.iter().enumerate() {
        let name = t.name().unwrap_or("?");
        let g = grads
            .get(t)
            .ok_or_else(|| Error::Contract(format!("no gradient for parameter `{name}`")))?;
        if g.len() != t.numel() || state.m[i].len() != t.numel() {
            return Err(Error::Contract(format!("gradient shape mismatch for `{name}`")));
        }
    }
    state.step += 1;
    let step = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(step);
    let c2 = 1.0 - ADAM_BETA2.powi(step);
    let mut i = 0;
    params.try_map(|t| {
        let g = grads.get(t).expect("checked above");
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let mut data = t.data().to_vec();
        for j in 0..data.len() {
            m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g[j];
            v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g[j] * g[j];
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            data[j] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
        i += 1;
        Ok(t.with_data(data)?)
    })
}

/// One training example. `text` holds the `2×d` text features of the
/// sample's modality.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub image: Tensor,
    pub label: u8,
    pub mask: Option<Tensor>,
    pub text: Tensor,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: MvfaParams,
    /// Mean per-sample loss for every epoch.
    pub epoch_losses: Vec<f64>,
}

/// Loss and gradients of one sample.
pub fn sample_gradients(
    backbone: &FrozenBackbone,
    params: &MvfaParams,
    sample: &TrainSample,
    config: &TrainConfig,
    levels: &LevelMask,
) -> Result<(f64, GradientMap)> {
    let (features, _) = adapt_forward(backbone, params, &sample.image)?;
    let loss = total_loss(
        &features,
        &sample.text,
        sample.label,
        sample.mask.as_ref(),
        &config.weights,
        config.tau,
        levels,
    )?;
    let value = loss.item()?;
    let grads = if loss.requires_grad() {
        loss.backward()?
    } else {
        GradientMap::new()
    };
    Ok((value, grads))
}

/// Adds an explicit zero gradient for every parameter the loss did not
/// reach (disabled levels, or seg-only tensors on mask-less samples).
fn fill_missing(params: &MvfaParams, grads: &mut GradientMap) {
    for t in params.tensors() {
        grads.insert_zeros(t);
    }
}

/// Mini-batch Adam over `samples`, shuffled per epoch from `config.seed`.
/// `on_epoch` receives the epoch index (0-based) and its mean loss.
pub fn train<F>(
    samples: &[TrainSample],
    backbone: &FrozenBackbone,
    init: MvfaParams,
    config: &TrainConfig,
    levels: &LevelMask,
    mut on_epoch: F,
) -> Result<TrainOutcome>
where
    F: FnMut(usize, f64),
{
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let mut params = init;
    let mut state = AdamState::new(&params);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut gen = rng::stream(config.seed, &format!("shuffle:{epoch}"));
        order.sort_unstable();
        order.shuffle(&mut gen);
        let mut loss_sum = 0.0;
        for (step, batch) in order.chunks(config.batch_size).enumerate() {
            let mut grads = GradientMap::new();
            for &i in batch {
                // a degenerate forward pass means the weights have already diverged
                let (loss, g) = match sample_gradients(backbone, &params, &samples[i], config, levels) {
                    Err(Error::Tensor(TensorError::ZeroNorm { .. })) => {
                        return Err(Error::NumericFailure { epoch, step });
                    }
                    other => other?,
                };
                if !loss.is_finite() || g.has_non_finite() {
                    return Err(Error::NumericFailure { epoch, step });
                }
                loss_sum += loss;
                grads.accumulate(g);
            }
            grads.scale(1.0 / batch.len() as f64);
            fill_missing(&params, &mut grads);
            params = adam_step(&params, &grads, &mut state, config.lr)?;
        }
        let mean = loss_sum / samples.len() as f64;
        epoch_losses.push(mean);
        on_epoch(epoch, mean);
    }
    Ok(TrainOutcome { params, epoch_losses })
}
