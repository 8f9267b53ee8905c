//! Test-time scoring: text comparison (zero-shot branch), memory-bank
//! comparison (few-shot branch) and their linear fusion.

use mvfa_autograd::{DType, Tensor};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adaptation::{adapt_forward, AdaptedFeatures, MvfaParams, DEFAULT_TAU, LEVELS};
use crate::backbone::FrozenBackbone;
use crate::error::{Error, Result};
use crate::objective::{grid_map, LevelMask};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub tau: f64,
    /// Min-max rescale each few-shot map to [0, 1] before fusion.
    pub normalize_few: bool,
    pub levels: LevelMask,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        ScoreConfig {
            beta1: 0.5,
            beta2: 0.5,
            tau: DEFAULT_TAU,
            normalize_few: false,
            levels: LevelMask::all(),
        }
    }
}

impl ScoreConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b >= 0.0 && b.is_finite()) {
                return Err(Error::Config(format!("{name} must be nonnegative, got {b}")));
            }
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau {} must be positive", self.tau)));
        }
        Ok(())
    }
}

/// Unit-norm reference features per level: `cls[l]` and `seg[l]` are
/// `N_l×d`.
#[derive(Debug, Clone)]
pub struct MemoryBank {
    pub cls: Vec<Tensor>,
    pub seg: Vec<Tensor>,
}

impl MemoryBank {
    pub fn new(cls: Vec<Tensor>, seg: Vec<Tensor>) -> Result<Self> {
        if cls.len() != LEVELS || seg.len() != LEVELS {
            return Err(Error::Bank(format!(
                "a memory bank needs {LEVELS} cls and {LEVELS} seg stores, got {} and {}",
                cls.len(),
                seg.len()
            )));
        }
        let d = cls[0].shape().get(1).copied().unwrap_or(0);
        for t in cls.iter().chain(&seg) {
            if t.rank() != 2 || t.shape()[0] == 0 || t.shape()[1] != d {
                return Err(Error::Bank(format!("store has shape {:?}, expected N×{d}", t.shape())));
            }
        }
        Ok(MemoryBank { cls, seg })
    }

    pub fn dim(&self) -> usize {
        self.cls[0].shape()[1]
    }

    pub fn rows(&self, level: usize) -> usize {
        self.cls[level].shape()[0]
    }
}

/// Runs the adapted encoder on every normal reference and stores the
/// l2-normalized cls and seg rows of each level.
pub fn build_memory_bank(normal_images: &[Tensor], backbone: &FrozenBackbone, params: &MvfaParams) -> Result<MemoryBank> {
    if normal_images.is_empty() {
        return Err(Error::Bank("no normal reference images".into()));
    }
    let frozen = params.frozen();
    let features: Vec<AdaptedFeatures> = normal_images
        .par_iter()
        .map(|img| adapt_forward(backbone, &frozen, img).map(|(f, _)| f))
        .collect::<Result<_>>()?;
    let stack = |pick: fn(&AdaptedFeatures) -> &Vec<Tensor>, l: usize| -> Result<Tensor> {
        let mut rows = Vec::new();
        let mut n = 0;
        let mut d = 0;
        let mut dtype = DType::F32;
        for f in &features {
            let t = pick(f)[l].l2_normalize_rows()?;
            n += t.shape()[0];
            d = t.shape()[1];
            dtype = t.dtype();
            rows.extend_from_slice(t.data());
        }
        Ok(Tensor::new_in(&[n, d], rows, dtype)?)
    };
    let mut cls = Vec::with_capacity(LEVELS);
    let mut seg = Vec::with_capacity(LEVELS);
    for l in 0..LEVELS {
        cls.push(stack(|f| &f.cls, l)?);
        seg.push(stack(|f| &f.seg, l)?);
    }
    MemoryBank::new(cls, seg)
}

/// Scores of one branch: per-level image scores and full-resolution maps
/// for all four levels, and their mean over the enabled levels.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchScores {
    pub level_c: Vec<f64>,
    pub level_maps: Vec<Vec<f64>>,
    pub c: f64,
    pub map: Vec<f64>,
}

impl BranchScores {
    fn ensemble(level_c: Vec<f64>, level_maps: Vec<Vec<f64>>, levels: &LevelMask) -> Self {
        let n = levels.count() as f64;
        let pixels = level_maps[0].len();
        let mut c = 0.0;
        let mut map = vec![0.0; pixels];
        for l in 0..LEVELS {
            if !levels.enabled(l) {
                continue;
            }
            c += level_c[l];
            for (m, v) in map.iter_mut().zip(&level_maps[l]) {
                *m += v;
            }
        }
        c /= n;
        map.iter_mut().for_each(|m| *m /= n);
        BranchScores {
            level_c,
            level_maps,
            c,
            map,
        }
    }
}

fn upsample(grid: Vec<f64>, side: usize, h: usize, w: usize, dtype: DType) -> Result<Vec<f64>> {
    let t = Tensor::new_in(&[side, side], grid, dtype)?;
    Ok(t.bilinear_upsample(h, w)?.data().to_vec())
}

fn grid_side(g: usize) -> Result<usize> {
    let side = (g as f64).sqrt().round() as usize;
    if side * side != g {
        return Err(Error::Contract(format!("{g} tokens do not form a square grid")));
    }
    Ok(side)
}

/// Text-comparison branch. `c` per level is the grid maximum of the cls
/// anomaly probability; maps come from the seg features.
pub fn zero_shot(features: &AdaptedFeatures, text: &Tensor, tau: f64, size: (usize, usize), levels: &LevelMask) -> Result<BranchScores> {
    let (h, w) = size;
    let mut level_c = Vec::with_capacity(LEVELS);
    let mut level_maps = Vec::with_capacity(LEVELS);
    for l in 0..LEVELS {
        let cls = grid_map(&features.cls[l].detach(), text, tau)?;
        level_c.push(cls.data().iter().copied().fold(f64::NEG_INFINITY, f64::max));
        let seg = grid_map(&features.seg[l].detach(), text, tau)?;
        level_maps.push(seg.bilinear_upsample(h, w)?.data().to_vec());
    }
    Ok(BranchScores::ensemble(level_c, level_maps, levels))
}

/// `1 − max_m cos(q_i, m)` for every query row against every store row.
/// Store rows must already be unit norm.
pub fn nearest_distances(query: &Tensor, store: &Tensor) -> Result<Vec<f64>> {
    if query.rank() != 2 || store.rank() != 2 || store.shape()[1] != query.shape()[1] {
        return Err(Error::Contract(format!(
            "query {:?} and store {:?} widths differ",
            query.shape(),
            store.shape()
        )));
    }
    let (g, d) = (query.shape()[0], query.shape()[1]);
    let n = store.shape()[0];
    if n == 0 {
        return Err(Error::Bank("memory bank level is empty".into()));
    }
    let q = query.l2_normalize_rows()?;
    let (q, s) = (q.data(), store.data());
    let mut out = Vec::with_capacity(g);
    for i in 0..g {
        let qi = &q[i * d..(i + 1) * d];
        let mut best = f64::NEG_INFINITY;
        for j in 0..n {
            let sj = &s[j * d..(j + 1) * d];
            let mut dot = 0.0;
            for k in 0..d {
                dot += qi[k] * sj[k];
            }
            if dot > best {
                best = dot;
            }
        }
        out.push(1.0 - best);
    }
    Ok(out)
}

fn min_max(v: &mut [f64]) {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    v.iter_mut().for_each(|x| *x = if span > 0.0 { (*x - lo) / span } else { 0.0 });
}

/// Memory-bank branch. The search is position-agnostic: every query row is
/// compared with every stored row of its level.
pub fn few_shot(
    features: &AdaptedFeatures,
    bank: &MemoryBank,
    size: (usize, usize),
    levels: &LevelMask,
    normalize: bool,
) -> Result<BranchScores> {
    let (h, w) = size;
    let mut level_c = Vec::with_capacity(LEVELS);
    let mut level_maps = Vec::with_capacity(LEVELS);
    for l in 0..LEVELS {
        let c = nearest_distances(&features.cls[l], &bank.cls[l])?;
        level_c.push(c.iter().copied().fold(f64::NEG_INFINITY, f64::max));
        let s = nearest_distances(&features.seg[l], &bank.seg[l])?;
        let side = grid_side(s.len())?;
        let mut map = upsample(s, side, h, w, features.seg[l].dtype())?;
        if normalize {
            min_max(&mut map);
        }
        level_maps.push(map);
    }
    Ok(BranchScores::ensemble(level_c, level_maps, levels))
}

/// `β1·zero + β2·few`, elementwise on the maps.
pub fn fuse(c_zero: f64, c_few: f64, s_zero: &[f64], s_few: &[f64], beta1: f64, beta2: f64) -> Result<(f64, Vec<f64>)> {
    if s_zero.len() != s_few.len() {
        return Err(Error::Contract(format!(
            "branch maps differ in size: {} vs {}",
            s_zero.len(),
            s_few.len()
        )));
    }
    let c = beta1 * c_zero + beta2 * c_few;
    let s = s_zero.iter().zip(s_few).map(|(z, f)| beta1 * z + beta2 * f).collect();
    Ok((c, s))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyResult {
    pub c_pred: f64,
    pub s_pred: Vec<f64>,
    pub height: usize,
    pub width: usize,
    pub zero: BranchScores,
    /// Absent when no memory bank was supplied.
    pub few: Option<BranchScores>,
}

impl AnomalyResult {
    /// Image score and map restricted to a single level (1-based), fused
    /// with the same β weights.
    pub fn level(&self, level: usize, beta1: f64, beta2: f64) -> (f64, Vec<f64>) {
        let l = level - 1;
        let z = &self.zero;
        match &self.few {
            Some(f) => fuse(z.level_c[l], f.level_c[l], &z.level_maps[l], &f.level_maps[l], beta1, beta2)
                .expect("maps share one size"),
            None => (
                beta1 * z.level_c[l],
                z.level_maps[l].iter().map(|v| beta1 * v).collect(),
            ),
        }
    }
}

/// Scores one image. A positive `beta2` without a bank is an error rather
/// than a silently empty branch.
pub fn predict(
    backbone: &FrozenBackbone,
    params: &MvfaParams,
    text: &Tensor,
    bank: Option<&MemoryBank>,
    image: &Tensor,
    config: &ScoreConfig,
) -> Result<AnomalyResult> {
    config.validate()?;
    if config.beta2 > 0.0 && bank.is_none() {
        return Err(Error::Bank(
            "few-shot branch is weighted (beta2 > 0) but no memory bank was given".into(),
        ));
    }
    let size = backbone.config().image_size;
    let (features, _) = adapt_forward(backbone, params, image)?;
    let zero = zero_shot(&features, text, config.tau, (size, size), &config.levels)?;
    let few = match bank {
        Some(b) => Some(few_shot(&features, b, (size, size), &config.levels, config.normalize_few)?),
        None => None,
    };
    let (c_pred, s_pred) = match &few {
        Some(f) => fuse(zero.c, f.c, &zero.map, &f.map, config.beta1, config.beta2)?,
        None => (
            config.beta1 * zero.c,
            zero.map.iter().map(|v| config.beta1 * v).collect(),
        ),
    };
    Ok(AnomalyResult {
        c_pred,
        s_pred,
        height: size,
        width: size,
        zero,
        few,
    })
}

/// Scores many images in parallel; output order follows the input.
pub fn predict_all(
    backbone: &FrozenBackbone,
    params: &MvfaParams,
    texts: &[Tensor],
    bank: Option<&MemoryBank>,
    images: &[Tensor],
    config: &ScoreConfig,
) -> Result<Vec<AnomalyResult>> {
    if texts.len() != images.len() {
        return Err(Error::Contract("one text feature per image is required".into()));
    }
    let frozen = params.frozen();
    images
        .par_iter()
        .zip(texts.par_iter())
        .map(|(img, text)| predict(backbone, &frozen, text, bank, img, config))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adaptation::ModelOptions;
    use crate::backbone::BackboneConfig;
    use crate::rng;

    fn t(shape: &[usize], v: Vec<f64>) -> Tensor {
        Tensor::new_in(shape, v, DType::F64).unwrap()
    }

    fn setup() -> (FrozenBackbone, MvfaParams) {
        let config = BackboneConfig {
            image_size: 16,
            patch_size: 4,
            channels: 1,
            dim: 16,
            stages: 4,
            blocks_per_stage: 1,
            heads: 2,
            seed: 7,
        };
        let bb = FrozenBackbone::new_in(&config, DType::F64).unwrap();
        let p = MvfaParams::init_in(16, &ModelOptions::default(), 0, DType::F64).unwrap();
        (bb, p)
    }

    fn image(seed: u64) -> Tensor {
        let mut g = rng::stream(seed, "img");
        t(&[16, 16, 1], rng::normals(&mut g, 256, 0.2).into_iter().map(|x| x + 0.5).collect())
    }

    fn text(seed: u64) -> Tensor {
        let mut g = rng::stream(seed, "text");
        t(&[2, 16], rng::normals(&mut g, 32, 1.0))
    }

    #[test]
    fn bank_row_counts_and_norms() {
        let (bb, p) = setup();
        let one = build_memory_bank(&[image(1)], &bb, &p).unwrap();
        let four = build_memory_bank(&[image(1), image(2), image(3), image(4)], &bb, &p).unwrap();
        for l in 0..LEVELS {
            assert_eq!(one.rows(l), 16);
            assert_eq!(four.rows(l), 64);
            assert_eq!(four.seg[l].shape(), &[64, 16]);
            for row in four.cls[l].data().chunks(16).chain(four.seg[l].data().chunks(16)) {
                let n: f64 = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                assert!((n - 1.0).abs() < 1e-6);
            }
        }
        assert!(matches!(build_memory_bank(&[], &bb, &p), Err(Error::Bank(_))));
    }

    #[test]
    fn self_query_has_zero_distance() {
        let (bb, p) = setup();
        let img = image(5);
        let bank = build_memory_bank(&[image(9), img.clone()], &bb, &p).unwrap();
        let (f, _) = adapt_forward(&bb, &p, &img).unwrap();
        let few = few_shot(&f, &bank, (16, 16), &LevelMask::all(), false).unwrap();
        assert!(few.c <= 1e-6);
        assert!(few.map.iter().all(|&v| v.abs() <= 1e-6));
    }

    #[test]
    fn orthogonal_store_gives_unit_distance() {
        let mut q = vec![0.0; 4 * 8];
        for i in 0..4 {
            q[i * 8 + 1 + i] = 1.0 + i as f64;
        }
        let mut row = vec![0.0; 8];
        row[0] = 1.0;
        let d = nearest_distances(&t(&[4, 8], q), &t(&[1, 8], row)).unwrap();
        assert_eq!(d, vec![1.0; 4]);
    }

    #[test]
    fn nearest_matches_double_loop() {
        let mut g = rng::stream(11, "nn");
        let mut store = rng::normals(&mut g, 32, 1.0);
        for row in store.chunks_mut(8) {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            row.iter_mut().for_each(|x| *x /= n);
        }
        let query = rng::normals(&mut g, 32, 1.0);
        let got = nearest_distances(&t(&[4, 8], query.clone()), &t(&[4, 8], store.clone())).unwrap();
        for i in 0..4 {
            let q = &query[i * 8..(i + 1) * 8];
            let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            let qn: Vec<f64> = q.iter().map(|v| v / n).collect();
            let mut best = f64::NEG_INFINITY;
            for j in 0..4 {
                let mut dot = 0.0;
                for k in 0..8 {
                    dot += qn[k] * store[j * 8 + k];
                }
                best = best.max(dot);
            }
            assert_eq!(got[i], 1.0 - best);
        }
    }

    #[test]
    fn more_rows_never_increase_distance() {
        let mut g = rng::stream(12, "mono");
        let mut store = rng::normals(&mut g, 48, 1.0);
        for row in store.chunks_mut(8) {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            row.iter_mut().for_each(|x| *x /= n);
        }
        let q = t(&[4, 8], rng::normals(&mut g, 32, 1.0));
        let small = nearest_distances(&q, &t(&[3, 8], store[..24].to_vec())).unwrap();
        let big = nearest_distances(&q, &t(&[6, 8], store)).unwrap();
        for (a, b) in small.iter().zip(&big) {
            assert!(b <= a);
        }
    }

    #[test]
    fn aligned_features_closed_form() {
        let normal = vec![1.0, 0.0, 0.0, 0.0];
        let abnormal = vec![0.6, 0.8, 0.0, 0.0];
        let text = t(&[2, 4], normal.iter().chain(&abnormal).copied().collect());
        let feats: Vec<f64> = (0..4).flat_map(|i| abnormal.iter().map(move |v| v * (1.0 + i as f64))).collect();
        let f = t(&[4, 4], feats);
        let features = AdaptedFeatures {
            cls: vec![f.clone(); 4],
            seg: vec![f; 4],
        };
        let z = zero_shot(&features, &text, 0.07, (4, 4), &LevelMask::all()).unwrap();
        let expect = 1.0 / (1.0 + (-(1.0 - 0.6) / 0.07f64).exp());
        assert!((z.c - expect).abs() < 1e-12);
        assert!(z.map.iter().all(|v| (v - expect).abs() < 1e-12));
        // identical levels: the ensemble equals any single level
        assert_eq!(z.map, z.level_maps[2]);
    }

    #[test]
    fn fuse_examples() {
        let (c, s) = fuse(0.8, 0.4, &[0.2, 1.0], &[0.6, 0.0], 0.5, 0.5).unwrap();
        assert!((c - 0.6).abs() < 1e-15);
        assert_eq!(s, vec![0.4, 0.5]);
        let (c, s) = fuse(0.8, 0.4, &[0.2, 1.0], &[0.6, 0.0], 1.0, 0.0).unwrap();
        assert_eq!((c, s), (0.8, vec![0.2, 1.0]));
        let (c, s) = fuse(0.8, 0.4, &[0.2, 1.0], &[0.6, 0.0], 0.0, 0.0).unwrap();
        assert_eq!((c, s), (0.0, vec![0.0, 0.0]));
        assert!(fuse(0.0, 0.0, &[0.0], &[0.0, 0.0], 1.0, 1.0).is_err());
    }

    #[test]
    fn branch_gating_and_bank_requirement() {
        let (bb, p) = setup();
        let bank = build_memory_bank(&[image(1), image(2)], &bb, &p).unwrap();
        let img = image(3);
        let tx = text(0);
        let only_zero = ScoreConfig { beta1: 1.0, beta2: 0.0, ..Default::default() };
        let r = predict(&bb, &p, &tx, Some(&bank), &img, &only_zero).unwrap();
        assert_eq!(r.c_pred, r.zero.c);
        assert_eq!(r.s_pred, r.zero.map);
        let only_few = ScoreConfig { beta1: 0.0, beta2: 1.0, ..Default::default() };
        let r = predict(&bb, &p, &tx, Some(&bank), &img, &only_few).unwrap();
        let few = r.few.as_ref().unwrap();
        assert_eq!(r.c_pred, few.c);
        assert_eq!(r.s_pred, few.map);
        let err = predict(&bb, &p, &tx, None, &img, &ScoreConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Bank(_)));
        assert!(predict(&bb, &p, &tx, None, &img, &only_zero).is_ok());
        for r in [&r] {
            assert!(r.zero.map.iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(few.map.iter().all(|v| (0.0..=2.0).contains(v)));
        }
    }

    #[test]
    fn ensemble_is_the_mean_of_enabled_levels() {
        let (bb, p) = setup();
        let bank = build_memory_bank(&[image(1)], &bb, &p).unwrap();
        let cfg = ScoreConfig {
            levels: LevelMask::parse("1,3,4").unwrap(),
            ..Default::default()
        };
        let r = predict(&bb, &p, &text(1), Some(&bank), &image(2), &cfg).unwrap();
        for branch in [&r.zero, r.few.as_ref().unwrap()] {
            let mut map = vec![0.0; 256];
            for l in [0, 2, 3] {
                for (m, v) in map.iter_mut().zip(&branch.level_maps[l]) {
                    *m += v;
                }
            }
            map.iter_mut().for_each(|m| *m /= 3.0);
            assert_eq!(map, branch.map);
            let c = (branch.level_c[0] + branch.level_c[2] + branch.level_c[3]) / 3.0;
            assert_eq!(c, branch.c);
        }
        let (c1, m1) = r.level(2, 0.5, 0.5);
        assert_eq!(c1, 0.5 * r.zero.level_c[1] + 0.5 * r.few.as_ref().unwrap().level_c[1]);
        assert_eq!(m1.len(), 256);
    }

    #[test]
    fn normalized_few_maps_span_unit_interval() {
        let (bb, p) = setup();
        let bank = build_memory_bank(&[image(1)], &bb, &p).unwrap();
        let (f, _) = adapt_forward(&bb, &p, &image(4)).unwrap();
        let few = few_shot(&f, &bank, (16, 16), &LevelMask::all(), true).unwrap();
        for m in &few.level_maps {
            let lo = m.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = m.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            assert!(lo.abs() < 1e-12 && (hi - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn parallel_scoring_matches_sequential() {
        let (bb, p) = setup();
        let bank = build_memory_bank(&[image(1)], &bb, &p).unwrap();
        let imgs: Vec<Tensor> = (10..14).map(image).collect();
        let texts = vec![text(2); 4];
        let cfg = ScoreConfig::default();
        let all = predict_all(&bb, &p, &texts, Some(&bank), &imgs, &cfg).unwrap();
        for (img, r) in imgs.iter().zip(&all) {
            assert_eq!(&predict(&bb, &p, &texts[0], Some(&bank), img, &cfg).unwrap(), r);
        }
    }
}
