//! Split, train, bank, score and report: the steps behind every
//! subcommand, plus the untrained baseline and the ablation sweep.

use std::collections::BTreeMap;

use mvfa_autograd::Tensor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adaptation::{AdapterLayout, Architecture, MvfaParams};
use crate::backbone::FrozenBackbone;
use crate::config::{Mode, RunConfig};
use crate::data::{load_sample, split, LoadedSample, Sample, Split};
use crate::error::{Error, Result};
use crate::eval::{evaluate, Report, Truth};
use crate::inference::{build_memory_bank, predict_all, AnomalyResult, MemoryBank};
use crate::objective::{train, TrainOutcome, TrainSample};
use crate::textbank::build_text_features;

/// Samples of one experiment with pixels and text features loaded.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub split: Split,
    pub train: Vec<TrainSample>,
    pub bank_images: Vec<Tensor>,
    pub test: Vec<LoadedSample>,
    pub test_text: Vec<Tensor>,
}

fn load_all(samples: &[Sample], size: usize) -> Result<Vec<LoadedSample>> {
    samples.par_iter().map(|s| load_sample(s, size)).collect()
}

/// `2×d` text features for every modality in `samples`, keyed by name.
pub fn text_features(cfg: &RunConfig, samples: &[Sample]) -> Result<BTreeMap<String, Tensor>> {
    let prompts = cfg.prompts()?;
    let mut out = BTreeMap::new();
    for s in samples {
        if !out.contains_key(&s.modality) {
            let t = build_text_features(&prompts, &s.modality, cfg.inference.text_seed, cfg.backbone.dim)?;
            out.insert(s.modality.clone(), t.f_text);
        }
    }
    Ok(out)
}

pub fn prepare(cfg: &RunConfig, samples: &[Sample]) -> Result<Prepared> {
    let split = split(samples, &cfg.inference.target, cfg.protocol(), cfg.train.seed)?;
    if split.test.is_empty() {
        return Err(Error::Data(format!("no test samples for {:?}", cfg.inference.target)));
    }
    let size = cfg.backbone.image_size;
    let texts = text_features(cfg, samples)?;
    let train = load_all(&split.train, size)?
        .into_iter()
        .map(|l| TrainSample {
            text: texts[&l.sample.modality].clone(),
            image: l.image,
            label: l.sample.label,
            mask: l.mask,
        })
        .collect();
    let bank_images = load_all(&split.bank, size)?.into_iter().map(|l| l.image).collect();
    let test = load_all(&split.test, size)?;
    let test_text = test.iter().map(|l| texts[&l.sample.modality].clone()).collect();
    Ok(Prepared {
        split,
        train,
        bank_images,
        test,
        test_text,
    })
}

pub fn init_params(cfg: &RunConfig) -> Result<MvfaParams> {
    MvfaParams::init(cfg.backbone.dim, &cfg.model_options(), cfg.train.seed)
}

pub fn fit<F: FnMut(usize, f64)>(
    cfg: &RunConfig,
    backbone: &FrozenBackbone,
    prepared: &Prepared,
    on_epoch: F,
) -> Result<TrainOutcome> {
    train(
        &prepared.train,
        backbone,
        init_params(cfg)?,
        &cfg.train,
        &cfg.ablation.levels,
        on_epoch,
    )
}

/// The memory bank for few-shot runs; `None` in zero-shot mode.
pub fn bank(cfg: &RunConfig, backbone: &FrozenBackbone, params: &MvfaParams, prepared: &Prepared) -> Result<Option<MemoryBank>> {
    match cfg.inference.mode {
        Mode::ZeroShot => Ok(None),
        Mode::FewShot => Ok(Some(build_memory_bank(&prepared.bank_images, backbone, params)?)),
    }
}

pub fn score(
    cfg: &RunConfig,
    backbone: &FrozenBackbone,
    params: &MvfaParams,
    bank: Option<&MemoryBank>,
    prepared: &Prepared,
) -> Result<Vec<AnomalyResult>> {
    let images: Vec<Tensor> = prepared.test.iter().map(|l| l.image.clone()).collect();
    predict_all(backbone, params, &prepared.test_text, bank, &images, &cfg.score())
}

pub fn truth(test: &[LoadedSample]) -> Vec<Truth> {
    test.iter()
        .map(|l| Truth {
            modality: l.sample.modality.clone(),
            label: l.sample.label,
            mask: l
                .mask
                .as_ref()
                .map(|m| m.data().iter().map(|&v| u8::from(v >= 0.5)).collect()),
        })
        .collect()
}

pub fn report(cfg: &RunConfig, results: &[AnomalyResult], prepared: &Prepared) -> Result<Report> {
    let inf = &cfg.inference;
    evaluate(results, &truth(&prepared.test), inf.beta1, inf.beta2, inf.pixel_auc)
}

/// Bank, scores and report for fixed parameters.
pub fn assess(cfg: &RunConfig, backbone: &FrozenBackbone, params: &MvfaParams, prepared: &Prepared) -> Result<Report> {
    let bank = bank(cfg, backbone, params, prepared)?;
    let results = score(cfg, backbone, params, bank.as_ref(), prepared)?;
    report(cfg, &results, prepared)
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub params: MvfaParams,
    pub epoch_losses: Vec<f64>,
    pub report: Report,
    /// Same protocol with the untrained initialization.
    pub baseline: Report,
}

/// Trains on the split of `samples` and evaluates both the trained and the
/// untrained model.
pub fn run_experiment<F: FnMut(usize, f64)>(cfg: &RunConfig, samples: &[Sample], on_epoch: F) -> Result<Outcome> {
    cfg.validate()?;
    let backbone = FrozenBackbone::new(&cfg.backbone)?;
    let prepared = prepare(cfg, samples)?;
    let baseline = assess(cfg, &backbone, &init_params(cfg)?, &prepared)?;
    let trained = fit(cfg, &backbone, &prepared, on_epoch)?;
    let report = assess(cfg, &backbone, &trained.params, &prepared)?;
    Ok(Outcome {
        params: trained.params,
        epoch_losses: trained.epoch_losses,
        report,
        baseline,
    })
}

/// The configurations `ablate` compares. Variants differ from `cfg` only
/// in architecture and adapter layout.
pub fn ablation_variants(cfg: &RunConfig) -> Vec<RunConfig> {
    [
        (Architecture::Adapter, AdapterLayout::Dual),
        (Architecture::Adapter, AdapterLayout::Single),
        (Architecture::Projector, AdapterLayout::Dual),
    ]
    .into_iter()
    .map(|(architecture, layout)| {
        let mut v = cfg.clone();
        v.ablation.architecture = architecture;
        v.ablation.layout = layout;
        v
    })
    .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub architecture: Architecture,
    pub layout: AdapterLayout,
    pub levels: Vec<usize>,
    pub report: Report,
}

fn name<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|j| j.as_str().map(str::to_owned))
        .unwrap_or_default()
}

impl AblationRow {
    pub fn variant(&self) -> String {
        format!("{}/{}", name(&self.architecture), name(&self.layout))
    }
}

pub fn ablate<F: FnMut(&RunConfig)>(cfg: &RunConfig, samples: &[Sample], mut on_variant: F) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    let backbone = FrozenBackbone::new(&cfg.backbone)?;
    let prepared = prepare(cfg, samples)?;
    let mut rows = Vec::new();
    for v in ablation_variants(cfg) {
        on_variant(&v);
        let trained = fit(&v, &backbone, &prepared, |_, _| {})?;
        rows.push(AblationRow {
            architecture: v.ablation.architecture,
            layout: v.ablation.layout,
            levels: v.ablation.levels.levels(),
            report: assess(&v, &backbone, &trained.params, &prepared)?,
        });
    }
    Ok(rows)
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into())
}

/// CSV with one row per variant: ensemble AUCs, then one image/pixel pair
/// per enabled level.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let Some(first) = rows.first() else {
        return String::new();
    };
    let mut header = vec!["variant".to_string(), "ensemble_image_auc".into(), "ensemble_pixel_auc".into()];
    for l in &first.levels {
        header.push(format!("level{l}_image_auc"));
        header.push(format!("level{l}_pixel_auc"));
    }
    let mut out = header.join(",") + "\n";
    for r in rows {
        let mut line = vec![r.variant(), format!("{:.4}", r.report.image_auc), cell(r.report.pixel_auc)];
        for l in &r.levels {
            let la = &r.report.per_level[l - 1];
            line.push(format!("{:.4}", la.image_auc));
            line.push(cell(la.pixel_auc));
        }
        out += &(line.join(",") + "\n");
    }
    out
}
