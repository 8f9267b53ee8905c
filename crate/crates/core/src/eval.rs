//! Image- and pixel-level AUC and experiment reports.

use serde::{Deserialize, Serialize};

use crate::adaptation::LEVELS;
use crate::error::{Error, Result};
use crate::inference::AnomalyResult;

/// Mann-Whitney AUC with midranks for ties.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::Metric(format!("score {i} is NaN")));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Metric("AUC needs both positive and negative samples".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let mid = (i + j + 2) as f64 / 2.0;
        for &k in &order[i..=j] {
            if labels[k] == 1 {
                pos_rank_sum += mid;
            }
        }
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((pos_rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// How pixel AUC is aggregated over the test set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PixelAuc {
    /// One AUC over all pixels of all images.
    #[default]
    Pooled,
    /// Mean of per-image AUCs over images whose masks have both classes.
    PerImage,
}

/// What `evaluate` needs to know about each test sample.
#[derive(Debug, Clone)]
pub struct Truth {
    pub modality: String,
    pub label: u8,
    /// Binary mask, row-major, same size as the score map.
    pub mask: Option<Vec<u8>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelAuc {
    pub level: usize,
    pub image_auc: f64,
    pub pixel_auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityReport {
    pub modality: String,
    pub image_auc: f64,
    pub pixel_auc: Option<f64>,
    pub test_count: usize,
    pub anomalous_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub image_auc: f64,
    pub pixel_auc: Option<f64>,
    pub per_level: Vec<LevelAuc>,
    pub per_modality: Vec<ModalityReport>,
    pub test_count: usize,
    pub anomalous_count: usize,
}

fn pixel_auc(maps: &[&[f64]], masks: &[&[u8]], mode: PixelAuc) -> Result<f64> {
    match mode {
        PixelAuc::Pooled => {
            let scores: Vec<f64> = maps.iter().flat_map(|m| m.iter().copied()).collect();
            let labels: Vec<u8> = masks.iter().flat_map(|m| m.iter().copied()).collect();
            auc(&scores, &labels)
        }
        PixelAuc::PerImage => {
            let mut sum = 0.0;
            let mut n = 0;
            for (m, s) in maps.iter().zip(masks) {
                let pos = s.iter().filter(|&&v| v == 1).count();
                if pos == 0 || pos == s.len() {
                    continue;
                }
                sum += auc(m, s)?;
                n += 1;
            }
            if n == 0 {
                return Err(Error::Metric("no test mask has both classes".into()));
            }
            Ok(sum / n as f64)
        }
    }
}

/// Image and pixel AUC from parallel score/truth lists. Pixel AUC is
/// `None` when no sample has a mask.
fn aucs(scores: &[f64], maps: &[&[f64]], truth: &[&Truth], mode: PixelAuc) -> Result<(f64, Option<f64>)> {
    let labels: Vec<u8> = truth.iter().map(|t| t.label).collect();
    let image = auc(scores, &labels)?;
    let mut m = Vec::new();
    let mut s = Vec::new();
    for (map, t) in maps.iter().zip(truth) {
        if let Some(mask) = &t.mask {
            if mask.len() != map.len() {
                return Err(Error::Contract(format!(
                    "mask has {} pixels, score map has {}",
                    mask.len(),
                    map.len()
                )));
            }
            m.push(*map);
            s.push(mask.as_slice());
        }
    }
    let pixel = if m.is_empty() { None } else { Some(pixel_auc(&m, &s, mode)?) };
    Ok((image, pixel))
}

/// Builds the report from scored test images. Per-level AUCs use the
/// retained per-level outputs fused with the same β weights.
pub fn evaluate(results: &[AnomalyResult], truth: &[Truth], beta1: f64, beta2: f64, mode: PixelAuc) -> Result<Report> {
    if results.is_empty() {
        return Err(Error::Data("test set is empty".into()));
    }
    if results.len() != truth.len() {
        return Err(Error::Contract("one truth entry per result is required".into()));
    }
    let all: Vec<&Truth> = truth.iter().collect();
    let scores: Vec<f64> = results.iter().map(|r| r.c_pred).collect();
    let maps: Vec<&[f64]> = results.iter().map(|r| r.s_pred.as_slice()).collect();
    let (image_auc, pixel) = aucs(&scores, &maps, &all, mode)?;

    let mut per_level = Vec::with_capacity(LEVELS);
    for level in 1..=LEVELS {
        let fused: Vec<(f64, Vec<f64>)> = results.iter().map(|r| r.level(level, beta1, beta2)).collect();
        let s: Vec<f64> = fused.iter().map(|f| f.0).collect();
        let m: Vec<&[f64]> = fused.iter().map(|f| f.1.as_slice()).collect();
        let (image_auc, pixel_auc) = aucs(&s, &m, &all, mode)?;
        per_level.push(LevelAuc {
            level,
            image_auc,
            pixel_auc,
        });
    }

    let mut names: Vec<&str> = truth.iter().map(|t| t.modality.as_str()).collect();
    names.sort();
    names.dedup();
    let mut per_modality = Vec::new();
    for name in names {
        let idx: Vec<usize> = (0..truth.len()).filter(|&i| truth[i].modality == name).collect();
        let t: Vec<&Truth> = idx.iter().map(|&i| &truth[i]).collect();
        let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
        let m: Vec<&[f64]> = idx.iter().map(|&i| maps[i]).collect();
        let (image_auc, pixel_auc) = aucs(&s, &m, &t, mode)?;
        per_modality.push(ModalityReport {
            modality: name.to_string(),
            image_auc,
            pixel_auc,
            test_count: t.len(),
            anomalous_count: t.iter().filter(|x| x.label == 1).count(),
        });
    }

    Ok(Report {
        image_auc,
        pixel_auc: pixel,
        per_level,
        per_modality,
        test_count: truth.len(),
        anomalous_count: truth.iter().filter(|t| t.label == 1).count(),
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

impl Report {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn csv_header() -> String {
        let mut cols = vec!["image_auc".to_string(), "pixel_auc".to_string()];
        for l in 1..=LEVELS {
            cols.push(format!("level{l}_image_auc"));
            cols.push(format!("level{l}_pixel_auc"));
        }
        cols.push("test_count".into());
        cols.join(",")
    }

    pub fn csv_line(&self) -> String {
        let mut cols = vec![format!("{:.6}", self.image_auc), opt(self.pixel_auc)];
        for l in &self.per_level {
            cols.push(format!("{:.6}", l.image_auc));
            cols.push(opt(l.pixel_auc));
        }
        cols.push(self.test_count.to_string());
        cols.join(",")
    }
}
