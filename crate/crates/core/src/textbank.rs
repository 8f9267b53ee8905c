//! Two-tier prompts and a deterministic stand-in for the text encoder.
//!
//! State patterns carry `[o]` (the object name) and template patterns carry
//! `[c]` (the expanded state). A template token of the form `a/the/one`
//! yields one prompt per alternative.

use mvfa_autograd::{DType, Tensor};

use crate::error::{Error, Result};
use crate::rng;

const OBJECT: &str = "[o]";
const STATE: &str = "[c]";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Polarity {
    Normal,
    Abnormal,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSet {
    pub states: Vec<(Polarity, String)>,
    pub templates: Vec<String>,
}

const NORMAL_STATES: [&str; 7] = [
    "[o]",
    "flawless [o]",
    "perfect [o]",
    "unblemished [o]",
    "[o] without flaw",
    "[o] without defect",
    "[o] without damage",
];

const ABNORMAL_STATES: [&str; 4] = [
    "damaged [o]",
    "[o] with flaw",
    "[o] with defect",
    "[o] with damage",
];

const TEMPLATES: [&str; 17] = [
    "a photo of a/the/one [c].",
    "a photo of a/the cool [c].",
    "a photo of a/the small [c].",
    "a photo of a/the large [c].",
    "a bright photo of a/the [c].",
    "a dark photo of a/the [c].",
    "a blurry photo of a/the [c].",
    "a bad photo of a/the [c].",
    "a good photo of a/the [c].",
    "a cropped photo of a/the [c].",
    "a close-up photo of a/the [c].",
    "a photo of my [c].",
    "a low resolution photo of a/the [c].",
    "a black and white photo of a/the [c].",
    "a jpeg corrupted photo of a/the [c].",
    "there is a/the [c] in the scene.",
    "this is a/the/one [c] in the scene.",
];

impl Default for PromptSet {
    fn default() -> Self {
        let states = NORMAL_STATES
            .iter()
            .map(|s| (Polarity::Normal, s.to_string()))
            .chain(ABNORMAL_STATES.iter().map(|s| (Polarity::Abnormal, s.to_string())))
            .collect();
        PromptSet {
            states,
            templates: TEMPLATES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

fn check_placeholder(pattern: &str, placeholder: &str) -> Result<()> {
    let n = pattern.matches(placeholder).count();
    if n != 1 {
        return Err(Error::Prompt(format!(
            "pattern {pattern:?} must contain {placeholder} exactly once, found {n}"
        )));
    }
    Ok(())
}

impl PromptSet {
    pub fn validate(&self) -> Result<()> {
        for polarity in [Polarity::Normal, Polarity::Abnormal] {
            if !self.states.iter().any(|(p, _)| *p == polarity) {
                return Err(Error::Prompt(format!("no {polarity:?} state pattern")));
            }
        }
        if self.templates.is_empty() {
            return Err(Error::Prompt("no template pattern".into()));
        }
        for (_, s) in &self.states {
            check_placeholder(s, OBJECT)?;
        }
        for t in &self.templates {
            check_placeholder(t, STATE)?;
        }
        Ok(())
    }

    /// Parses the line format: `+ pattern` (abnormal state), `- pattern`
    /// (normal state), `T pattern` (template). Blank lines and lines
    /// starting with `#` are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut states = Vec::new();
        let mut templates = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (tag, rest) = line.split_at(1);
            let pattern = rest
                .strip_prefix(' ')
                .map(str::trim)
                .filter(|p| !p.is_empty())
                .ok_or_else(|| Error::Prompt(format!("line {}: expected `<tag> <pattern>`", i + 1)))?;
            match tag {
                "+" => states.push((Polarity::Abnormal, pattern.to_string())),
                "-" => states.push((Polarity::Normal, pattern.to_string())),
                "T" => templates.push(pattern.to_string()),
                other => {
                    return Err(Error::Prompt(format!("line {}: unknown tag {other:?}", i + 1)));
                }
            }
        }
        let set = PromptSet { states, templates };
        set.validate()?;
        Ok(set)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (p, s) in &self.states {
            let tag = match p {
                Polarity::Normal => '-',
                Polarity::Abnormal => '+',
            };
            out.push_str(&format!("{tag} {s}\n"));
        }
        for t in &self.templates {
            out.push_str(&format!("T {t}\n"));
        }
        out
    }

    /// Templates with every `x/y/z` alternative written out.
    pub fn expanded_templates(&self) -> Vec<String> {
        self.templates.iter().flat_map(|t| expand_alternatives(t)).collect()
    }
}

/// Cartesian expansion of whitespace tokens containing `/`.
fn expand_alternatives(pattern: &str) -> Vec<String> {
    let mut out = vec![String::new()];
    for token in pattern.split_whitespace() {
        let options: Vec<&str> = if token.contains('/') && !token.contains('[') {
            token.split('/').filter(|s| !s.is_empty()).collect()
        } else {
            vec![token]
        };
        out = out
            .iter()
            .flat_map(|prefix| {
                options.iter().map(move |o| {
                    if prefix.is_empty() {
                        o.to_string()
                    } else {
                        format!("{prefix} {o}")
                    }
                })
            })
            .collect();
    }
    out
}

/// Full prompt strings for one object, `(normal, abnormal)`.
pub fn expand_prompts(prompts: &PromptSet, object_name: &str) -> Result<(Vec<String>, Vec<String>)> {
    if object_name.trim().is_empty() {
        return Err(Error::Prompt("object name is empty".into()));
    }
    prompts.validate()?;
    let templates = prompts.expanded_templates();
    let mut normal = Vec::new();
    let mut abnormal = Vec::new();
    for (polarity, state) in &prompts.states {
        let filled = state.replace(OBJECT, object_name);
        let target = match polarity {
            Polarity::Normal => &mut normal,
            Polarity::Abnormal => &mut abnormal,
        };
        target.extend(templates.iter().map(|t| t.replace(STATE, &filled)));
    }
    Ok((normal, abnormal))
}

fn l2_normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn embed(s: &str, seed: u64, d: usize) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; d];
    let mut tokens = 0;
    for token in s.split_whitespace() {
        let mut g = rng::stream(seed, &format!("token:{token}"));
        for (a, z) in acc.iter_mut().zip(rng::normals(&mut g, d, 1.0)) {
            *a += z;
        }
        tokens += 1;
    }
    if tokens == 0 {
        return Err(Error::Prompt("cannot encode an empty string".into()));
    }
    l2_normalize(&mut acc);
    Ok(acc)
}

/// Bag-of-tokens embedding: one seeded Gaussian draw per whitespace token,
/// summed and l2-normalized. Returns a `1×d` tensor.
pub fn encode_text_stub(s: &str, seed: u64, d: usize) -> Result<Tensor> {
    if d == 0 {
        return Err(Error::Prompt("embedding width is zero".into()));
    }
    Ok(Tensor::new(&[1, d], embed(s, seed, d)?)?)
}

/// `2×d` text features, row 0 normal, row 1 abnormal.
#[derive(Debug, Clone)]
pub struct TextFeatures {
    pub f_text: Tensor,
}

impl TextFeatures {
    pub fn normal(&self) -> &[f64] {
        &self.f_text.data()[..self.f_text.shape()[1]]
    }

    pub fn abnormal(&self) -> &[f64] {
        &self.f_text.data()[self.f_text.shape()[1]..]
    }
}

fn mean_embedding(prompts: &[String], seed: u64, d: usize) -> Result<Vec<f64>> {
    let mut acc = vec![0.0f64; d];
    for p in prompts {
        for (a, v) in acc.iter_mut().zip(embed(p, seed, d)?) {
            *a += v;
        }
    }
    let n = prompts.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    l2_normalize(&mut acc);
    Ok(acc)
}

pub fn build_text_features(prompts: &PromptSet, object_name: &str, seed: u64, d: usize) -> Result<TextFeatures> {
    build_text_features_in(prompts, object_name, seed, d, DType::F32)
}

pub fn build_text_features_in(
    prompts: &PromptSet,
    object_name: &str,
    seed: u64,
    d: usize,
    dtype: DType,
) -> Result<TextFeatures> {
    if d == 0 {
        return Err(Error::Prompt("embedding width is zero".into()));
    }
    let (normal, abnormal) = expand_prompts(prompts, object_name)?;
    if normal.is_empty() || abnormal.is_empty() {
        return Err(Error::Prompt("a polarity expanded to no prompts".into()));
    }
    let mut rows = mean_embedding(&normal, seed, d)?;
    rows.extend(mean_embedding(&abnormal, seed, d)?);
    Ok(TextFeatures {
        f_text: Tensor::new_in(&[2, d], rows, dtype)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    fn tiny() -> PromptSet {
        PromptSet {
            states: vec![
                (Polarity::Normal, "[o]".into()),
                (Polarity::Abnormal, "damaged [o]".into()),
            ],
            templates: vec!["a photo of a [c].".into()],
        }
    }

    #[test]
    fn single_template_expansion() {
        let (n, a) = expand_prompts(&tiny(), "brain").unwrap();
        assert_eq!(n, vec!["a photo of a brain."]);
        assert_eq!(a, vec!["a photo of a damaged brain."]);
    }

    #[test]
    fn alternatives_expand() {
        let mut p = tiny();
        p.templates = vec!["a photo of a/the [c].".into()];
        let (n, a) = expand_prompts(&p, "brain").unwrap();
        assert_eq!(n, vec!["a photo of a brain.", "a photo of the brain."]);
        assert_eq!(a.len(), 2);
    }

    #[test]
    fn default_set_counts() {
        // independent count: 3 + 10·2 + 1 + 4·2 + 3
        let p = PromptSet::default();
        assert_eq!(p.expanded_templates().len(), 35);
        let (n, a) = expand_prompts(&p, "texture-a").unwrap();
        assert_eq!(n.len(), 7 * 35);
        assert_eq!(a.len(), 4 * 35);
        assert!(n.contains(&"this is one texture-a without damage in the scene.".to_string()));
        assert!(a.contains(&"a black and white photo of the texture-a with flaw.".to_string()));
    }

    #[test]
    fn placeholder_errors() {
        let mut p = tiny();
        p.states.push((Polarity::Abnormal, "broken".into()));
        assert!(matches!(expand_prompts(&p, "x"), Err(Error::Prompt(_))));
        let mut p = tiny();
        p.templates = vec!["[c] and [c]".into()];
        assert!(expand_prompts(&p, "x").is_err());
        assert!(expand_prompts(&tiny(), " ").is_err());
        let mut p = tiny();
        p.states.retain(|(pol, _)| *pol == Polarity::Normal);
        assert!(expand_prompts(&p, "x").is_err());
    }

    #[test]
    fn file_format_roundtrip() {
        let p = PromptSet::default();
        assert_eq!(PromptSet::parse(&p.to_text()).unwrap(), p);
        let text = "# comment\n- [o]\n\n+ damaged [o]\nT a photo of a [c].\n";
        assert_eq!(PromptSet::parse(text).unwrap(), tiny());
        assert!(PromptSet::parse("x [o]\n").is_err());
        assert!(PromptSet::parse("- [o]\nT a [c]\n").is_err());
        assert!(PromptSet::parse("-\n").is_err());
    }

    #[test]
    fn encoder_is_deterministic_and_normalized() {
        let a = encode_text_stub("damaged brain", 0, 64).unwrap();
        let b = encode_text_stub("damaged brain", 0, 64).unwrap();
        assert!(a.bit_eq(&b));
        let n: f64 = a.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
        assert!(encode_text_stub("   ", 0, 64).is_err());
        let c = encode_text_stub("damaged brain", 1, 64).unwrap();
        assert!(!a.bit_eq(&c));
    }

    #[test]
    fn shared_tokens_correlate() {
        let base = encode_text_stub("a photo of a brain.", 0, 64).unwrap();
        let related = encode_text_stub("a photo of a damaged brain.", 0, 64).unwrap();
        let random: String = (0..20).map(|i| format!("zq{i}x ")).collect();
        let unrelated = encode_text_stub(&random, 0, 64).unwrap();
        let c_rel = cosine(base.data(), related.data());
        let c_unrel = cosine(base.data(), unrelated.data());
        assert!(c_rel > c_unrel, "{c_rel} vs {c_unrel}");
    }

    #[test]
    fn single_prompt_rows_equal_embeddings() {
        let tf = build_text_features(&tiny(), "brain", 0, 32).unwrap();
        let n = encode_text_stub("a photo of a brain.", 0, 32).unwrap();
        let a = encode_text_stub("a photo of a damaged brain.", 0, 32).unwrap();
        assert_eq!(tf.normal(), n.data());
        assert_eq!(tf.abnormal(), a.data());
    }

    #[test]
    fn duplicates_and_order_do_not_matter() {
        let p = PromptSet::default();
        let base = build_text_features_in(&p, "texture-b", 0, 64, DType::F64).unwrap();
        let mut dup = p.clone();
        dup.states.extend(p.states.clone());
        dup.templates.extend(p.templates.clone());
        let d = build_text_features_in(&dup, "texture-b", 0, 64, DType::F64).unwrap();
        let mut rev = p.clone();
        rev.states.reverse();
        rev.templates.reverse();
        let r = build_text_features_in(&rev, "texture-b", 0, 64, DType::F64).unwrap();
        for (x, (y, z)) in base.f_text.data().iter().zip(d.f_text.data().iter().zip(r.f_text.data())) {
            assert!((x - y).abs() < 1e-6);
            assert!((x - z).abs() < 1e-6);
        }
    }

    #[test]
    fn default_rows_differ() {
        let tf = build_text_features(&PromptSet::default(), "texture-a", 0, 64).unwrap();
        assert_eq!(tf.f_text.shape(), &[2, 64]);
        let c = cosine(tf.normal(), tf.abnormal());
        assert!(c < 1.0 - 1e-6, "{c}");
        for row in [tf.normal(), tf.abnormal()] {
            let n: f64 = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }
}
