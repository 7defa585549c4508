//! Prompt-ensembled class embeddings and the classifier bank built from them.

use std::collections::HashSet;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde_json::json;

use crate::container::Container;
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::{l2_normalize, ConvParams, Tensor4, DEFAULT_NORM_EPS};

const PLACEHOLDER: &str = "{}";

/// Ordered prompt templates, each with exactly one `{}` placeholder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplateSet {
    templates: Vec<String>,
}

impl PromptTemplateSet {
    pub fn new(templates: Vec<String>) -> Result<Self> {
        if templates.is_empty() {
            return Err(Error::Config("template set is empty".into()));
        }
        for t in &templates {
            if t.matches(PLACEHOLDER).count() != 1 {
                return Err(Error::Config(format!(
                    "template `{}` must contain exactly one {{}} placeholder",
                    t
                )));
            }
        }
        Ok(Self { templates })
    }

    /// Parse a template file: UTF-8, one template per line. Blank lines are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        Self::new(
            text.lines()
                .map(str::trim_end)
                .filter(|l| !l.trim().is_empty())
                .map(String::from)
                .collect(),
        )
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn templates(&self) -> &[String] {
        &self.templates
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn fill(&self, name: &str) -> impl Iterator<Item = String> + '_ {
        let name = name.to_owned();
        self.templates
            .iter()
            .map(move |t| t.replacen(PLACEHOLDER, &name, 1))
    }
}

impl Default for PromptTemplateSet {
    fn default() -> Self {
        Self::new(
            [
                "there is a {} in the scene.",
                "a photo of a {}.",
                "a picture of the {}.",
                "a cropped photo of a {}.",
                "a close-up photo of the {}.",
                "a blurry photo of a {}.",
                "a bright photo of the {}.",
                "there is the {} in the scene.",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        )
        .expect("built-in templates are valid")
    }
}

pub trait TextEncoder {
    fn dim(&self) -> usize;
    fn encode(&self, text: &str) -> Result<Vec<f64>>;
}

/// Hash-seeded random unit vectors. Same string, same vector; no linguistic structure.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyTextEncoder {
    pub dim: usize,
    pub seed: u64,
}

impl ToyTextEncoder {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("text embedding dim must be >= 1".into()));
        }
        Ok(Self { dim, seed })
    }
}

impl TextEncoder for ToyTextEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str) -> Result<Vec<f64>> {
        encode_text(text, self)
    }
}

pub fn encode_text(text: &str, enc: &ToyTextEncoder) -> Result<Vec<f64>> {
    if text.is_empty() {
        return Err(Error::Argument("cannot encode an empty string".into()));
    }
    let mut rng = seed::rng(enc.seed, text);
    let raw: Vec<f64> = (0..enc.dim).map(|_| rng.sample(StandardNormal)).collect();
    l2_normalize(&raw, DEFAULT_NORM_EPS)
}

/// Encode every filled template, average, re-normalise.
pub fn build_class_embedding(
    name: &str,
    templates: &PromptTemplateSet,
    enc: &dyn TextEncoder,
) -> Result<Vec<f64>> {
    let mut sum = vec![0.0; enc.dim()];
    for prompt in templates.fill(name) {
        let v = enc.encode(&prompt)?;
        if v.len() != sum.len() {
            return Err(Error::Config(format!(
                "encoder returned {} dims, expected {}",
                v.len(),
                sum.len()
            )));
        }
        for (s, x) in sum.iter_mut().zip(&v) {
            *s += x;
        }
    }
    let count = templates.len() as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
    l2_normalize(&mean, DEFAULT_NORM_EPS)
        .map_err(|_| Error::Degenerate(format!("prompt average for `{}` cancels out", name)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackgroundRow {
    pub values: Vec<f64>,
    pub trainable: bool,
}

/// Per-class text embeddings used as 1x1 classifier weights, plus an optional
/// learnable background row stored last.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierBank {
    names: Vec<String>,
    rows: Vec<Vec<f64>>,
    pub background: Option<BackgroundRow>,
    pub text_frozen: bool,
}

impl ClassifierBank {
    pub fn new(names: Vec<String>, rows: Vec<Vec<f64>>, background: Option<BackgroundRow>) -> Result<Self> {
        if names.is_empty() || names.len() != rows.len() {
            return Err(Error::Config(format!(
                "{} names for {} rows",
                names.len(),
                rows.len()
            )));
        }
        let dim = rows[0].len();
        for (name, row) in names.iter().zip(&rows) {
            if row.len() != dim {
                return Err(Error::Config(format!("row `{}` has inconsistent dim", name)));
            }
            let n = crate::tensor::norm(row);
            if (n - 1.0).abs() > 1e-6 {
                return Err(Error::Config(format!(
                    "row `{}` has norm {} (text rows must be unit length)",
                    name, n
                )));
            }
        }
        if let Some(bg) = &background {
            if bg.values.len() != dim {
                return Err(Error::Config("background row has inconsistent dim".into()));
            }
        }
        Ok(Self {
            names,
            rows,
            background,
            text_frozen: true,
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn dim(&self) -> usize {
        self.rows[0].len()
    }

    /// Text-derived rows only.
    pub fn class_count(&self) -> usize {
        self.rows.len()
    }

    /// Text rows plus the background row if present.
    pub fn row_count(&self) -> usize {
        self.rows.len() + usize::from(self.background.is_some())
    }

    pub fn text_rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn row(&self, i: usize) -> &[f64] {
        if i < self.rows.len() {
            &self.rows[i]
        } else {
            &self.background.as_ref().expect("row index in range").values
        }
    }

    /// Index of the background row, if any.
    pub fn background_index(&self) -> Option<usize> {
        self.background.as_ref().map(|_| self.rows.len())
    }

    /// Bank with rows reordered: row `i` of the result is row `order[i]` of `self`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        if order.len() != self.rows.len() {
            return Err(Error::Argument("permutation length differs from class count".into()));
        }
        let mut seen = vec![false; order.len()];
        for &o in order {
            if o >= order.len() || std::mem::replace(&mut seen[o], true) {
                return Err(Error::Argument("not a permutation".into()));
            }
        }
        Ok(Self {
            names: order.iter().map(|&o| self.names[o].clone()).collect(),
            rows: order.iter().map(|&o| self.rows[o].clone()).collect(),
            background: self.background.clone(),
            text_frozen: self.text_frozen,
        })
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(
            "bank",
            json!({
                "names": self.names,
                "dim": self.dim(),
                "background": self.background.is_some(),
                "background_trainable": self.background.as_ref().map(|b| b.trainable).unwrap_or(false),
                "text_frozen": self.text_frozen,
            }),
        );
        let flat: Vec<f64> = self.rows.iter().flatten().copied().collect();
        c.push("rows", &[self.rows.len(), self.dim()], &flat)
            .expect("rows are rectangular");
        if let Some(bg) = &self.background {
            c.push("background", &[bg.values.len()], &bg.values)
                .expect("unique name");
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind("bank")?;
        let names: Vec<String> = serde_json::from_value(c.meta["names"].clone())
            .map_err(|e| Error::Data(format!("bank names: {}", e)))?;
        let (dims, flat) = c.get("rows")?;
        if dims.len() != 2 || dims[0] != names.len() {
            return Err(Error::Data("bank rows do not match names".into()));
        }
        let rows: Vec<Vec<f64>> = flat.chunks(dims[1]).map(<[f64]>::to_vec).collect();
        let background = if c.meta["background"].as_bool().unwrap_or(false) {
            Some(BackgroundRow {
                values: c.get("background")?.1.to_vec(),
                trainable: c.meta["background_trainable"].as_bool().unwrap_or(true),
            })
        } else {
            None
        };
        let mut bank = Self::new(names, rows, background)?;
        bank.text_frozen = c.meta["text_frozen"].as_bool().unwrap_or(true);
        Ok(bank)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }
}

pub fn build_bank(
    names: &[String],
    templates: &PromptTemplateSet,
    enc: &dyn TextEncoder,
    with_background: bool,
    seed: u64,
) -> Result<ClassifierBank> {
    if names.is_empty() {
        return Err(Error::Config("no class names".into()));
    }
    let mut uniq = HashSet::new();
    for n in names {
        if !uniq.insert(n.as_str()) {
            return Err(Error::Config(format!("duplicate class name `{}`", n)));
        }
    }
    let rows = names
        .iter()
        .map(|n| build_class_embedding(n, templates, enc))
        .collect::<Result<Vec<_>>>()?;
    let background = if with_background {
        let mut rng = seed::rng(seed, "bank/background");
        let raw: Vec<f64> = (0..enc.dim()).map(|_| rng.sample(StandardNormal)).collect();
        Some(BackgroundRow {
            values: l2_normalize(&raw, DEFAULT_NORM_EPS)?,
            trainable: true,
        })
    } else {
        None
    };
    ClassifierBank::new(names.to_vec(), rows, background)
}

/// Bank rows as a bias-free 1x1 convolution with one output channel per row.
pub fn bank_as_conv(bank: &ClassifierBank) -> ConvParams {
    let rows = bank.row_count();
    let dim = bank.dim();
    let mut data = Vec::with_capacity(rows * dim);
    for r in 0..rows {
        data.extend_from_slice(bank.row(r));
    }
    let weights = Tensor4::from_vec([rows, dim, 1, 1], data).expect("bank rows are finite");
    ConvParams::pointwise(weights, vec![0.0; rows]).expect("valid pointwise conv")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{conv2d, dot, norm};

    fn names(list: &[&str]) -> Vec<String> {
        list.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn template_validation() {
        assert!(PromptTemplateSet::new(vec![]).is_err());
        assert!(PromptTemplateSet::new(vec!["no placeholder".into()]).is_err());
        assert!(PromptTemplateSet::new(vec!["{} and {}".into()]).is_err());
        let t = PromptTemplateSet::parse("a {}\n\nthe {} here\n").unwrap();
        assert_eq!(t.len(), 2);
        assert!(PromptTemplateSet::default()
            .templates()
            .iter()
            .any(|s| s == "there is a {} in the scene."));
        assert_eq!(PromptTemplateSet::default().len(), 8);
    }

    #[test]
    fn encode_is_deterministic_unit_vector() {
        let enc = ToyTextEncoder::new(64, 11).unwrap();
        let a = encode_text("a photo of a cat", &enc).unwrap();
        assert_eq!(a, encode_text("a photo of a cat", &enc).unwrap());
        assert!((norm(&a) - 1.0).abs() < 1e-12);
        assert!(encode_text("", &enc).is_err());
        let other_seed = ToyTextEncoder::new(64, 12).unwrap();
        assert_ne!(a, encode_text("a photo of a cat", &other_seed).unwrap());
    }

    #[test]
    fn single_template_equals_direct_encoding() {
        let enc = ToyTextEncoder::new(16, 3).unwrap();
        let t = PromptTemplateSet::new(vec!["a {} outside".into()]).unwrap();
        let e = build_class_embedding("dog", &t, &enc).unwrap();
        let direct = encode_text("a dog outside", &enc).unwrap();
        for (a, b) in e.iter().zip(&direct) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    struct Cancelling;

    impl TextEncoder for Cancelling {
        fn dim(&self) -> usize {
            2
        }
        fn encode(&self, text: &str) -> Result<Vec<f64>> {
            Ok(if text.starts_with("plus") {
                vec![0.6, 0.8]
            } else {
                vec![-0.6, -0.8]
            })
        }
    }

    #[test]
    fn cancelling_templates_are_degenerate() {
        let t = PromptTemplateSet::new(vec!["plus {}".into(), "minus {}".into()]).unwrap();
        assert!(matches!(
            build_class_embedding("x", &t, &Cancelling),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn bank_shapes_and_flags() {
        let enc = ToyTextEncoder::new(8, 1).unwrap();
        let t = PromptTemplateSet::default();
        let one = build_bank(&names(&["cat"]), &t, &enc, false, 0).unwrap();
        assert_eq!((one.row_count(), one.dim()), (1, 8));
        let bg = build_bank(&names(&["cat", "dog"]), &t, &enc, true, 0).unwrap();
        assert_eq!(bg.row_count(), 3);
        assert_eq!(bg.background_index(), Some(2));
        assert!(bg.background.as_ref().unwrap().trainable);
        assert!(bg.text_frozen);
        assert_eq!(bg, build_bank(&names(&["cat", "dog"]), &t, &enc, true, 0).unwrap());
        assert!(matches!(
            build_bank(&names(&["cat", "cat"]), &t, &enc, false, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn bank_file_round_trip() {
        let enc = ToyTextEncoder::new(8, 1).unwrap();
        let bank = build_bank(&names(&["red square", "blue circle"]), &PromptTemplateSet::default(), &enc, true, 4).unwrap();
        let back = ClassifierBank::from_container(&bank.to_container()).unwrap();
        assert_eq!(back, bank);
    }

    #[test]
    fn bank_conv_selects_rows() {
        let enc = ToyTextEncoder::new(8, 5).unwrap();
        let bank = build_bank(&names(&["a", "b", "c"]), &PromptTemplateSet::default(), &enc, false, 0).unwrap();
        let conv = bank_as_conv(&bank);
        assert_eq!(conv.weights.dims(), [3, 8, 1, 1]);
        assert!(conv.bias.iter().all(|&b| b == 0.0));
        let x = Tensor4::from_vec([1, 8, 1, 1], bank.row(1).to_vec()).unwrap();
        let y = conv2d(&x, &conv).unwrap();
        assert!((y.at(0, 1, 0, 0) - 1.0).abs() < 1e-12);
        assert!((y.at(0, 0, 0, 0) - dot(bank.row(0), bank.row(1))).abs() < 1e-12);
    }
}
