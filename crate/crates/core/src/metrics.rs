//! Confusion-matrix accounting and the zero-shot segmentation metrics.
//!
//! All counts are exact integers; ratios are formed as big rationals and only
//! converted to `f64` at the end, so results do not depend on accumulation order.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};

use crate::clip_adapt::Segmenter;
use crate::dataio::Sample;
use crate::error::{Error, Result};
use crate::labels::LabelMap;

/// `counts[g * k + p]` = pixels with ground truth `g` predicted as `p`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn from_counts(k: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != k * k {
            return Err(Error::Config(format!(
                "{} counts for a {}x{} matrix",
                counts.len(),
                k,
                k
            )));
        }
        Ok(Self { k, counts })
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.k + pred]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn row_sum(&self, gt: usize) -> u64 {
        self.counts[gt * self.k..(gt + 1) * self.k].iter().sum()
    }

    pub fn col_sum(&self, pred: usize) -> u64 {
        (0..self.k).map(|g| self.get(g, pred)).sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Count every pixel whose ground truth is not `ignore_index`.
    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap, ignore_index: u8) -> Result<()> {
        if !pred.same_size(gt) {
            return Err(Error::Data(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.height(),
                pred.width(),
                gt.height(),
                gt.width()
            )));
        }
        // validate first so a failed call leaves the matrix untouched
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            if g == ignore_index {
                continue;
            }
            if usize::from(g) >= self.k || usize::from(p) >= self.k {
                return Err(Error::Data(format!(
                    "class id {} out of range for {} classes",
                    if usize::from(g) >= self.k { g } else { p },
                    self.k
                )));
            }
        }
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            if g != ignore_index {
                self.counts[usize::from(g) * self.k + usize::from(p)] += 1;
            }
        }
        Ok(())
    }

    fn subset_ok(&self, subset: &BTreeSet<usize>) -> Result<()> {
        if subset.is_empty() {
            return Err(Error::UndefinedMetric("empty class subset".into()));
        }
        if let Some(&c) = subset.iter().find(|&&c| c >= self.k) {
            return Err(Error::Config(format!(
                "class {} outside a {}-class matrix",
                c, self.k
            )));
        }
        Ok(())
    }

    /// `TP / (TP + FP + FN)`, or `None` when the class is absent from both gt and prediction.
    pub fn iou_exact(&self, c: usize) -> Option<BigRational> {
        let tp = self.get(c, c);
        let denom = self.row_sum(c) + self.col_sum(c) - tp;
        (denom > 0).then(|| ratio(tp, denom))
    }

    /// Per-class recall, `None` when the class has no gt pixels.
    pub fn acc_exact(&self, c: usize) -> Option<BigRational> {
        let rows = self.row_sum(c);
        (rows > 0).then(|| ratio(self.get(c, c), rows))
    }

    pub fn miou_exact(&self, subset: &BTreeSet<usize>) -> Result<BigRational> {
        self.subset_ok(subset)?;
        mean(subset.iter().filter_map(|&c| self.iou_exact(c)))
            .ok_or_else(|| Error::UndefinedMetric("no class of the subset is present".into()))
    }

    pub fn pacc_exact(&self, subset: &BTreeSet<usize>) -> Result<BigRational> {
        self.subset_ok(subset)?;
        let hit: u64 = subset.iter().map(|&c| self.get(c, c)).sum();
        let rows: u64 = subset.iter().map(|&c| self.row_sum(c)).sum();
        if rows == 0 {
            return Err(Error::UndefinedMetric("subset has no ground-truth pixels".into()));
        }
        Ok(ratio(hit, rows))
    }

    pub fn macc_exact(&self, subset: &BTreeSet<usize>) -> Result<BigRational> {
        self.subset_ok(subset)?;
        mean(subset.iter().filter_map(|&c| self.acc_exact(c)))
            .ok_or_else(|| Error::UndefinedMetric("subset has no ground-truth pixels".into()))
    }

    /// Row-stochastic copy; all-zero rows stay zero.
    pub fn row_normalized(&self) -> Vec<Vec<f64>> {
        (0..self.k)
            .map(|g| {
                let total = self.row_sum(g);
                (0..self.k)
                    .map(|p| {
                        if total == 0 {
                            0.0
                        } else {
                            self.get(g, p) as f64 / total as f64
                        }
                    })
                    .collect()
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("gt\\pred");
        for p in 0..self.k {
            write!(s, ",{}", p).unwrap();
        }
        s.push('\n');
        for g in 0..self.k {
            write!(s, "{}", g).unwrap();
            for p in 0..self.k {
                write!(s, ",{}", self.get(g, p)).unwrap();
            }
            s.push('\n');
        }
        s
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::parse("cm.csv", 0, "empty file"))?;
        let k = header.split(',').count().saturating_sub(1);
        let mut counts = Vec::with_capacity(k * k);
        for (g, line) in lines.enumerate() {
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != k + 1 || cells[0].trim() != g.to_string() {
                return Err(Error::parse("cm.csv", g + 1, format!("bad row `{}`", line)));
            }
            for cell in &cells[1..] {
                counts.push(
                    cell.trim()
                        .parse::<u64>()
                        .map_err(|e| Error::parse("cm.csv", g + 1, e.to_string()))?,
                );
            }
        }
        Self::from_counts(k, counts)
    }
}

fn ratio(num: u64, den: u64) -> BigRational {
    BigRational::new(BigInt::from(num), BigInt::from(den))
}

fn mean(values: impl Iterator<Item = BigRational>) -> Option<BigRational> {
    let mut sum = BigRational::zero();
    let mut n = 0u64;
    for v in values {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / BigRational::from_integer(BigInt::from(n)))
}

fn to_f64(r: &BigRational) -> f64 {
    r.to_f64().expect("bounded ratio")
}

pub fn merge(a: &ConfusionMatrix, b: &ConfusionMatrix) -> Result<ConfusionMatrix> {
    if a.k != b.k {
        return Err(Error::Config(format!(
            "cannot merge {}-class and {}-class matrices",
            a.k, b.k
        )));
    }
    Ok(ConfusionMatrix {
        k: a.k,
        counts: a.counts.iter().zip(&b.counts).map(|(x, y)| x + y).collect(),
    })
}

pub fn accumulate(
    mut cm: ConfusionMatrix,
    pred: &LabelMap,
    gt: &LabelMap,
    ignore_index: u8,
) -> Result<ConfusionMatrix> {
    cm.accumulate(pred, gt, ignore_index)?;
    Ok(cm)
}

/// Run `model` over `samples` one image at a time and count against their labels.
pub fn confusion_for(model: &dyn Segmenter, samples: &[Sample], ignore_index: u8) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(model.num_labels());
    for s in samples {
        let pred = model.predict(&s.image)?;
        cm.accumulate(&pred[0], &s.labels, ignore_index)?;
    }
    Ok(cm)
}

pub fn iou_per_class(cm: &ConfusionMatrix) -> Vec<Option<f64>> {
    (0..cm.k).map(|c| cm.iou_exact(c).map(|r| to_f64(&r))).collect()
}

pub fn miou(cm: &ConfusionMatrix, subset: &BTreeSet<usize>) -> Result<f64> {
    cm.miou_exact(subset).map(|r| to_f64(&r))
}

pub fn pacc(cm: &ConfusionMatrix, subset: &BTreeSet<usize>) -> Result<f64> {
    cm.pacc_exact(subset).map(|r| to_f64(&r))
}

pub fn macc(cm: &ConfusionMatrix, subset: &BTreeSet<usize>) -> Result<f64> {
    cm.macc_exact(subset).map(|r| to_f64(&r))
}

/// Harmonic mean of seen and unseen mIoU; 0 when both are 0.
pub fn hiou(seen: f64, unseen: f64) -> f64 {
    if seen + unseen == 0.0 {
        0.0
    } else {
        2.0 * seen * unseen / (seen + unseen)
    }
}

pub fn hiou_exact(seen: &BigRational, unseen: &BigRational) -> BigRational {
    let sum = seen + unseen;
    if sum.is_zero() {
        BigRational::zero()
    } else {
        BigRational::from_integer(BigInt::from(2)) * seen * unseen / sum
    }
}

/// Seen/unseen class partition used for evaluation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitSpec {
    pub seen: BTreeSet<usize>,
    pub unseen: BTreeSet<usize>,
}

impl SplitSpec {
    pub fn new(seen: BTreeSet<usize>, unseen: BTreeSet<usize>) -> Result<Self> {
        if let Some(c) = seen.intersection(&unseen).next() {
            return Err(Error::Config(format!("class {} is both seen and unseen", c)));
        }
        if seen.is_empty() && unseen.is_empty() {
            return Err(Error::Config("split covers no classes".into()));
        }
        Ok(Self { seen, unseen })
    }

    /// Every class unseen (annotation-free evaluation).
    pub fn all_unseen(k: usize) -> Self {
        Self {
            seen: BTreeSet::new(),
            unseen: (0..k).collect(),
        }
    }

    pub fn all(&self) -> BTreeSet<usize> {
        self.seen.union(&self.unseen).copied().collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub per_class_iou: Vec<Option<f64>>,
    pub per_class_acc: Vec<Option<f64>>,
    pub miou_seen: Option<f64>,
    pub miou_unseen: Option<f64>,
    pub miou: Option<f64>,
    pub hiou: Option<f64>,
    pub pacc_seen: Option<f64>,
    pub pacc_unseen: Option<f64>,
    pub pacc: Option<f64>,
    pub macc_seen: Option<f64>,
    pub macc_unseen: Option<f64>,
    pub macc: Option<f64>,
}

fn defined(r: Result<BigRational>) -> Result<Option<BigRational>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::UndefinedMetric(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

fn opt_subset(
    f: impl Fn(&BTreeSet<usize>) -> Result<BigRational>,
    subset: &BTreeSet<usize>,
) -> Result<Option<BigRational>> {
    if subset.is_empty() {
        Ok(None)
    } else {
        defined(f(subset))
    }
}

impl MetricsReport {
    pub fn compute(cm: &ConfusionMatrix, split: &SplitSpec) -> Result<Self> {
        let all = split.all();
        let ms = opt_subset(|s| cm.miou_exact(s), &split.seen)?;
        let mu = opt_subset(|s| cm.miou_exact(s), &split.unseen)?;
        let h = match (&ms, &mu) {
            (Some(s), Some(u)) => Some(to_f64(&hiou_exact(s, u))),
            _ => None,
        };
        let f = |o: Option<BigRational>| o.map(|r| to_f64(&r));
        Ok(Self {
            per_class_iou: iou_per_class(cm),
            per_class_acc: (0..cm.k).map(|c| cm.acc_exact(c).map(|r| to_f64(&r))).collect(),
            miou_seen: f(ms),
            miou_unseen: f(mu),
            miou: f(opt_subset(|s| cm.miou_exact(s), &all)?),
            hiou: h,
            pacc_seen: f(opt_subset(|s| cm.pacc_exact(s), &split.seen)?),
            pacc_unseen: f(opt_subset(|s| cm.pacc_exact(s), &split.unseen)?),
            pacc: f(opt_subset(|s| cm.pacc_exact(s), &all)?),
            macc_seen: f(opt_subset(|s| cm.macc_exact(s), &split.seen)?),
            macc_unseen: f(opt_subset(|s| cm.macc_exact(s), &split.unseen)?),
            macc: f(opt_subset(|s| cm.macc_exact(s), &all)?),
        })
    }

    /// Named values in export order: the mIoU block, the pAcc block, the mAcc
    /// block, then per-class IoU and accuracy.
    pub fn rows(&self) -> Vec<(String, Option<f64>)> {
        let mut rows: Vec<(String, Option<f64>)> = [
            ("miou_s", self.miou_seen),
            ("miou_u", self.miou_unseen),
            ("miou", self.miou),
            ("hiou", self.hiou),
            ("pacc_s", self.pacc_seen),
            ("pacc_u", self.pacc_unseen),
            ("pacc", self.pacc),
            ("macc_s", self.macc_seen),
            ("macc_u", self.macc_unseen),
            ("macc", self.macc),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        for (c, v) in self.per_class_iou.iter().enumerate() {
            rows.push((format!("iou_{}", c), *v));
        }
        for (c, v) in self.per_class_acc.iter().enumerate() {
            rows.push((format!("acc_{}", c), *v));
        }
        rows
    }

    /// `metric,value` with values x100 at one decimal; undefined values are `NA`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        for (name, v) in self.rows() {
            writeln!(s, "{},{}", name, format_percent(v)).unwrap();
        }
        s
    }
}

pub fn format_percent(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{:.1}", x * 100.0),
        None => "NA".to_string(),
    }
}

/// Parse a `metric,value` file back into percentages (`None` for `NA`).
pub fn parse_metrics_csv(text: &str) -> Result<Vec<(String, Option<f64>)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let (name, value) = line
            .split_once(',')
            .ok_or_else(|| Error::parse("metrics.csv", i, format!("bad row `{}`", line)))?;
        let value = value.trim();
        let v = if value == "NA" {
            None
        } else {
            Some(
                value
                    .parse::<f64>()
                    .map_err(|e| Error::parse("metrics.csv", i, e.to_string()))?,
            )
        };
        out.push((name.trim().to_string(), v));
    }
    Ok(out)
}

/// Output locations for [`export`].
#[derive(Debug, Clone)]
pub struct ExportPaths {
    pub cm: PathBuf,
    pub cm_normalized: PathBuf,
    pub metrics: PathBuf,
}

impl ExportPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            cm: dir.join("cm.csv"),
            cm_normalized: dir.join("cm_norm.csv"),
            metrics: dir.join("metrics.csv"),
        }
    }
}

pub fn normalized_csv(cm: &ConfusionMatrix) -> String {
    let mut s = String::from("gt\\pred");
    for p in 0..cm.k {
        write!(s, ",{}", p).unwrap();
    }
    s.push('\n');
    for (g, row) in cm.row_normalized().iter().enumerate() {
        write!(s, "{}", g).unwrap();
        for v in row {
            write!(s, ",{}", v).unwrap();
        }
        s.push('\n');
    }
    s
}

pub fn export(cm: &ConfusionMatrix, report: &MetricsReport, paths: &ExportPaths) -> Result<()> {
    let write = |p: &PathBuf, body: String| std::fs::write(p, body).map_err(|e| Error::io(p, e));
    write(&paths.cm, cm.to_csv())?;
    write(&paths.cm_normalized, normalized_csv(cm))?;
    write(&paths.metrics, report.to_csv())?;
    Ok(())
}
