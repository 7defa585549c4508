//! Image corruptions at five severity levels and the robustness sweep.
//!
//! Noise kinds reuse one random field across levels for a given seed, so a
//! higher level perturbs the same pixels further instead of drawing afresh.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};

use crate::clip_adapt::Segmenter;
use crate::dataio::Sample;
use crate::error::{Error, Result};
use crate::metrics::{confusion_for, format_percent};
use crate::seed;
use crate::tensor::Tensor4;

pub const LEVELS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CorruptionKind {
    GaussianNoise,
    ShotNoise,
    ImpulseNoise,
    SpeckleNoise,
    GaussianBlur,
    DefocusBlur,
    Spatter,
    Jpeg,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 8] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::ShotNoise,
        CorruptionKind::ImpulseNoise,
        CorruptionKind::SpeckleNoise,
        CorruptionKind::GaussianBlur,
        CorruptionKind::DefocusBlur,
        CorruptionKind::Spatter,
        CorruptionKind::Jpeg,
    ];

    /// Identifier used on the command line and in override files.
    pub fn key(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::ShotNoise => "shot_noise",
            CorruptionKind::ImpulseNoise => "impulse_noise",
            CorruptionKind::SpeckleNoise => "speckle_noise",
            CorruptionKind::GaussianBlur => "gaussian_blur",
            CorruptionKind::DefocusBlur => "defocus_blur",
            CorruptionKind::Spatter => "spatter",
            CorruptionKind::Jpeg => "jpeg",
        }
    }

    /// Row label in sweep tables.
    pub fn title(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "Gaussian Noise",
            CorruptionKind::ShotNoise => "Shot Noise",
            CorruptionKind::ImpulseNoise => "Impulse Noise",
            CorruptionKind::SpeckleNoise => "Speckle Noise",
            CorruptionKind::GaussianBlur => "Gaussian Blur",
            CorruptionKind::DefocusBlur => "Defocus Blur",
            CorruptionKind::Spatter => "Spatter",
            CorruptionKind::Jpeg => "JPEG",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.key() == s)
            .ok_or_else(|| Error::Argument(format!("unknown corruption `{}`", s)))
    }

    pub fn is_noise(self) -> bool {
        matches!(
            self,
            CorruptionKind::GaussianNoise
                | CorruptionKind::ShotNoise
                | CorruptionKind::ImpulseNoise
                | CorruptionKind::SpeckleNoise
        )
    }

    /// Number of coefficients per level.
    fn arity(self) -> usize {
        match self {
            CorruptionKind::DefocusBlur => 2,
            CorruptionKind::Spatter => 3,
            _ => 1,
        }
    }

    /// Sign of the first coefficient's change as distortion grows.
    fn direction(self) -> f64 {
        match self {
            CorruptionKind::ShotNoise | CorruptionKind::Jpeg => -1.0,
            _ => 1.0,
        }
    }
}

/// Per-kind coefficients for levels 1..=5.
#[derive(Debug, Clone, PartialEq)]
pub struct SeverityTable {
    rows: Vec<(CorruptionKind, [Vec<f64>; LEVELS])>,
}

impl Default for SeverityTable {
    fn default() -> Self {
        use CorruptionKind::*;
        let one = |v: [f64; 5]| v.map(|x| vec![x]);
        Self {
            rows: vec![
                (GaussianNoise, one([0.08, 0.12, 0.18, 0.26, 0.38])),
                (ShotNoise, one([60.0, 25.0, 12.0, 5.0, 3.0])),
                (ImpulseNoise, one([0.03, 0.06, 0.09, 0.17, 0.27])),
                (SpeckleNoise, one([0.15, 0.2, 0.35, 0.45, 0.6])),
                (GaussianBlur, one([1.0, 2.0, 3.0, 4.0, 6.0])),
                (
                    DefocusBlur,
                    [
                        vec![3.0, 0.1],
                        vec![4.0, 0.5],
                        vec![6.0, 0.5],
                        vec![8.0, 0.5],
                        vec![10.0, 0.5],
                    ],
                ),
                // blob count, blob radius in pixels, peak opacity
                (
                    Spatter,
                    [
                        vec![2.0, 3.0, 0.4],
                        vec![4.0, 3.5, 0.5],
                        vec![6.0, 4.0, 0.6],
                        vec![9.0, 4.5, 0.7],
                        vec![12.0, 5.0, 0.8],
                    ],
                ),
                (Jpeg, one([25.0, 18.0, 15.0, 10.0, 7.0])),
            ],
        }
    }
}

impl SeverityTable {
    pub fn coefficients(&self, kind: CorruptionKind, level: usize) -> Result<&[f64]> {
        if !(1..=LEVELS).contains(&level) {
            return Err(Error::Argument(format!("severity level {} outside 1..=5", level)));
        }
        let row = self
            .rows
            .iter()
            .find(|(k, _)| *k == kind)
            .expect("every kind has a row");
        Ok(&row.1[level - 1])
    }

    pub fn set(&mut self, kind: CorruptionKind, levels: [Vec<f64>; LEVELS]) -> Result<()> {
        for l in &levels {
            if l.len() != kind.arity() || l.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config(format!(
                    "{} takes {} finite coefficient(s) per level",
                    kind.key(),
                    kind.arity()
                )));
            }
        }
        let dir = kind.direction();
        for w in levels.windows(2) {
            if (w[1][0] - w[0][0]) * dir <= 0.0 {
                return Err(Error::Config(format!(
                    "{} coefficients are not strictly monotone towards stronger distortion",
                    kind.key()
                )));
            }
        }
        let row = self.rows.iter_mut().find(|(k, _)| *k == kind).expect("row");
        row.1 = levels;
        Ok(())
    }

    /// Apply `kind=c1,c2,c3,c4,c5` override lines. Multi-coefficient levels
    /// separate their components with `:`, e.g. `defocus_blur=3:0.1,4:0.5,...`.
    pub fn apply_overrides(&mut self, text: &str) -> Result<()> {
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected kind=values, got `{}`", line)))?;
            let kind = CorruptionKind::parse(key.trim()).map_err(|e| Error::Config(e.to_string()))?;
            let groups: Vec<Vec<f64>> = value
                .split(',')
                .map(|g| {
                    g.split(':')
                        .map(|v| {
                            v.trim()
                                .parse::<f64>()
                                .map_err(|e| Error::Config(format!("{}: `{}`: {}", kind.key(), v, e)))
                        })
                        .collect()
                })
                .collect::<Result<_>>()?;
            let levels: [Vec<f64>; LEVELS] = groups
                .try_into()
                .map_err(|_| Error::Config(format!("{} needs exactly 5 levels", kind.key())))?;
            self.set(kind, levels)?;
        }
        Ok(())
    }
}

/// Corrupt `image` at `level` using the default severity table.
pub fn apply(image: &Tensor4, kind: CorruptionKind, level: usize, seed: u64) -> Result<Tensor4> {
    apply_level(image, kind, level, seed, &SeverityTable::default())
}

pub fn apply_level(
    image: &Tensor4,
    kind: CorruptionKind,
    level: usize,
    seed: u64,
    table: &SeverityTable,
) -> Result<Tensor4> {
    let coeffs = table.coefficients(kind, level)?;
    apply_with(image, kind, coeffs, seed)
}

/// Corrupt with explicit coefficients; zero strength (e.g. `σ = 0`) is the identity.
pub fn apply_with(image: &Tensor4, kind: CorruptionKind, coeffs: &[f64], seed: u64) -> Result<Tensor4> {
    if coeffs.len() != kind.arity() {
        return Err(Error::Argument(format!(
            "{} takes {} coefficient(s), got {}",
            kind.key(),
            kind.arity(),
            coeffs.len()
        )));
    }
    if image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Argument("corruption input must lie in [0,1]".into()));
    }
    let mut rng = seed::rng(seed, kind.key());
    let mut out = image.clone();
    match kind {
        CorruptionKind::GaussianNoise => {
            let sigma = coeffs[0];
            for v in out.data_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v += sigma * z;
            }
        }
        CorruptionKind::ShotNoise => {
            let c = coeffs[0];
            if c <= 0.0 {
                return Err(Error::Argument("shot-noise photon scale must be positive".into()));
            }
            for v in out.data_mut() {
                let lambda = *v * c;
                *v = if lambda > 0.0 {
                    let p = Poisson::new(lambda).map_err(|e| Error::Argument(e.to_string()))?;
                    p.sample(&mut rng) / c
                } else {
                    0.0
                };
            }
        }
        CorruptionKind::ImpulseNoise => {
            let amount = coeffs[0];
            for v in out.data_mut() {
                let hit: f64 = rng.random();
                let salt: bool = rng.random();
                if hit < amount {
                    *v = if salt { 1.0 } else { 0.0 };
                }
            }
        }
        CorruptionKind::SpeckleNoise => {
            let c = coeffs[0];
            for v in out.data_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v += *v * c * z;
            }
        }
        CorruptionKind::GaussianBlur => {
            out = separable_blur(image, &gaussian_kernel_1d(coeffs[0]));
        }
        CorruptionKind::DefocusBlur => {
            out = convolve_reflect(image, &disk_kernel(coeffs[0], coeffs[1]));
        }
        CorruptionKind::Spatter => spatter(&mut out, coeffs, &mut rng),
        CorruptionKind::Jpeg => out = jpeg_roundtrip(image, coeffs[0])?,
    }
    for v in out.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(out)
}

/// Half-sample symmetric reflection of `i` into `0..n`.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

fn gaussian_kernel_1d(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (4.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

fn separable_blur(image: &Tensor4, k: &[f64]) -> Tensor4 {
    let [n, c, h, w] = image.dims();
    let r = (k.len() / 2) as isize;
    let mut tmp = Tensor4::zeros([n, c, h, w]);
    let mut out = Tensor4::zeros([n, c, h, w]);
    for b in 0..n {
        for ch in 0..c {
            let src = image.plane(b, ch);
            let mid = tmp.plane_mut(b, ch);
            for y in 0..h {
                for x in 0..w {
                    mid[y * w + x] = k
                        .iter()
                        .enumerate()
                        .map(|(i, kv)| kv * src[y * w + reflect(x as isize + i as isize - r, w)])
                        .sum();
                }
            }
            let mid = tmp.plane(b, ch).to_vec();
            let dst = out.plane_mut(b, ch);
            for y in 0..h {
                for x in 0..w {
                    dst[y * w + x] = k
                        .iter()
                        .enumerate()
                        .map(|(i, kv)| kv * mid[reflect(y as isize + i as isize - r, h) * w + x])
                        .sum();
                }
            }
        }
    }
    out
}

/// Square kernel: a unit disk of `radius` softened by a Gaussian of `alias` and renormalised.
fn disk_kernel(radius: f64, alias: f64) -> Vec<Vec<f64>> {
    let r = radius.max(0.0);
    let half = r.ceil() as isize;
    let size = (2 * half + 1) as usize;
    let mut disk = vec![vec![0.0; size]; size];
    for y in -half..=half {
        for x in -half..=half {
            if ((x * x + y * y) as f64) <= r * r {
                disk[(y + half) as usize][(x + half) as usize] = 1.0;
            }
        }
    }
    let g = gaussian_kernel_1d(alias);
    let gr = (g.len() / 2) as isize;
    let mut soft = vec![vec![0.0; size]; size];
    for y in 0..size as isize {
        for x in 0..size as isize {
            let mut acc = 0.0;
            for (i, gy) in g.iter().enumerate() {
                for (j, gx) in g.iter().enumerate() {
                    let (yy, xx) = (y + i as isize - gr, x + j as isize - gr);
                    if yy >= 0 && xx >= 0 && (yy as usize) < size && (xx as usize) < size {
                        acc += gy * gx * disk[yy as usize][xx as usize];
                    }
                }
            }
            soft[y as usize][x as usize] = acc;
        }
    }
    let total: f64 = soft.iter().flatten().sum();
    for row in soft.iter_mut() {
        row.iter_mut().for_each(|v| *v /= total);
    }
    soft
}

fn convolve_reflect(image: &Tensor4, k: &[Vec<f64>]) -> Tensor4 {
    let [n, c, h, w] = image.dims();
    let r = (k.len() / 2) as isize;
    let mut out = Tensor4::zeros([n, c, h, w]);
    for b in 0..n {
        for ch in 0..c {
            let src = image.plane(b, ch);
            let dst = out.plane_mut(b, ch);
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for (i, row) in k.iter().enumerate() {
                        let yy = reflect(y as isize + i as isize - r, h);
                        for (j, kv) in row.iter().enumerate() {
                            if *kv != 0.0 {
                                acc += kv * src[yy * w + reflect(x as isize + j as isize - r, w)];
                            }
                        }
                    }
                    dst[y * w + x] = acc;
                }
            }
        }
    }
    out
}

const MUD: [f64; 3] = [63.0 / 255.0, 42.0 / 255.0, 20.0 / 255.0];

/// Soft mud-coloured blobs. Blob `i` is the same for every level, so higher
/// counts only add blobs.
fn spatter(img: &mut Tensor4, coeffs: &[f64], rng: &mut impl Rng) {
    let [n, _, h, w] = img.dims();
    let count = coeffs[0].max(0.0).round() as usize;
    let (radius, opacity) = (coeffs[1].max(1e-6), coeffs[2].clamp(0.0, 1.0));
    for b in 0..n {
        let mut alpha = vec![0.0f64; h * w];
        for _ in 0..count {
            let cy = rng.random::<f64>() * h as f64;
            let cx = rng.random::<f64>() * w as f64;
            let scale = 0.7 + 0.6 * rng.random::<f64>();
            let s = radius * scale;
            for y in 0..h {
                for x in 0..w {
                    let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                    let a = opacity * (-(dy * dy + dx * dx) / (2.0 * s * s)).exp();
                    let slot = &mut alpha[y * w + x];
                    *slot = 1.0 - (1.0 - *slot) * (1.0 - a);
                }
            }
        }
        for (ch, mud) in MUD.iter().enumerate() {
            let plane = img.plane_mut(b, ch);
            for (v, a) in plane.iter_mut().zip(&alpha) {
                *v = *v * (1.0 - a) + mud * a;
            }
        }
    }
}

const LUMA_Q: [f64; 64] = [
    16., 11., 10., 16., 24., 40., 51., 61., 12., 12., 14., 19., 26., 58., 60., 55., 14., 13., 16., 24., 40., 57.,
    69., 56., 14., 17., 22., 29., 51., 87., 80., 62., 18., 22., 37., 56., 68., 109., 103., 77., 24., 35., 55., 64.,
    81., 104., 113., 92., 49., 64., 78., 87., 103., 121., 120., 101., 72., 92., 95., 98., 112., 100., 103., 99.,
];

const CHROMA_Q: [f64; 64] = [
    17., 18., 24., 47., 99., 99., 99., 99., 18., 21., 26., 66., 99., 99., 99., 99., 24., 26., 56., 99., 99., 99.,
    99., 99., 47., 66., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99.,
    99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99., 99.,
];

fn scaled_table(base: &[f64; 64], quality: f64) -> [f64; 64] {
    let q = quality.clamp(1.0, 100.0);
    let scale = if q < 50.0 { 5000.0 / q } else { 200.0 - 2.0 * q };
    base.map(|b| ((b * scale + 50.0) / 100.0).floor().clamp(1.0, 255.0))
}

fn dct_basis() -> [[f64; 8]; 8] {
    let mut m = [[0.0; 8]; 8];
    for (u, row) in m.iter_mut().enumerate() {
        let a = if u == 0 { (1.0f64 / 8.0).sqrt() } else { 0.25f64.sqrt() };
        for (x, v) in row.iter_mut().enumerate() {
            *v = a * (PI * (2.0 * x as f64 + 1.0) * u as f64 / 16.0).cos();
        }
    }
    m
}

/// Quantise one 8x8 block in place (values already level-shifted).
fn code_block(block: &mut [f64; 64], table: &[f64; 64], basis: &[[f64; 8]; 8]) {
    let mut tmp = [0.0; 64];
    // forward: C = B X B^T
    for u in 0..8 {
        for x in 0..8 {
            tmp[u * 8 + x] = (0..8).map(|y| basis[u][y] * block[y * 8 + x]).sum();
        }
    }
    let mut coef = [0.0; 64];
    for u in 0..8 {
        for v in 0..8 {
            coef[u * 8 + v] = (0..8).map(|x| tmp[u * 8 + x] * basis[v][x]).sum();
        }
    }
    for (c, q) in coef.iter_mut().zip(table) {
        *c = (*c / q).round() * q;
    }
    // inverse: X = B^T C B
    for y in 0..8 {
        for v in 0..8 {
            tmp[y * 8 + v] = (0..8).map(|u| basis[u][y] * coef[u * 8 + v]).sum();
        }
    }
    for y in 0..8 {
        for x in 0..8 {
            block[y * 8 + x] = (0..8).map(|v| tmp[y * 8 + v] * basis[v][x]).sum();
        }
    }
}

/// Block-DCT quantisation in full-resolution YCbCr with IJG-scaled tables.
fn jpeg_roundtrip(image: &Tensor4, quality: f64) -> Result<Tensor4> {
    let [n, c, h, w] = image.dims();
    if c != 3 {
        return Err(Error::Argument("jpeg corruption needs 3-channel images".into()));
    }
    let basis = dct_basis();
    let tables = [scaled_table(&LUMA_Q, quality), scaled_table(&CHROMA_Q, quality), scaled_table(&CHROMA_Q, quality)];
    let mut out = Tensor4::zeros([n, c, h, w]);
    for b in 0..n {
        let mut ycc = vec![vec![0.0; h * w]; 3];
        for i in 0..h * w {
            let (r, g, bl) = (
                image.plane(b, 0)[i] * 255.0,
                image.plane(b, 1)[i] * 255.0,
                image.plane(b, 2)[i] * 255.0,
            );
            ycc[0][i] = 0.299 * r + 0.587 * g + 0.114 * bl - 128.0;
            ycc[1][i] = -0.168736 * r - 0.331264 * g + 0.5 * bl;
            ycc[2][i] = 0.5 * r - 0.418688 * g - 0.081312 * bl;
        }
        for (plane, table) in ycc.iter_mut().zip(&tables) {
            for by in (0..h).step_by(8) {
                for bx in (0..w).step_by(8) {
                    let mut block = [0.0; 64];
                    for y in 0..8 {
                        for x in 0..8 {
                            // edge blocks replicate the last row/column
                            let (yy, xx) = ((by + y).min(h - 1), (bx + x).min(w - 1));
                            block[y * 8 + x] = plane[yy * w + xx];
                        }
                    }
                    code_block(&mut block, table, &basis);
                    for y in 0..8.min(h - by) {
                        for x in 0..8.min(w - bx) {
                            plane[(by + y) * w + bx + x] = block[y * 8 + x];
                        }
                    }
                }
            }
        }
        for i in 0..h * w {
            let (yv, cb, cr) = (ycc[0][i] + 128.0, ycc[1][i], ycc[2][i]);
            let rgb = [
                yv + 1.402 * cr,
                yv - 0.344136 * cb - 0.714136 * cr,
                yv + 1.772 * cb,
            ];
            for (ch, v) in rgb.iter().enumerate() {
                out.plane_mut(b, ch)[i] = v.round().clamp(0.0, 255.0) / 255.0;
            }
        }
    }
    Ok(out)
}

/// mIoU per (kind, level) plus the clean reference.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub levels: Vec<usize>,
    pub clean: Option<f64>,
    pub rows: Vec<(CorruptionKind, Vec<Option<f64>>)>,
}

impl SweepTable {
    pub fn get(&self, kind: CorruptionKind, level: usize) -> Option<f64> {
        let col = self.levels.iter().position(|&l| l == level)?;
        self.rows.iter().find(|(k, _)| *k == kind)?.1[col]
    }

    /// Header `kind,level1..`, a `None` row with the clean value, then one row per kind.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("kind");
        for l in &self.levels {
            write!(s, ",level{}", l).unwrap();
        }
        s.push_str("\nNone");
        for _ in &self.levels {
            write!(s, ",{}", format_percent(self.clean)).unwrap();
        }
        s.push('\n');
        for (kind, vals) in &self.rows {
            s.push_str(kind.title());
            for v in vals {
                write!(s, ",{}", format_percent(*v)).unwrap();
            }
            s.push('\n');
        }
        s
    }
}

/// Parameters of a robustness sweep.
#[derive(Debug, Clone)]
pub struct SweepConfig {
    pub kinds: Vec<CorruptionKind>,
    pub levels: Vec<usize>,
    pub table: SeverityTable,
    /// Classes averaged into each mIoU cell.
    pub classes: BTreeSet<usize>,
    pub ignore_index: u8,
    pub seed: u64,
}

fn miou_of(model: &dyn Segmenter, samples: &[Sample], cfg: &SweepConfig) -> Result<Option<f64>> {
    let cm = confusion_for(model, samples, cfg.ignore_index)?;
    match cm.miou_exact(&cfg.classes) {
        Ok(r) => Ok(Some(num_traits::ToPrimitive::to_f64(&r).expect("bounded"))),
        Err(Error::UndefinedMetric(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

pub fn sweep(samples: &[Sample], model: &dyn Segmenter, cfg: &SweepConfig) -> Result<SweepTable> {
    if let Some(&l) = cfg.levels.iter().find(|l| !(1..=LEVELS).contains(*l)) {
        return Err(Error::Argument(format!("severity level {} outside 1..=5", l)));
    }
    let clean = miou_of(model, samples, cfg)?;
    let mut rows = Vec::with_capacity(cfg.kinds.len());
    for &kind in &cfg.kinds {
        let mut vals = Vec::with_capacity(cfg.levels.len());
        for &level in &cfg.levels {
            let corrupted: Vec<Sample> = samples
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let img_seed = seed::derive_indexed(cfg.seed, "corrupt", i as u64);
                    Ok(Sample {
                        image: apply_level(&s.image, kind, level, img_seed, &cfg.table)?,
                        labels: s.labels.clone(),
                    })
                })
                .collect::<Result<_>>()?;
            vals.push(miou_of(model, &corrupted, cfg)?);
        }
        rows.push((kind, vals));
    }
    Ok(SweepTable {
        levels: cfg.levels.clone(),
        clean,
        rows,
    })
}
