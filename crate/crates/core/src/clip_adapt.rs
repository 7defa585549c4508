//! Toy image encoder with a global attention-pooling head, its conversion to a
//! per-pixel classifier, and dense segmentation inference.
//!
//! The pooled output of the head is
//!
//! ```text
//! q = Emb_q(mean_i x_i),  k_i = Emb_k(x_i),  v_i = Emb_v(x_i)
//! out = F( sum_i softmax_i(q . k_i / C) v_i ) = sum_i softmax_i(q . k_i / C) F(v_i)
//! ```
//!
//! The second form holds because `F` is affine and the weights sum to one, so
//! `F(v_i)` at each location is already a classifiable embedding. Dropping the
//! query/key maps and running `Emb_v` and `F` as 1x1 convolutions yields the
//! dense head.

use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde_json::json;

use crate::container::Container;
use crate::error::{Error, Result};
use crate::labels::{ConfidenceMap, LabelMap, IGNORE_INDEX};
use crate::seed;
use crate::tensor::{
    bilinear_resize, conv2d, dot, l2_normalize, norm, relu, softmax, ConvParams, Tensor4,
    DEFAULT_NORM_EPS,
};
use crate::textbank::ClassifierBank;

/// Minimum cosine between a pure-prototype dense feature and its class embedding.
pub const PLANT_MIN_COSINE: f64 = 0.9;

pub const DEFAULT_TAU: f64 = 0.01;

/// Affine map `y = W x + b`, `W` stored row-major as (out, in).
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize, weight: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if weight.len() != in_dim * out_dim || bias.len() != out_dim {
            return Err(Error::Config(format!(
                "linear {}->{} got {} weights and {} biases",
                in_dim,
                out_dim,
                weight.len(),
                bias.len()
            )));
        }
        Ok(Self {
            in_dim,
            out_dim,
            weight,
            bias,
        })
    }

    fn random(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let scale = 1.0 / (in_dim as f64).sqrt();
        let weight = (0..in_dim * out_dim)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self {
            in_dim,
            out_dim,
            weight,
            bias: vec![0.0; out_dim],
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_dim);
        (0..self.out_dim)
            .map(|o| {
                let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
                let mut acc = self.bias[o];
                for (w, v) in row.iter().zip(x) {
                    acc += w * v;
                }
                acc
            })
            .collect()
    }

    /// The same map as a 1x1 convolution; weights are copied verbatim.
    pub fn to_pointwise(&self) -> ConvParams {
        let w = Tensor4::from_vec([self.out_dim, self.in_dim, 1, 1], self.weight.clone())
            .expect("finite weights");
        ConvParams::pointwise(w, self.bias.clone()).expect("consistent dims")
    }
}

/// Channel widths, kernel sizes and last-layer dilation of a backbone.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneShape {
    pub in_channels: usize,
    pub channels: Vec<usize>,
    pub kernels: Vec<usize>,
    pub last_dilation: usize,
}

impl Default for BackboneShape {
    fn default() -> Self {
        Self {
            in_channels: 3,
            channels: vec![8, 16, 32],
            kernels: vec![3, 3, 3],
            last_dilation: 1,
        }
    }
}

impl BackboneShape {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.len() != self.kernels.len() {
            return Err(Error::Config("backbone needs one kernel size per layer".into()));
        }
        if self.kernels.iter().any(|&k| k == 0 || k % 2 == 0) {
            return Err(Error::Config("backbone kernels must be odd".into()));
        }
        if self.last_dilation == 0 || self.in_channels == 0 || self.channels.contains(&0) {
            return Err(Error::Config("backbone dims and dilation must be >= 1".into()));
        }
        Ok(())
    }

    pub fn out_channels(&self) -> usize {
        *self.channels.last().expect("validated")
    }

    fn dilation(&self, layer: usize) -> usize {
        if layer + 1 == self.channels.len() {
            self.last_dilation
        } else {
            1
        }
    }

    /// Half-width of the receptive field.
    pub fn radius(&self) -> usize {
        self.kernels
            .iter()
            .enumerate()
            .map(|(l, k)| self.dilation(l) * (k - 1) / 2)
            .sum()
    }
}

/// Conv stack with ReLU between layers (not after the last), size-preserving padding.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyBackbone {
    pub layers: Vec<ConvParams>,
}

impl ToyBackbone {
    pub fn new(layers: Vec<ConvParams>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("backbone has no layers".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].out_channels() != pair[1].in_channels() {
                return Err(Error::Config("backbone layer channels do not chain".into()));
            }
        }
        for l in &layers {
            l.validate()?;
        }
        Ok(Self { layers })
    }

    pub fn in_channels(&self) -> usize {
        self.layers[0].in_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().expect("non-empty").out_channels()
    }

    pub fn forward(&self, image: &Tensor4) -> Result<Tensor4> {
        let mut x = conv2d(image, &self.layers[0])?;
        for layer in &self.layers[1..] {
            x = conv2d(&relu(&x), layer)?;
        }
        Ok(x)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttnPoolHead {
    pub emb_q: Linear,
    pub emb_k: Linear,
    pub emb_v: Linear,
    /// Final linear map applied after pooling.
    pub proj: Linear,
    pub scale: f64,
}

impl AttnPoolHead {
    pub fn new(emb_q: Linear, emb_k: Linear, emb_v: Linear, proj: Linear, scale: f64) -> Result<Self> {
        let d_in = emb_v.in_dim;
        if emb_q.in_dim != d_in || emb_k.in_dim != d_in {
            return Err(Error::Config("head embeddings disagree on input dim".into()));
        }
        if emb_q.out_dim != emb_k.out_dim {
            return Err(Error::Config("query and key dims differ".into()));
        }
        if proj.in_dim != emb_v.out_dim {
            return Err(Error::Config("final linear does not follow the value embedding".into()));
        }
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::Config("attention scale must be positive".into()));
        }
        Ok(Self {
            emb_q,
            emb_k,
            emb_v,
            proj,
            scale,
        })
    }

    /// Random head with `C = sqrt(d_emb)`.
    pub fn random(d_in: usize, d_emb: usize, d_out: usize, seed: u64) -> Self {
        let mut rng = seed::rng(seed, "head/random");
        let emb_q = Linear::random(d_in, d_emb, &mut rng);
        let emb_k = Linear::random(d_in, d_emb, &mut rng);
        let emb_v = Linear::random(d_in, d_emb, &mut rng);
        let proj = Linear::random(d_emb, d_out, &mut rng);
        Self {
            emb_q,
            emb_k,
            emb_v,
            proj,
            scale: (d_emb as f64).sqrt(),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.emb_v.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.proj.out_dim
    }

    fn check(&self, features: &Tensor4) -> Result<()> {
        if features.channels() != self.in_dim() {
            return Err(Error::Config(format!(
                "head expects {} channels, got {}",
                self.in_dim(),
                features.channels()
            )));
        }
        if features.plane_len() == 0 {
            return Err(Error::Config("empty feature map".into()));
        }
        Ok(())
    }
}

/// 1x1 convolutions carrying the value embedding and the final linear map.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseHead {
    pub conv_v: ConvParams,
    pub conv_f: ConvParams,
}

impl DenseHead {
    pub fn out_dim(&self) -> usize {
        self.conv_f.out_channels()
    }
}

/// Per-pixel embeddings `F(Emb_v(x_i))`, shape (n, d_out, h, w).
#[derive(Debug, Clone, PartialEq)]
pub struct DenseFeatureMap(Tensor4);

impl DenseFeatureMap {
    pub fn tensor(&self) -> &Tensor4 {
        &self.0
    }
}

fn spatial_weights(features: &Tensor4, head: &AttnPoolHead, n: usize) -> Result<Vec<f64>> {
    let (h, w) = (features.height(), features.width());
    let hw = (h * w) as f64;
    let mean: Vec<f64> = (0..features.channels())
        .map(|c| features.plane(n, c).iter().sum::<f64>() / hw)
        .collect();
    let q = head.emb_q.apply(&mean);
    let mut scores = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let k = head.emb_k.apply(&features.pixel(n, y, x));
            scores.push(dot(&q, &k) / head.scale);
        }
    }
    softmax(&scores)
}

/// Softmax attention weights of the pooled query over spatial positions, shape (n, 1, h, w).
pub fn attn_weights(features: &Tensor4, head: &AttnPoolHead) -> Result<Tensor4> {
    head.check(features)?;
    let [n, _, h, w] = features.dims();
    let mut data = Vec::with_capacity(n * h * w);
    for b in 0..n {
        data.extend(spatial_weights(features, head, b)?);
    }
    Tensor4::from_vec([n, 1, h, w], data)
}

/// Global attention pooling: `F(sum_i w_i Emb_v(x_i))`, one embedding per batch item.
pub fn attn_pool_global(features: &Tensor4, head: &AttnPoolHead) -> Result<Vec<Vec<f64>>> {
    head.check(features)?;
    let [n, _, h, w] = features.dims();
    let mut out = Vec::with_capacity(n);
    for b in 0..n {
        let weights = spatial_weights(features, head, b)?;
        let mut pooled = vec![0.0; head.emb_v.out_dim];
        for y in 0..h {
            for x in 0..w {
                let v = head.emb_v.apply(&features.pixel(b, y, x));
                let wi = weights[y * w + x];
                for (p, vi) in pooled.iter_mut().zip(&v) {
                    *p += wi * vi;
                }
            }
        }
        out.push(head.proj.apply(&pooled));
    }
    Ok(out)
}

/// Drop query/key embeddings; carry value and final maps over as 1x1 convolutions.
pub fn convert_to_dense(head: &AttnPoolHead) -> DenseHead {
    DenseHead {
        conv_v: head.emb_v.to_pointwise(),
        conv_f: head.proj.to_pointwise(),
    }
}

pub fn dense_features(features: &Tensor4, dense: &DenseHead) -> Result<DenseFeatureMap> {
    let v = conv2d(features, &dense.conv_v)?;
    Ok(DenseFeatureMap(conv2d(&v, &dense.conv_f)?))
}

/// Cosine similarity between each pixel embedding and each bank row, divided by `tau`.
pub fn dense_logits(dfm: &DenseFeatureMap, bank: &ClassifierBank, tau: f64) -> Result<Tensor4> {
    if !(tau > 0.0) {
        return Err(Error::Argument(format!("temperature {} must be > 0", tau)));
    }
    let t = &dfm.0;
    if t.channels() != bank.dim() {
        return Err(Error::Config(format!(
            "feature dim {} does not match bank dim {}",
            t.channels(),
            bank.dim()
        )));
    }
    let rows = (0..bank.row_count())
        .map(|r| l2_normalize(bank.row(r), DEFAULT_NORM_EPS))
        .collect::<Result<Vec<_>>>()?;
    let [n, _, h, w] = t.dims();
    let mut out = Tensor4::zeros([n, rows.len(), h, w]);
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let f = l2_normalize(&t.pixel(b, y, x), DEFAULT_NORM_EPS).map_err(|_| {
                    Error::Degenerate(format!("pixel feature ({}, {}, {}) has zero norm", b, y, x))
                })?;
                for (r, row) in rows.iter().enumerate() {
                    out.set(b, r, y, x, dot(&f, row) / tau);
                }
            }
        }
    }
    out.ensure_finite("dense_logits")
}

/// Per-pixel argmax (ties to the lowest index) and the softmax probability of the winner.
pub fn decode_logits(logits: &Tensor4) -> Result<(Vec<LabelMap>, Vec<ConfidenceMap>)> {
    let [n, k, h, w] = logits.dims();
    if k == 0 || k > usize::from(IGNORE_INDEX) {
        return Err(Error::Config(format!("cannot decode {} classes", k)));
    }
    let hw = h * w;
    let mut labels = Vec::with_capacity(n);
    let mut confs = Vec::with_capacity(n);
    let mut column = vec![0.0; k];
    for b in 0..n {
        let base = b * k * hw;
        let data = logits.data();
        let mut lab = vec![0u8; hw];
        let mut conf = vec![0.0; hw];
        for i in 0..hw {
            for (c, slot) in column.iter_mut().enumerate() {
                *slot = data[base + c * hw + i];
            }
            let mut best = 0;
            for c in 1..k {
                if column[c] > column[best] {
                    best = c;
                }
            }
            let max = column[best];
            let sum: f64 = column.iter().map(|v| (v - max).exp()).sum();
            lab[i] = best as u8;
            conf[i] = 1.0 / sum;
        }
        labels.push(LabelMap::new(h, w, lab)?);
        confs.push(ConfidenceMap {
            height: h,
            width: w,
            data: conf,
        });
    }
    Ok((labels, confs))
}

/// Dense inference: backbone, dense head, cosine logits, resize to `out_size`, argmax.
pub fn segment(
    image: &Tensor4,
    backbone: &ToyBackbone,
    dense: &DenseHead,
    bank: &ClassifierBank,
    tau: f64,
    out_size: (usize, usize),
) -> Result<(Vec<LabelMap>, Vec<ConfidenceMap>)> {
    let features = backbone.forward(image)?;
    let dfm = dense_features(&features, dense)?;
    let logits = dense_logits(&dfm, bank, tau)?;
    let resized = bilinear_resize(&logits, out_size.0, out_size.1)?;
    decode_logits(&resized)
}

/// Anything that maps a batch of images to per-pixel class predictions.
pub trait Segmenter {
    /// Number of labels the model can emit (classifier rows).
    fn num_labels(&self) -> usize;
    fn predict(&self, images: &Tensor4) -> Result<Vec<LabelMap>>;
}

/// Frozen encoder converted to a dense classifier, with its bank and temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseClip {
    pub backbone: ToyBackbone,
    pub dense: DenseHead,
    pub bank: ClassifierBank,
    pub tau: f64,
}

impl DenseClip {
    pub fn new(encoder: &Encoder, bank: ClassifierBank, tau: f64) -> Result<Self> {
        if encoder.head.out_dim() != bank.dim() {
            return Err(Error::Config(format!(
                "encoder embeds into {} dims but bank rows have {}",
                encoder.head.out_dim(),
                bank.dim()
            )));
        }
        if !(tau > 0.0) {
            return Err(Error::Argument(format!("temperature {} must be > 0", tau)));
        }
        Ok(Self {
            backbone: encoder.backbone.clone(),
            dense: convert_to_dense(&encoder.head),
            bank,
            tau,
        })
    }

    pub fn segment(&self, images: &Tensor4) -> Result<(Vec<LabelMap>, Vec<ConfidenceMap>)> {
        segment(
            images,
            &self.backbone,
            &self.dense,
            &self.bank,
            self.tau,
            (images.height(), images.width()),
        )
    }
}

impl Segmenter for DenseClip {
    fn num_labels(&self) -> usize {
        self.bank.row_count()
    }

    fn predict(&self, images: &Tensor4) -> Result<Vec<LabelMap>> {
        Ok(self.segment(images)?.0)
    }
}

/// Backbone plus global attention-pool head: the unit stored in encoder files.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub backbone: ToyBackbone,
    pub head: AttnPoolHead,
}

fn push_linear(c: &mut Container, name: &str, l: &Linear) {
    c.push(format!("{}.weight", name), &[l.out_dim, l.in_dim], &l.weight)
        .expect("linear weight dims");
    c.push(format!("{}.bias", name), &[l.out_dim], &l.bias)
        .expect("linear bias dims");
}

fn get_linear(c: &Container, name: &str) -> Result<Linear> {
    let (wd, w) = c.get(&format!("{}.weight", name))?;
    let (_, b) = c.get(&format!("{}.bias", name))?;
    if wd.len() != 2 {
        return Err(Error::Data(format!("`{}` weight must be 2-d", name)));
    }
    Linear::new(wd[1], wd[0], w.to_vec(), b.to_vec())
}

pub(crate) fn push_conv(c: &mut Container, name: &str, p: &ConvParams) {
    c.push(format!("{}.weight", name), &p.weights.dims(), p.weights.data())
        .expect("conv weight dims");
    c.push(format!("{}.bias", name), &[p.bias.len()], &p.bias)
        .expect("conv bias dims");
}

pub(crate) fn get_conv(c: &Container, name: &str, meta: &serde_json::Value) -> Result<ConvParams> {
    let (wd, w) = c.get(&format!("{}.weight", name))?;
    let (_, b) = c.get(&format!("{}.bias", name))?;
    let dims: [usize; 4] = wd
        .try_into()
        .map_err(|_| Error::Data(format!("`{}` weight must be 4-d", name)))?;
    let field = |k: &str| {
        meta[k]
            .as_u64()
            .map(|v| v as usize)
            .ok_or_else(|| Error::Data(format!("layer `{}` missing `{}`", name, k)))
    };
    ConvParams::new(
        Tensor4::from_vec(dims, w.to_vec())?,
        b.to_vec(),
        field("stride")?,
        field("dilation")?,
        field("padding")?,
    )
}

pub(crate) fn conv_meta(p: &ConvParams) -> serde_json::Value {
    json!({"stride": p.stride, "dilation": p.dilation, "padding": p.padding})
}

impl Encoder {
    pub fn to_container(&self) -> Container {
        let layers: Vec<_> = self.backbone.layers.iter().map(conv_meta).collect();
        let mut c = Container::new(
            "encoder",
            json!({"layers": layers, "scale": self.head.scale}),
        );
        for (i, l) in self.backbone.layers.iter().enumerate() {
            push_conv(&mut c, &format!("backbone.{}", i), l);
        }
        push_linear(&mut c, "head.emb_q", &self.head.emb_q);
        push_linear(&mut c, "head.emb_k", &self.head.emb_k);
        push_linear(&mut c, "head.emb_v", &self.head.emb_v);
        push_linear(&mut c, "head.proj", &self.head.proj);
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind("encoder")?;
        let metas = c.meta["layers"]
            .as_array()
            .ok_or_else(|| Error::Data("encoder header lacks `layers`".into()))?;
        let layers = metas
            .iter()
            .enumerate()
            .map(|(i, m)| get_conv(c, &format!("backbone.{}", i), m))
            .collect::<Result<Vec<_>>>()?;
        let scale = c.meta["scale"]
            .as_f64()
            .ok_or_else(|| Error::Data("encoder header lacks `scale`".into()))?;
        let head = AttnPoolHead::new(
            get_linear(c, "head.emb_q")?,
            get_linear(c, "head.emb_k")?,
            get_linear(c, "head.emb_v")?,
            get_linear(c, "head.proj")?,
            scale,
        )?;
        let backbone = ToyBackbone::new(layers)?;
        if backbone.out_channels() != head.in_dim() {
            return Err(Error::Data("backbone output does not feed the head".into()));
        }
        Ok(Self { backbone, head })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }
}

/// Knobs for [`plant_encoder`].
#[derive(Debug, Clone, PartialEq)]
pub struct PlantConfig {
    pub seed: u64,
    pub d_emb: usize,
    /// Half-width of the uniform per-channel colour perturbation used for fit samples.
    pub jitter: f64,
    /// Jittered samples per class in addition to the pure prototype.
    pub samples_per_class: usize,
    /// Tikhonov weight relative to the largest squared singular value.
    pub ridge: f64,
}

impl Default for PlantConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            d_emb: 32,
            jitter: 0.06,
            samples_per_class: 48,
            ridge: 1e-6,
        }
    }
}

fn planted_backbone(shape: &BackboneShape, rng: &mut impl Rng) -> Result<ToyBackbone> {
    let mut layers = Vec::with_capacity(shape.channels.len());
    let mut in_c = shape.in_channels;
    let last = shape.channels.len() - 1;
    for (l, (&out_c, &k)) in shape.channels.iter().zip(&shape.kernels).enumerate() {
        let dilation = shape.dilation(l);
        let mut w = Tensor4::zeros([out_c, in_c, k, k]);
        let mut bias = vec![0.0; out_c];
        if l == 0 {
            // colour projections: half on the centre tap, half spread over the window
            let taps = (k * k) as f64;
            let c = k / 2;
            for o in 0..out_c {
                for i in 0..in_c {
                    let a = 2.0 * rng.sample::<f64, _>(StandardNormal);
                    for ky in 0..k {
                        for kx in 0..k {
                            w.set(o, i, ky, kx, 0.5 * a / taps);
                        }
                    }
                    w.set(o, i, c, c, 0.5 * a / taps + 0.5 * a);
                }
                bias[o] = rng.random_range(-1.5..1.5);
            }
        } else {
            // per-pixel channel mixing on the centre tap
            let scale = 1.0 / (in_c as f64).sqrt();
            let c = k / 2;
            for o in 0..out_c {
                for i in 0..in_c {
                    w.set(o, i, c, c, scale * rng.sample::<f64, _>(StandardNormal));
                }
                if l != last {
                    bias[o] = rng.random_range(-0.5..0.5);
                }
            }
        }
        layers.push(ConvParams::new(w, bias, 1, dilation, dilation * (k - 1) / 2)?);
        in_c = out_c;
    }
    ToyBackbone::new(layers)
}

fn uniform_patches(colors: &[Vec<f64>], size: usize) -> Result<Tensor4> {
    let c = colors[0].len();
    let plane = size * size;
    let mut data = Vec::with_capacity(colors.len() * c * plane);
    for color in colors {
        for &v in color {
            data.extend(std::iter::repeat_n(v, plane));
        }
    }
    Tensor4::from_vec([colors.len(), c, size, size], data)
}

/// Centre-pixel dense embedding of a uniform patch for each colour.
pub fn patch_embeddings(encoder: &Encoder, colors: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let radius: usize = encoder
        .backbone
        .layers
        .iter()
        .map(|l| l.dilation * (l.kernel().0 - 1) / 2)
        .sum();
    let size = 2 * radius + 1;
    let patches = uniform_patches(colors, size)?;
    let feats = encoder.backbone.forward(&patches)?;
    let dfm = dense_features(&feats, &convert_to_dense(&encoder.head))?;
    Ok((0..colors.len())
        .map(|n| dfm.0.pixel(n, radius, radius))
        .collect())
}

/// Ridge least squares `min ||A X - B||^2 + lambda ||X||^2` through the SVD of `A`.
fn ridge_solve(a: DMatrix<f64>, b: &DMatrix<f64>, rel_ridge: f64) -> Result<DMatrix<f64>> {
    let svd = a.svd(true, true);
    let u = svd.u.as_ref().expect("requested U");
    let vt = svd.v_t.as_ref().expect("requested V^T");
    let s_max = svd.singular_values.max();
    if !(s_max > 0.0) {
        return Err(Error::Planting("fit samples produce an all-zero design matrix".into()));
    }
    let lambda = rel_ridge * s_max * s_max;
    let cutoff = s_max * 1e-12;
    let utb = u.transpose() * b;
    let mut scaled = utb;
    for (i, &s) in svd.singular_values.iter().enumerate() {
        let f = if s > cutoff { s / (s * s + lambda) } else { 0.0 };
        scaled.row_mut(i).scale_mut(f);
    }
    Ok(vt.transpose() * scaled)
}

/// Build a backbone and attention-pool head whose dense embedding of a pure
/// prototype-coloured patch points at that class's embedding.
///
/// The backbone and the query/key/value embeddings are seeded at random; the
/// final linear map is solved by ridge least squares over prototype colours and
/// jittered copies of them. The construction is checked before returning.
pub fn plant_encoder(
    prototypes: &[Vec<f64>],
    class_embeddings: &[Vec<f64>],
    shape: &BackboneShape,
    cfg: &PlantConfig,
) -> Result<(ToyBackbone, AttnPoolHead)> {
    shape.validate()?;
    let k = prototypes.len();
    if k < 2 {
        return Err(Error::Config("planting needs at least two classes".into()));
    }
    if class_embeddings.len() != k {
        return Err(Error::Config(format!(
            "{} prototypes but {} class embeddings",
            k,
            class_embeddings.len()
        )));
    }
    if k > shape.out_channels() {
        return Err(Error::Config(format!(
            "{} classes exceed backbone feature dim {}",
            k,
            shape.out_channels()
        )));
    }
    if prototypes.iter().any(|p| p.len() != shape.in_channels) {
        return Err(Error::Config("prototype length differs from input channels".into()));
    }
    let d_out = class_embeddings[0].len();
    if d_out == 0 || class_embeddings.iter().any(|e| e.len() != d_out) {
        return Err(Error::Config("class embeddings must share one non-zero dim".into()));
    }
    if cfg.d_emb == 0 {
        return Err(Error::Config("d_emb must be >= 1".into()));
    }

    let mut rng = seed::rng(cfg.seed, "plant");
    let backbone = planted_backbone(shape, &mut rng)?;
    let d_in = backbone.out_channels();
    let emb_q = Linear::random(d_in, cfg.d_emb, &mut rng);
    let emb_k = Linear::random(d_in, cfg.d_emb, &mut rng);
    let emb_v = Linear::random(d_in, cfg.d_emb, &mut rng);

    let mut colors = Vec::new();
    let mut targets = Vec::new();
    let mut pure = Vec::new();
    for (p, e) in prototypes.iter().zip(class_embeddings) {
        colors.push(p.clone());
        targets.push(e.clone());
        pure.push(true);
        for _ in 0..cfg.samples_per_class {
            let jittered: Vec<f64> = p
                .iter()
                .map(|&v| (v + rng.random_range(-cfg.jitter..=cfg.jitter)).clamp(0.0, 1.0))
                .collect();
            colors.push(jittered);
            targets.push(e.clone());
            pure.push(false);
        }
    }

    // Centre values of uniform patches, through the real conv stack. Pure
    // prototypes also contribute every off-centre position, which covers the
    // zero-padded windows found along image edges and corners.
    let radius = shape.radius();
    let size = 2 * radius + 1;
    let patches = uniform_patches(&colors, size)?;
    let feats = backbone.forward(&patches)?;
    let mut samples: Vec<(usize, usize, usize)> = Vec::new();
    for (r, &is_pure) in pure.iter().enumerate() {
        samples.push((r, radius, radius));
        if is_pure {
            for y in 0..size {
                for x in 0..size {
                    if (y, x) != (radius, radius) {
                        samples.push((r, y, x));
                    }
                }
            }
        }
    }
    let mut design = DMatrix::<f64>::zeros(samples.len(), cfg.d_emb + 1);
    let mut target = DMatrix::<f64>::zeros(samples.len(), d_out);
    for (row, &(r, y, x)) in samples.iter().enumerate() {
        let v = emb_v.apply(&feats.pixel(r, y, x));
        for (j, val) in v.iter().enumerate() {
            design[(row, j)] = *val;
        }
        design[(row, cfg.d_emb)] = 1.0;
        for (j, val) in targets[r].iter().enumerate() {
            target[(row, j)] = *val;
        }
    }
    let solution = ridge_solve(design, &target, cfg.ridge)?;
    let mut weight = Vec::with_capacity(d_out * cfg.d_emb);
    let mut bias = Vec::with_capacity(d_out);
    for o in 0..d_out {
        for j in 0..cfg.d_emb {
            weight.push(solution[(j, o)]);
        }
        bias.push(solution[(cfg.d_emb, o)]);
    }
    let proj = Linear::new(cfg.d_emb, d_out, weight, bias)?;
    let head = AttnPoolHead::new(emb_q, emb_k, emb_v, proj, (cfg.d_emb as f64).sqrt())?;

    let encoder = Encoder { backbone, head };
    let got = patch_embeddings(&encoder, prototypes)?;
    for (c, (f, e)) in got.iter().zip(class_embeddings).enumerate() {
        let cos = dot(f, e) / (norm(f) * norm(e));
        if !(cos > PLANT_MIN_COSINE) {
            return Err(Error::Planting(format!(
                "class {} reaches cosine {:.4}, need > {}",
                c, cos, PLANT_MIN_COSINE
            )));
        }
    }
    Ok((encoder.backbone, encoder.head))
}
