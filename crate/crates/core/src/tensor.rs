//! Minimal dense numerical kernel.
//!
//! Everything is `f64` and single-threaded. Every reduction runs in a fixed
//! sequential order per output element, so results are bit-reproducible.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::LabelMap;

/// Dense (batch, channel, height, width) array, row-major with width fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor4 {
    dims: [usize; 4],
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn zeros(dims: [usize; 4]) -> Self {
        Self {
            dims,
            data: vec![0.0; dims.iter().product()],
        }
    }

    pub fn filled(dims: [usize; 4], value: f64) -> Self {
        Self {
            dims,
            data: vec![value; dims.iter().product()],
        }
    }

    pub fn from_vec(dims: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let want: usize = dims.iter().product();
        if data.len() != want {
            return Err(Error::Config(format!(
                "tensor {:?} needs {} values, got {}",
                dims,
                want,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Tensor4::from_vec"));
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn batch(&self) -> usize {
        self.dims[0]
    }

    pub fn channels(&self) -> usize {
        self.dims[1]
    }

    pub fn height(&self) -> usize {
        self.dims[2]
    }

    pub fn width(&self) -> usize {
        self.dims[3]
    }

    pub fn plane_len(&self) -> usize {
        self.dims[2] * self.dims[3]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.dims[1] + c) * self.dims[2] + y) * self.dims[3] + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.offset(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, value: f64) {
        let i = self.offset(n, c, y, x);
        self.data[i] = value;
    }

    /// Contiguous `h*w` plane of one (item, channel).
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let start = self.offset(n, c, 0, 0);
        &self.data[start..start + self.plane_len()]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f64] {
        let start = self.offset(n, c, 0, 0);
        let len = self.plane_len();
        &mut self.data[start..start + len]
    }

    /// Channel vector at one spatial position.
    pub fn pixel(&self, n: usize, y: usize, x: usize) -> Vec<f64> {
        (0..self.dims[1]).map(|c| self.at(n, c, y, x)).collect()
    }

    /// Copy of one batch item as a batch of size one.
    pub fn item(&self, n: usize) -> Tensor4 {
        let len = self.dims[1] * self.plane_len();
        let start = n * len;
        Tensor4 {
            dims: [1, self.dims[1], self.dims[2], self.dims[3]],
            data: self.data[start..start + len].to_vec(),
        }
    }

    /// Concatenate equally shaped tensors along the batch axis.
    pub fn stack(items: &[Tensor4]) -> Result<Tensor4> {
        let first = items
            .first()
            .ok_or_else(|| Error::Argument("cannot stack zero tensors".into()))?;
        let [_, c, h, w] = first.dims;
        let mut data = Vec::with_capacity(items.len() * c * h * w);
        let mut n = 0;
        for t in items {
            if t.dims[1..] != first.dims[1..] {
                return Err(Error::Config(format!(
                    "cannot stack {:?} with {:?}",
                    t.dims, first.dims
                )));
            }
            n += t.dims[0];
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor4 {
            dims: [n, c, h, w],
            data,
        })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn ensure_finite(self, op: &'static str) -> Result<Self> {
        if self.all_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite(op))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvParams {
    /// (out_c, in_c, kh, kw)
    pub weights: Tensor4,
    pub bias: Vec<f64>,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl ConvParams {
    pub fn new(
        weights: Tensor4,
        bias: Vec<f64>,
        stride: usize,
        dilation: usize,
        padding: usize,
    ) -> Result<Self> {
        let p = Self {
            weights,
            bias,
            stride,
            dilation,
            padding,
        };
        p.validate()?;
        Ok(p)
    }

    /// 1x1, stride 1, no padding.
    pub fn pointwise(weights: Tensor4, bias: Vec<f64>) -> Result<Self> {
        Self::new(weights, bias, 1, 1, 0)
    }

    pub fn out_channels(&self) -> usize {
        self.weights.dims[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.dims[1]
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weights.dims[2], self.weights.dims[3])
    }

    pub fn validate(&self) -> Result<()> {
        let [oc, _, kh, kw] = self.weights.dims;
        if kh == 0 || kw == 0 {
            return Err(Error::Config("kernel size must be at least 1x1".into()));
        }
        if self.dilation == 0 || self.stride == 0 {
            return Err(Error::Config("stride and dilation must be >= 1".into()));
        }
        if self.bias.len() != oc {
            return Err(Error::Config(format!(
                "bias length {} does not match {} output channels",
                self.bias.len(),
                oc
            )));
        }
        Ok(())
    }

    /// Output spatial size for an input of `h` x `w`.
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel();
        let span_h = self.dilation * (kh - 1) + 1;
        let span_w = self.dilation * (kw - 1) + 1;
        let ph = h + 2 * self.padding;
        let pw = w + 2 * self.padding;
        if ph < span_h || pw < span_w {
            return Err(Error::Config(format!(
                "kernel span {}x{} exceeds padded input {}x{}",
                span_h, span_w, ph, pw
            )));
        }
        Ok((
            (ph - span_h) / self.stride + 1,
            (pw - span_w) / self.stride + 1,
        ))
    }
}

/// Gradients for one convolution layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads {
    pub input: Tensor4,
    pub weights: Tensor4,
    pub bias: Vec<f64>,
}

/// Loss value plus one gradient buffer per trainable parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct GradTape {
    pub loss: f64,
    /// (weight grad, bias grad) per layer, shaped like the parameters.
    pub grads: Vec<(Tensor4, Vec<f64>)>,
}

/// Range of output indices `o` for which `o*stride + offset - padding` lands in `[0, len)`.
#[inline]
fn valid_range(out_len: usize, len: usize, stride: usize, offset: usize, padding: usize) -> (usize, usize) {
    // i = o*stride + offset - padding  must satisfy 0 <= i < len
    let lo = if offset >= padding {
        0
    } else {
        (padding - offset).div_ceil(stride)
    };
    let hi = if len + padding > offset {
        ((len + padding - offset - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo.min(hi), hi)
}

fn check_conv_input(input: &Tensor4, params: &ConvParams) -> Result<(usize, usize)> {
    params.validate()?;
    if input.channels() != params.in_channels() {
        return Err(Error::Config(format!(
            "conv expects {} input channels, got {}",
            params.in_channels(),
            input.channels()
        )));
    }
    params.output_size(input.height(), input.width())
}

/// Cross-correlation with zero padding.
///
/// Each output element starts from its bias and accumulates contributions in
/// (input channel, kernel row, kernel column) order.
pub fn conv2d(input: &Tensor4, params: &ConvParams) -> Result<Tensor4> {
    let (out_h, out_w) = check_conv_input(input, params)?;
    let [n, in_c, h, w] = input.dims;
    let out_c = params.out_channels();
    let (kh, kw) = params.kernel();
    let (s, d, p) = (params.stride, params.dilation, params.padding);
    let mut out = Tensor4::zeros([n, out_c, out_h, out_w]);

    for b in 0..n {
        for oc in 0..out_c {
            let out_plane = out.plane_mut(b, oc);
            out_plane.fill(params.bias[oc]);
            for ic in 0..in_c {
                let in_plane = input.plane(b, ic);
                for ky in 0..kh {
                    let (oy_lo, oy_hi) = valid_range(out_h, h, s, ky * d, p);
                    for kx in 0..kw {
                        let wv = params.weights.at(oc, ic, ky, kx);
                        let (ox_lo, ox_hi) = valid_range(out_w, w, s, kx * d, p);
                        for oy in oy_lo..oy_hi {
                            let iy = oy * s + ky * d - p;
                            let in_row = &in_plane[iy * w..(iy + 1) * w];
                            let out_row = &mut out_plane[oy * out_w..(oy + 1) * out_w];
                            if s == 1 {
                                let shift = kx * d;
                                for ox in ox_lo..ox_hi {
                                    out_row[ox] += wv * in_row[ox + shift - p];
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    out_row[ox] += wv * in_row[ox * s + kx * d - p];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out.ensure_finite("conv2d")
}

/// Gradients of `sum(conv2d(input, params) * out_grad)` with respect to input, weights and bias.
pub fn backward_conv2d(input: &Tensor4, params: &ConvParams, out_grad: &Tensor4) -> Result<ConvGrads> {
    let (out_h, out_w) = check_conv_input(input, params)?;
    let [n, in_c, h, w] = input.dims;
    let out_c = params.out_channels();
    if out_grad.dims != [n, out_c, out_h, out_w] {
        return Err(Error::Config(format!(
            "output gradient {:?} does not match conv output {:?}",
            out_grad.dims,
            [n, out_c, out_h, out_w]
        )));
    }
    let (kh, kw) = params.kernel();
    let (s, d, p) = (params.stride, params.dilation, params.padding);

    let mut input_grad = Tensor4::zeros(input.dims);
    let mut weight_grad = Tensor4::zeros(params.weights.dims);
    let mut bias_grad = vec![0.0; out_c];

    for (oc, bg) in bias_grad.iter_mut().enumerate() {
        let mut acc = 0.0;
        for b in 0..n {
            for v in out_grad.plane(b, oc) {
                acc += v;
            }
        }
        *bg = acc;
    }

    for oc in 0..out_c {
        for ic in 0..in_c {
            for ky in 0..kh {
                let (oy_lo, oy_hi) = valid_range(out_h, h, s, ky * d, p);
                for kx in 0..kw {
                    let (ox_lo, ox_hi) = valid_range(out_w, w, s, kx * d, p);
                    let mut acc = 0.0;
                    for b in 0..n {
                        let g_plane = out_grad.plane(b, oc);
                        let in_plane = input.plane(b, ic);
                        for oy in oy_lo..oy_hi {
                            let iy = oy * s + ky * d - p;
                            for ox in ox_lo..ox_hi {
                                let ix = ox * s + kx * d - p;
                                acc += g_plane[oy * out_w + ox] * in_plane[iy * w + ix];
                            }
                        }
                    }
                    let i = weight_grad.offset(oc, ic, ky, kx);
                    weight_grad.data[i] = acc;
                }
            }
        }
    }

    for b in 0..n {
        for ic in 0..in_c {
            for oc in 0..out_c {
                let g_plane = out_grad.plane(b, oc);
                for ky in 0..kh {
                    let (oy_lo, oy_hi) = valid_range(out_h, h, s, ky * d, p);
                    for kx in 0..kw {
                        let wv = params.weights.at(oc, ic, ky, kx);
                        let (ox_lo, ox_hi) = valid_range(out_w, w, s, kx * d, p);
                        let ig_plane = input_grad.plane_mut(b, ic);
                        for oy in oy_lo..oy_hi {
                            let iy = oy * s + ky * d - p;
                            for ox in ox_lo..ox_hi {
                                let ix = ox * s + kx * d - p;
                                ig_plane[iy * w + ix] += wv * g_plane[oy * out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    Ok(ConvGrads {
        input: input_grad.ensure_finite("backward_conv2d")?,
        weights: weight_grad.ensure_finite("backward_conv2d")?,
        bias: bias_grad,
    })
}

pub fn relu(input: &Tensor4) -> Tensor4 {
    Tensor4 {
        dims: input.dims,
        data: input.data.iter().map(|&v| v.max(0.0)).collect(),
    }
}

/// Gradient through ReLU given its pre-activation input. The kink at 0 takes gradient 0.
pub fn relu_backward(pre_activation: &Tensor4, out_grad: &Tensor4) -> Result<Tensor4> {
    if pre_activation.dims != out_grad.dims {
        return Err(Error::Config("relu gradient shape mismatch".into()));
    }
    Ok(Tensor4 {
        dims: out_grad.dims,
        data: pre_activation
            .data
            .iter()
            .zip(&out_grad.data)
            .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
            .collect(),
    })
}

/// Numerically stable softmax (max subtraction).
pub fn softmax(values: &[f64]) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::Argument("softmax of an empty vector".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Argument("softmax input must be finite".into()));
    }
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

pub const DEFAULT_NORM_EPS: f64 = 1e-12;

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_normalize(v: &[f64], eps: f64) -> Result<Vec<f64>> {
    let n = norm(v);
    if !(n > eps) {
        return Err(Error::Degenerate(format!(
            "norm {:e} is not above {:e}",
            n, eps
        )));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

#[inline]
fn source_coord(dst: usize, scale: f64, len: usize) -> (usize, usize, f64) {
    let src = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(len - 1);
    let i1 = (i0 + 1).min(len - 1);
    let frac = if i0 == len - 1 { 0.0 } else { src - i0 as f64 };
    (i0, i1, frac)
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

/// Bilinear resampling with half-pixel centers (align_corners = false).
pub fn bilinear_resize(input: &Tensor4, out_h: usize, out_w: usize) -> Result<Tensor4> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::Argument(format!(
            "resize target {}x{} must be at least 1x1",
            out_h, out_w
        )));
    }
    let [n, c, h, w] = input.dims;
    if h == 0 || w == 0 {
        return Err(Error::Argument("cannot resize an empty map".into()));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(input.clone());
    }
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let ys: Vec<_> = (0..out_h).map(|y| source_coord(y, sy, h)).collect();
    let xs: Vec<_> = (0..out_w).map(|x| source_coord(x, sx, w)).collect();
    let mut out = Tensor4::zeros([n, c, out_h, out_w]);
    for b in 0..n {
        for ch in 0..c {
            let src = input.plane(b, ch);
            let dst = out.plane_mut(b, ch);
            for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let top = lerp(src[y0 * w + x0], src[y0 * w + x1], fx);
                    let bottom = lerp(src[y1 * w + x0], src[y1 * w + x1], fx);
                    dst[oy * out_w + ox] = lerp(top, bottom, fy);
                }
            }
        }
    }
    out.ensure_finite("bilinear_resize")
}

/// Mean pixel cross-entropy over non-ignored pixels and its gradient with respect to the logits.
pub fn cross_entropy(logits: &Tensor4, labels: &[LabelMap], ignore_index: u8) -> Result<(f64, Tensor4)> {
    let [n, k, h, w] = logits.dims;
    if labels.len() != n {
        return Err(Error::Data(format!(
            "{} label maps for a batch of {}",
            labels.len(),
            n
        )));
    }
    for lm in labels {
        if lm.height() != h || lm.width() != w {
            return Err(Error::Data(format!(
                "label map {}x{} does not match logits {}x{}",
                lm.height(),
                lm.width(),
                h,
                w
            )));
        }
        if let Some(&bad) = lm
            .data()
            .iter()
            .find(|&&l| l != ignore_index && usize::from(l) >= k)
        {
            return Err(Error::Data(format!(
                "label {} out of range for {} classes",
                bad, k
            )));
        }
    }

    let count = labels
        .iter()
        .flat_map(|lm| lm.data())
        .filter(|&&l| l != ignore_index)
        .count();
    let mut grad = Tensor4::zeros(logits.dims);
    if count == 0 {
        return Ok((0.0, grad));
    }
    let inv = 1.0 / count as f64;
    let hw = h * w;
    let mut total = 0.0;
    let mut column = vec![0.0; k];
    for (b, lm) in labels.iter().enumerate() {
        let base = b * k * hw;
        for (i, &label) in lm.data().iter().enumerate() {
            if label == ignore_index {
                continue;
            }
            for (c, slot) in column.iter_mut().enumerate() {
                *slot = logits.data[base + c * hw + i];
            }
            let max = column.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in column.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            let label = usize::from(label);
            let log_p = logits.data[base + label * hw + i] - max - sum.ln();
            total -= log_p;
            for (c, &e) in column.iter().enumerate() {
                let p = e / sum;
                let target = if c == label { 1.0 } else { 0.0 };
                grad.data[base + c * hw + i] = (p - target) * inv;
            }
        }
    }
    let loss = total * inv;
    if !loss.is_finite() {
        return Err(Error::NonFinite("cross_entropy"));
    }
    Ok((loss, grad.ensure_finite("cross_entropy")?))
}

/// One momentum-SGD step: `v = momentum*v + g; p -= lr*v`.
pub fn sgd_update(
    params: &mut [f64],
    grads: &[f64],
    lr: f64,
    momentum: f64,
    velocity: &mut [f64],
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::Config(format!(
            "sgd shapes differ: params {}, grads {}, velocity {}",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    if !(lr >= 0.0) {
        return Err(Error::Argument(format!("learning rate {} must be >= 0", lr)));
    }
    if lr == 0.0 {
        // keep params bit-identical even if momentum carries state
        for (v, g) in velocity.iter_mut().zip(grads) {
            *v = momentum * *v + g;
        }
        return Ok(());
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_kernel(value: f64) -> ConvParams {
        ConvParams::pointwise(Tensor4::filled([1, 1, 1, 1], value), vec![0.0]).unwrap()
    }

    #[test]
    fn pointwise_scalar_kernel() {
        let x = Tensor4::filled([1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &single_kernel(2.0)).unwrap();
        assert_eq!(y.dims(), [1, 1, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn centered_identity_kernel_reproduces_input() {
        let mut k = Tensor4::zeros([1, 1, 3, 3]);
        k.set(0, 0, 1, 1, 1.0);
        let params = ConvParams::new(k, vec![0.0], 1, 1, 1).unwrap();
        let x = Tensor4::from_vec([1, 1, 4, 5], (0..20).map(|i| i as f64 * 0.3 - 2.0).collect()).unwrap();
        assert_eq!(conv2d(&x, &params).unwrap(), x);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor4::zeros([1, 2, 3, 3]);
        assert!(matches!(conv2d(&x, &single_kernel(1.0)), Err(Error::Config(_))));
    }

    #[test]
    fn conv_rejects_oversized_kernel() {
        let params = ConvParams::new(Tensor4::zeros([1, 1, 5, 5]), vec![0.0], 1, 1, 0).unwrap();
        assert!(conv2d(&Tensor4::zeros([1, 1, 3, 3]), &params).is_err());
    }

    #[test]
    fn strided_output_size() {
        let params = ConvParams::new(Tensor4::zeros([1, 1, 3, 3]), vec![0.0], 2, 1, 1).unwrap();
        assert_eq!(params.output_size(7, 8).unwrap(), (4, 4));
        let dilated = ConvParams::new(Tensor4::zeros([1, 1, 3, 3]), vec![0.0], 1, 2, 2).unwrap();
        assert_eq!(dilated.output_size(5, 5).unwrap(), (5, 5));
    }

    #[test]
    fn zero_out_grad_gives_zero_gradients() {
        let x = Tensor4::filled([1, 2, 4, 4], 0.7);
        let params = ConvParams::new(Tensor4::filled([3, 2, 3, 3], 0.1), vec![0.5; 3], 1, 1, 1).unwrap();
        let g = backward_conv2d(&x, &params, &Tensor4::zeros([1, 3, 4, 4])).unwrap();
        assert!(g.input.data().iter().all(|&v| v == 0.0));
        assert!(g.weights.data().iter().all(|&v| v == 0.0));
        assert!(g.bias.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pointwise_single_pixel_weight_grad() {
        let x = Tensor4::filled([1, 1, 1, 1], 1.5);
        let og = Tensor4::filled([1, 1, 1, 1], -0.25);
        let g = backward_conv2d(&x, &single_kernel(3.0), &og).unwrap();
        assert_eq!(g.weights.data(), &[1.5 * -0.25]);
        assert_eq!(g.bias, vec![-0.25]);
        assert_eq!(g.input.data(), &[3.0 * -0.25]);
    }

    #[test]
    fn softmax_cases() {
        let u = softmax(&[0.0, 0.0, 0.0]).unwrap();
        for p in &u {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(softmax(&[1000.0, 1000.0]).unwrap(), vec![0.5, 0.5]);
        assert!(matches!(softmax(&[]), Err(Error::Argument(_))));
    }

    #[test]
    fn softmax_matches_extended_precision() {
        // e^{-2}, e^{-1}, 1 normalised; reference digits from a 50-digit evaluation.
        let expected = [
            0.090_030_573_170_380_46,
            0.244_728_471_054_797_63,
            0.665_240_955_774_821_9,
        ];
        let got = softmax(&[1.0, 2.0, 3.0]).unwrap();
        for (g, e) in got.iter().zip(expected) {
            assert!((g - e).abs() < 1e-15, "{} vs {}", g, e);
        }
    }

    #[test]
    fn l2_normalize_cases() {
        assert_eq!(l2_normalize(&[3.0, 4.0], DEFAULT_NORM_EPS).unwrap(), vec![0.6, 0.8]);
        assert_eq!(l2_normalize(&[0.0, 1.0, 0.0], DEFAULT_NORM_EPS).unwrap(), vec![0.0, 1.0, 0.0]);
        assert!(matches!(
            l2_normalize(&[1e-13, 0.0], DEFAULT_NORM_EPS),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn resize_constant_and_identity() {
        let c = Tensor4::filled([1, 2, 3, 5], 5.0);
        for (h, w) in [(1, 1), (7, 2), (6, 10), (3, 5)] {
            let r = bilinear_resize(&c, h, w).unwrap();
            assert!(r.data().iter().all(|&v| v == 5.0));
        }
        let x = Tensor4::from_vec([1, 1, 2, 3], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        assert_eq!(bilinear_resize(&x, 2, 3).unwrap(), x);
        assert!(bilinear_resize(&x, 0, 3).is_err());
    }

    #[test]
    fn resize_2x2_to_4x4_closed_form() {
        // v(y, x) = 2y + x on the source grid; half-pixel source coords are [0, .25, .75, 1].
        let x = Tensor4::from_vec([1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let r = bilinear_resize(&x, 4, 4).unwrap();
        let coords = [0.0, 0.25, 0.75, 1.0];
        for (i, cy) in coords.iter().enumerate() {
            for (j, cx) in coords.iter().enumerate() {
                assert!((r.at(0, 0, i, j) - (2.0 * cy + cx)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn cross_entropy_closed_form() {
        let logits = Tensor4::zeros([1, 2, 1, 1]);
        let labels = [LabelMap::new(1, 1, vec![0]).unwrap()];
        let (loss, g) = cross_entropy(&logits, &labels, 255).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(g.data(), &[-0.5, 0.5]);
    }

    #[test]
    fn cross_entropy_all_ignored() {
        let logits = Tensor4::filled([1, 3, 2, 2], 0.3);
        let labels = [LabelMap::filled(2, 2, 255)];
        let (loss, g) = cross_entropy(&logits, &labels, 255).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_label() {
        let logits = Tensor4::zeros([1, 2, 1, 1]);
        let labels = [LabelMap::new(1, 1, vec![2]).unwrap()];
        assert!(matches!(cross_entropy(&logits, &labels, 255), Err(Error::Data(_))));
    }

    #[test]
    fn sgd_closed_forms() {
        let mut p = vec![1.0, -2.0];
        let mut v = vec![0.0; 2];
        sgd_update(&mut p, &[0.5, 1.0], 0.0, 0.9, &mut v).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);

        let mut p = vec![1.0, -2.0];
        let mut v = vec![0.0; 2];
        sgd_update(&mut p, &[0.5, 1.0], 0.1, 0.0, &mut v).unwrap();
        assert_eq!(p, vec![1.0 - 0.1 * 0.5, -2.0 - 0.1 * 1.0]);

        assert!(sgd_update(&mut p, &[0.0], 0.1, 0.0, &mut v).is_err());
    }

    #[test]
    fn sgd_momentum_two_steps() {
        // v1 = g1, p1 = p0 - lr*g1; v2 = 0.9*g1 + g2, p2 = p1 - lr*v2
        let (p0, g1, g2, lr) = (2.0, 0.4, -0.3, 0.05);
        let mut p = vec![p0];
        let mut v = vec![0.0];
        sgd_update(&mut p, &[g1], lr, 0.9, &mut v).unwrap();
        sgd_update(&mut p, &[g2], lr, 0.9, &mut v).unwrap();
        let v2: f64 = 0.9 * g1 + g2;
        let expected = (p0 - lr * g1) - lr * v2;
        assert!((p[0] - expected).abs() < 1e-15);
    }
}
