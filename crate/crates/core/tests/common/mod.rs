//! Brute-force reference implementations shared by the integration tests.
//! Nothing here calls the library routine it is checking.

#![allow(dead_code)]

use num_bigint::BigInt;
use num_rational::BigRational;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use zsseg::clip_adapt::{AttnPoolHead, Linear};
use zsseg::labels::LabelMap;
use zsseg::tensor::{ConvParams, Tensor4};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(r: &mut impl Rng, dims: [usize; 4], scale: f64) -> Tensor4 {
    let n = dims.iter().product();
    let data = (0..n).map(|_| r.random_range(-scale..scale)).collect();
    Tensor4::from_vec(dims, data).unwrap()
}

/// Direct seven-loop cross-correlation, reading zero outside the input.
pub fn naive_conv(input: &Tensor4, p: &ConvParams) -> Tensor4 {
    let [n, c_in, h, w] = input.dims();
    let [c_out, _, kh, kw] = p.weights.dims();
    let eh = p.dilation * (kh - 1) + 1;
    let ew = p.dilation * (kw - 1) + 1;
    let oh = (h + 2 * p.padding - eh) / p.stride + 1;
    let ow = (w + 2 * p.padding - ew) / p.stride + 1;
    let mut out = Tensor4::zeros([n, c_out, oh, ow]);
    for b in 0..n {
        for o in 0..c_out {
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = p.bias[o];
                    for i in 0..c_in {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (y * p.stride + ky * p.dilation) as isize - p.padding as isize;
                                let ix = (x * p.stride + kx * p.dilation) as isize - p.padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += p.weights.at(o, i, ky, kx) * input.at(b, i, iy as usize, ix as usize);
                            }
                        }
                    }
                    out.set(b, o, y, x, acc);
                }
            }
        }
    }
    out
}

/// Central-difference gradient of `f` at `x`.
pub fn numeric_grad(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut buf = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = buf[i];
            buf[i] = orig + h;
            let plus = f(&buf);
            buf[i] = orig - h;
            let minus = f(&buf);
            buf[i] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// `||a - b|| / max(||a|| + ||b||, floor)`.
pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / (na + nb).max(1e-12)
}

pub fn inner(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn lin(l: &Linear, x: &[f64]) -> Vec<f64> {
    (0..l.out_dim)
        .map(|o| l.bias[o] + (0..l.in_dim).map(|i| l.weight[o * l.in_dim + i] * x[i]).sum::<f64>())
        .collect()
}

/// Attention pooling written out step by step, with a plain exp/sum softmax.
pub fn naive_attn_pool(features: &Tensor4, head: &AttnPoolHead) -> Vec<Vec<f64>> {
    let [n, c, h, w] = features.dims();
    let mut out = Vec::new();
    for b in 0..n {
        let pixels: Vec<Vec<f64>> = (0..h * w)
            .map(|i| (0..c).map(|ch| features.at(b, ch, i / w, i % w)).collect())
            .collect();
        let mut mean = vec![0.0; c];
        for p in &pixels {
            for (m, v) in mean.iter_mut().zip(p) {
                *m += v / (h * w) as f64;
            }
        }
        let q = lin(&head.emb_q, &mean);
        let scores: Vec<f64> = pixels
            .iter()
            .map(|p| inner(&q, &lin(&head.emb_k, p)) / head.scale)
            .collect();
        let top = scores.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
        let z: f64 = e.iter().sum();
        let mut pooled = vec![0.0; head.emb_v.out_dim];
        for (p, ei) in pixels.iter().zip(&e) {
            for (acc, v) in pooled.iter_mut().zip(lin(&head.emb_v, p)) {
                *acc += ei / z * v;
            }
        }
        out.push(lin(&head.proj, &pooled));
    }
    out
}

/// Per-pixel dense embeddings `F(Emb_v(x_i))` with plain loops.
pub fn naive_dense_pixels(features: &Tensor4, head: &AttnPoolHead, b: usize) -> Vec<Vec<f64>> {
    let [_, c, h, w] = features.dims();
    (0..h * w)
        .map(|i| {
            let p: Vec<f64> = (0..c).map(|ch| features.at(b, ch, i / w, i % w)).collect();
            lin(&head.proj, &lin(&head.emb_v, &p))
        })
        .collect()
}

/// Exact rational metrics recounted from pixels, never through a confusion matrix.
pub struct PixelOracle {
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub fneg: Vec<u64>,
    pub gt: Vec<u64>,
}

impl PixelOracle {
    pub fn count(k: usize, pairs: &[(LabelMap, LabelMap)], ignore: u8) -> Self {
        let mut o = Self {
            tp: vec![0; k],
            fp: vec![0; k],
            fneg: vec![0; k],
            gt: vec![0; k],
        };
        for (pred, gt) in pairs {
            for (&p, &g) in pred.data().iter().zip(gt.data()) {
                if g == ignore {
                    continue;
                }
                let (p, g) = (p as usize, g as usize);
                o.gt[g] += 1;
                if p == g {
                    o.tp[g] += 1;
                } else {
                    o.fp[p] += 1;
                    o.fneg[g] += 1;
                }
            }
        }
        o
    }

    pub fn present(&self, c: usize) -> bool {
        self.tp[c] + self.fp[c] + self.fneg[c] > 0
    }

    pub fn iou(&self, c: usize) -> Option<BigRational> {
        self.present(c)
            .then(|| ratio(self.tp[c], self.tp[c] + self.fp[c] + self.fneg[c]))
    }

    pub fn acc(&self, c: usize) -> Option<BigRational> {
        (self.gt[c] > 0).then(|| ratio(self.tp[c], self.gt[c]))
    }

    pub fn miou(&self, subset: &[usize]) -> Option<BigRational> {
        mean(subset.iter().filter_map(|&c| self.iou(c)).collect())
    }

    pub fn macc(&self, subset: &[usize]) -> Option<BigRational> {
        mean(subset.iter().filter_map(|&c| self.acc(c)).collect())
    }

    pub fn pacc(&self, subset: &[usize]) -> Option<BigRational> {
        let tp: u64 = subset.iter().map(|&c| self.tp[c]).sum();
        let gt: u64 = subset.iter().map(|&c| self.gt[c]).sum();
        (gt > 0).then(|| ratio(tp, gt))
    }
}

pub fn ratio(num: u64, den: u64) -> BigRational {
    BigRational::new(BigInt::from(num), BigInt::from(den))
}

pub fn mean(values: Vec<BigRational>) -> Option<BigRational> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as u64;
    let mut sum = ratio(0, 1);
    for v in values {
        sum += v;
    }
    Some(sum / ratio(n, 1))
}

pub fn harmonic(s: &BigRational, u: &BigRational) -> BigRational {
    let zero = ratio(0, 1);
    if *s == zero && *u == zero {
        return zero;
    }
    ratio(2, 1) * s * u / (s + u)
}
