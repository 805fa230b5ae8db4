//! Independent f64 reference implementations used as oracles and as the
//! shadow evaluation for finite differences. Written as plain nested loops,
//! deliberately unlike the im2col/gemm path under test.
#![allow(dead_code, clippy::too_many_arguments)]

use condadapt_core::{Rng, Tensor};

pub mod gradcheck;
pub mod identities;

pub fn random_tensor(rng: &mut Rng, shape: &[usize], scale: f32) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.normal() * scale).collect()).unwrap()
}

/// Values bounded away from zero, for kinked functions.
pub fn random_away_from_zero(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let mag = rng.uniform_in(0.05, 1.5);
            if rng.uniform() < 0.5 { -mag } else { mag }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

pub fn to64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| f64::from(v)).collect()
}

pub fn conv2d(x: &[f64], xs: [usize; 4], k: &[f64], ks: [usize; 4], stride: usize, pad: usize) -> (Vec<f64>, [usize; 4]) {
    let [n, c, h, w] = xs;
    let [o, _, kh, kw] = ks;
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for b in 0..n {
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let iy = (oy * stride + ki) as isize - pad as isize;
                                let ix = (ox * stride + kj) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += x[((b * c + ic) * h + iy as usize) * w + ix as usize]
                                        * k[((oc * c + ic) * kh + ki) * kw + kj];
                                }
                            }
                        }
                    }
                    out[((b * o + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    (out, [n, o, oh, ow])
}

/// Scatter-accumulate definition of the transposed convolution.
pub fn conv_transpose2d(x: &[f64], xs: [usize; 4], k: &[f64], ks: [usize; 4], stride: usize, pad: usize) -> (Vec<f64>, [usize; 4]) {
    let [n, ci, h, w] = xs;
    let [_, co, kh, kw] = ks;
    let oh = (h - 1) * stride + kh - 2 * pad;
    let ow = (w - 1) * stride + kw - 2 * pad;
    let mut out = vec![0.0; n * co * oh * ow];
    for b in 0..n {
        for ic in 0..ci {
            for iy in 0..h {
                for ix in 0..w {
                    let v = x[((b * ci + ic) * h + iy) * w + ix];
                    for oc in 0..co {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let oy = (iy * stride + ki) as isize - pad as isize;
                                let ox = (ix * stride + kj) as isize - pad as isize;
                                if oy >= 0 && ox >= 0 && (oy as usize) < oh && (ox as usize) < ow {
                                    out[((b * co + oc) * oh + oy as usize) * ow + ox as usize] +=
                                        v * k[((ic * co + oc) * kh + ki) * kw + kj];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (out, [n, co, oh, ow])
}

pub fn channel_bias(x: &[f64], xs: [usize; 4], b: &[f64]) -> Vec<f64> {
    let [_, c, h, w] = xs;
    x.iter().enumerate().map(|(i, v)| v + b[(i / (h * w)) % c]).collect()
}

pub fn instance_norm(x: &[f64], xs: [usize; 4], g: &[f64], b: &[f64], eps: f64) -> Vec<f64> {
    let [n, c, h, w] = xs;
    let plane = h * w;
    let mut out = vec![0.0; x.len()];
    for p in 0..n * c {
        let src = &x[p * plane..(p + 1) * plane];
        let mean = src.iter().sum::<f64>() / plane as f64;
        let var = src.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / plane as f64;
        for j in 0..plane {
            out[p * plane + j] = g[p % c] * (src[j] - mean) / (var + eps).sqrt() + b[p % c];
        }
    }
    out
}

pub fn matmul(x: &[f64], n: usize, f: usize, w: &[f64], g: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * g];
    for i in 0..n {
        for j in 0..g {
            for k in 0..f {
                out[i * g + j] += x[i * f + k] * w[k * g + j];
            }
        }
    }
    out
}

pub fn cross_entropy(logits: &[f64], k: usize, targets: &[usize]) -> f64 {
    let mut total = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let row = &logits[r * k..(r + 1) * k];
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        total += -(row[t].exp() / z).ln();
    }
    total / targets.len() as f64
}

pub fn mse_against(out: &[f64], target: &[f64]) -> f64 {
    out.iter().zip(target).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / out.len() as f64
}
