//! Brute-force scalar reference implementations shared by integration tests.
#![allow(dead_code)]

pub mod scenarios;

use dacn_core::nn::Padding;
use dacn_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| r.gen_range(-1.0..1.0))
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn at4(t: &Tensor, i: usize, j: usize, k: usize, l: usize) -> f64 {
    let s = t.shape();
    t.data()[((i * s[1] + j) * s[2] + k) * s[3] + l]
}

/// `(out, pad_before)` along one axis.
pub fn axis(input: usize, k: usize, stride: usize, padding: Padding) -> (usize, usize) {
    match padding {
        Padding::Valid => ((input - k) / stride + 1, 0),
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + k).saturating_sub(input);
            (out, total / 2)
        }
    }
}

/// Direct cross-correlation, kernel `[kh, kw, cin, cout]`.
pub fn conv2d(x: &Tensor, k: &Tensor, bias: &[f64], stride: usize, padding: Padding) -> Tensor {
    let (b, h, w, cin) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (kh, kw, cout) = (k.shape()[0], k.shape()[1], k.shape()[3]);
    let (oh, pt) = axis(h, kh, stride, padding);
    let (ow, pl) = axis(w, kw, stride, padding);
    let mut out = vec![0.0; b * oh * ow * cout];
    for n in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                for co in 0..cout {
                    let mut acc = bias[co];
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride + ky) as isize - pt as isize;
                            let ix = (ox * stride + kx) as isize - pl as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            for ci in 0..cin {
                                acc += at4(x, n, iy as usize, ix as usize, ci) * at4(k, ky, kx, ci, co);
                            }
                        }
                    }
                    out[((n * oh + oy) * ow + ox) * cout + co] = acc;
                }
            }
        }
    }
    Tensor::new(vec![b, oh, ow, cout], out).unwrap()
}

/// Scatter form of the transposed convolution; kernel read as `[kh, kw, cout, cin]`.
pub fn conv_transpose2d(x: &Tensor, k: &Tensor, bias: &[f64], stride: usize, padding: Padding) -> Tensor {
    let (b, h, w, cin) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (kh, kw, cout) = (k.shape()[0], k.shape()[1], k.shape()[2]);
    let (oh, ow) = match padding {
        Padding::Same => (h * stride, w * stride),
        Padding::Valid => ((h - 1) * stride + kh, (w - 1) * stride + kw),
    };
    let (_, pt) = axis(oh, kh, stride, padding);
    let (_, pl) = axis(ow, kw, stride, padding);
    let mut out = vec![0.0; b * oh * ow * cout];
    for n in 0..b {
        for (oy, ox, co) in grid3(oh, ow, cout) {
            out[((n * oh + oy) * ow + ox) * cout + co] = bias[co];
        }
        for iy in 0..h {
            for ix in 0..w {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let oy = (iy * stride + ky) as isize - pt as isize;
                        let ox = (ix * stride + kx) as isize - pl as isize;
                        if oy < 0 || ox < 0 || oy >= oh as isize || ox >= ow as isize {
                            continue;
                        }
                        for co in 0..cout {
                            for ci in 0..cin {
                                out[((n * oh + oy as usize) * ow + ox as usize) * cout + co] +=
                                    at4(x, n, iy, ix, ci) * at4(k, ky, kx, co, ci);
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, oh, ow, cout], out).unwrap()
}

fn grid3(a: usize, b: usize, c: usize) -> impl Iterator<Item = (usize, usize, usize)> {
    (0..a).flat_map(move |i| (0..b).flat_map(move |j| (0..c).map(move |k| (i, j, k))))
}

/// Training-mode batch norm with biased variance.
pub fn batch_norm_train(x: &Tensor, gamma: &[f64], beta: &[f64], eps: f64) -> Tensor {
    let c = *x.shape().last().unwrap();
    let n = x.len() / c;
    let mut out = x.data().to_vec();
    for ch in 0..c {
        let vals: Vec<f64> = (0..n).map(|i| x.data()[i * c + ch]).collect();
        let mean = vals.iter().sum::<f64>() / n as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        for i in 0..n {
            out[i * c + ch] = gamma[ch] * (vals[i] - mean) / (var + eps).sqrt() + beta[ch];
        }
    }
    Tensor::new(x.shape().to_vec(), out).unwrap()
}

pub fn batch_norm_infer(x: &Tensor, gamma: &[f64], beta: &[f64], mean: &[f64], var: &[f64], eps: f64) -> Tensor {
    let c = *x.shape().last().unwrap();
    let out = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let ch = i % c;
            gamma[ch] * (v - mean[ch]) / (var[ch] + eps).sqrt() + beta[ch]
        })
        .collect();
    Tensor::new(x.shape().to_vec(), out).unwrap()
}

pub fn layer_norm(x: &Tensor, gamma: &[f64], beta: &[f64], eps: f64) -> Tensor {
    let c = *x.shape().last().unwrap();
    let mut out = Vec::with_capacity(x.len());
    for row in x.data().chunks(c) {
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
        for (j, v) in row.iter().enumerate() {
            out.push(gamma[j] * (v - mean) / (var + eps).sqrt() + beta[j]);
        }
    }
    Tensor::new(x.shape().to_vec(), out).unwrap()
}

pub fn softmax_row(row: &[f64]) -> Vec<f64> {
    let e: Vec<f64> = row.iter().map(|v| v.exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `(avg, max)`, both `[B, C]`.
pub fn pools(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (b, h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let mut avg = vec![0.0; b * c];
    let mut max = vec![f64::NEG_INFINITY; b * c];
    for n in 0..b {
        for y in 0..h {
            for xi in 0..w {
                for ch in 0..c {
                    let v = at4(x, n, y, xi, ch);
                    avg[n * c + ch] += v / (h * w) as f64;
                    max[n * c + ch] = max[n * c + ch].max(v);
                }
            }
        }
    }
    (avg, max)
}

/// `x [B × Din]`, `w [Dout × Din]`.
pub fn dense(x: &[f64], batch: usize, w: &Tensor, b: &[f64]) -> Vec<f64> {
    let (dout, din) = (w.shape()[0], w.shape()[1]);
    let mut out = vec![0.0; batch * dout];
    for n in 0..batch {
        for o in 0..dout {
            out[n * dout + o] = b[o] + (0..din).map(|i| w.data()[o * din + i] * x[n * din + i]).sum::<f64>();
        }
    }
    out
}

fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[i * m + j] = (0..k).map(|l| a[i * k + l] * b[l * m + j]).sum();
        }
    }
    out
}

/// Explicit per-head attention on one sequence `x [T × d]`.
#[allow(clippy::too_many_arguments)]
pub fn mhsa(x: &[f64], t: usize, d: usize, wq: &Tensor, wk: &Tensor, wv: &Tensor, wo: &Tensor, heads: usize) -> Vec<f64> {
    let hd = wq.shape()[1];
    let dk = hd / heads;
    let dv = wv.shape()[1] / heads;
    let q = matmul(x, wq.data(), t, d, hd);
    let k = matmul(x, wk.data(), t, d, hd);
    let v = matmul(x, wv.data(), t, d, heads * dv);
    let mut concat = vec![0.0; t * heads * dv];
    for h in 0..heads {
        for i in 0..t {
            let logits: Vec<f64> = (0..t)
                .map(|j| (0..dk).map(|c| q[i * hd + h * dk + c] * k[j * hd + h * dk + c]).sum::<f64>() / (dk as f64).sqrt())
                .collect();
            let p = softmax_row(&logits);
            for c in 0..dv {
                concat[i * heads * dv + h * dv + c] = (0..t).map(|j| p[j] * v[j * heads * dv + h * dv + c]).sum();
            }
        }
    }
    matmul(&concat, wo.data(), t, heads * dv, d)
}

pub fn leaky(v: f64, slope: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        slope * v
    }
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Channel attention gate `[B × C]`.
pub fn channel_gate(x: &Tensor, w1: &Tensor, b1: &[f64], w2: &Tensor, b2: &[f64]) -> Vec<f64> {
    let b = x.shape()[0];
    let (avg, max) = pools(x);
    let branch = |v: &[f64]| {
        let h: Vec<f64> = dense(v, b, w1, b1).into_iter().map(|z| z.max(0.0)).collect();
        dense(&h, b, w2, b2)
    };
    let (a, m) = (branch(&avg), branch(&max));
    a.iter().zip(&m).map(|(p, q)| sigmoid(p + q)).collect()
}

/// Spatial-spectral gradient loss by explicit enumeration of differences.
pub fn grad_loss(t: &Tensor, p: &Tensor) -> f64 {
    let (b, h, w, c) = (t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3]);
    let e = |n, y, x, ch| at4(t, n, y, x, ch) - at4(p, n, y, x, ch);
    let (mut sx, mut sy, mut ss) = (0.0, 0.0, 0.0);
    for n in 0..b {
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    if x + 1 < w {
                        sx += (e(n, y, x + 1, ch) - e(n, y, x, ch)).powi(2);
                    }
                    if y + 1 < h {
                        sy += (e(n, y + 1, x, ch) - e(n, y, x, ch)).powi(2);
                    }
                    if ch + 1 < c {
                        ss += (e(n, y, x, ch + 1) - e(n, y, x, ch)).powi(2);
                    }
                }
            }
        }
    }
    sx / (b * h * (w - 1) * c) as f64 + sy / (b * (h - 1) * w * c) as f64 + ss / (b * h * w * (c - 1)) as f64
}

pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}

/// Block means of an `[H, W, C]` (or `[1, H, W, C]`) tensor.
pub fn block_means(x: &Tensor, s: usize) -> Vec<f64> {
    let sh = x.shape();
    let (h, w, c) = (sh[sh.len() - 3], sh[sh.len() - 2], sh[sh.len() - 1]);
    let mut out = Vec::new();
    for by in 0..h / s {
        for bx in 0..w / s {
            for ch in 0..c {
                let mut acc = 0.0;
                for dy in 0..s {
                    for dx in 0..s {
                        acc += x.data()[((by * s + dy) * w + bx * s + dx) * c + ch];
                    }
                }
                out.push(acc / (s * s) as f64);
            }
        }
    }
    out
}
