//! Batch normalization over `(B, H, W)` and layer normalization over channels.

use crate::error::{Error, Result};
use crate::graph::{Ctx, Graph, Op, Var};
use crate::params::{join, ParamKind, ParamTree};
use crate::tensor::Tensor;

pub const BATCH_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_MOMENTUM: f64 = 0.9;
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Learnable scale/shift plus running statistics. Running statistics are
/// plain tensors regardless of `T`; they are never differentiated.
#[derive(Debug, Clone, PartialEq)]
pub struct NormState<T> {
    pub gamma: T,
    pub beta: T,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub epsilon: f64,
    pub momentum: f64,
}

impl NormState<Tensor> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::ones(&[channels]),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
            epsilon: BATCH_NORM_EPS,
            momentum: BATCH_NORM_MOMENTUM,
        }
    }

    /// Exponential moving average: `running = momentum·running + (1−momentum)·batch`.
    pub fn update_running(&mut self, stats: &BatchStats) {
        let m = self.momentum;
        for (r, b) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = m * *r + (1.0 - m) * b;
        }
        for (r, b) in self.running_var.data_mut().iter_mut().zip(&stats.var) {
            *r = m * *r + (1.0 - m) * b;
        }
    }
}

impl<T> NormState<T> {
    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }
}

impl<T> ParamTree<T> for NormState<T> {
    type Mapped<U> = NormState<U>;

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &'a T)) {
        f(&join(prefix, "gamma"), ParamKind::NormScale, &self.gamma);
        f(&join(prefix, "beta"), ParamKind::NormShift, &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut T)) {
        f(&join(prefix, "gamma"), ParamKind::NormScale, &mut self.gamma);
        f(&join(prefix, "beta"), ParamKind::NormShift, &mut self.beta);
    }

    fn map<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &T) -> U) -> NormState<U> {
        NormState {
            gamma: f(&join(prefix, "gamma"), ParamKind::NormScale, &self.gamma),
            beta: f(&join(prefix, "beta"), ParamKind::NormShift, &self.beta),
            running_mean: self.running_mean.clone(),
            running_var: self.running_var.clone(),
            epsilon: self.epsilon,
            momentum: self.momentum,
        }
    }
}

/// Per-channel batch mean and (biased) variance observed in a training pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

fn check_affine(op: &'static str, g: &Graph, gamma: Var, beta: Var, c: usize) -> Result<()> {
    for (name, v) in [("gamma", gamma), ("beta", beta)] {
        if g.value(v).shape() != [c] {
            return Err(Error::dim(
                op,
                format!("{name} has shape {:?}, expected [{c}]", g.value(v).shape()),
            ));
        }
    }
    Ok(())
}

/// Training mode standardizes with batch statistics (returned for the
/// running-average update); inference mode uses the running statistics.
pub fn batch_norm(g: &mut Graph, x: Var, s: &NormState<Var>, training: bool) -> Result<(Var, Option<BatchStats>)> {
    let xt = g.value(x);
    let [b, h, w, c] = xt.dims4("batch_norm")?;
    check_affine("batch_norm", g, s.gamma, s.beta, c)?;
    if s.running_mean.len() != c || s.running_var.len() != c {
        return Err(Error::dim("batch_norm", "running statistics width differs from channels"));
    }
    let n = b * h * w;
    let (mean, var) = if training {
        if n < 2 {
            return Err(Error::contract(
                "batch_norm",
                format!("training needs at least 2 values per channel, got B*H*W = {n}"),
            ));
        }
        let mut mean = vec![0.0; c];
        for px in xt.data().chunks(c) {
            mean.iter_mut().zip(px).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; c];
        for px in xt.data().chunks(c) {
            for ((acc, v), m) in var.iter_mut().zip(px).zip(&mean) {
                *acc += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|v| *v /= n as f64);
        (mean, var)
    } else {
        (s.running_mean.data().to_vec(), s.running_var.data().to_vec())
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + s.epsilon).sqrt()).collect();
    let gamma = g.value(s.gamma).data();
    let beta = g.value(s.beta).data();
    let mut xhat = vec![0.0; xt.len()];
    let mut y = vec![0.0; xt.len()];
    for ((src, xh), dst) in xt.data().chunks(c).zip(xhat.chunks_mut(c)).zip(y.chunks_mut(c)) {
        for ch in 0..c {
            xh[ch] = (src[ch] - mean[ch]) * inv_std[ch];
            dst[ch] = gamma[ch] * xh[ch] + beta[ch];
        }
    }
    let out = Tensor::new(xt.shape().to_vec(), y)?;
    let op = BatchNormOp {
        x,
        gamma: s.gamma,
        beta: s.beta,
        xhat,
        inv_std,
        channels: c,
        training,
    };
    let var_node = g.push(op, out);
    Ok((var_node, training.then_some(BatchStats { mean, var })))
}

struct BatchNormOp {
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    channels: usize,
    training: bool,
}

impl Op for BatchNormOp {
    fn name(&self) -> &'static str {
        "batch_norm"
    }
    fn inputs(&self) -> Vec<Var> {
        vec![self.x, self.gamma, self.beta]
    }
    fn backward(&self, ctx: &Ctx<'_>, _: &Tensor, grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let c = self.channels;
        let n = (grad.len() / c) as f64;
        let gamma = ctx.value(self.gamma).data();
        let mut dbeta = vec![0.0; c];
        let mut dgamma = vec![0.0; c];
        for (gr, xh) in grad.chunks(c).zip(self.xhat.chunks(c)) {
            for ch in 0..c {
                dbeta[ch] += gr[ch];
                dgamma[ch] += gr[ch] * xh[ch];
            }
        }
        let dx = needs[0].then(|| {
            let mut dx = vec![0.0; grad.len()];
            for ((d, gr), xh) in dx.chunks_mut(c).zip(grad.chunks(c)).zip(self.xhat.chunks(c)) {
                for ch in 0..c {
                    let scale = gamma[ch] * self.inv_std[ch];
                    d[ch] = if self.training {
                        scale * (gr[ch] - dbeta[ch] / n - xh[ch] * dgamma[ch] / n)
                    } else {
                        scale * gr[ch]
                    };
                }
            }
            dx
        });
        vec![dx, Some(dgamma), Some(dbeta)]
    }
}

/// Normalizes each position's channel vector, then applies `gamma`/`beta`.
/// Works on any rank; the last axis is the normalized one.
pub fn layer_norm(g: &mut Graph, x: Var, gamma: Var, beta: Var, epsilon: f64) -> Result<Var> {
    let xt = g.value(x);
    let c = *xt
        .shape()
        .last()
        .ok_or_else(|| Error::dim("layer_norm", "scalar input has no channel axis"))?;
    check_affine("layer_norm", g, gamma, beta, c)?;
    let gm = g.value(gamma).data();
    let bt = g.value(beta).data();
    let rows = xt.len() / c;
    let mut xhat = vec![0.0; xt.len()];
    let mut inv_std = vec![0.0; rows];
    let mut y = vec![0.0; xt.len()];
    for (r, src) in xt.data().chunks(c).enumerate() {
        let mean = src.iter().sum::<f64>() / c as f64;
        let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let inv = 1.0 / (var + epsilon).sqrt();
        inv_std[r] = inv;
        for ch in 0..c {
            let xh = (src[ch] - mean) * inv;
            xhat[r * c + ch] = xh;
            y[r * c + ch] = gm[ch] * xh + bt[ch];
        }
    }
    let out = Tensor::new(xt.shape().to_vec(), y)?;
    Ok(g.push(
        LayerNormOp {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            channels: c,
        },
        out,
    ))
}

struct LayerNormOp {
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    channels: usize,
}

impl Op for LayerNormOp {
    fn name(&self) -> &'static str {
        "layer_norm"
    }
    fn inputs(&self) -> Vec<Var> {
        vec![self.x, self.gamma, self.beta]
    }
    fn backward(&self, ctx: &Ctx<'_>, _: &Tensor, grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let c = self.channels;
        let gamma = ctx.value(self.gamma).data();
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for (gr, xh) in grad.chunks(c).zip(self.xhat.chunks(c)) {
            for ch in 0..c {
                dbeta[ch] += gr[ch];
                dgamma[ch] += gr[ch] * xh[ch];
            }
        }
        let dx = needs[0].then(|| {
            let mut dx = vec![0.0; grad.len()];
            let n = c as f64;
            for (r, ((d, gr), xh)) in dx.chunks_mut(c).zip(grad.chunks(c)).zip(self.xhat.chunks(c)).enumerate() {
                let mut sum_g = 0.0;
                let mut sum_gx = 0.0;
                for ch in 0..c {
                    let gh = gr[ch] * gamma[ch];
                    sum_g += gh;
                    sum_gx += gh * xh[ch];
                }
                for ch in 0..c {
                    let gh = gr[ch] * gamma[ch];
                    d[ch] = self.inv_std[r] * (gh - sum_g / n - xh[ch] * sum_gx / n);
                }
            }
            dx
        });
        vec![dx, Some(dgamma), Some(dbeta)]
    }
}
