//! Multi-head self-attention over flattened spatial positions, and the
//! attention-augmented convolution block built on it.
//!
//! Block dataflow for an input map `x`:
//!
//! ```text
//! x_out  = LeakyReLU(BN(conv3x3(x)))
//! z_attn = unflatten(MHSA(flatten(x_out)))
//! out    = LayerNorm(x_out + z_attn)
//! ```
//!
//! Tokens are spatial positions in row-major order. No positional encoding
//! is added, so MHSA is permutation-equivariant over tokens.

use crate::error::{Error, Result};
use crate::graph::{Ctx, Graph, Op, Var};
use crate::nn::{self, BatchStats, Conv2DParams, NormState};
use crate::params::{join, ParamKind, ParamTree};
use crate::tensor::{self, Tensor};

pub const DEFAULT_HEADS: usize = 4;
pub const DEFAULT_TOKEN_CAP: usize = 4096;

/// Projection matrices: `w_q`, `w_k` are `[d_model × heads·d_k]`, `w_v` is
/// `[d_model × heads·d_v]`, `w_o` is `[heads·d_v × d_model]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MhsaParams<T> {
    pub w_q: T,
    pub w_k: T,
    pub w_v: T,
    pub w_o: T,
    pub heads: usize,
    pub d_k: usize,
    pub d_v: usize,
}

impl<T> ParamTree<T> for MhsaParams<T> {
    type Mapped<U> = MhsaParams<U>;

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &'a T)) {
        f(&join(prefix, "w_q"), ParamKind::Weight, &self.w_q);
        f(&join(prefix, "w_k"), ParamKind::Weight, &self.w_k);
        f(&join(prefix, "w_v"), ParamKind::Weight, &self.w_v);
        f(&join(prefix, "w_o"), ParamKind::Weight, &self.w_o);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut T)) {
        f(&join(prefix, "w_q"), ParamKind::Weight, &mut self.w_q);
        f(&join(prefix, "w_k"), ParamKind::Weight, &mut self.w_k);
        f(&join(prefix, "w_v"), ParamKind::Weight, &mut self.w_v);
        f(&join(prefix, "w_o"), ParamKind::Weight, &mut self.w_o);
    }

    fn map<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &T) -> U) -> MhsaParams<U> {
        MhsaParams {
            w_q: f(&join(prefix, "w_q"), ParamKind::Weight, &self.w_q),
            w_k: f(&join(prefix, "w_k"), ParamKind::Weight, &self.w_k),
            w_v: f(&join(prefix, "w_v"), ParamKind::Weight, &self.w_v),
            w_o: f(&join(prefix, "w_o"), ParamKind::Weight, &self.w_o),
            heads: self.heads,
            d_k: self.d_k,
            d_v: self.d_v,
        }
    }
}

impl MhsaParams<Tensor> {
    pub fn d_model(&self) -> usize {
        self.w_q.shape()[0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugConvBlockParams<T> {
    pub conv: Conv2DParams<T>,
    pub bn: NormState<T>,
    pub mhsa: MhsaParams<T>,
    pub ln_gamma: T,
    pub ln_beta: T,
}

impl<T> ParamTree<T> for AugConvBlockParams<T> {
    type Mapped<U> = AugConvBlockParams<U>;

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &'a T)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.bn.visit(&join(prefix, "bn"), f);
        self.mhsa.visit(&join(prefix, "mhsa"), f);
        f(&join(prefix, "ln.gamma"), ParamKind::NormScale, &self.ln_gamma);
        f(&join(prefix, "ln.beta"), ParamKind::NormShift, &self.ln_beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut T)) {
        self.conv.visit_mut(&join(prefix, "conv"), f);
        self.bn.visit_mut(&join(prefix, "bn"), f);
        self.mhsa.visit_mut(&join(prefix, "mhsa"), f);
        f(&join(prefix, "ln.gamma"), ParamKind::NormScale, &mut self.ln_gamma);
        f(&join(prefix, "ln.beta"), ParamKind::NormShift, &mut self.ln_beta);
    }

    fn map<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &T) -> U) -> AugConvBlockParams<U> {
        AugConvBlockParams {
            conv: self.conv.map(&join(prefix, "conv"), f),
            bn: self.bn.map(&join(prefix, "bn"), f),
            mhsa: self.mhsa.map(&join(prefix, "mhsa"), f),
            ln_gamma: f(&join(prefix, "ln.gamma"), ParamKind::NormScale, &self.ln_gamma),
            ln_beta: f(&join(prefix, "ln.beta"), ParamKind::NormShift, &self.ln_beta),
        }
    }
}

/// Runtime switches for [`aug_conv_block`].
#[derive(Debug, Clone, Copy)]
pub struct BlockOptions {
    pub leaky_slope: f64,
    /// When false the attention output is replaced by zeros.
    pub use_mhsa: bool,
    pub token_cap: usize,
    pub training: bool,
}

impl Default for BlockOptions {
    fn default() -> Self {
        Self {
            leaky_slope: nn::DEFAULT_LEAKY_SLOPE,
            use_mhsa: true,
            token_cap: DEFAULT_TOKEN_CAP,
            training: true,
        }
    }
}

/// `[B, H, W, C] -> [B, H·W, C]`, row-major over positions.
pub fn spatial_flatten(g: &mut Graph, x: Var) -> Result<Var> {
    let [b, h, w, c] = g.value(x).dims4("spatial_flatten")?;
    g.reshape(x, &[b, h * w, c])
}

pub fn spatial_unflatten(g: &mut Graph, x: Var, height: usize, width: usize) -> Result<Var> {
    let shape = g.value(x).shape().to_vec();
    match shape[..] {
        [b, t, c] if t == height * width => g.reshape(x, &[b, height, width, c]),
        _ => Err(Error::dim(
            "spatial_unflatten",
            format!("cannot unflatten {shape:?} into {height}x{width} positions"),
        )),
    }
}

/// Multi-head self-attention on `[B, T, d_model]`.
pub fn mhsa(g: &mut Graph, x: Var, p: &MhsaParams<Var>) -> Result<Var> {
    let shape = g.value(x).shape().to_vec();
    let [b, t, d] = shape[..] else {
        return Err(Error::dim("mhsa", format!("expected [B, T, d_model], got {shape:?}")));
    };
    check_mhsa_shapes(g, p, d)?;
    let flat = g.reshape(x, &[b * t, d])?;
    let q = g.matmul(flat, p.w_q)?;
    let k = g.matmul(flat, p.w_k)?;
    let v = g.matmul(flat, p.w_v)?;
    let heads = attention_core(g, q, k, v, b, t, p.heads, p.d_k, p.d_v)?;
    let out = g.matmul(heads, p.w_o)?;
    g.reshape(out, &[b, t, d])
}

fn check_mhsa_shapes(g: &Graph, p: &MhsaParams<Var>, d: usize) -> Result<()> {
    let (hk, hv) = (p.heads * p.d_k, p.heads * p.d_v);
    let expect = [
        ("w_q", p.w_q, [d, hk]),
        ("w_k", p.w_k, [d, hk]),
        ("w_v", p.w_v, [d, hv]),
        ("w_o", p.w_o, [hv, d]),
    ];
    for (name, v, want) in expect {
        if g.value(v).shape() != want {
            return Err(Error::dim(
                "mhsa",
                format!("{name} has shape {:?}, expected {want:?} for d_model {d}", g.value(v).shape()),
            ));
        }
    }
    Ok(())
}

/// Row-wise attention probabilities for one `(batch, head)`:
/// `softmax(Q Kᵀ / √d_k)` as a `t × t` buffer.
fn head_probs(q: &[f64], k: &[f64], bi: usize, head: usize, t: usize, heads: usize, d_k: usize) -> Vec<f64> {
    let stride = heads * d_k;
    let scale = 1.0 / (d_k as f64).sqrt();
    let mut s = vec![0.0; t * t];
    for i in 0..t {
        let qi = &q[(bi * t + i) * stride + head * d_k..][..d_k];
        for j in 0..t {
            let kj = &k[(bi * t + j) * stride + head * d_k..][..d_k];
            s[i * t + j] = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
        }
    }
    tensor::softmax_rows_in_place(&mut s, t);
    s
}

/// Concatenated per-head `softmax(QKᵀ/√d_k)·V` for `q, k: [B·T, h·d_k]`,
/// `v: [B·T, h·d_v]`. Output is `[B·T, h·d_v]`.
#[allow(clippy::too_many_arguments)]
fn attention_core(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    b: usize,
    t: usize,
    heads: usize,
    d_k: usize,
    d_v: usize,
) -> Result<Var> {
    let (qd, kd, vd) = (g.value(q).data(), g.value(k).data(), g.value(v).data());
    let vs = heads * d_v;
    let mut out = vec![0.0; b * t * vs];
    let mut probs = Vec::with_capacity(b * heads);
    for bi in 0..b {
        for head in 0..heads {
            let p = head_probs(qd, kd, bi, head, t, heads, d_k);
            for i in 0..t {
                let orow = &mut out[(bi * t + i) * vs + head * d_v..][..d_v];
                for j in 0..t {
                    let w = p[i * t + j];
                    let vrow = &vd[(bi * t + j) * vs + head * d_v..][..d_v];
                    orow.iter_mut().zip(vrow).for_each(|(o, vv)| *o += w * vv);
                }
            }
            probs.push(p);
        }
    }
    let out = Tensor::new(vec![b * t, vs], out)?;
    Ok(g.push(
        AttentionOp {
            q,
            k,
            v,
            probs,
            b,
            t,
            heads,
            d_k,
            d_v,
        },
        out,
    ))
}

struct AttentionOp {
    q: Var,
    k: Var,
    v: Var,
    probs: Vec<Vec<f64>>,
    b: usize,
    t: usize,
    heads: usize,
    d_k: usize,
    d_v: usize,
}

impl Op for AttentionOp {
    fn name(&self) -> &'static str {
        "attention"
    }
    fn inputs(&self) -> Vec<Var> {
        vec![self.q, self.k, self.v]
    }
    fn backward(&self, ctx: &Ctx<'_>, _: &Tensor, grad: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (qd, kd, vd) = (ctx.value(self.q).data(), ctx.value(self.k).data(), ctx.value(self.v).data());
        let (t, dk, dv) = (self.t, self.d_k, self.d_v);
        let (ks, vs) = (self.heads * dk, self.heads * dv);
        let scale = 1.0 / (dk as f64).sqrt();
        let mut dq = vec![0.0; qd.len()];
        let mut dkk = vec![0.0; kd.len()];
        let mut dvv = vec![0.0; vd.len()];
        for bi in 0..self.b {
            for head in 0..self.heads {
                let p = &self.probs[bi * self.heads + head];
                // dP = dO Vᵀ, dV = Pᵀ dO
                let mut dp = vec![0.0; t * t];
                for i in 0..t {
                    let go = &grad[(bi * t + i) * vs + head * dv..][..dv];
                    for j in 0..t {
                        let vrow = &vd[(bi * t + j) * vs + head * dv..][..dv];
                        dp[i * t + j] = go.iter().zip(vrow).map(|(a, b)| a * b).sum();
                        let w = p[i * t + j];
                        let dvrow = &mut dvv[(bi * t + j) * vs + head * dv..][..dv];
                        dvrow.iter_mut().zip(go).for_each(|(d, gg)| *d += w * gg);
                    }
                }
                let ds = tensor::softmax_rows_backward(p, &dp, t);
                for i in 0..t {
                    for j in 0..t {
                        let s = ds[i * t + j] * scale;
                        if s == 0.0 {
                            continue;
                        }
                        let qi = (bi * t + i) * ks + head * dk;
                        let kj = (bi * t + j) * ks + head * dk;
                        for c in 0..dk {
                            dq[qi + c] += s * kd[kj + c];
                            dkk[kj + c] += s * qd[qi + c];
                        }
                    }
                }
            }
        }
        vec![Some(dq), Some(dkk), Some(dvv)]
    }
}

/// Attention probability matrices (`T × T`, one per batch item and head,
/// batch-major) for an input `[B, T, d_model]`.
pub fn attention_weights(x: &Tensor, p: &MhsaParams<Tensor>) -> Result<Vec<Tensor>> {
    let shape = x.shape().to_vec();
    let [b, t, d] = shape[..] else {
        return Err(Error::dim("attention_weights", format!("expected [B, T, d_model], got {shape:?}")));
    };
    let flat = x.reshape(&[b * t, d])?;
    let q = flat.matmul(&p.w_q)?;
    let k = flat.matmul(&p.w_k)?;
    let mut out = Vec::with_capacity(b * p.heads);
    for bi in 0..b {
        for head in 0..p.heads {
            out.push(Tensor::new(vec![t, t], head_probs(q.data(), k.data(), bi, head, t, p.heads, p.d_k))?);
        }
    }
    Ok(out)
}

/// Attention-augmented convolution block. Returns the output and, in
/// training mode, the batch-norm statistics to fold into running averages.
pub fn aug_conv_block(
    g: &mut Graph,
    x: Var,
    p: &AugConvBlockParams<Var>,
    opts: BlockOptions,
) -> Result<(Var, Option<BatchStats>)> {
    let [_, h, w, _] = g.value(x).dims4("aug_conv_block")?;
    if h * w > opts.token_cap {
        return Err(Error::config(format!(
            "{h}x{w} map has {} attention tokens, above the cap of {}",
            h * w,
            opts.token_cap
        )));
    }
    let z = nn::conv2d(g, x, &p.conv)?;
    let (zn, stats) = nn::batch_norm(g, z, &p.bn, opts.training)?;
    let x_out = nn::leaky_relu(g, zn, opts.leaky_slope);
    let a_res = if opts.use_mhsa {
        let seq = spatial_flatten(g, x_out)?;
        let attn = mhsa(g, seq, &p.mhsa)?;
        let z_attn = spatial_unflatten(g, attn, h, w)?;
        g.add(x_out, z_attn)?
    } else {
        x_out
    };
    let out = nn::layer_norm(g, a_res, p.ln_gamma, p.ln_beta, nn::norm::LAYER_NORM_EPS)?;
    Ok((out, stats))
}
