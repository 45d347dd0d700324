//! Training objective: `mse + α·L2(weights) + spatial-spectral gradient loss`.
//!
//! The gradient term compares forward differences of prediction and target
//! along width (x), height (y) and the band axis (s), each averaged over its
//! valid extent:
//!
//! ```text
//! grad_loss = mean((ΔDx)²) + mean((ΔDy)²) + mean((ΔDs)²)
//! ```
//!
//! where `ΔD = D(y_true) − D(y_pred)`.

use crate::error::{Error, Result};
use crate::graph::{Ctx, Graph, Op, Var};
use crate::params::{named_vars, ParamTree};
use crate::tensor::Tensor;

pub const DEFAULT_ALPHA: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub alpha: f64,
    pub include_grad_loss: bool,
    /// Penalize biases and normalization parameters too.
    pub l2_all_params: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            include_grad_loss: true,
            l2_all_params: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::config(format!("alpha must be finite and >= 0, got {}", self.alpha)));
        }
        Ok(())
    }
}

fn same_shape(g: &Graph, op: &'static str, a: Var, b: Var) -> Result<()> {
    if g.value(a).shape() != g.value(b).shape() {
        return Err(Error::dim(
            op,
            format!("y_true {:?} vs y_pred {:?}", g.value(a).shape(), g.value(b).shape()),
        ));
    }
    Ok(())
}

pub fn mse(g: &mut Graph, y_true: Var, y_pred: Var) -> Result<Var> {
    same_shape(g, "mse", y_true, y_pred)?;
    let (t, p) = (g.value(y_true).data(), g.value(y_pred).data());
    let v = t.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / t.len() as f64;
    Ok(g.push(Mse { y_true, y_pred }, Tensor::scalar(v)))
}

struct Mse {
    y_true: Var,
    y_pred: Var,
}

impl Op for Mse {
    fn name(&self) -> &'static str {
        "mse"
    }
    fn inputs(&self) -> Vec<Var> {
        vec![self.y_true, self.y_pred]
    }
    fn backward(&self, ctx: &Ctx<'_>, _: &Tensor, grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (t, p) = (ctx.value(self.y_true).data(), ctx.value(self.y_pred).data());
        let k = 2.0 * grad[0] / t.len() as f64;
        let dp: Vec<f64> = p.iter().zip(t).map(|(pv, tv)| k * (pv - tv)).collect();
        let dt = needs[0].then(|| dp.iter().map(|v| -v).collect());
        vec![dt, Some(dp)]
    }
}

/// Sum of squares over every `Weight` tensor of a registered parameter tree
/// (or every tensor when `all` is set).
pub fn l2_penalty<P: ParamTree<Var>>(g: &mut Graph, params: &P, all: bool) -> Result<Var> {
    let terms: Vec<Var> = named_vars(params)
        .into_iter()
        .filter(|(_, kind, _)| all || kind.is_weight())
        .map(|(_, _, v)| g.sum_squares(v))
        .collect();
    if terms.is_empty() {
        let zero = g.input(Tensor::scalar(0.0));
        return Ok(zero);
    }
    g.add_scalars(&terms)
}

pub fn spatial_spectral_grad_loss(g: &mut Graph, y_true: Var, y_pred: Var) -> Result<Var> {
    same_shape(g, "spatial_spectral_grad_loss", y_true, y_pred)?;
    let [b, h, w, c] = g.value(y_true).dims4("spatial_spectral_grad_loss")?;
    if h < 2 || w < 2 || c < 2 {
        return Err(Error::contract(
            "spatial_spectral_grad_loss",
            format!("needs H, W, C >= 2, got {h}x{w}x{c}"),
        ));
    }
    let err: Vec<f64> = g
        .value(y_true)
        .data()
        .iter()
        .zip(g.value(y_pred).data())
        .map(|(t, p)| t - p)
        .collect();
    let dims = [b, h, w, c];
    let mut total = 0.0;
    for axis in Axis::ALL {
        let (sum, count) = axis.fold(dims, |i, j| {
            let d = err[j] - err[i];
            d * d
        });
        total += sum / count as f64;
    }
    Ok(g.push(GradLoss { y_true, y_pred, dims }, Tensor::scalar(total)))
}

#[derive(Clone, Copy)]
enum Axis {
    Width,
    Height,
    Band,
}

impl Axis {
    const ALL: [Axis; 3] = [Axis::Width, Axis::Height, Axis::Band];

    /// Visits every forward-difference pair `(i, j)` (flat indices, `j` one
    /// step past `i` along the axis), summing `f`. Returns `(sum, pairs)`.
    fn fold(self, [b, h, w, c]: [usize; 4], mut f: impl FnMut(usize, usize) -> f64) -> (f64, usize) {
        let step = match self {
            Axis::Width => c,
            Axis::Height => w * c,
            Axis::Band => 1,
        };
        let valid = |y: usize, x: usize, ch: usize| match self {
            Axis::Width => x + 1 < w,
            Axis::Height => y + 1 < h,
            Axis::Band => ch + 1 < c,
        };
        let mut sum = 0.0;
        let mut count = 0;
        for bi in 0..b {
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..c {
                        if valid(y, x, ch) {
                            let i = ((bi * h + y) * w + x) * c + ch;
                            sum += f(i, i + step);
                            count += 1;
                        }
                    }
                }
            }
        }
        (sum, count)
    }
}

struct GradLoss {
    y_true: Var,
    y_pred: Var,
    dims: [usize; 4],
}

impl Op for GradLoss {
    fn name(&self) -> &'static str {
        "spatial_spectral_grad_loss"
    }
    fn inputs(&self) -> Vec<Var> {
        vec![self.y_true, self.y_pred]
    }
    fn backward(&self, ctx: &Ctx<'_>, _: &Tensor, grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let t = ctx.value(self.y_true).data();
        let p = ctx.value(self.y_pred).data();
        let err: Vec<f64> = t.iter().zip(p).map(|(a, b)| a - b).collect();
        // d loss / d err
        let mut de = vec![0.0; err.len()];
        for axis in Axis::ALL {
            let (_, count) = axis.fold(self.dims, |_, _| 0.0);
            let k = 2.0 * grad[0] / count as f64;
            axis.fold(self.dims, |i, j| {
                let d = err[j] - err[i];
                de[j] += k * d;
                de[i] -= k * d;
                0.0
            });
        }
        let dp = de.iter().map(|v| -v).collect();
        vec![needs[0].then_some(de), Some(dp)]
    }
}

/// Breakdown of one objective evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    pub mse: f64,
    pub l2: f64,
    pub grad: f64,
    pub total: f64,
}

/// `mse + alpha·l2 + grad_loss` as a differentiable scalar, plus its terms.
pub fn total_loss<P: ParamTree<Var>>(
    g: &mut Graph,
    y_true: Var,
    y_pred: Var,
    params: &P,
    cfg: &LossConfig,
) -> Result<(Var, LossTerms)> {
    cfg.validate()?;
    let m = mse(g, y_true, y_pred)?;
    let l2 = l2_penalty(g, params, cfg.l2_all_params)?;
    let l2_scaled = g.scale(l2, cfg.alpha);
    let mut terms = vec![m, l2_scaled];
    let grad_value = if cfg.include_grad_loss {
        let gl = spatial_spectral_grad_loss(g, y_true, y_pred)?;
        terms.push(gl);
        g.value(gl).item()
    } else {
        0.0
    };
    let total = g.add_scalars(&terms)?;
    let breakdown = LossTerms {
        mse: g.value(m).item(),
        l2: g.value(l2).item(),
        grad: grad_value,
        total: g.value(total).item(),
    };
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_of(f: impl FnOnce(&mut Graph, Var, Var) -> Result<Var>, t: Tensor, p: Tensor) -> f64 {
        let mut g = Graph::new();
        let (a, b) = (g.input(t), g.param(p));
        let l = f(&mut g, a, b).unwrap();
        g.value(l).item()
    }

    #[test]
    fn mse_cases() {
        let z = Tensor::zeros(&[2]);
        let p = Tensor::new(vec![2], vec![1.0, 3.0]).unwrap();
        assert_eq!(scalar_of(mse, z, p.clone()), 5.0);
        assert_eq!(scalar_of(mse, p.clone(), p), 0.0);
    }

    #[test]
    fn shape_mismatch() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(&[2]));
        let b = g.param(Tensor::zeros(&[3]));
        assert!(mse(&mut g, a, b).is_err());
    }

    #[test]
    fn grad_loss_too_small() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(&[1, 1, 4, 2]));
        let b = g.param(Tensor::zeros(&[1, 1, 4, 2]));
        assert!(matches!(spatial_spectral_grad_loss(&mut g, a, b), Err(Error::Contract { .. })));
    }

    #[test]
    fn alpha_must_be_nonnegative() {
        let cfg = LossConfig {
            alpha: -1.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        assert_eq!(LossConfig::default().alpha, 1e-4);
    }
}
