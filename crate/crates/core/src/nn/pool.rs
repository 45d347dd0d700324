//! Global spatial pooling `[B, H, W, C] -> [B, C]`.

use crate::error::Result;
use crate::graph::{Ctx, Graph, Op, Var};
use crate::tensor::Tensor;

pub fn global_avg_pool(g: &mut Graph, x: Var) -> Result<Var> {
    let xt = g.value(x);
    let [b, h, w, c] = xt.dims4("global_avg_pool")?;
    let hw = h * w;
    let mut out = vec![0.0; b * c];
    for bi in 0..b {
        let acc = &mut out[bi * c..(bi + 1) * c];
        for px in xt.data()[bi * hw * c..(bi + 1) * hw * c].chunks(c) {
            acc.iter_mut().zip(px).for_each(|(a, v)| *a += v);
        }
        acc.iter_mut().for_each(|a| *a /= hw as f64);
    }
    let out = Tensor::new(vec![b, c], out)?;
    Ok(g.push(AvgPool { x, hw, c }, out))
}

pub fn global_max_pool(g: &mut Graph, x: Var) -> Result<Var> {
    let xt = g.value(x);
    let [b, h, w, c] = xt.dims4("global_max_pool")?;
    let hw = h * w;
    let mut out = vec![f64::NEG_INFINITY; b * c];
    // Flat index of the winning element; first occurrence wins ties.
    let mut argmax = vec![0usize; b * c];
    for bi in 0..b {
        for p in 0..hw {
            let base = (bi * hw + p) * c;
            for ch in 0..c {
                let v = xt.data()[base + ch];
                if v > out[bi * c + ch] {
                    out[bi * c + ch] = v;
                    argmax[bi * c + ch] = base + ch;
                }
            }
        }
    }
    let numel = xt.len();
    let out = Tensor::new(vec![b, c], out)?;
    Ok(g.push(MaxPool { x, argmax, numel }, out))
}

struct AvgPool {
    x: Var,
    hw: usize,
    c: usize,
}

impl Op for AvgPool {
    fn name(&self) -> &'static str {
        "global_avg_pool"
    }
    fn inputs(&self) -> Vec<Var> {
        vec![self.x]
    }
    fn backward(&self, ctx: &Ctx<'_>, _: &Tensor, grad: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let mut dx = vec![0.0; ctx.value(self.x).len()];
        let scale = 1.0 / self.hw as f64;
        for (i, d) in dx.chunks_mut(self.c).enumerate() {
            let bi = i / self.hw;
            for (ch, v) in d.iter_mut().enumerate() {
                *v = grad[bi * self.c + ch] * scale;
            }
        }
        vec![Some(dx)]
    }
}

struct MaxPool {
    x: Var,
    argmax: Vec<usize>,
    numel: usize,
}

impl Op for MaxPool {
    fn name(&self) -> &'static str {
        "global_max_pool"
    }
    fn inputs(&self) -> Vec<Var> {
        vec![self.x]
    }
    fn backward(&self, _: &Ctx<'_>, _: &Tensor, grad: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let mut dx = vec![0.0; self.numel];
        for (&idx, &gv) in self.argmax.iter().zip(grad) {
            dx[idx] += gv;
        }
        vec![Some(dx)]
    }
}
