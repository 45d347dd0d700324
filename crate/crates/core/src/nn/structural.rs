//! Data-movement ops on BHWC maps: channel concat, per-channel gating,
//! nearest-neighbour upsampling.

use crate::error::{Error, Result};
use crate::graph::{Ctx, Graph, Op, Var};
use crate::tensor::Tensor;

/// Concatenates two maps along the channel axis. `b` may be `None` to
/// express an empty (zero-channel) operand.
pub fn concat_channels(g: &mut Graph, a: Var, b: Option<Var>) -> Result<Var> {
    let Some(b) = b else { return Ok(a) };
    let [ba, ha, wa, ca] = g.value(a).dims4("concat_channels")?;
    let [bb, hb, wb, cb] = g.value(b).dims4("concat_channels")?;
    if (ba, ha, wa) != (bb, hb, wb) {
        return Err(Error::dim(
            "concat_channels",
            format!("expected {ba}x{ha}x{wa} spatial extent, got {bb}x{hb}x{wb}"),
        ));
    }
    let c = ca + cb;
    let mut out = Vec::with_capacity(ba * ha * wa * c);
    for (pa, pb) in g.value(a).data().chunks(ca).zip(g.value(b).data().chunks(cb)) {
        out.extend_from_slice(pa);
        out.extend_from_slice(pb);
    }
    let out = Tensor::new(vec![ba, ha, wa, c], out)?;
    Ok(g.push(Concat { a, b, ca, cb }, out))
}

struct Concat {
    a: Var,
    b: Var,
    ca: usize,
    cb: usize,
}

impl Op for Concat {
    fn name(&self) -> &'static str {
        "concat_channels"
    }
    fn inputs(&self) -> Vec<Var> {
        vec![self.a, self.b]
    }
    fn backward(&self, _: &Ctx<'_>, _: &Tensor, grad: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let c = self.ca + self.cb;
        let mut da = Vec::with_capacity(grad.len() / c * self.ca);
        let mut db = Vec::with_capacity(grad.len() / c * self.cb);
        for px in grad.chunks(c) {
            da.extend_from_slice(&px[..self.ca]);
            db.extend_from_slice(&px[self.ca..]);
        }
        vec![Some(da), Some(db)]
    }
}

/// `out[b, y, x, c] = x[b, y, x, c] · s[b, c]`.
pub fn scale_channels(g: &mut Graph, x: Var, s: Var) -> Result<Var> {
    let [b, h, w, c] = g.value(x).dims4("scale_channels")?;
    if g.value(s).shape() != [b, c] {
        return Err(Error::dim(
            "scale_channels",
            format!("gate {:?} expected [{b}, {c}]", g.value(s).shape()),
        ));
    }
    let hw = h * w;
    let (xd, sd) = (g.value(x).data(), g.value(s).data());
    let out = Tensor::from_fn(&[b, h, w, c], |i| {
        let bi = i / (hw * c);
        xd[i] * sd[bi * c + i % c]
    });
    Ok(g.push(ScaleChannels { x, s, hw, c }, out))
}

struct ScaleChannels {
    x: Var,
    s: Var,
    hw: usize,
    c: usize,
}

impl Op for ScaleChannels {
    fn name(&self) -> &'static str {
        "scale_channels"
    }
    fn inputs(&self) -> Vec<Var> {
        vec![self.x, self.s]
    }
    fn backward(&self, ctx: &Ctx<'_>, _: &Tensor, grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (xd, sd) = (ctx.value(self.x).data(), ctx.value(self.s).data());
        let c = self.c;
        let per_batch = self.hw * c;
        let dx = needs[0].then(|| (0..grad.len()).map(|i| grad[i] * sd[(i / per_batch) * c + i % c]).collect());
        let ds = needs[1].then(|| {
            let mut ds = vec![0.0; sd.len()];
            for i in 0..grad.len() {
                ds[(i / per_batch) * c + i % c] += grad[i] * xd[i];
            }
            ds
        });
        vec![dx, ds]
    }
}

/// Replicates each pixel into a `factor × factor` block.
pub fn nearest_upsample(g: &mut Graph, x: Var, factor: usize) -> Result<Var> {
    let [b, h, w, c] = g.value(x).dims4("nearest_upsample")?;
    if factor == 0 {
        return Err(Error::config("upsample factor must be >= 1"));
    }
    let (oh, ow) = (h * factor, w * factor);
    let xd = g.value(x).data();
    let mut out = Vec::with_capacity(b * oh * ow * c);
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let src = ((bi * h + oy / factor) * w + ox / factor) * c;
                out.extend_from_slice(&xd[src..src + c]);
            }
        }
    }
    let out = Tensor::new(vec![b, oh, ow, c], out)?;
    Ok(g.push(
        Nearest {
            x,
            dims: [b, h, w, c],
            factor,
        },
        out,
    ))
}

struct Nearest {
    x: Var,
    dims: [usize; 4],
    factor: usize,
}

impl Op for Nearest {
    fn name(&self) -> &'static str {
        "nearest_upsample"
    }
    fn inputs(&self) -> Vec<Var> {
        vec![self.x]
    }
    fn backward(&self, _: &Ctx<'_>, _: &Tensor, grad: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let [b, h, w, c] = self.dims;
        let f = self.factor;
        let (oh, ow) = (h * f, w * f);
        let mut dx = vec![0.0; b * h * w * c];
        for bi in 0..b {
            for oy in 0..oh {
                for ox in 0..ow {
                    let src = ((bi * h + oy / f) * w + ox / f) * c;
                    let dst = ((bi * oh + oy) * ow + ox) * c;
                    for ch in 0..c {
                        dx[src + ch] += grad[dst + ch];
                    }
                }
            }
        }
        vec![Some(dx)]
    }
}
