//! 2-D cross-correlation and its adjoint (transposed convolution), NHWC.

use crate::error::{Error, Result};
use crate::graph::{Ctx, Graph, Op, Var};
use crate::params::{join, ParamKind, ParamTree};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Output is `ceil(input / stride)`; zero padding split top/left-first.
    Same,
    /// No padding; only windows fully inside the input.
    Valid,
}

/// Kernel is `[kH, kW, Cin, Cout]` for [`conv2d`]. For [`conv_transpose2d`]
/// the same tensor is read as `[kH, kW, Cout, Cin]`, so both directions of
/// one correlation share a kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2DParams<T> {
    pub kernel: T,
    pub bias: T,
    pub stride: usize,
    pub padding: Padding,
}

impl Conv2DParams<Tensor> {
    pub fn new(kernel: Tensor, bias: Tensor, stride: usize, padding: Padding) -> Result<Self> {
        let [kh, kw, _, cout] = kernel.dims4("Conv2DParams::new")?;
        if kh == 0 || kw == 0 || stride == 0 {
            return Err(Error::dim("Conv2DParams::new", "kernel extents and stride must be >= 1"));
        }
        if bias.shape() != [cout] && bias.shape() != [kernel.shape()[2]] {
            return Err(Error::dim(
                "Conv2DParams::new",
                format!("bias {:?} matches neither channel axis of kernel {:?}", bias.shape(), kernel.shape()),
            ));
        }
        Ok(Self {
            kernel,
            bias,
            stride,
            padding,
        })
    }
}

impl<T> ParamTree<T> for Conv2DParams<T> {
    type Mapped<U> = Conv2DParams<U>;

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &'a T)) {
        f(&join(prefix, "kernel"), ParamKind::Weight, &self.kernel);
        f(&join(prefix, "bias"), ParamKind::Bias, &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut T)) {
        f(&join(prefix, "kernel"), ParamKind::Weight, &mut self.kernel);
        f(&join(prefix, "bias"), ParamKind::Bias, &mut self.bias);
    }

    fn map<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &T) -> U) -> Conv2DParams<U> {
        Conv2DParams {
            kernel: f(&join(prefix, "kernel"), ParamKind::Weight, &self.kernel),
            bias: f(&join(prefix, "bias"), ParamKind::Bias, &self.bias),
            stride: self.stride,
            padding: self.padding,
        }
    }
}

/// Geometry of a correlation from a `(in_h, in_w, cin)` map to `(out_h, out_w, cout)`.
#[derive(Debug, Clone, Copy)]
struct Geom {
    batch: usize,
    in_h: usize,
    in_w: usize,
    cin: usize,
    out_h: usize,
    out_w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad_top: usize,
    pad_left: usize,
}

fn axis_geometry(input: usize, k: usize, stride: usize, padding: Padding) -> Option<(usize, usize)> {
    match padding {
        Padding::Valid => (input >= k).then(|| ((input - k) / stride + 1, 0)),
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + k).saturating_sub(input);
            Some((out, total / 2))
        }
    }
}

fn geometry(
    op: &'static str,
    batch: usize,
    in_h: usize,
    in_w: usize,
    kernel: &[usize],
    stride: usize,
    padding: Padding,
) -> Result<Geom> {
    let (kh, kw, cin, cout) = (kernel[0], kernel[1], kernel[2], kernel[3]);
    let (out_h, pad_top) = axis_geometry(in_h, kh, stride, padding)
        .ok_or_else(|| Error::dim(op, format!("input height {in_h} smaller than kernel {kh}")))?;
    let (out_w, pad_left) = axis_geometry(in_w, kw, stride, padding)
        .ok_or_else(|| Error::dim(op, format!("input width {in_w} smaller than kernel {kw}")))?;
    Ok(Geom {
        batch,
        in_h,
        in_w,
        cin,
        out_h,
        out_w,
        cout,
        kh,
        kw,
        stride,
        pad_top,
        pad_left,
    })
}

impl Geom {
    /// Calls `f(in_offset, out_offset, kernel_offset)` for every valid tap, where
    /// offsets point at the start of the channel vector / `[Cin×Cout]` block.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        for b in 0..self.batch {
            for oy in 0..self.out_h {
                for ky in 0..self.kh {
                    let iy = (oy * self.stride + ky) as isize - self.pad_top as isize;
                    if iy < 0 || iy >= self.in_h as isize {
                        continue;
                    }
                    for ox in 0..self.out_w {
                        let out_off = ((b * self.out_h + oy) * self.out_w + ox) * self.cout;
                        for kx in 0..self.kw {
                            let ix = (ox * self.stride + kx) as isize - self.pad_left as isize;
                            if ix < 0 || ix >= self.in_w as isize {
                                continue;
                            }
                            let in_off = ((b * self.in_h + iy as usize) * self.in_w + ix as usize) * self.cin;
                            let k_off = (ky * self.kw + kx) * self.cin * self.cout;
                            f(in_off, out_off, k_off);
                        }
                    }
                }
            }
        }
    }

    fn forward(&self, x: &[f64], k: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.batch * self.out_h * self.out_w * self.cout];
        let (cin, cout) = (self.cin, self.cout);
        self.for_each_tap(|io, oo, ko| {
            let out = &mut y[oo..oo + cout];
            for ci in 0..cin {
                let xv = x[io + ci];
                if xv == 0.0 {
                    continue;
                }
                let krow = &k[ko + ci * cout..ko + (ci + 1) * cout];
                for (o, &kv) in out.iter_mut().zip(krow) {
                    *o += xv * kv;
                }
            }
        });
        y
    }

    fn backward_data(&self, dy: &[f64], k: &[f64]) -> Vec<f64> {
        let mut dx = vec![0.0; self.batch * self.in_h * self.in_w * self.cin];
        let (cin, cout) = (self.cin, self.cout);
        self.for_each_tap(|io, oo, ko| {
            let g = &dy[oo..oo + cout];
            for ci in 0..cin {
                let krow = &k[ko + ci * cout..ko + (ci + 1) * cout];
                dx[io + ci] += g.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>();
            }
        });
        dx
    }

    fn backward_kernel(&self, x: &[f64], dy: &[f64]) -> Vec<f64> {
        let mut dk = vec![0.0; self.kh * self.kw * self.cin * self.cout];
        let (cin, cout) = (self.cin, self.cout);
        self.for_each_tap(|io, oo, ko| {
            let g = &dy[oo..oo + cout];
            for ci in 0..cin {
                let xv = x[io + ci];
                if xv == 0.0 {
                    continue;
                }
                let row = &mut dk[ko + ci * cout..ko + (ci + 1) * cout];
                for (d, &gv) in row.iter_mut().zip(g) {
                    *d += xv * gv;
                }
            }
        });
        dk
    }
}

fn add_bias(y: &mut [f64], bias: &[f64]) {
    for px in y.chunks_mut(bias.len()) {
        for (v, b) in px.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

fn bias_grad(dy: &[f64], c: usize) -> Vec<f64> {
    let mut db = vec![0.0; c];
    for px in dy.chunks(c) {
        for (d, g) in db.iter_mut().zip(px) {
            *d += g;
        }
    }
    db
}

/// Cross-correlation plus bias (no kernel flip).
pub fn conv2d(g: &mut Graph, x: Var, p: &Conv2DParams<Var>) -> Result<Var> {
    let xs = g.value(x);
    let [b, h, w, cin] = xs.dims4("conv2d")?;
    let ks = g.value(p.kernel).shape().to_vec();
    if ks.len() != 4 {
        return Err(Error::dim("conv2d", format!("kernel must be rank 4, got {ks:?}")));
    }
    if ks[2] != cin {
        return Err(Error::dim(
            "conv2d",
            format!("input has {cin} channels but kernel {ks:?} expects {}", ks[2]),
        ));
    }
    if g.value(p.bias).shape() != [ks[3]] {
        return Err(Error::dim(
            "conv2d",
            format!("bias {:?} does not match {} output channels", g.value(p.bias).shape(), ks[3]),
        ));
    }
    let geom = geometry("conv2d", b, h, w, &ks, p.stride, p.padding)?;
    let mut y = geom.forward(xs.data(), g.value(p.kernel).data());
    add_bias(&mut y, g.value(p.bias).data());
    let out = Tensor::new(vec![b, geom.out_h, geom.out_w, geom.cout], y)?;
    Ok(g.push(
        Conv2dOp {
            x,
            kernel: p.kernel,
            bias: p.bias,
            geom,
        },
        out,
    ))
}

/// Adjoint of [`conv2d`] with the same kernel, stride and padding. With
/// `Padding::Same` the output is exactly `stride ×` the input spatially.
pub fn conv_transpose2d(g: &mut Graph, x: Var, p: &Conv2DParams<Var>) -> Result<Var> {
    let xs = g.value(x);
    let [b, h, w, cin] = xs.dims4("conv_transpose2d")?;
    let ks = g.value(p.kernel).shape().to_vec();
    if ks.len() != 4 {
        return Err(Error::dim("conv_transpose2d", format!("kernel must be rank 4, got {ks:?}")));
    }
    if ks[3] != cin {
        return Err(Error::dim(
            "conv_transpose2d",
            format!("input has {cin} channels but transposed kernel {ks:?} expects {}", ks[3]),
        ));
    }
    if g.value(p.bias).shape() != [ks[2]] {
        return Err(Error::dim(
            "conv_transpose2d",
            format!("bias {:?} does not match {} output channels", g.value(p.bias).shape(), ks[2]),
        ));
    }
    let (s, kh, kw) = (p.stride, ks[0], ks[1]);
    let (out_h, out_w) = match p.padding {
        Padding::Same => (h * s, w * s),
        Padding::Valid => ((h - 1) * s + kh, (w - 1) * s + kw),
    };
    // The correlation this op is the adjoint of maps (out_h, out_w) -> (h, w).
    let geom = geometry("conv_transpose2d", b, out_h, out_w, &ks, s, p.padding)?;
    debug_assert_eq!((geom.out_h, geom.out_w), (h, w));
    let mut y = geom.backward_data(xs.data(), g.value(p.kernel).data());
    add_bias(&mut y, g.value(p.bias).data());
    let out = Tensor::new(vec![b, out_h, out_w, geom.cin], y)?;
    Ok(g.push(
        ConvTranspose2dOp {
            x,
            kernel: p.kernel,
            bias: p.bias,
            geom,
        },
        out,
    ))
}

struct Conv2dOp {
    x: Var,
    kernel: Var,
    bias: Var,
    geom: Geom,
}

impl Op for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d"
    }
    fn inputs(&self) -> Vec<Var> {
        vec![self.x, self.kernel, self.bias]
    }
    fn backward(&self, ctx: &Ctx<'_>, _: &Tensor, grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let x = ctx.value(self.x).data();
        let k = ctx.value(self.kernel).data();
        vec![
            needs[0].then(|| self.geom.backward_data(grad, k)),
            needs[1].then(|| self.geom.backward_kernel(x, grad)),
            needs[2].then(|| bias_grad(grad, self.geom.cout)),
        ]
    }
}

struct ConvTranspose2dOp {
    x: Var,
    kernel: Var,
    bias: Var,
    geom: Geom,
}

impl Op for ConvTranspose2dOp {
    fn name(&self) -> &'static str {
        "conv_transpose2d"
    }
    fn inputs(&self) -> Vec<Var> {
        vec![self.x, self.kernel, self.bias]
    }
    fn backward(&self, ctx: &Ctx<'_>, _: &Tensor, grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let x = ctx.value(self.x).data();
        let k = ctx.value(self.kernel).data();
        vec![
            needs[0].then(|| self.geom.forward(grad, k)),
            needs[1].then(|| self.geom.backward_kernel(grad, x)),
            needs[2].then(|| bias_grad(grad, self.geom.cin)),
        ]
    }
}
