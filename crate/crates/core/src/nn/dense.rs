use crate::error::{Error, Result};
use crate::graph::{Ctx, Graph, Op, Var};
use crate::tensor::{self, Tensor};

/// Fully connected layer: `y = x · Wᵀ + b` with `W` stored `[Dout × Din]`.
pub fn dense(g: &mut Graph, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let [b, din] = g.value(x).dims2("dense")?;
    let [dout, din_w] = g.value(weight).dims2("dense")?;
    if din != din_w {
        return Err(Error::dim(
            "dense",
            format!(
                "input {:?} incompatible with weight {:?}",
                g.value(x).shape(),
                g.value(weight).shape()
            ),
        ));
    }
    if g.value(bias).shape() != [dout] {
        return Err(Error::dim(
            "dense",
            format!("bias {:?} expected [{dout}]", g.value(bias).shape()),
        ));
    }
    let mut y = vec![0.0; b * dout];
    tensor::matmul_bt_into(g.value(x).data(), g.value(weight).data(), &mut y, b, din, dout);
    let bv = g.value(bias).data();
    for row in y.chunks_mut(dout) {
        row.iter_mut().zip(bv).for_each(|(v, bb)| *v += bb);
    }
    let out = Tensor::new(vec![b, dout], y)?;
    Ok(g.push(
        DenseOp {
            x,
            weight,
            bias,
            b,
            din,
            dout,
        },
        out,
    ))
}

struct DenseOp {
    x: Var,
    weight: Var,
    bias: Var,
    b: usize,
    din: usize,
    dout: usize,
}

impl Op for DenseOp {
    fn name(&self) -> &'static str {
        "dense"
    }
    fn inputs(&self) -> Vec<Var> {
        vec![self.x, self.weight, self.bias]
    }
    fn backward(&self, ctx: &Ctx<'_>, _: &Tensor, grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let x = ctx.value(self.x).data();
        let w = ctx.value(self.weight).data();
        let dx = needs[0].then(|| {
            let mut dx = vec![0.0; self.b * self.din];
            tensor::matmul_into(grad, w, &mut dx, self.b, self.dout, self.din);
            dx
        });
        let dw = needs[1].then(|| {
            let mut dw = vec![0.0; self.dout * self.din];
            tensor::matmul_at_into(grad, x, &mut dw, self.b, self.dout, self.din);
            dw
        });
        let db = needs[2].then(|| {
            let mut db = vec![0.0; self.dout];
            for row in grad.chunks(self.dout) {
                db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
            }
            db
        });
        vec![dx, dw, db]
    }
}
