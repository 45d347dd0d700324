use crate::graph::{Ctx, Graph, Op, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
enum Kind {
    Leaky(f64),
    Sigmoid,
}

fn apply(kind: Kind, v: f64) -> f64 {
    match kind {
        Kind::Leaky(slope) => {
            if v > 0.0 {
                v
            } else {
                slope * v
            }
        }
        Kind::Sigmoid => {
            // Branches keep exp() from overflowing for large |v|.
            if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            }
        }
    }
}

fn unary(g: &mut Graph, x: Var, kind: Kind) -> Var {
    let xt = g.value(x);
    let out = Tensor::from_fn(xt.shape(), |i| apply(kind, xt.data()[i]));
    g.push(Activation { x, kind }, out)
}

pub fn leaky_relu(g: &mut Graph, x: Var, slope: f64) -> Var {
    unary(g, x, Kind::Leaky(slope))
}

pub fn relu(g: &mut Graph, x: Var) -> Var {
    unary(g, x, Kind::Leaky(0.0))
}

pub fn sigmoid(g: &mut Graph, x: Var) -> Var {
    unary(g, x, Kind::Sigmoid)
}

struct Activation {
    x: Var,
    kind: Kind,
}

impl Op for Activation {
    fn name(&self) -> &'static str {
        match self.kind {
            Kind::Leaky(0.0) => "relu",
            Kind::Leaky(_) => "leaky_relu",
            Kind::Sigmoid => "sigmoid",
        }
    }
    fn inputs(&self) -> Vec<Var> {
        vec![self.x]
    }
    fn backward(&self, ctx: &Ctx<'_>, out: &Tensor, grad: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let x = ctx.value(self.x).data();
        let dx = match self.kind {
            Kind::Leaky(slope) => grad
                .iter()
                .zip(x)
                .map(|(g, &v)| if v > 0.0 { *g } else { g * slope })
                .collect(),
            Kind::Sigmoid => grad.iter().zip(out.data()).map(|(g, s)| g * s * (1.0 - s)).collect(),
        };
        vec![Some(dx)]
    }
}
