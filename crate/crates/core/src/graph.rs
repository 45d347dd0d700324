//! Graph-recorded reverse-mode differentiation over a closed set of ops.
//!
//! Every forward call on a [`Graph`] evaluates eagerly and appends a node.
//! Nodes are appended in topological order, so [`Graph::backward`] is a
//! single reverse sweep. Ops live next to the kernels they wrap (see
//! `nn`, `attention`, `loss`) and implement [`Op`].

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Read access to recorded values during the backward sweep.
pub struct Ctx<'a> {
    nodes: &'a [Node],
}

impl Ctx<'_> {
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }
}

/// A differentiable operation recorded on the graph.
pub trait Op {
    fn name(&self) -> &'static str;
    fn inputs(&self) -> Vec<Var>;
    /// Returns one gradient per input (in `inputs()` order). Entries whose
    /// `needs` flag is false may be `None`.
    fn backward(&self, ctx: &Ctx<'_>, out: &Tensor, grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>>;
}

struct Node {
    value: Tensor,
    op: Option<Box<dyn Op>>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant leaf; no gradient is accumulated for it.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t, true)
    }

    fn leaf(&mut self, mut t: Tensor, requires_grad: bool) -> Var {
        t.grad = None;
        self.nodes.push(Node {
            value: t,
            op: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an op whose forward value has already been computed.
    pub fn push(&mut self, op: impl Op + 'static, value: Tensor) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        debug_assert!(value.is_finite() || !self.inputs_finite(&op), "{} produced non-finite output", op.name());
        self.nodes.push(Node {
            value,
            op: Some(Box::new(op)),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn inputs_finite(&self, op: &dyn Op) -> bool {
        op.inputs().iter().all(|v| self.nodes[v.0].value.is_finite())
    }

    /// Propagates `∂loss/∂node` to every node that requires a gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::contract(
                "backward",
                format!("loss must be a scalar, got shape {:?}", lv.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let ctx = Ctx { nodes: &self.nodes };
        for idx in (0..=loss.0).rev() {
            let Some(grad) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if let Some(op) = &node.op {
                if node.requires_grad {
                    let inputs = op.inputs();
                    let needs: Vec<bool> = inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
                    let input_grads = op.backward(&ctx, &node.value, &grad, &needs);
                    debug_assert_eq!(input_grads.len(), inputs.len(), "{}", op.name());
                    for ((v, g), need) in inputs.iter().zip(input_grads).zip(&needs) {
                        if !need {
                            continue;
                        }
                        let Some(g) = g else { continue };
                        match &mut grads[v.0] {
                            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                            slot => *slot = Some(g),
                        }
                    }
                }
            }
            grads[idx] = Some(grad);
        }
        // Only leaves keep their gradients.
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if node.op.is_some() || !node.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    // ---- closed set of tensor-level ops ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(MatMul { a, b }, out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::dim("add", format!("{:?} vs {:?}", x.shape(), y.shape())));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(Add { a, b }, out))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::dim("mul", format!("{:?} vs {:?}", x.shape(), y.shape())));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(Mul { a, b }, out))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let x = self.value(a);
        let out = Tensor::from_fn(x.shape(), |i| x.data()[i] * factor);
        self.push(Scale { a, factor }, out)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Sum { a }, Tensor::scalar(s))
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s = self.value(a).sum_squares();
        self.push(SumSquares { a }, Tensor::scalar(s))
    }

    /// Sum of several scalar nodes.
    pub fn add_scalars(&mut self, terms: &[Var]) -> Result<Var> {
        let mut s = 0.0;
        for &t in terms {
            let v = self.value(t);
            if v.len() != 1 {
                return Err(Error::dim("add_scalars", format!("term has shape {:?}", v.shape())));
            }
            s += v.item();
        }
        Ok(self.push(AddScalars { terms: terms.to_vec() }, Tensor::scalar(s)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(Reshape { a }, out))
    }

    /// Row-wise softmax of a `rows × cols` matrix.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let [_, cols] = x.dims2("softmax_rows")?;
        let mut data = x.data().to_vec();
        tensor::softmax_rows_in_place(&mut data, cols);
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(SoftmaxRows { a, cols }, out))
    }
}

/// Gradients of a scalar loss with respect to every trainable leaf.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Copies the gradient of `v` into the tensor's grad slot (zeros if `v`
    /// did not influence the loss).
    pub fn write_into(&self, v: Var, t: &mut Tensor) {
        t.grad = Some(match self.get(v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; t.len()],
        });
    }
}

struct MatMul {
    a: Var,
    b: Var,
}

impl Op for MatMul {
    fn name(&self) -> &'static str {
        "matmul"
    }
    fn inputs(&self) -> Vec<Var> {
        vec![self.a, self.b]
    }
    fn backward(&self, ctx: &Ctx<'_>, _out: &Tensor, grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (a, b) = (ctx.value(self.a), ctx.value(self.b));
        let (t, k, d) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let da = needs[0].then(|| {
            let mut da = vec![0.0; t * k];
            tensor::matmul_bt_into(grad, b.data(), &mut da, t, d, k);
            da
        });
        let db = needs[1].then(|| {
            let mut db = vec![0.0; k * d];
            tensor::matmul_at_into(a.data(), grad, &mut db, t, k, d);
            db
        });
        vec![da, db]
    }
}

struct Add {
    a: Var,
    b: Var,
}

impl Op for Add {
    fn name(&self) -> &'static str {
        "add"
    }
    fn inputs(&self) -> Vec<Var> {
        vec![self.a, self.b]
    }
    fn backward(&self, _: &Ctx<'_>, _: &Tensor, grad: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![Some(grad.to_vec()), Some(grad.to_vec())]
    }
}

struct Mul {
    a: Var,
    b: Var,
}

impl Op for Mul {
    fn name(&self) -> &'static str {
        "mul"
    }
    fn inputs(&self) -> Vec<Var> {
        vec![self.a, self.b]
    }
    fn backward(&self, ctx: &Ctx<'_>, _: &Tensor, grad: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (a, b) = (ctx.value(self.a).data(), ctx.value(self.b).data());
        let da = needs[0].then(|| grad.iter().zip(b).map(|(g, y)| g * y).collect());
        let db = needs[1].then(|| grad.iter().zip(a).map(|(g, x)| g * x).collect());
        vec![da, db]
    }
}

struct Scale {
    a: Var,
    factor: f64,
}

impl Op for Scale {
    fn name(&self) -> &'static str {
        "scale"
    }
    fn inputs(&self) -> Vec<Var> {
        vec![self.a]
    }
    fn backward(&self, _: &Ctx<'_>, _: &Tensor, grad: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![Some(grad.iter().map(|g| g * self.factor).collect())]
    }
}

struct Sum {
    a: Var,
}

impl Op for Sum {
    fn name(&self) -> &'static str {
        "sum"
    }
    fn inputs(&self) -> Vec<Var> {
        vec![self.a]
    }
    fn backward(&self, ctx: &Ctx<'_>, _: &Tensor, grad: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![Some(vec![grad[0]; ctx.value(self.a).len()])]
    }
}

struct SumSquares {
    a: Var,
}

impl Op for SumSquares {
    fn name(&self) -> &'static str {
        "sum_squares"
    }
    fn inputs(&self) -> Vec<Var> {
        vec![self.a]
    }
    fn backward(&self, ctx: &Ctx<'_>, _: &Tensor, grad: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let g = grad[0];
        vec![Some(ctx.value(self.a).data().iter().map(|x| 2.0 * x * g).collect())]
    }
}

struct AddScalars {
    terms: Vec<Var>,
}

impl Op for AddScalars {
    fn name(&self) -> &'static str {
        "add_scalars"
    }
    fn inputs(&self) -> Vec<Var> {
        self.terms.clone()
    }
    fn backward(&self, _: &Ctx<'_>, _: &Tensor, grad: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        self.terms.iter().map(|_| Some(vec![grad[0]])).collect()
    }
}

struct Reshape {
    a: Var,
}

impl Op for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }
    fn inputs(&self) -> Vec<Var> {
        vec![self.a]
    }
    fn backward(&self, _: &Ctx<'_>, _: &Tensor, grad: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![Some(grad.to_vec())]
    }
}

struct SoftmaxRows {
    a: Var,
    cols: usize,
}

impl Op for SoftmaxRows {
    fn name(&self) -> &'static str {
        "softmax_rows"
    }
    fn inputs(&self) -> Vec<Var> {
        vec![self.a]
    }
    fn backward(&self, _: &Ctx<'_>, out: &Tensor, grad: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![Some(tensor::softmax_rows_backward(out.data(), grad, self.cols))]
    }
}
