//! Parameter containers generic over their storage.
//!
//! Layers store parameters as `T`, which is [`Tensor`](crate::Tensor) for
//! owned weights and [`Var`](crate::Var) once registered on a graph. The
//! [`ParamTree`] trait gives a stable, named traversal order used by the
//! optimizer, L2 penalty, checkpoints and gradient checks.

use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Kernels and projection matrices; the only kind penalized by default L2.
    Weight,
    Bias,
    NormScale,
    NormShift,
}

impl ParamKind {
    pub fn is_weight(self) -> bool {
        self == ParamKind::Weight
    }
}

pub trait ParamTree<T> {
    type Mapped<U>;

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &'a T));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut T));
    fn map<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &T) -> U) -> Self::Mapped<U>;
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Registers every tensor of `tree` as a trainable leaf.
pub fn register<P>(g: &mut Graph, tree: &P) -> P::Mapped<Var>
where
    P: ParamTree<Tensor>,
{
    tree.map("", &mut |_, _, t| g.param(t.clone()))
}

/// Names and vars of a registered tree, in traversal order.
pub fn named_vars<P: ParamTree<Var>>(tree: &P) -> Vec<(String, ParamKind, Var)> {
    let mut out = Vec::new();
    tree.visit("", &mut |name, kind, v| out.push((name.to_string(), kind, *v)));
    out
}

pub fn named_tensors<P: ParamTree<Tensor>>(tree: &P) -> Vec<(String, ParamKind, &Tensor)> {
    let mut out = Vec::new();
    tree.visit("", &mut |name, kind, t| out.push((name.to_string(), kind, t)));
    out
}

pub fn num_parameters<P: ParamTree<Tensor>>(tree: &P) -> usize {
    let mut n = 0;
    tree.visit("", &mut |_, _, t| n += t.len());
    n
}

/// Flat list of named weights; handy for small probes and tests.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedList<T>(pub Vec<(String, T)>);

impl<T> ParamTree<T> for NamedList<T> {
    type Mapped<U> = NamedList<U>;

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &'a T)) {
        for (name, t) in &self.0 {
            f(&join(prefix, name), ParamKind::Weight, t);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut T)) {
        for (name, t) in &mut self.0 {
            f(&join(prefix, name), ParamKind::Weight, t);
        }
    }

    fn map<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &T) -> U) -> NamedList<U> {
        NamedList(
            self.0
                .iter()
                .map(|(name, t)| (name.clone(), f(&join(prefix, name), ParamKind::Weight, t)))
                .collect(),
        )
    }
}
