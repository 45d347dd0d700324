//! Channel attention: average- and max-pooled descriptors go through one
//! shared bottleneck MLP, are summed, squashed by a sigmoid and used to
//! rescale each channel.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn;
use crate::params::{join, ParamKind, ParamTree};

/// `w1: [C/r × C]`, `b1: [C/r]`, `w2: [C × C/r]`, `b2: [C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelAttentionParams<T> {
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
    pub reduction: usize,
}

impl<T> ParamTree<T> for ChannelAttentionParams<T> {
    type Mapped<U> = ChannelAttentionParams<U>;

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &'a T)) {
        f(&join(prefix, "w1"), ParamKind::Weight, &self.w1);
        f(&join(prefix, "b1"), ParamKind::Bias, &self.b1);
        f(&join(prefix, "w2"), ParamKind::Weight, &self.w2);
        f(&join(prefix, "b2"), ParamKind::Bias, &self.b2);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut T)) {
        f(&join(prefix, "w1"), ParamKind::Weight, &mut self.w1);
        f(&join(prefix, "b1"), ParamKind::Bias, &mut self.b1);
        f(&join(prefix, "w2"), ParamKind::Weight, &mut self.w2);
        f(&join(prefix, "b2"), ParamKind::Bias, &mut self.b2);
    }

    fn map<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &T) -> U) -> ChannelAttentionParams<U> {
        ChannelAttentionParams {
            w1: f(&join(prefix, "w1"), ParamKind::Weight, &self.w1),
            b1: f(&join(prefix, "b1"), ParamKind::Bias, &self.b1),
            w2: f(&join(prefix, "w2"), ParamKind::Weight, &self.w2),
            b2: f(&join(prefix, "b2"), ParamKind::Bias, &self.b2),
            reduction: self.reduction,
        }
    }
}

/// Reduction ratio: 16 for wide maps, otherwise the largest divisor of
/// `channels` not exceeding `channels / 2` (1 for a single channel).
pub fn default_reduction(channels: usize) -> usize {
    if channels >= 32 && channels.is_multiple_of(16) {
        return 16;
    }
    let cap = if channels >= 32 { 16 } else { (channels / 2).max(1) };
    (1..=cap).rev().find(|&r| channels.is_multiple_of(r)).unwrap_or(1)
}

pub fn validate_reduction(channels: usize, reduction: usize) -> Result<()> {
    if reduction == 0 || !channels.is_multiple_of(reduction) {
        return Err(Error::config(format!(
            "reduction ratio {reduction} must be >= 1 and divide {channels} channels"
        )));
    }
    Ok(())
}

/// Sigmoid gate `S_c` of shape `[B, C]`.
pub fn channel_gate(g: &mut Graph, x: Var, p: &ChannelAttentionParams<Var>) -> Result<Var> {
    let [_, _, _, c] = g.value(x).dims4("channel_attention")?;
    let w1c = g.value(p.w1).shape().get(1).copied();
    if w1c != Some(c) || g.value(p.b2).shape() != [c] {
        return Err(Error::dim(
            "channel_attention",
            format!(
                "input has {c} channels, MLP expects w1 {:?} / b2 {:?}",
                g.value(p.w1).shape(),
                g.value(p.b2).shape()
            ),
        ));
    }
    let avg = nn::global_avg_pool(g, x)?;
    let max = nn::global_max_pool(g, x)?;
    let branch = |g: &mut Graph, v: Var| -> Result<Var> {
        let h = nn::dense(g, v, p.w1, p.b1)?;
        let h = nn::relu(g, h);
        nn::dense(g, h, p.w2, p.b2)
    };
    let a = branch(g, avg)?;
    let m = branch(g, max)?;
    let logits = g.add(a, m)?;
    Ok(nn::sigmoid(g, logits))
}

/// `X' = X ⊙ S_c`, broadcast over positions.
pub fn channel_attention(g: &mut Graph, x: Var, p: &ChannelAttentionParams<Var>) -> Result<Var> {
    let s = channel_gate(g, x, p)?;
    nn::scale_channels(g, x, s)
}
