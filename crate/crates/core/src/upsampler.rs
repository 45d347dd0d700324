//! Upsampling head: stride-2 transposed convolution, batch norm, LeakyReLU,
//! then channel concatenation with a skip map at the new resolution.
//! Stages are chained to reach ×2, ×4 or ×8.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{self, BatchStats, Conv2DParams, NormState};
use crate::params::{join, ParamKind, ParamTree};

pub const TCONV_KERNEL: usize = 4;
pub const TCONV_STRIDE: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct UpsampleStageParams<T> {
    /// Transposed-conv kernel, read as `[4, 4, Cout, Cin]`, stride 2.
    pub tconv: Conv2DParams<T>,
    pub bn: NormState<T>,
    pub skip_channels: usize,
}

impl<T> ParamTree<T> for UpsampleStageParams<T> {
    type Mapped<U> = UpsampleStageParams<U>;

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &'a T)) {
        self.tconv.visit(&join(prefix, "tconv"), f);
        self.bn.visit(&join(prefix, "bn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut T)) {
        self.tconv.visit_mut(&join(prefix, "tconv"), f);
        self.bn.visit_mut(&join(prefix, "bn"), f);
    }

    fn map<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &T) -> U) -> UpsampleStageParams<U> {
        UpsampleStageParams {
            tconv: self.tconv.map(&join(prefix, "tconv"), f),
            bn: self.bn.map(&join(prefix, "bn"), f),
            skip_channels: self.skip_channels,
        }
    }
}

/// Number of ×2 stages for an upscaling factor in {2, 4, 8}.
pub fn stages_for_scale(scale: usize) -> Result<usize> {
    match scale {
        2 => Ok(1),
        4 => Ok(2),
        8 => Ok(3),
        _ => Err(Error::config(format!("scale factor must be 2, 4 or 8, got {scale}"))),
    }
}

/// One ×2 stage. `f_skip` must be `None` iff the stage has zero skip channels.
pub fn upsample_stage(
    g: &mut Graph,
    f_in: Var,
    f_skip: Option<Var>,
    p: &UpsampleStageParams<Var>,
    leaky_slope: f64,
    training: bool,
) -> Result<(Var, Option<BatchStats>)> {
    if p.tconv.stride != TCONV_STRIDE {
        return Err(Error::config(format!("upsample stage stride must be 2, got {}", p.tconv.stride)));
    }
    let [b, h, w, _] = g.value(f_in).dims4("upsample_stage")?;
    match f_skip {
        Some(s) => {
            let [sb, sh, sw, sc] = g.value(s).dims4("upsample_stage")?;
            if (sb, sh, sw) != (b, 2 * h, 2 * w) {
                return Err(Error::dim(
                    "upsample_stage",
                    format!("skip must be {b}x{}x{}, got {sb}x{sh}x{sw}", 2 * h, 2 * w),
                ));
            }
            if sc != p.skip_channels {
                return Err(Error::dim(
                    "upsample_stage",
                    format!("skip has {sc} channels, stage expects {}", p.skip_channels),
                ));
            }
        }
        None if p.skip_channels != 0 => {
            return Err(Error::dim(
                "upsample_stage",
                format!("stage expects a {}-channel skip, none given", p.skip_channels),
            ));
        }
        None => {}
    }
    let up = nn::conv_transpose2d(g, f_in, &p.tconv)?;
    let (bn, stats) = nn::batch_norm(g, up, &p.bn, training)?;
    let act = nn::leaky_relu(g, bn, leaky_slope);
    Ok((nn::concat_channels(g, act, f_skip)?, stats))
}

/// Applies `log2(scale)` stages; `skips[i]` feeds stage `i`.
pub fn upsample_chain(
    g: &mut Graph,
    f: Var,
    skips: &[Option<Var>],
    stages: &[UpsampleStageParams<Var>],
    scale: usize,
    leaky_slope: f64,
    training: bool,
) -> Result<(Var, Vec<BatchStats>)> {
    let n = stages_for_scale(scale)?;
    if stages.len() != n || skips.len() != n {
        return Err(Error::config(format!(
            "scale {scale} needs {n} stages and skips, got {} stages and {} skips",
            stages.len(),
            skips.len()
        )));
    }
    let mut cur = f;
    let mut all_stats = Vec::new();
    for (p, skip) in stages.iter().zip(skips) {
        let (next, stats) = upsample_stage(g, cur, *skip, p, leaky_slope, training)?;
        all_stats.extend(stats);
        cur = next;
    }
    Ok((cur, all_stats))
}
