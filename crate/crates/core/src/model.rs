//! The full network: three attention-augmented conv blocks, one channel
//! attention stage, a skip-connected upsampling chain and a 3×3 output
//! head, applied per band group.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{self, AugConvBlockParams, BlockOptions, MhsaParams};
use crate::band_grouping::plan_groups;
use crate::channel_attention::{self, default_reduction, validate_reduction, ChannelAttentionParams};
use crate::config::KeyValues;
use crate::data::HyperCube;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{self, BatchStats, Conv2DParams, NormState, Padding};
use crate::params::{join, register, ParamKind, ParamTree};
use crate::tensor::Tensor;
use crate::upsampler::{self, stages_for_scale, UpsampleStageParams, TCONV_KERNEL, TCONV_STRIDE};

pub const BLOCK_KERNEL: usize = 3;

/// Source of the skip map concatenated after each upsampling stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SkipSource {
    /// The network input resized by nearest neighbour to the stage resolution.
    NearestInput,
    None,
}

impl SkipSource {
    fn as_str(self) -> &'static str {
        match self {
            SkipSource::NearestInput => "nearest_input",
            SkipSource::None => "none",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "nearest_input" => Ok(SkipSource::NearestInput),
            "none" => Ok(SkipSource::None),
            _ => Err(Error::config(format!("unknown skip source {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DacnConfig {
    pub group_size: usize,
    pub group_stride: usize,
    pub filters: [usize; 3],
    pub heads: usize,
    pub reduction: usize,
    pub leaky_slope: f64,
    pub scale: usize,
    pub token_cap: usize,
    pub seed: u64,
    pub use_mhsa: bool,
    pub use_channel_attention: bool,
    pub skip: SkipSource,
}

impl Default for DacnConfig {
    fn default() -> Self {
        Self::with_filters(32, 16, [64, 64, 64], 4)
    }
}

impl DacnConfig {
    pub fn with_filters(group_size: usize, group_stride: usize, filters: [usize; 3], scale: usize) -> Self {
        Self {
            group_size,
            group_stride,
            filters,
            heads: attention::DEFAULT_HEADS,
            reduction: default_reduction(filters[2]),
            leaky_slope: nn::DEFAULT_LEAKY_SLOPE,
            scale,
            token_cap: attention::DEFAULT_TOKEN_CAP,
            seed: 0,
            use_mhsa: true,
            use_channel_attention: true,
            skip: SkipSource::NearestInput,
        }
    }

    /// Small network used in tests: G=4, filters [8, 8, 8], ×2.
    pub fn micro() -> Self {
        Self::with_filters(4, 2, [8, 8, 8], 2)
    }

    pub fn validate(&self) -> Result<()> {
        stages_for_scale(self.scale)?;
        if self.group_size == 0 || self.group_stride == 0 || self.group_stride > self.group_size {
            return Err(Error::config(format!(
                "group stride {} must be in 1..={}",
                self.group_stride, self.group_size
            )));
        }
        if self.heads == 0 {
            return Err(Error::config("heads must be >= 1"));
        }
        for &f in &self.filters {
            if f < self.heads || f % self.heads != 0 {
                return Err(Error::config(format!(
                    "block width {f} must be a positive multiple of {} heads",
                    self.heads
                )));
            }
        }
        validate_reduction(self.filters[2], self.reduction)?;
        if !self.leaky_slope.is_finite() || self.leaky_slope < 0.0 {
            return Err(Error::config(format!("leaky slope {} must be finite and >= 0", self.leaky_slope)));
        }
        if self.token_cap == 0 {
            return Err(Error::config("attention token cap must be >= 1"));
        }
        Ok(())
    }

    pub fn skip_channels(&self) -> usize {
        match self.skip {
            SkipSource::NearestInput => self.group_size,
            SkipSource::None => 0,
        }
    }

    pub const KEYS: &'static [&'static str] = &[
        "group_size",
        "group_stride",
        "filters",
        "heads",
        "reduction",
        "leaky_slope",
        "scale",
        "attention_token_cap",
        "seed",
        "use_mhsa",
        "use_channel_attention",
        "skip_source",
    ];

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        kv.set("group_size", self.group_size);
        kv.set("group_stride", self.group_stride);
        kv.set(
            "filters",
            self.filters.iter().map(|f| f.to_string()).collect::<Vec<_>>().join(","),
        );
        kv.set("heads", self.heads);
        kv.set("reduction", self.reduction);
        kv.set("leaky_slope", self.leaky_slope);
        kv.set("scale", self.scale);
        kv.set("attention_token_cap", self.token_cap);
        kv.set("seed", self.seed);
        kv.set("use_mhsa", self.use_mhsa);
        kv.set("use_channel_attention", self.use_channel_attention);
        kv.set("skip_source", self.skip.as_str());
        kv
    }

    /// Reads model keys from `kv`, falling back to defaults. Unknown keys are
    /// left for other consumers.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let d = DacnConfig::default();
        let filters = match kv.get_list::<usize>("filters")? {
            None => d.filters,
            Some(v) => v
                .try_into()
                .map_err(|v: Vec<usize>| Error::config(format!("filters needs 3 values, got {}", v.len())))?,
        };
        let group_size = kv.get_or("group_size", d.group_size)?;
        let cfg = DacnConfig {
            group_size,
            group_stride: kv.get_or("group_stride", (group_size / 2).max(1))?,
            filters,
            heads: kv.get_or("heads", d.heads)?,
            reduction: kv.get_or("reduction", default_reduction(filters[2]))?,
            leaky_slope: kv.get_or("leaky_slope", d.leaky_slope)?,
            scale: kv.get_or("scale", d.scale)?,
            token_cap: kv.get_or("attention_token_cap", d.token_cap)?,
            seed: kv.get_or("seed", d.seed)?,
            use_mhsa: kv.get_or("use_mhsa", true)?,
            use_channel_attention: kv.get_or("use_channel_attention", true)?,
            skip: kv.raw("skip_source").map_or(Ok(d.skip), SkipSource::parse)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DacnParams<T> {
    pub blocks: Vec<AugConvBlockParams<T>>,
    pub ca: ChannelAttentionParams<T>,
    pub up: Vec<UpsampleStageParams<T>>,
    pub head: Conv2DParams<T>,
}

impl<T> ParamTree<T> for DacnParams<T> {
    type Mapped<U> = DacnParams<U>;

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &'a T)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("block{i}")), f);
        }
        self.ca.visit(&join(prefix, "ca"), f);
        for (i, u) in self.up.iter().enumerate() {
            u.visit(&join(prefix, &format!("up{i}")), f);
        }
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut T)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("block{i}")), f);
        }
        self.ca.visit_mut(&join(prefix, "ca"), f);
        for (i, u) in self.up.iter_mut().enumerate() {
            u.visit_mut(&join(prefix, &format!("up{i}")), f);
        }
        self.head.visit_mut(&join(prefix, "head"), f);
    }

    fn map<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &T) -> U) -> DacnParams<U> {
        DacnParams {
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| b.map(&join(prefix, &format!("block{i}")), f))
                .collect(),
            ca: self.ca.map(&join(prefix, "ca"), f),
            up: self
                .up
                .iter()
                .enumerate()
                .map(|(i, u)| u.map(&join(prefix, &format!("up{i}")), f))
                .collect(),
            head: self.head.map(&join(prefix, "head"), f),
        }
    }
}

impl<T> DacnParams<T> {
    /// Batch-norm layers in forward order (blocks, then upsampling stages).
    pub fn norm_states(&self) -> Vec<(String, &NormState<T>)> {
        let mut out: Vec<(String, &NormState<T>)> = self
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| (format!("block{i}.bn"), &b.bn))
            .collect();
        out.extend(self.up.iter().enumerate().map(|(i, u)| (format!("up{i}.bn"), &u.bn)));
        out
    }

    pub fn norm_states_mut(&mut self) -> Vec<(String, &mut NormState<T>)> {
        let mut out: Vec<(String, &mut NormState<T>)> = self
            .blocks
            .iter_mut()
            .enumerate()
            .map(|(i, b)| (format!("block{i}.bn"), &mut b.bn))
            .collect();
        out.extend(self.up.iter_mut().enumerate().map(|(i, u)| (format!("up{i}.bn"), &mut u.bn)));
        out
    }
}

impl DacnParams<Tensor> {
    /// Folds training-mode batch statistics (in forward order) into the
    /// running averages.
    pub fn apply_batch_stats(&mut self, stats: &[BatchStats]) -> Result<()> {
        let mut states = self.norm_states_mut();
        if states.len() != stats.len() {
            return Err(Error::contract(
                "apply_batch_stats",
                format!("{} batch-norm layers but {} stat records", states.len(), stats.len()),
            ));
        }
        for ((_, s), st) in states.iter_mut().zip(stats) {
            s.update_running(st);
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.visit_mut("", &mut |_, _, t| t.grad = None);
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let limit = (3.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.gen_range(-limit..limit))
}

/// Deterministic fan-in-scaled uniform initialization (variance `1/fan_in`),
/// zero biases, unit/zero normalization affine parameters.
pub fn init_params(cfg: &DacnConfig, seed: u64) -> Result<DacnParams<Tensor>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = BLOCK_KERNEL;
    let mut blocks = Vec::with_capacity(3);
    let mut cin = cfg.group_size;
    for &f in &cfg.filters {
        let dh = f / cfg.heads;
        let conv = Conv2DParams::new(uniform(&mut rng, &[k, k, cin, f], k * k * cin), Tensor::zeros(&[f]), 1, Padding::Same)?;
        let mhsa = MhsaParams {
            w_q: uniform(&mut rng, &[f, cfg.heads * dh], f),
            w_k: uniform(&mut rng, &[f, cfg.heads * dh], f),
            w_v: uniform(&mut rng, &[f, cfg.heads * dh], f),
            w_o: uniform(&mut rng, &[cfg.heads * dh, f], cfg.heads * dh),
            heads: cfg.heads,
            d_k: dh,
            d_v: dh,
        };
        blocks.push(AugConvBlockParams {
            conv,
            bn: NormState::new(f),
            mhsa,
            ln_gamma: Tensor::ones(&[f]),
            ln_beta: Tensor::zeros(&[f]),
        });
        cin = f;
    }
    let c = cfg.filters[2];
    let hidden = c / cfg.reduction;
    let ca = ChannelAttentionParams {
        w1: uniform(&mut rng, &[hidden, c], c),
        b1: Tensor::zeros(&[hidden]),
        w2: uniform(&mut rng, &[c, hidden], hidden),
        b2: Tensor::zeros(&[c]),
        reduction: cfg.reduction,
    };
    let skip = cfg.skip_channels();
    let n = stages_for_scale(cfg.scale)?;
    let mut up = Vec::with_capacity(n);
    let mut stage_in = c;
    for _ in 0..n {
        let kt = TCONV_KERNEL;
        let tconv = Conv2DParams::new(
            uniform(&mut rng, &[kt, kt, c, stage_in], kt * kt * stage_in / (TCONV_STRIDE * TCONV_STRIDE)),
            Tensor::zeros(&[c]),
            TCONV_STRIDE,
            Padding::Same,
        )?;
        up.push(UpsampleStageParams {
            tconv,
            bn: NormState::new(c),
            skip_channels: skip,
        });
        stage_in = c + skip;
    }
    let head = Conv2DParams::new(
        uniform(&mut rng, &[k, k, stage_in, cfg.group_size], k * k * stage_in),
        Tensor::zeros(&[cfg.group_size]),
        1,
        Padding::Same,
    )?;
    Ok(DacnParams { blocks, ca, up, head })
}

pub struct ForwardOutput {
    pub output: Var,
    /// Batch-norm statistics in forward order; empty in inference mode.
    pub bn_stats: Vec<BatchStats>,
}

/// `[B, H, W, G] -> [B, βH, βW, G]`.
pub fn forward(g: &mut Graph, y: Var, params: &DacnParams<Var>, cfg: &DacnConfig, training: bool) -> Result<ForwardOutput> {
    let [_, h, w, c] = g.value(y).dims4("dacn_forward")?;
    if c != cfg.group_size {
        return Err(Error::dim(
            "dacn_forward",
            format!("input has {c} bands, model group size is {}", cfg.group_size),
        ));
    }
    if h * w > cfg.token_cap {
        return Err(Error::config(format!(
            "{h}x{w} input gives {} attention tokens, above the cap of {}",
            h * w,
            cfg.token_cap
        )));
    }
    let opts = BlockOptions {
        leaky_slope: cfg.leaky_slope,
        use_mhsa: cfg.use_mhsa,
        token_cap: cfg.token_cap,
        training,
    };
    let mut bn_stats = Vec::new();
    let mut x = y;
    for block in &params.blocks {
        let (out, stats) = attention::aug_conv_block(g, x, block, opts)?;
        bn_stats.extend(stats);
        x = out;
    }
    if cfg.use_channel_attention {
        x = channel_attention::channel_attention(g, x, &params.ca)?;
    }
    let n = stages_for_scale(cfg.scale)?;
    let skips = (0..n)
        .map(|i| match cfg.skip {
            SkipSource::NearestInput => nn::nearest_upsample(g, y, 1 << (i + 1)).map(Some),
            SkipSource::None => Ok(None),
        })
        .collect::<Result<Vec<_>>>()?;
    let (up, stats) = upsampler::upsample_chain(g, x, &skips, &params.up, cfg.scale, cfg.leaky_slope, training)?;
    bn_stats.extend(stats);
    let output = nn::conv2d(g, up, &params.head)?;
    Ok(ForwardOutput { output, bn_stats })
}

/// Inference-mode forward pass on a `[B, H, W, G]` tensor.
pub fn predict(params: &DacnParams<Tensor>, cfg: &DacnConfig, lr: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let vars = params.map("", &mut |_, _, t| g.input(t.clone()));
    let x = g.input(lr.clone());
    let out = forward(&mut g, x, &vars, cfg, false)?;
    Ok(g.value(out.output).clone())
}

/// Band-grouped super-resolution of a whole cube; output clamped to `[0, 1]`.
pub fn super_resolve(cube: &HyperCube, params: &DacnParams<Tensor>, cfg: &DacnConfig) -> Result<HyperCube> {
    cfg.validate()?;
    if cube.bands < cfg.group_size {
        return Err(Error::config(format!(
            "cube has {} bands, fewer than the group size {}",
            cube.bands, cfg.group_size
        )));
    }
    let plan = plan_groups(cube.bands, cfg.group_size, cfg.group_stride)?;
    let full = cube.to_tensor();
    let mut preds = Vec::with_capacity(plan.len());
    for group in plan.split(&full)? {
        let [h, w, c] = [group.shape()[0], group.shape()[1], group.shape()[2]];
        let lr = group.reshape(&[1, h, w, c])?;
        let hr = predict(params, cfg, &lr)?;
        let s = hr.shape().to_vec();
        preds.push(hr.reshape(&s[1..])?);
    }
    let mut merged = plan.merge(&preds)?;
    merged.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    let mut out = HyperCube::from_tensor(&merged)?;
    out.value_range = (0.0, 1.0);
    Ok(out)
}

/// Registers params, runs a training-mode forward and returns the graph
/// pieces needed for a loss. Convenience for trainer and gradient checks.
pub fn forward_registered(
    g: &mut Graph,
    params: &DacnParams<Tensor>,
    cfg: &DacnConfig,
    input: &Tensor,
    training: bool,
) -> Result<(DacnParams<Var>, ForwardOutput)> {
    let vars = register(g, params);
    let x = g.input(input.clone());
    let out = forward(g, x, &vars, cfg, training)?;
    Ok((vars, out))
}
