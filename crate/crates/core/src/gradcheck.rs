//! Central finite-difference verification of every differentiable op and of
//! the full network.
//!
//! Each check builds a graph from a list of input tensors, reduces the output
//! to a scalar with fixed random weights (`Σ r ⊙ y`) and compares the
//! backward pass against `(f(x + h) − f(x − h)) / 2h` on sampled entries.

use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{self, BlockOptions};
use crate::channel_attention;
use crate::data::degrade_area_tensor;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::loss::{self, LossConfig};
use crate::model::{forward, init_params, DacnConfig, DacnParams};
use crate::nn::{self, Conv2DParams, NormState, Padding};
use crate::params::ParamTree;
use crate::tensor::Tensor;
use crate::upsampler;

/// Denominator floor for relative error, so entries whose true gradient is
/// numerically zero are judged by absolute error instead.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    /// Finite-difference step for single-op checks.
    pub step: f64,
    /// Smaller step for the full network, whose many LeakyReLU units make
    /// kink crossings likely at larger steps.
    pub model_step: f64,
    /// Maximum allowed relative error.
    pub tolerance: f64,
    /// Entries checked per op (all entries when fewer exist).
    pub samples_per_op: usize,
    /// Parameter entries checked in the full-model check.
    pub model_samples: usize,
    pub seed: u64,
    /// Scales analytic gradients by 1.01 so every check should fail.
    pub inject_fault: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-4,
            model_step: 1e-5,
            tolerance: 1e-4,
            samples_per_op: 48,
            model_samples: 64,
            seed: 0,
            inject_fault: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpReport {
    pub op: String,
    pub checked: usize,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub ops: Vec<OpReport>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.ops.iter().all(|r| r.passed)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("op,checked,max_abs_err,max_rel_err,status\n");
        for r in &self.ops {
            let status = if r.passed { "pass" } else { "fail" };
            let _ = writeln!(s, "{},{},{:e},{:e},{status}", r.op, r.checked, r.max_abs_err, r.max_rel_err);
        }
        s
    }
}

type Builder<'a> = dyn Fn(&mut Graph, &[Var]) -> Result<Var> + 'a;

fn scalarize(g: &mut Graph, y: Var, weights: &Tensor) -> Result<Var> {
    let w = g.input(weights.reshape(g.value(y).shape())?);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

/// Checks `build` at `inputs`. Only entries listed in `candidates` (pairs of
/// input index and flat offset) are eligible for sampling; `None` means all.
pub fn check_fn(
    name: &str,
    inputs: &[Tensor],
    build: &Builder<'_>,
    candidates: Option<&[usize]>,
    samples: usize,
    cfg: &GradCheckConfig,
) -> Result<OpReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ fxhash(name));
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let y = build(&mut g, &vars)?;
    let weights = Tensor::from_fn(&[g.value(y).len()], |_| rng.gen_range(-1.0..1.0));
    let loss = scalarize(&mut g, y, &weights)?;
    let grads = g.backward(loss)?;

    let offsets: Vec<usize> = inputs
        .iter()
        .scan(0, |acc, t| {
            let o = *acc;
            *acc += t.len();
            Some(o)
        })
        .collect();
    let total: usize = inputs.iter().map(Tensor::len).sum();
    let pool: Vec<usize> = candidates.map_or_else(|| (0..total).collect(), <[usize]>::to_vec);
    let picks: Vec<usize> = if pool.len() <= samples {
        pool
    } else {
        sample(&mut rng, pool.len(), samples).into_iter().map(|i| pool[i]).collect()
    };

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vs: Vec<Var> = xs.iter().map(|t| g.input(t.clone())).collect();
        let y = build(&mut g, &vs)?;
        let l = scalarize(&mut g, y, &weights)?;
        Ok(g.value(l).item())
    };

    let mut max_abs: f64 = 0.0;
    let mut max_rel: f64 = 0.0;
    let mut work = inputs.to_vec();
    for flat in &picks {
        let k = offsets.partition_point(|&o| o <= *flat) - 1;
        let j = flat - offsets[k];
        let x0 = work[k].data()[j];
        work[k].data_mut()[j] = x0 + cfg.step;
        let fp = eval(&work)?;
        work[k].data_mut()[j] = x0 - cfg.step;
        let fm = eval(&work)?;
        work[k].data_mut()[j] = x0;
        let numeric = (fp - fm) / (2.0 * cfg.step);
        let mut analytic = grads.get(vars[k]).map_or(0.0, |gr| gr[j]);
        if cfg.inject_fault {
            analytic = analytic * 1.01 + 1e-3;
        }
        let abs = (analytic - numeric).abs();
        let rel = abs / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
        max_abs = max_abs.max(abs);
        max_rel = max_rel.max(rel);
    }
    Ok(OpReport {
        op: name.to_string(),
        checked: picks.len(),
        max_abs_err: max_abs,
        max_rel_err: max_rel,
        passed: max_rel <= cfg.tolerance,
    })
}

/// Stable per-name seed mixing.
fn fxhash(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

fn flatten<P: ParamTree<Tensor>>(p: &P) -> Vec<Tensor> {
    let mut out = Vec::new();
    p.visit("", &mut |_, _, t| out.push(t.clone()));
    out
}

fn rebuild<P: ParamTree<Tensor>>(template: &P, vars: &[Var]) -> P::Mapped<Var> {
    let mut i = 0;
    template.map("", &mut |_, _, _| {
        i += 1;
        vars[i - 1]
    })
}

fn jitter<P: ParamTree<Tensor>>(p: &mut P, rng: &mut ChaCha8Rng, amount: f64) {
    p.visit_mut("", &mut |_, _, t| {
        t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-amount..amount));
    });
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Values bounded away from zero so piecewise-linear kinks are never crossed.
fn rand_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn norm_state(g_b: (Var, Var), channels: usize, rng: &mut ChaCha8Rng) -> NormState<Var> {
    NormState {
        gamma: g_b.0,
        beta: g_b.1,
        running_mean: Tensor::from_fn(&[channels], |_| rng.gen_range(-0.5..0.5)),
        running_var: Tensor::from_fn(&[channels], |_| rng.gen_range(0.5..1.5)),
        epsilon: nn::norm::BATCH_NORM_EPS,
        momentum: nn::norm::BATCH_NORM_MOMENTUM,
    }
}

/// Per-op checks on small random instances.
pub fn op_checks(slope: f64, cfg: &GradCheckConfig) -> Result<Vec<OpReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.samples_per_op;
    let mut out = Vec::new();
    let mut run = |name: &str, inputs: Vec<Tensor>, build: &Builder<'_>| -> Result<()> {
        out.push(check_fn(name, &inputs, build, None, n, cfg)?);
        Ok(())
    };

    let r = &mut rng;
    run("matmul", vec![rand_t(r, &[3, 4]), rand_t(r, &[4, 2])], &|g, v| g.matmul(v[0], v[1]))?;
    run("add", vec![rand_t(r, &[2, 3]), rand_t(r, &[2, 3])], &|g, v| g.add(v[0], v[1]))?;
    run("mul", vec![rand_t(r, &[2, 3]), rand_t(r, &[2, 3])], &|g, v| g.mul(v[0], v[1]))?;
    run("scale", vec![rand_t(r, &[5])], &|g, v| Ok(g.scale(v[0], -1.7)))?;
    run("sum", vec![rand_t(r, &[2, 3])], &|g, v| Ok(g.sum(v[0])))?;
    run("sum_squares", vec![rand_t(r, &[2, 3])], &|g, v| Ok(g.sum_squares(v[0])))?;
    run("add_scalars", vec![rand_t(r, &[1]), rand_t(r, &[1]), rand_t(r, &[1])], &|g, v| g.add_scalars(v))?;
    run("reshape", vec![rand_t(r, &[2, 6])], &|g, v| g.reshape(v[0], &[3, 4]))?;
    run("softmax_rows", vec![rand_t(r, &[3, 5])], &|g, v| g.softmax_rows(v[0]))?;

    for (label, stride, padding, hw, k) in [
        ("conv2d_same_s1", 1, Padding::Same, 5, 3),
        ("conv2d_same_s2", 2, Padding::Same, 5, 3),
        ("conv2d_valid_s1", 1, Padding::Valid, 5, 3),
        ("conv2d_same_s2_k4", 2, Padding::Same, 6, 4),
    ] {
        let inputs = vec![rand_t(r, &[2, hw, hw, 2]), rand_t(r, &[k, k, 2, 3]), rand_t(r, &[3])];
        run(label, inputs, &|g, v| {
            let p = Conv2DParams {
                kernel: v[1],
                bias: v[2],
                stride,
                padding,
            };
            nn::conv2d(g, v[0], &p)
        })?;
    }
    for (label, stride, padding, k) in [
        ("conv_transpose2d_same_s2", 2, Padding::Same, 4),
        ("conv_transpose2d_valid_s2", 2, Padding::Valid, 3),
        ("conv_transpose2d_same_s1", 1, Padding::Same, 3),
    ] {
        let inputs = vec![rand_t(r, &[2, 3, 3, 2]), rand_t(r, &[k, k, 3, 2]), rand_t(r, &[3])];
        run(label, inputs, &|g, v| {
            let p = Conv2DParams {
                kernel: v[1],
                bias: v[2],
                stride,
                padding,
            };
            nn::conv_transpose2d(g, v[0], &p)
        })?;
    }

    for training in [true, false] {
        let inputs = vec![rand_t(r, &[2, 3, 3, 3]), rand_t(r, &[3]), rand_t(r, &[3])];
        let running = norm_state((Var(0), Var(0)), 3, r);
        let label = if training { "batch_norm_train" } else { "batch_norm_infer" };
        run(label, inputs, &|g, v| {
            let s = NormState {
                gamma: v[1],
                beta: v[2],
                running_mean: running.running_mean.clone(),
                running_var: running.running_var.clone(),
                epsilon: running.epsilon,
                momentum: running.momentum,
            };
            Ok(nn::batch_norm(g, v[0], &s, training)?.0)
        })?;
    }
    run("layer_norm", vec![rand_t(r, &[2, 3, 4]), rand_t(r, &[4]), rand_t(r, &[4])], &|g, v| {
        nn::layer_norm(g, v[0], v[1], v[2], nn::norm::LAYER_NORM_EPS)
    })?;

    run("leaky_relu", vec![rand_away_from_zero(r, &[2, 5])], &|g, v| Ok(nn::leaky_relu(g, v[0], slope)))?;
    run("relu", vec![rand_away_from_zero(r, &[2, 5])], &|g, v| Ok(nn::relu(g, v[0])))?;
    run("sigmoid", vec![rand_t(r, &[10])], &|g, v| Ok(nn::sigmoid(g, v[0])))?;
    run("global_avg_pool", vec![rand_t(r, &[2, 3, 3, 2])], &|g, v| nn::global_avg_pool(g, v[0]))?;
    // Distinct values spaced well beyond the step, so the argmax is stable.
    let spaced = {
        let mut vals: Vec<f64> = (0..36).map(|i| i as f64 * 0.05).collect();
        rand::seq::SliceRandom::shuffle(vals.as_mut_slice(), r);
        Tensor::new(vec![2, 3, 3, 2], vals)?
    };
    run("global_max_pool", vec![spaced], &|g, v| nn::global_max_pool(g, v[0]))?;
    run("dense", vec![rand_t(r, &[3, 4]), rand_t(r, &[2, 4]), rand_t(r, &[2])], &|g, v| {
        nn::dense(g, v[0], v[1], v[2])
    })?;
    run("concat_channels", vec![rand_t(r, &[1, 2, 2, 2]), rand_t(r, &[1, 2, 2, 3])], &|g, v| {
        nn::concat_channels(g, v[0], Some(v[1]))
    })?;
    run("scale_channels", vec![rand_t(r, &[2, 2, 2, 3]), rand_t(r, &[2, 3])], &|g, v| {
        nn::scale_channels(g, v[0], v[1])
    })?;
    run("nearest_upsample", vec![rand_t(r, &[1, 2, 2, 2])], &|g, v| nn::nearest_upsample(g, v[0], 2))?;

    // Composite layers use templates from the micro network.
    let micro = DacnConfig {
        leaky_slope: slope,
        ..DacnConfig::micro()
    };
    let mut template = init_params(&micro, cfg.seed)?;
    jitter(&mut template, r, 0.2);
    let mhsa = template.blocks[1].mhsa.clone();
    let d = mhsa.d_model();
    let mut inputs = vec![rand_t(r, &[2, 5, d])];
    inputs.extend(flatten(&mhsa));
    run("mhsa", inputs, &|g, v| attention::mhsa(g, v[0], &rebuild(&mhsa, &v[1..])))?;

    for use_mhsa in [true, false] {
        let block = template.blocks[0].clone();
        let mut inputs = vec![rand_t(r, &[2, 3, 3, micro.group_size])];
        inputs.extend(flatten(&block));
        let opts = BlockOptions {
            leaky_slope: slope,
            use_mhsa,
            token_cap: micro.token_cap,
            training: true,
        };
        let label = if use_mhsa { "aug_conv_block" } else { "aug_conv_block_no_mhsa" };
        run(label, inputs, &|g, v| {
            Ok(attention::aug_conv_block(g, v[0], &rebuild(&block, &v[1..]), opts)?.0)
        })?;
    }

    let ca = template.ca.clone();
    let mut inputs = vec![rand_t(r, &[2, 3, 3, micro.filters[2]])];
    inputs.extend(flatten(&ca));
    run("channel_attention", inputs, &|g, v| {
        channel_attention::channel_attention(g, v[0], &rebuild(&ca, &v[1..]))
    })?;

    let stage = template.up[0].clone();
    let mut inputs = vec![
        rand_t(r, &[2, 2, 2, micro.filters[2]]),
        rand_t(r, &[2, 4, 4, stage.skip_channels]),
    ];
    inputs.extend(flatten(&stage));
    run("upsample_stage", inputs, &|g, v| {
        Ok(upsampler::upsample_stage(g, v[0], Some(v[1]), &rebuild(&stage, &v[2..]), slope, true)?.0)
    })?;

    run("mse", vec![rand_t(r, &[1, 3, 3, 2]), rand_t(r, &[1, 3, 3, 2])], &|g, v| loss::mse(g, v[0], v[1]))?;
    run("spatial_spectral_grad_loss", vec![rand_t(r, &[2, 3, 4, 3]), rand_t(r, &[2, 3, 4, 3])], &|g, v| {
        loss::spatial_spectral_grad_loss(g, v[0], v[1])
    })?;
    let probe = crate::params::NamedList(vec![("w".to_string(), rand_t(r, &[2, 2]))]);
    run(
        "total_loss",
        {
            let mut v = vec![rand_t(r, &[1, 3, 3, 2]), rand_t(r, &[1, 3, 3, 2])];
            v.extend(flatten(&probe));
            v
        },
        &|g, v| {
            let cfg = LossConfig {
                alpha: 0.3,
                ..Default::default()
            };
            Ok(loss::total_loss(g, v[0], v[1], &rebuild(&probe, &v[2..]), &cfg)?.0)
        },
    )?;
    Ok(out)
}

/// Full-network check: gradient of the training objective wrt a random
/// sample of parameter entries, BN in training mode.
pub fn model_check(model: &DacnConfig, lr_size: usize, cfg: &GradCheckConfig) -> Result<OpReport> {
    model.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(17));
    let mut params: DacnParams<Tensor> = init_params(model, cfg.seed)?;
    jitter(&mut params, &mut rng, 0.1);
    let hr_size = lr_size * model.scale;
    let hr = Tensor::from_fn(&[2, hr_size, hr_size, model.group_size], |_| rng.gen_range(0.0..1.0));
    let lr = degrade_area_tensor(&hr, model.scale)?;
    let flat = flatten(&params);
    let n_params: usize = flat.iter().map(Tensor::len).sum();
    if n_params == 0 {
        return Err(Error::contract("model_check", "network has no parameters"));
    }
    let mut inputs = vec![lr, hr];
    let skip = inputs[0].len() + inputs[1].len();
    inputs.extend(flat);
    let candidates: Vec<usize> = (skip..skip + n_params).collect();
    let loss_cfg = LossConfig::default();
    let build = |g: &mut Graph, v: &[Var]| -> Result<Var> {
        let vars = rebuild(&params, &v[2..]);
        let out = forward(g, v[0], &vars, model, true)?;
        Ok(loss::total_loss(g, v[1], out.output, &vars, &loss_cfg)?.0)
    };
    let fd = GradCheckConfig {
        step: cfg.model_step,
        ..*cfg
    };
    check_fn("dacn_model", &inputs, &build, Some(&candidates), cfg.model_samples, &fd)
}

pub fn run_suite(model: &DacnConfig, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut ops = op_checks(model.leaky_slope, cfg)?;
    ops.push(model_check(model, 8, cfg)?);
    Ok(GradCheckReport {
        tolerance: cfg.tolerance,
        ops,
    })
}
