mod common;

use common::*;
use dacn_core::data::HyperCube;
use dacn_core::model::{self, DacnConfig, DacnParams, SkipSource};
use dacn_core::nn::{NormState, Padding};
use dacn_core::params::{named_tensors, num_parameters, register, ParamTree};
use dacn_core::upsampler::{self, UpsampleStageParams};
use dacn_core::{Graph, Tensor};
use proptest::prelude::*;
use rand::Rng;

/// Moves every parameter and running statistic off its initial value so the
/// oracle comparison exercises biases and normalization shifts too.
fn perturbed(cfg: &DacnConfig, seed: u64) -> DacnParams<Tensor> {
    let mut p = model::init_params(cfg, seed).unwrap();
    let mut r = rng(seed + 1000);
    p.visit_mut("", &mut |_, _, t: &mut Tensor| {
        t.data_mut().iter_mut().for_each(|v| *v += r.gen_range(-0.1..0.1));
    });
    for (_, s) in p.norm_states_mut() {
        s.running_mean.data_mut().iter_mut().for_each(|v| *v = r.gen_range(-0.2..0.2));
        s.running_var.data_mut().iter_mut().for_each(|v| *v = r.gen_range(0.5..1.5));
    }
    p
}

fn bn_infer(x: &Tensor, s: &NormState<Tensor>) -> Tensor {
    batch_norm_infer(x, s.gamma.data(), s.beta.data(), s.running_mean.data(), s.running_var.data(), s.epsilon)
}

fn nearest(x: &Tensor, f: usize) -> Tensor {
    let [b, h, w, c] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    Tensor::from_fn(&[b, h * f, w * f, c], |i| {
        let ch = i % c;
        let xx = (i / c) % (w * f);
        let yy = (i / c / (w * f)) % (h * f);
        let bi = i / c / (w * f) / (h * f);
        x.data()[((bi * h + yy / f) * w + xx / f) * c + ch]
    })
}

fn concat(a: &Tensor, b: Option<&Tensor>) -> Tensor {
    let Some(b) = b else { return a.clone() };
    let (ca, cb) = (a.shape()[3], b.shape()[3]);
    let n = a.len() / ca;
    let mut out = Vec::with_capacity(n * (ca + cb));
    for i in 0..n {
        out.extend_from_slice(&a.data()[i * ca..(i + 1) * ca]);
        out.extend_from_slice(&b.data()[i * cb..(i + 1) * cb]);
    }
    let mut shape = a.shape().to_vec();
    shape[3] = ca + cb;
    Tensor::new(shape, out).unwrap()
}

fn stage_oracle(x: &Tensor, skip: Option<&Tensor>, p: &UpsampleStageParams<Tensor>, slope: f64) -> Tensor {
    let up = conv_transpose2d(x, &p.tconv.kernel, p.tconv.bias.data(), 2, Padding::Same);
    let bn = bn_infer(&up, &p.bn);
    let act = Tensor::from_fn(bn.shape(), |i| leaky(bn.data()[i], slope));
    concat(&act, skip)
}

/// Inference-mode forward assembled from the scalar oracles.
fn model_oracle(p: &DacnParams<Tensor>, cfg: &DacnConfig, y: &Tensor) -> Tensor {
    let mut x = y.clone();
    for blk in &p.blocks {
        let z = conv2d(&x, &blk.conv.kernel, blk.conv.bias.data(), 1, Padding::Same);
        let zn = bn_infer(&z, &blk.bn);
        let act: Vec<f64> = zn.data().iter().map(|&v| leaky(v, cfg.leaky_slope)).collect();
        let [b, h, w, c] = [zn.shape()[0], zn.shape()[1], zn.shape()[2], zn.shape()[3]];
        let mut res = act.clone();
        if cfg.use_mhsa {
            let t = h * w;
            for bi in 0..b {
                let seq = &act[bi * t * c..(bi + 1) * t * c];
                let m = &blk.mhsa;
                let a = mhsa(seq, t, c, &m.w_q, &m.w_k, &m.w_v, &m.w_o, m.heads);
                res[bi * t * c..(bi + 1) * t * c].iter_mut().zip(a).for_each(|(o, v)| *o += v);
            }
        }
        x = layer_norm(&Tensor::new(zn.shape().to_vec(), res).unwrap(), blk.ln_gamma.data(), blk.ln_beta.data(), 1e-5);
    }
    if cfg.use_channel_attention {
        let s = channel_gate(&x, &p.ca.w1, p.ca.b1.data(), &p.ca.w2, p.ca.b2.data());
        let c = x.shape()[3];
        let per = x.len() / x.shape()[0];
        x = Tensor::from_fn(x.shape(), |i| x.data()[i] * s[(i / per) * c + i % c]);
    }
    for (i, stage) in p.up.iter().enumerate() {
        let skip = (cfg.skip == SkipSource::NearestInput).then(|| nearest(y, 1 << (i + 1)));
        x = stage_oracle(&x, skip.as_ref(), stage, cfg.leaky_slope);
    }
    conv2d(&x, &p.head.kernel, p.head.bias.data(), 1, Padding::Same)
}

#[test]
fn forward_matches_composition_oracle() {
    let variants = [
        DacnConfig::micro(),
        DacnConfig {
            use_mhsa: false,
            ..DacnConfig::micro()
        },
        DacnConfig {
            use_channel_attention: false,
            skip: SkipSource::None,
            ..DacnConfig::micro()
        },
        DacnConfig {
            scale: 4,
            ..DacnConfig::micro()
        },
    ];
    for (k, cfg) in variants.iter().enumerate() {
        let p = perturbed(cfg, 5 + k as u64);
        let mut r = rng(50 + k as u64);
        let y = Tensor::from_fn(&[1, 8, 8, 4], |_| r.gen_range(0.0..1.0));
        let got = model::predict(&p, cfg, &y).unwrap();
        let want = model_oracle(&p, cfg, &y);
        assert_eq!(got.shape(), want.shape());
        assert!(max_abs_diff(got.data(), want.data()) < 1e-9, "variant {k}: {}", max_abs_diff(got.data(), want.data()));
    }
}

#[test]
fn shape_contracts() {
    let cfg = DacnConfig::with_filters(8, 4, [8, 8, 8], 2);
    let p = model::init_params(&cfg, 1).unwrap();
    let y = model::predict(&p, &cfg, &Tensor::full(&[1, 16, 16, 8], 0.5)).unwrap();
    assert_eq!(y.shape(), &[1, 32, 32, 8]);

    let cfg8 = DacnConfig::with_filters(8, 4, [8, 8, 8], 8);
    let p8 = model::init_params(&cfg8, 1).unwrap();
    let y8 = model::predict(&p8, &cfg8, &Tensor::full(&[1, 18, 18, 8], 0.5)).unwrap();
    assert_eq!(y8.shape(), &[1, 144, 144, 8]);
    assert!(y8.is_finite());
}

#[test]
fn ablations_keep_shapes() {
    let mut r = rng(2);
    let y = Tensor::from_fn(&[2, 6, 6, 4], |_| r.gen_range(0.0..1.0));
    for (mhsa, ca) in [(true, true), (false, true), (true, false), (false, false)] {
        let cfg = DacnConfig {
            use_mhsa: mhsa,
            use_channel_attention: ca,
            ..DacnConfig::micro()
        };
        let p = model::init_params(&cfg, 0).unwrap();
        let mut g = Graph::new();
        let (_, out) = model::forward_registered(&mut g, &p, &cfg, &y, true).unwrap();
        assert_eq!(g.value(out.output).shape(), &[2, 12, 12, 4]);
        assert_eq!(out.bn_stats.len(), 4);
    }
}

#[test]
fn upsample_stage_examples() {
    let cfg = DacnConfig::micro();
    let p = perturbed(&cfg, 3);
    let stage = &p.up[0];
    let mut r = rng(3);
    let x = rand_tensor(&mut r, &[1, 4, 4, 8]);
    let skip = rand_tensor(&mut r, &[1, 8, 8, 4]);
    let mut g = Graph::new();
    let sv = register(&mut g, stage);
    let (xv, kv) = (g.input(x.clone()), g.input(skip.clone()));
    let (out, stats) = upsampler::upsample_stage(&mut g, xv, Some(kv), &sv, 0.2, false).unwrap();
    assert!(stats.is_none());
    assert_eq!(g.value(out).shape(), &[1, 8, 8, 12]);
    assert!(max_abs_diff(g.value(out).data(), stage_oracle(&x, Some(&skip), stage, 0.2).data()) < 1e-12);

    let mut no_skip = stage.clone();
    no_skip.skip_channels = 0;
    let mut g = Graph::new();
    let sv = register(&mut g, &no_skip);
    let xv = g.input(x.clone());
    let (out, _) = upsampler::upsample_stage(&mut g, xv, None, &sv, 0.2, false).unwrap();
    assert!(max_abs_diff(g.value(out).data(), stage_oracle(&x, None, stage, 0.2).data()) < 1e-12);
}

#[test]
fn stage_counts() {
    assert_eq!(upsampler::stages_for_scale(2).unwrap(), 1);
    assert_eq!(upsampler::stages_for_scale(4).unwrap(), 2);
    assert_eq!(upsampler::stages_for_scale(8).unwrap(), 3);
    for bad in [0, 1, 3, 6, 16] {
        assert!(upsampler::stages_for_scale(bad).unwrap_err().is_config());
    }
}

#[test]
fn super_resolve_groups_and_clamps() {
    let cfg = DacnConfig::micro();
    let p = perturbed(&cfg, 9);
    let mut r = rng(9);
    let cube = HyperCube::new(6, 6, 10, (0..360).map(|_| r.gen_range(0.0f32..1.0)).collect()).unwrap();
    let out = model::super_resolve(&cube, &p, &cfg).unwrap();
    assert_eq!((out.height, out.width, out.bands), (12, 12, 10));
    assert!(out.data.iter().all(|v| (0.0..=1.0).contains(v)));

    // Oracle: four group predictions from the plan, averaged where they overlap.
    let plan = dacn_core::band_grouping::plan_groups(10, 4, 2).unwrap();
    assert_eq!(plan.len(), 4);
    let full = cube.to_tensor();
    let preds: Vec<Tensor> = plan
        .split(&full)
        .unwrap()
        .iter()
        .map(|gr| {
            let y = model_oracle(&p, &cfg, &gr.reshape(&[1, 6, 6, 4]).unwrap());
            y.reshape(&[12, 12, 4]).unwrap()
        })
        .collect();
    for band in 0..10 {
        for px in 0..144 {
            let vals: Vec<f64> = plan
                .groups
                .iter()
                .zip(&preds)
                .filter(|(g, _)| g.contains(&band))
                .map(|(g, t)| t.data()[px * 4 + band - g.start])
                .collect();
            let mean = (vals.iter().sum::<f64>() / vals.len() as f64).clamp(0.0, 1.0);
            assert!((out.data[band * 144 + px] as f64 - mean).abs() < 1e-6);
        }
    }
}

#[test]
fn super_resolve_single_group_is_forward_plus_clamp() {
    let cfg = DacnConfig::micro();
    let p = perturbed(&cfg, 4);
    let mut r = rng(4);
    let cube = HyperCube::new(5, 7, 4, (0..140).map(|_| r.gen_range(0.0f32..1.0)).collect()).unwrap();
    let out = model::super_resolve(&cube, &p, &cfg).unwrap();
    let y = model::predict(&p, &cfg, &cube.to_tensor().reshape(&[1, 5, 7, 4]).unwrap()).unwrap();
    let want = HyperCube::from_tensor(&Tensor::from_fn(&[10, 14, 4], |i| y.data()[i].clamp(0.0, 1.0))).unwrap();
    assert_eq!(out.data, want.data);
    let few = HyperCube::filled(4, 4, 3, 0.5).unwrap();
    assert!(model::super_resolve(&few, &p, &cfg).unwrap_err().is_config());
}

#[test]
fn init_is_seeded_and_well_scaled() {
    let cfg = DacnConfig::micro();
    let a = model::init_params(&cfg, 1).unwrap();
    let b = model::init_params(&cfg, 1).unwrap();
    let c = model::init_params(&cfg, 2).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    for (name, _, t) in named_tensors(&a) {
        if name.ends_with(".gamma") {
            assert!(t.data().iter().all(|&v| v == 1.0), "{name}");
        }
        if name.ends_with(".beta") || name.ends_with(".bias") || name.ends_with(".b1") || name.ends_with(".b2") {
            assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
        }
    }
    assert!(num_parameters(&a) > 0);
    let mut r = rng(1);
    let y = Tensor::from_fn(&[1, 8, 8, 4], |_| r.gen_range(0.0..1.0));
    let out = model::predict(&a, &cfg, &y).unwrap();
    let m = out.data().iter().sum::<f64>() / out.len() as f64;
    let std = (out.data().iter().map(|v| (v - m).powi(2)).sum::<f64>() / out.len() as f64).sqrt();
    assert!(out.is_finite() && std > 0.0 && std < 10.0, "std {std}");
}

#[test]
fn forward_errors() {
    let cfg = DacnConfig::micro();
    let p = model::init_params(&cfg, 0).unwrap();
    assert!(matches!(
        model::predict(&p, &cfg, &Tensor::zeros(&[1, 4, 4, 5])),
        Err(dacn_core::Error::Dimension { .. })
    ));
    let capped = DacnConfig {
        token_cap: 15,
        ..cfg.clone()
    };
    assert!(model::predict(&p, &capped, &Tensor::zeros(&[1, 4, 4, 4])).unwrap_err().is_config());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn forward_is_deterministic(seed in 0u64..1000, h in 2usize..6, w in 2usize..6) {
        let cfg = DacnConfig::micro();
        let p = model::init_params(&cfg, seed).unwrap();
        let mut r = rng(seed);
        let y = Tensor::from_fn(&[1, h, w, 4], |_| r.gen_range(0.0..1.0));
        let a = model::predict(&p, &cfg, &y).unwrap();
        let b = model::predict(&p, &cfg, &y).unwrap();
        prop_assert_eq!(a.shape(), &[1, 2 * h, 2 * w, 4]);
        prop_assert_eq!(a, b);
    }
}
