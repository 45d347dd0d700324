mod common;

use common::*;
use dacn_core::channel_attention::{self as ca, ChannelAttentionParams};
use dacn_core::params::register;
use dacn_core::{Graph, Tensor};
use proptest::prelude::*;
use rand::Rng;

fn run(x: &Tensor, p: &ChannelAttentionParams<Tensor>) -> (Vec<f64>, Tensor) {
    let mut g = Graph::new();
    let pv = register(&mut g, p);
    let xv = g.input(x.clone());
    let s = ca::channel_gate(&mut g, xv, &pv).unwrap();
    let y = ca::channel_attention(&mut g, xv, &pv).unwrap();
    (g.value(s).data().to_vec(), g.value(y).clone())
}

fn rand_params(r: &mut rand_chacha::ChaCha8Rng, c: usize, red: usize) -> ChannelAttentionParams<Tensor> {
    let m = c / red;
    ChannelAttentionParams {
        w1: rand_tensor(r, &[m, c]),
        b1: rand_tensor(r, &[m]),
        w2: rand_tensor(r, &[c, m]),
        b2: rand_tensor(r, &[c]),
        reduction: red,
    }
}

#[test]
fn zero_mlp_halves_input_exactly() {
    let mut r = rng(1);
    let x = rand_tensor(&mut r, &[2, 3, 3, 4]);
    let p = ChannelAttentionParams {
        w1: Tensor::zeros(&[2, 4]),
        b1: Tensor::zeros(&[2]),
        w2: Tensor::zeros(&[4, 2]),
        b2: Tensor::zeros(&[4]),
        reduction: 2,
    };
    let (s, y) = run(&x, &p);
    assert!(s.iter().all(|&v| v == 0.5));
    let half: Vec<f64> = x.data().iter().map(|v| 0.5 * v).collect();
    assert_eq!(y.data(), &half[..]);
}

#[test]
fn two_channel_scalar_oracle() {
    // 1×2×2×2 input, r = 1, integer weights.
    let x = Tensor::new(vec![1, 2, 2, 2], vec![1.0, -1.0, 2.0, 0.0, 3.0, 1.0, -2.0, 4.0]).unwrap();
    let p = ChannelAttentionParams {
        w1: Tensor::new(vec![2, 2], vec![1.0, -1.0, 0.0, 2.0]).unwrap(),
        b1: Tensor::new(vec![2], vec![0.0, -1.0]).unwrap(),
        w2: Tensor::new(vec![2, 2], vec![1.0, 1.0, -1.0, 2.0]).unwrap(),
        b2: Tensor::new(vec![2], vec![1.0, 0.0]).unwrap(),
        reduction: 1,
    };
    // Channel 0 values {1, 2, 3, -2}; channel 1 values {-1, 0, 1, 4}.
    let f_avg = [1.0, 1.0];
    let f_max = [3.0, 4.0];
    let mlp = |f: [f64; 2]| {
        let h0 = (f[0] - f[1]).max(0.0);
        let h1 = (2.0 * f[1] - 1.0).max(0.0);
        [h0 + h1 + 1.0, -h0 + 2.0 * h1]
    };
    let (a, m) = (mlp(f_avg), mlp(f_max));
    let s = [sigmoid(a[0] + m[0]), sigmoid(a[1] + m[1])];
    let (got_s, y) = run(&x, &p);
    assert!(max_abs_diff(&got_s, &s) <= 1e-10);
    let want: Vec<f64> = x.data().iter().enumerate().map(|(i, v)| v * s[i % 2]).collect();
    assert!(max_abs_diff(y.data(), &want) <= 1e-10);
    assert!(max_abs_diff(&got_s, &channel_gate(&x, &p.w1, p.b1.data(), &p.w2, p.b2.data())) <= 1e-12);
}

#[test]
fn gate_matches_oracle_on_random_instances() {
    for seed in 0..24 {
        let mut r = rng(10 + seed);
        let c = [2, 4, 6, 8][seed as usize % 4];
        let red = ca::default_reduction(c);
        let p = rand_params(&mut r, c, red);
        let h = r.gen_range(1..4);
        let x = rand_tensor(&mut r, &[2, h, 3, c]);
        let (s, _) = run(&x, &p);
        let want = channel_gate(&x, &p.w1, p.b1.data(), &p.w2, p.b2.data());
        assert!(max_abs_diff(&s, &want) <= 1e-12, "seed {seed}");
    }
}

#[test]
fn constant_input_has_equal_pools() {
    let mut r = rng(2);
    let p = rand_params(&mut r, 4, 2);
    let x = Tensor::from_fn(&[1, 3, 3, 4], |i| (i % 4) as f64 - 1.5);
    let (s, _) = run(&x, &p);
    let f: Vec<f64> = (0..4).map(|c| c as f64 - 1.5).collect();
    let h: Vec<f64> = dense(&f, 1, &p.w1, p.b1.data()).into_iter().map(|v| v.max(0.0)).collect();
    let pp: Vec<f64> = dense(&h, 1, &p.w2, p.b2.data()).iter().map(|v| sigmoid(2.0 * v)).collect();
    assert!(max_abs_diff(&s, &pp) < 1e-12);
}

#[test]
fn channel_mismatch_is_dimension_error() {
    let mut r = rng(3);
    let p = rand_params(&mut r, 4, 2);
    let mut g = Graph::new();
    let pv = register(&mut g, &p);
    let x = g.input(Tensor::zeros(&[1, 2, 2, 3]));
    assert!(matches!(ca::channel_attention(&mut g, x, &pv), Err(dacn_core::Error::Dimension { .. })));
}

#[test]
fn reduction_rule() {
    assert_eq!(ca::default_reduction(64), 16);
    assert_eq!(ca::default_reduction(32), 16);
    assert_eq!(ca::default_reduction(8), 4);
    assert_eq!(ca::default_reduction(6), 3);
    assert_eq!(ca::default_reduction(1), 1);
    assert!(ca::validate_reduction(8, 3).is_err());
    assert!(ca::validate_reduction(8, 0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gate_is_strictly_inside_unit_interval(seed in 0u64..10_000, scale in 0.1f64..3.0) {
        let mut r = rng(seed);
        let p = rand_params(&mut r, 4, 2);
        let x = Tensor::from_fn(&[2, 2, 3, 4], |_| r.gen_range(-1.0..1.0) * scale);
        let (s, y) = run(&x, &p);
        prop_assert!(s.iter().all(|&v| v > 0.0 && v < 1.0));
        // One scalar per (batch, channel).
        for (i, (&yo, &xo)) in y.data().iter().zip(x.data()).enumerate() {
            let (b, c) = (i / 24, i % 4);
            prop_assert!((yo - xo * s[b * 4 + c]).abs() <= 1e-15 * xo.abs().max(1.0));
        }
    }

    #[test]
    fn pooled_branches_commute(seed in 0u64..10_000) {
        let mut r = rng(seed);
        let p = rand_params(&mut r, 4, 1);
        let x = rand_tensor(&mut r, &[1, 3, 3, 4]);
        let (avg, max) = pools(&x);
        let branch = |v: &[f64]| {
            let h: Vec<f64> = dense(v, 1, &p.w1, p.b1.data()).into_iter().map(|z| z.max(0.0)).collect();
            dense(&h, 1, &p.w2, p.b2.data())
        };
        let (a, m) = (branch(&avg), branch(&max));
        let ab: Vec<f64> = a.iter().zip(&m).map(|(x, y)| sigmoid(x + y)).collect();
        let ba: Vec<f64> = m.iter().zip(&a).map(|(x, y)| sigmoid(x + y)).collect();
        prop_assert_eq!(&ab, &ba);
        let (s, _) = run(&x, &p);
        prop_assert!(max_abs_diff(&s, &ab) < 1e-12);
    }
}
