use dacn_core::band_grouping::{merge_groups, plan_groups};
use dacn_core::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn exhaustive_coverage_sweep() {
    let mut plans = 0;
    for total in 1..=128 {
        for g in 1..=total {
            for s in 1..=g {
                let p = plan_groups(total, g, s).unwrap();
                let mut covered = vec![false; total];
                for (i, r) in p.groups.iter().enumerate() {
                    assert_eq!(r.len(), g);
                    assert!(r.end <= total);
                    if i + 1 < p.groups.len() {
                        let next = &p.groups[i + 1];
                        if i + 2 < p.groups.len() {
                            assert_eq!(r.end - next.start, g - s, "{total}/{g}/{s}");
                        } else {
                            assert!(r.end - next.start.min(r.end) >= g - s);
                        }
                    }
                    covered[r.clone()].iter_mut().for_each(|c| *c = true);
                }
                assert!(covered.iter().all(|&c| c), "uncovered band in {total}/{g}/{s}");
                assert_eq!(p.groups.last().unwrap().end, total);
                assert!(p.coverage.iter().all(|&c| c >= 1));
                plans += 1;
            }
        }
    }
    assert!(plans > 300_000);
}

#[test]
fn enumeration_examples() {
    let p = plan_groups(10, 4, 2).unwrap();
    assert_eq!(p.groups, vec![0..4, 2..6, 4..8, 6..10]);
    assert_eq!(plan_groups(7, 7, 3).unwrap().groups, vec![0..7]);
    let p = plan_groups(103, 32, 16).unwrap();
    assert_eq!(p.len(), 6);
    assert_eq!(p.groups, vec![0..32, 16..48, 32..64, 48..80, 64..96, 71..103]);
    assert_eq!(p.groups.last(), Some(&(71..103)));
}

#[test]
fn invalid_plans_are_config_errors() {
    assert!(plan_groups(10, 11, 2).unwrap_err().is_config());
    assert!(plan_groups(10, 4, 5).unwrap_err().is_config());
    assert!(plan_groups(10, 4, 0).unwrap_err().is_config());
    assert!(plan_groups(0, 1, 1).unwrap_err().is_config());
}

#[test]
fn merge_examples() {
    let p = plan_groups(3, 2, 1).unwrap();
    let a = Tensor::new(vec![1, 1, 2], vec![5.0, 1.0]).unwrap();
    let b = Tensor::new(vec![1, 1, 2], vec![3.0, 7.0]).unwrap();
    assert_eq!(merge_groups(&[a, b], &p).unwrap().data(), &[5.0, 2.0, 7.0]);

    let c = 0.3;
    let same = Tensor::full(&[2, 2, 2], c);
    assert!(merge_groups(&[same.clone(), same], &p).unwrap().data().iter().all(|&v| v == c));

    let disjoint = plan_groups(4, 2, 2).unwrap();
    let x = Tensor::new(vec![1, 1, 2], vec![1.0, 2.0]).unwrap();
    let y = Tensor::new(vec![1, 1, 2], vec![3.0, 4.0]).unwrap();
    assert_eq!(disjoint.merge(&[x, y]).unwrap().data(), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn merge_rejects_bad_inputs() {
    let p = plan_groups(6, 4, 2).unwrap();
    let t = Tensor::zeros(&[2, 2, 4]);
    assert!(p.merge(std::slice::from_ref(&t)).is_err());
    assert!(p.merge(&[t, Tensor::zeros(&[2, 2, 3])]).is_err());
    assert!(p.split(&Tensor::zeros(&[2, 2, 5])).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn split_merge_is_exact_identity(seed in 0u64..100_000, total in 1usize..40, gs in 1usize..40, st in 1usize..40) {
        let g = 1 + (gs - 1) % total;
        let s = 1 + (st - 1) % g;
        let p = plan_groups(total, g, s).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::from_fn(&[3, 2, total], |_| r.gen_range(-10.0..10.0));
        let back = p.merge(&p.split(&x).unwrap()).unwrap();
        prop_assert_eq!(back, x);
    }

    #[test]
    fn merge_is_a_mean(seed in 0u64..100_000) {
        let p = plan_groups(9, 4, 1).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let preds: Vec<Tensor> = (0..p.len()).map(|_| Tensor::from_fn(&[1, 1, 4], |_| r.gen_range(0.0..1.0))).collect();
        let m = p.merge(&preds).unwrap();
        for band in 0..9 {
            let vals: Vec<f64> = p.groups.iter().zip(&preds)
                .filter(|(g, _)| g.contains(&band))
                .map(|(g, t)| t.data()[band - g.start])
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            prop_assert!((m.data()[band] - mean).abs() < 1e-14);
        }
    }
}
