//! Low-rank synthetic hyperspectral scenes.
//!
//! Each of `rank` components is a separable spatial field
//! `u(row)·v(col)` times a smooth positive spectral signature. The sum is
//! scaled so its maximum is 1, Gaussian noise of standard deviation `noise`
//! is added, and the result is clamped to `[0, 1]`. Without noise all values
//! are nonnegative multiples of the signatures, so a rank-1 scene has
//! perfectly parallel spectra.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

use super::HyperCube;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthParams {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub rank: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            bands: 16,
            rank: 3,
            noise: 0.0,
            seed: 0,
        }
    }
}

fn smooth_profile(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let f1 = rng.gen_range(0.5..3.0);
    let f2 = rng.gen_range(2.0..6.0);
    let (p1, p2) = (rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI));
    let a2 = rng.gen_range(0.0..0.3);
    (0..n)
        .map(|i| {
            let t = i as f64 / n as f64;
            1.0 + 0.6 * (2.0 * PI * f1 * t + p1).sin() + a2 * (2.0 * PI * f2 * t + p2).sin()
        })
        .collect()
}

fn spectral_signature(rng: &mut ChaCha8Rng, bands: usize) -> Vec<f64> {
    let bumps: Vec<(f64, f64, f64)> = (0..2)
        .map(|_| (rng.gen_range(0.3..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.15..0.35)))
        .collect();
    let base = rng.gen_range(0.1..0.3);
    (0..bands)
        .map(|b| {
            let t = if bands > 1 { b as f64 / (bands - 1) as f64 } else { 0.5 };
            base + bumps
                .iter()
                .map(|&(a, c, w)| a * (-(t - c) * (t - c) / (2.0 * w * w)).exp())
                .sum::<f64>()
        })
        .collect()
}

pub fn synth_cube(p: &SynthParams) -> Result<HyperCube> {
    if p.height == 0 || p.width == 0 || p.bands == 0 {
        return Err(Error::config("synthetic cube dimensions must be >= 1"));
    }
    if p.rank == 0 || p.rank > p.bands {
        return Err(Error::config(format!("rank {} must be in 1..={}", p.rank, p.bands)));
    }
    if !(p.noise >= 0.0) || !p.noise.is_finite() {
        return Err(Error::config(format!("noise {} must be a finite nonnegative value", p.noise)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let comps: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (0..p.rank)
        .map(|_| {
            let u = smooth_profile(&mut rng, p.height);
            let v = smooth_profile(&mut rng, p.width);
            let s = spectral_signature(&mut rng, p.bands);
            (u, v, s)
        })
        .collect();
    let n = p.height * p.width;
    let mut data = vec![0.0f64; n * p.bands];
    for (u, v, s) in &comps {
        for (b, &sb) in s.iter().enumerate() {
            for r in 0..p.height {
                for c in 0..p.width {
                    data[b * n + r * p.width + c] += u[r] * v[c] * sb;
                }
            }
        }
    }
    let max = data.iter().copied().fold(0.0, f64::max);
    let noise = Normal::new(0.0, p.noise.max(f64::MIN_POSITIVE)).expect("valid std");
    let out = data
        .iter()
        .map(|&v| {
            let mut x = v / max;
            if p.noise > 0.0 {
                x += noise.sample(&mut rng);
            }
            x.clamp(0.0, 1.0) as f32
        })
        .collect();
    HyperCube::new(p.height, p.width, p.bands, out)
}
