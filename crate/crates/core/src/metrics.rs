//! Cube quality metrics: MPSNR, MSSIM and SAM.

use std::fmt::Write as _;

use crate::data::HyperCube;
use crate::error::{Error, Result};

/// Reported PSNR for bands with zero error.
pub const PSNR_CAP_DB: f64 = 100.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const SSIM_DATA_RANGE: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub mpsnr: f64,
    pub mssim: f64,
    /// Degrees.
    pub sam: f64,
    pub per_band_psnr: Vec<f64>,
    pub per_band_ssim: Vec<f64>,
    /// Pixels left out of SAM because a spectrum had zero norm.
    pub sam_skipped: usize,
}

impl MetricsReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        let _ = writeln!(s, "mpsnr,{}", self.mpsnr);
        let _ = writeln!(s, "mssim,{}", self.mssim);
        let _ = writeln!(s, "sam,{}", self.sam);
        for (i, p) in self.per_band_psnr.iter().enumerate() {
            let _ = writeln!(s, "psnr_band_{i},{p}");
        }
        s
    }
}

fn check_dims(op: &'static str, a: &HyperCube, b: &HyperCube) -> Result<()> {
    if !a.same_dims(b) {
        return Err(Error::dim(
            op,
            format!(
                "{}x{}x{} vs {}x{}x{}",
                a.height, a.width, a.bands, b.height, b.width, b.bands
            ),
        ));
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn psnr_per_band(reference: &HyperCube, test: &HyperCube, max_val: f64) -> Result<Vec<f64>> {
    check_dims("psnr", reference, test)?;
    Ok((0..reference.bands)
        .map(|b| {
            let (r, t) = (reference.band(b), test.band(b));
            let mse = r
                .iter()
                .zip(t)
                .map(|(&x, &y)| {
                    let d = x as f64 - y as f64;
                    d * d
                })
                .sum::<f64>()
                / r.len() as f64;
            if mse == 0.0 {
                PSNR_CAP_DB
            } else {
                (10.0 * (max_val * max_val / mse).log10()).min(PSNR_CAP_DB)
            }
        })
        .collect())
}

pub fn mpsnr(reference: &HyperCube, test: &HyperCube, max_val: f64) -> Result<f64> {
    Ok(mean(&psnr_per_band(reference, test, max_val)?))
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - c;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering of an `h×w` image.
fn filter_valid(img: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| taps[i] * img[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| taps[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM of one band over all fully contained windows.
pub fn ssim_band(a: &[f32], b: &[f32], height: usize, width: usize) -> f64 {
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let x: Vec<f64> = a.iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = b.iter().map(|&v| v as f64).collect();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
    let f = |img: &[f64]| filter_valid(img, height, width, &taps);
    let (mx, my, sxx, syy, sxy) = (f(&x), f(&y), f(&xx), f(&yy), f(&xy));
    let c1 = (SSIM_K1 * SSIM_DATA_RANGE).powi(2);
    let c2 = (SSIM_K2 * SSIM_DATA_RANGE).powi(2);
    let vals: Vec<f64> = (0..mx.len())
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .collect();
    mean(&vals)
}

pub fn ssim_per_band(reference: &HyperCube, test: &HyperCube) -> Result<Vec<f64>> {
    check_dims("ssim", reference, test)?;
    if reference.height < SSIM_WINDOW || reference.width < SSIM_WINDOW {
        return Err(Error::contract(
            "ssim",
            format!(
                "image {}x{} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window",
                reference.height, reference.width
            ),
        ));
    }
    Ok((0..reference.bands)
        .map(|b| ssim_band(reference.band(b), test.band(b), reference.height, reference.width))
        .collect())
}

pub fn mssim(reference: &HyperCube, test: &HyperCube) -> Result<f64> {
    Ok(mean(&ssim_per_band(reference, test)?))
}

/// Mean spectral angle in degrees and the number of skipped pixels.
pub fn sam_with_skipped(reference: &HyperCube, test: &HyperCube) -> Result<(f64, usize)> {
    check_dims("sam", reference, test)?;
    let n = reference.pixels();
    let mut sum = 0.0;
    let mut used = 0usize;
    for p in 0..n {
        let (mut nu, mut nv) = (0.0, 0.0);
        for b in 0..reference.bands {
            let u = reference.data[b * n + p] as f64;
            let v = test.data[b * n + p] as f64;
            nu += u * u;
            nv += v * v;
        }
        if nu == 0.0 || nv == 0.0 {
            continue;
        }
        let (nu, nv) = (nu.sqrt(), nv.sqrt());
        // arccos(⟨u,v⟩/‖u‖‖v‖) in the half-angle form, which stays exact
        // for parallel spectra.
        let (mut diff, mut sum_sq) = (0.0, 0.0);
        for b in 0..reference.bands {
            let u = reference.data[b * n + p] as f64 / nu;
            let v = test.data[b * n + p] as f64 / nv;
            diff += (u - v) * (u - v);
            sum_sq += (u + v) * (u + v);
        }
        sum += 2.0 * diff.sqrt().atan2(sum_sq.sqrt());
        used += 1;
    }
    if used == 0 {
        return Err(Error::contract("sam", "every pixel has a zero-norm spectrum"));
    }
    Ok(((sum / used as f64).to_degrees(), n - used))
}

pub fn sam(reference: &HyperCube, test: &HyperCube) -> Result<f64> {
    Ok(sam_with_skipped(reference, test)?.0)
}

pub fn evaluate(reference: &HyperCube, test: &HyperCube) -> Result<MetricsReport> {
    let per_band_psnr = psnr_per_band(reference, test, SSIM_DATA_RANGE)?;
    let per_band_ssim = ssim_per_band(reference, test)?;
    let (sam, sam_skipped) = sam_with_skipped(reference, test)?;
    Ok(MetricsReport {
        mpsnr: mean(&per_band_psnr),
        mssim: mean(&per_band_ssim),
        sam,
        per_band_psnr,
        per_band_ssim,
        sam_skipped,
    })
}
