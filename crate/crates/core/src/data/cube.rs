//! Hyperspectral cubes and the `HSC1` binary format.
//!
//! Layout on disk (all little-endian):
//!
//! | bytes | content                         |
//! |-------|---------------------------------|
//! | 4     | magic `HSC1`                    |
//! | 4     | height (`u32`)                  |
//! | 4     | width (`u32`)                   |
//! | 4     | bands (`u32`)                   |
//! | 4·N   | `f32` samples, band-sequential  |

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const HSC1_MAGIC: &[u8; 4] = b"HSC1";
const HEADER_LEN: usize = 16;

/// A `height × width × bands` image stored band-sequential:
/// `data[band * H * W + row * W + col]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperCube {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub data: Vec<f32>,
    /// Range the current values are known to lie in.
    pub value_range: (f32, f32),
    /// Original range before [`normalize`], if it was applied.
    pub source_range: Option<(f32, f32)>,
}

impl HyperCube {
    pub fn new(height: usize, width: usize, bands: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || bands == 0 {
            return Err(Error::dim("HyperCube::new", "height, width and bands must be >= 1"));
        }
        let n = height
            .checked_mul(width)
            .and_then(|v| v.checked_mul(bands))
            .ok_or_else(|| Error::dim("HyperCube::new", "dimensions overflow"))?;
        if n != data.len() {
            return Err(Error::dim(
                "HyperCube::new",
                format!("{height}x{width}x{bands} needs {n} samples, got {}", data.len()),
            ));
        }
        let value_range = observed_range(&data);
        Ok(Self {
            height,
            width,
            bands,
            data,
            value_range,
            source_range: None,
        })
    }

    pub fn filled(height: usize, width: usize, bands: usize, value: f32) -> Result<Self> {
        Self::new(height, width, bands, vec![value; height * width * bands])
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn band(&self, b: usize) -> &[f32] {
        let n = self.pixels();
        &self.data[b * n..(b + 1) * n]
    }

    pub fn get(&self, row: usize, col: usize, band: usize) -> f32 {
        self.data[band * self.pixels() + row * self.width + col]
    }

    /// Spectrum of one pixel.
    pub fn spectrum(&self, row: usize, col: usize) -> Vec<f32> {
        (0..self.bands).map(|b| self.get(row, col, b)).collect()
    }

    pub fn same_dims(&self, other: &HyperCube) -> bool {
        (self.height, self.width, self.bands) == (other.height, other.width, other.bands)
    }

    /// `[H, W, bands]` tensor (pixel-interleaved) in `f64`.
    pub fn to_tensor(&self) -> Tensor {
        let n = self.pixels();
        let mut out = Vec::with_capacity(self.data.len());
        for p in 0..n {
            for b in 0..self.bands {
                out.push(self.data[b * n + p] as f64);
            }
        }
        Tensor::new(vec![self.height, self.width, self.bands], out).expect("cube dims are valid")
    }

    /// Inverse of [`to_tensor`](Self::to_tensor); accepts `[H, W, C]` or `[1, H, W, C]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (h, w, c) = match t.shape()[..] {
            [h, w, c] | [1, h, w, c] => (h, w, c),
            _ => return Err(Error::dim("HyperCube::from_tensor", format!("bad shape {:?}", t.shape()))),
        };
        let n = h * w;
        let mut data = vec![0.0f32; n * c];
        for (p, px) in t.data().chunks(c).enumerate() {
            for (b, &v) in px.iter().enumerate() {
                data[b * n + p] = v as f32;
            }
        }
        Self::new(h, w, c, data)
    }

    /// Spatial crop `[row0, row0+h) × [col0, col0+w)` over all bands.
    pub fn crop(&self, row0: usize, col0: usize, h: usize, w: usize) -> Result<Self> {
        if row0 + h > self.height || col0 + w > self.width || h == 0 || w == 0 {
            return Err(Error::dim(
                "crop",
                format!("window {h}x{w}@({row0},{col0}) outside {}x{}", self.height, self.width),
            ));
        }
        let mut data = Vec::with_capacity(h * w * self.bands);
        for b in 0..self.bands {
            let band = self.band(b);
            for r in row0..row0 + h {
                data.extend_from_slice(&band[r * self.width + col0..r * self.width + col0 + w]);
            }
        }
        let mut out = Self::new(h, w, self.bands, data)?;
        out.source_range = self.source_range;
        Ok(out)
    }

    /// Contiguous band slice `[start, end)`.
    pub fn select_bands(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.bands {
            return Err(Error::dim("select_bands", format!("{start}..{end} outside 0..{}", self.bands)));
        }
        let n = self.pixels();
        Self::new(self.height, self.width, end - start, self.data[start * n..end * n].to_vec())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(HSC1_MAGIC);
        for d in [self.height, self.width, self.bands] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Format(format!("HSC1 header needs 16 bytes, file has {}", bytes.len())));
        }
        if &bytes[..4] != HSC1_MAGIC {
            return Err(Error::Format(format!("bad magic {:?}, expected \"HSC1\"", &bytes[..4])));
        }
        let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let (h, w, b) = (dim(0), dim(1), dim(2));
        if h == 0 || w == 0 || b == 0 {
            return Err(Error::Format(format!("zero dimension in header: {h}x{w}x{b}")));
        }
        let n = h
            .checked_mul(w)
            .and_then(|v| v.checked_mul(b))
            .filter(|n| n.checked_mul(4).is_some())
            .ok_or_else(|| Error::Format(format!("dimensions {h}x{w}x{b} overflow")))?;
        let payload = &bytes[HEADER_LEN..];
        if payload.len() != 4 * n {
            return Err(Error::Format(format!(
                "payload is {} bytes, {h}x{w}x{b} cube needs {}",
                payload.len(),
                4 * n
            )));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(h, w, b, data)
    }
}

fn observed_range(data: &[f32]) -> (f32, f32) {
    data.iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

pub fn read_cube(path: impl AsRef<Path>) -> Result<HyperCube> {
    HyperCube::from_bytes(&fs::read(path)?)
}

pub fn write_cube(cube: &HyperCube, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, cube.to_bytes())?;
    Ok(())
}

/// Global min-max scaling to `[0, 1]`; the original range is kept in
/// `source_range`.
pub fn normalize(cube: &HyperCube) -> Result<HyperCube> {
    let (lo, hi) = observed_range(&cube.data);
    if !(hi > lo) {
        return Err(Error::contract("normalize", format!("cube is constant ({lo}); range is empty")));
    }
    let (lo64, span) = (lo as f64, hi as f64 - lo as f64);
    let data = cube
        .data
        .iter()
        .map(|&v| ((v as f64 - lo64) / span) as f32)
        .collect();
    let mut out = HyperCube::new(cube.height, cube.width, cube.bands, data)?;
    out.value_range = (0.0, 1.0);
    out.source_range = Some((lo, hi));
    Ok(out)
}
