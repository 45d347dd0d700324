//! Area-based downsampling. At an integer factor `β` every output pixel is
//! the mean of its `β × β` source block.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::HyperCube;

pub fn degrade_area(cube: &HyperCube, scale: usize) -> Result<HyperCube> {
    check_divisible(cube.height, cube.width, scale)?;
    let (oh, ow) = (cube.height / scale, cube.width / scale);
    let area = (scale * scale) as f64;
    let mut data = Vec::with_capacity(oh * ow * cube.bands);
    for b in 0..cube.bands {
        let band = cube.band(b);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut sum = 0.0f64;
                for dy in 0..scale {
                    let row = (oy * scale + dy) * cube.width + ox * scale;
                    sum += band[row..row + scale].iter().map(|&v| v as f64).sum::<f64>();
                }
                data.push((sum / area) as f32);
            }
        }
    }
    let mut out = HyperCube::new(oh, ow, cube.bands, data)?;
    out.source_range = cube.source_range;
    Ok(out)
}

/// Same block mean on a `[B, H, W, C]` (or `[H, W, C]`) tensor.
pub fn degrade_area_tensor(x: &Tensor, scale: usize) -> Result<Tensor> {
    let (b, h, w, c) = match x.shape()[..] {
        [b, h, w, c] => (b, h, w, c),
        [h, w, c] => (1, h, w, c),
        _ => return Err(Error::dim("degrade_area", format!("bad shape {:?}", x.shape()))),
    };
    check_divisible(h, w, scale)?;
    let (oh, ow) = (h / scale, w / scale);
    let area = (scale * scale) as f64;
    let mut out = vec![0.0; b * oh * ow * c];
    let xd = x.data();
    for bi in 0..b {
        for y in 0..h {
            for xx in 0..w {
                let src = ((bi * h + y) * w + xx) * c;
                let dst = ((bi * oh + y / scale) * ow + xx / scale) * c;
                for ch in 0..c {
                    out[dst + ch] += xd[src + ch];
                }
            }
        }
    }
    out.iter_mut().for_each(|v| *v /= area);
    let shape = if x.rank() == 4 { vec![b, oh, ow, c] } else { vec![oh, ow, c] };
    Tensor::new(shape, out)
}

fn check_divisible(h: usize, w: usize, scale: usize) -> Result<()> {
    if scale == 0 || !h.is_multiple_of(scale) || !w.is_multiple_of(scale) {
        return Err(Error::contract(
            "degrade_area",
            format!("{h}x{w} is not divisible by scale {scale}"),
        ));
    }
    Ok(())
}

/// Nearest-neighbour re-expansion (each pixel becomes a `scale × scale` block).
pub fn expand_nearest(cube: &HyperCube, scale: usize) -> Result<HyperCube> {
    let (oh, ow) = (cube.height * scale, cube.width * scale);
    let mut data = Vec::with_capacity(oh * ow * cube.bands);
    for b in 0..cube.bands {
        let band = cube.band(b);
        for y in 0..oh {
            for x in 0..ow {
                data.push(band[(y / scale) * cube.width + x / scale]);
            }
        }
    }
    HyperCube::new(oh, ow, cube.bands, data)
}
