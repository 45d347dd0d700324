//! Dense row-major tensors.
//!
//! A [`Tensor`] is a shape plus a flat `f64` buffer. Four-dimensional
//! activations use `(batch, height, width, channels)` ordering throughout the
//! crate. The optional `grad` slot is filled by [`crate::graph::Gradients::write_into`]
//! after a backward pass.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::dim("Tensor::new", format!("zero-sized axis in {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim(
                "Tensor::new",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        Ok(Self {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
            grad: None,
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::dim(
                "reshape",
                format!("cannot view {:?} as {:?}", self.shape, shape),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
            grad: None,
        })
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Interprets a rank-4 tensor as `(batch, height, width, channels)`.
    pub fn dims4(&self, op: &'static str) -> Result<[usize; 4]> {
        match self.shape[..] {
            [b, h, w, c] => Ok([b, h, w, c]),
            _ => Err(Error::dim(op, format!("expected rank-4 BHWC tensor, got {:?}", self.shape))),
        }
    }

    pub fn dims2(&self, op: &'static str) -> Result<[usize; 2]> {
        match self.shape[..] {
            [r, c] => Ok([r, c]),
            _ => Err(Error::dim(op, format!("expected matrix, got {:?}", self.shape))),
        }
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let [t, k] = self.dims2("matmul")?;
        let [k2, d] = other.dims2("matmul")?;
        if k != k2 {
            return Err(Error::dim(
                "matmul",
                format!("left {:?} and right {:?} have different inner dimensions", self.shape, other.shape),
            ));
        }
        let mut out = vec![0.0; t * d];
        matmul_into(&self.data, &other.data, &mut out, t, k, d);
        Tensor::new(vec![t, d], out)
    }
}

/// Spatial extent plus channel count of one feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims2D {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Dims2D {
    pub fn new(height: usize, width: usize, channels: usize) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::dim(
                "Dims2D::new",
                format!("all dimensions must be >= 1, got {height}x{width}x{channels}"),
            ));
        }
        Ok(Self {
            height,
            width,
            channels,
        })
    }

    pub fn of(t: &Tensor) -> Result<Self> {
        let [_, h, w, c] = t.dims4("Dims2D::of")?;
        Self::new(h, w, c)
    }

    pub fn tokens(&self) -> usize {
        self.height * self.width
    }
}

/// `out[t×d] += a[t×k] · b[k×d]`.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], t: usize, k: usize, d: usize) {
    for i in 0..t {
        let row = &mut out[i * d..(i + 1) * d];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * d..(p + 1) * d];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[t×d] += a[t×k] · b[d×k]ᵀ`.
pub(crate) fn matmul_bt_into(a: &[f64], b: &[f64], out: &mut [f64], t: usize, k: usize, d: usize) {
    for i in 0..t {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..d {
            let brow = &b[j * k..(j + 1) * k];
            out[i * d + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[k×d] += a[t×k]ᵀ · b[t×d]`.
pub(crate) fn matmul_at_into(a: &[f64], b: &[f64], out: &mut [f64], t: usize, k: usize, d: usize) {
    for i in 0..t {
        let brow = &b[i * d..(i + 1) * d];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * d..(p + 1) * d];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Numerically stable softmax over each row of a `rows × cols` buffer, in place.
pub(crate) fn softmax_rows_in_place(x: &mut [f64], cols: usize) {
    for row in x.chunks_mut(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Backward of row softmax given its output `p` and upstream gradient `g`.
pub(crate) fn softmax_rows_backward(p: &[f64], g: &[f64], cols: usize) -> Vec<f64> {
    let mut dx = vec![0.0; p.len()];
    for ((pr, gr), dr) in p.chunks(cols).zip(g.chunks(cols)).zip(dx.chunks_mut(cols)) {
        let inner: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for ((d, &pv), &gv) in dr.iter_mut().zip(pr).zip(gr) {
            *d = pv * (gv - inner);
        }
    }
    dx
}
