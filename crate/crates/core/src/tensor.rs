//! Dense row-major tensors and convolution layer geometry.
//!
//! Every tensor in this crate is an `f64` array stored with the last index
//! varying fastest. Kernels are `D×D×M×N`, feature maps are `H×W×C`.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::Shape("a tensor needs at least one axis".into()));
        }
        if let Some(axis) = shape.iter().position(|&e| e == 0) {
            return Err(Error::Shape(format!("axis {axis} has zero extent")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {numel} elements but {} were given",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Self> {
        let numel = shape.iter().product();
        Self::new(shape.to_vec(), vec![value; numel])
    }

    /// Builds a tensor by evaluating `f` at every multi-index in row-major order.
    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> f64) -> Result<Self> {
        let numel: usize = shape.iter().product();
        let mut idx = vec![0usize; shape.len()];
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(f(&idx));
            for axis in (0..shape.len()).rev() {
                idx[axis] += 1;
                if idx[axis] < shape[axis] {
                    break;
                }
                idx[axis] = 0;
            }
        }
        Self::new(shape.to_vec(), data)
    }

    /// Standard-normal entries drawn from `rng`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Result<Self> {
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| rng.sample(StandardNormal)).collect();
        Self::new(shape.to_vec(), data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    pub fn strides(&self) -> Vec<usize> {
        row_major_strides(&self.shape)
    }

    /// Flat offset of a multi-index, with bounds checking.
    pub fn offset(&self, index: &[usize]) -> Result<usize> {
        if index.len() != self.shape.len() {
            return Err(Error::RankMismatch {
                expected: self.shape.len(),
                got: index.len(),
            });
        }
        let mut off = 0;
        for (&i, &extent) in index.iter().zip(&self.shape) {
            if i >= extent {
                return Err(Error::Index { index: i, extent });
            }
            off = off * extent + i;
        }
        Ok(off)
    }

    /// Multi-index of a flat offset; inverse of [`Tensor::offset`].
    pub fn unravel(&self, mut offset: usize) -> Result<Vec<usize>> {
        if offset >= self.data.len() {
            return Err(Error::Index {
                index: offset,
                extent: self.data.len(),
            });
        }
        let mut idx = vec![0; self.shape.len()];
        for axis in (0..self.shape.len()).rev() {
            idx[axis] = offset % self.shape[axis];
            offset /= self.shape[axis];
        }
        Ok(idx)
    }

    pub fn get(&self, index: &[usize]) -> Result<f64> {
        Ok(self.data[self.offset(index)?])
    }

    pub fn set(&mut self, index: &[usize], value: f64) -> Result<()> {
        let off = self.offset(index)?;
        self.data[off] = value;
        Ok(())
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data)
    }

    pub fn scale(&self, c: f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }

    /// Elementwise `self - other`.
    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    /// Elementwise `self + other`.
    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "shapes {:?} and {:?} differ",
                self.shape, other.shape
            )));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn frobenius_norm(&self) -> f64 {
        frobenius_norm(self)
    }

    pub(crate) fn expect_ndim(&self, n: usize) -> Result<()> {
        if self.ndim() != n {
            return Err(Error::RankMismatch {
                expected: n,
                got: self.ndim(),
            });
        }
        Ok(())
    }
}

pub fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for axis in (0..shape.len().saturating_sub(1)).rev() {
        strides[axis] = strides[axis + 1] * shape[axis + 1];
    }
    strides
}

/// Swaps the third and fourth axes of a 4-way tensor: `out[a,b,d,c] = k[a,b,c,d]`.
pub fn transpose_3_4(k: &Tensor) -> Result<Tensor> {
    k.expect_ndim(4)?;
    let &[a, b, c, d] = k.shape() else {
        unreachable!()
    };
    let src = k.data();
    let mut out = Vec::with_capacity(src.len());
    for plane in 0..a * b {
        let base = plane * c * d;
        for j in 0..d {
            for i in 0..c {
                out.push(src[base + i * d + j]);
            }
        }
    }
    Tensor::new(vec![a, b, d, c], out)
}

/// Square root of the sum of squares.
///
/// Squares are summed in ascending order, so any permutation of the elements
/// (transposes, channel shuffles) yields a bit-identical norm.
pub fn frobenius_norm(t: &Tensor) -> f64 {
    let mut squares: Vec<f64> = t.data().iter().map(|v| v * v).collect();
    squares.sort_unstable_by(f64::total_cmp);
    squares.iter().sum::<f64>().sqrt()
}

/// The `D²×M` matrix of output channel `n` of a `D×D×M×N` kernel.
///
/// Row `i·D + j`, column `m` holds `k[i,j,m,n]`.
pub fn unfold_output_slice(k: &Tensor, n: usize) -> Result<Tensor> {
    k.expect_ndim(4)?;
    let &[d1, d2, m, nn] = k.shape() else {
        unreachable!()
    };
    if n >= nn {
        return Err(Error::Index {
            index: n,
            extent: nn,
        });
    }
    let data = k.data().iter().skip(n).step_by(nn).copied().collect();
    Tensor::new(vec![d1 * d2, m], data)
}

/// Writes a `D²×M` slice back into output channel `n` of `k`.
pub fn fold_output_slice(k: &mut Tensor, n: usize, slice: &Tensor) -> Result<()> {
    k.expect_ndim(4)?;
    let &[d1, d2, m, nn] = k.shape() else {
        unreachable!()
    };
    if n >= nn {
        return Err(Error::Index {
            index: n,
            extent: nn,
        });
    }
    if slice.shape() != [d1 * d2, m] {
        return Err(Error::Shape(format!(
            "slice of shape {:?} does not fit a {:?} kernel",
            slice.shape(),
            k.shape()
        )));
    }
    for (dst, &v) in k.data_mut().iter_mut().skip(n).step_by(nn).zip(slice.data()) {
        *dst = v;
    }
    Ok(())
}

/// Geometry of one convolution layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvDims {
    /// Kernel height and width `D`.
    pub kernel: usize,
    /// Input channels `M`.
    pub in_channels: usize,
    /// Output channels `N`.
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvDims {
    pub fn new(
        kernel: usize,
        in_channels: usize,
        out_channels: usize,
        height: usize,
        width: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let dims = Self {
            kernel,
            in_channels,
            out_channels,
            height,
            width,
            stride,
            padding,
        };
        dims.validate()?;
        Ok(dims)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("D", self.kernel),
            ("M", self.in_channels),
            ("N", self.out_channels),
            ("H", self.height),
            ("W", self.width),
            ("s", self.stride),
        ] {
            if v == 0 {
                return Err(Error::Geometry(format!("{name} must be at least 1")));
            }
        }
        self.output_size().map(|_| ())
    }

    /// `(H′, W′)` with `H′ = floor((H + 2p − D)/s) + 1`.
    pub fn output_size(&self) -> Result<(usize, usize)> {
        Ok((
            output_extent(self.height, self.kernel, self.stride, self.padding, "H")?,
            output_extent(self.width, self.kernel, self.stride, self.padding, "W")?,
        ))
    }
}

pub(crate) fn output_extent(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    axis: &str,
) -> Result<usize> {
    if stride == 0 {
        return Err(Error::Geometry("stride must be at least 1".into()));
    }
    let padded = input + 2 * padding;
    if kernel == 0 || kernel > padded {
        return Err(Error::Geometry(format!(
            "kernel {kernel} does not fit {axis}={input} with padding {padding} (output extent < 1)"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}
