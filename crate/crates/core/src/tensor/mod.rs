//! Dense tensors, a reverse-mode tape, layer kernels and the Nadam optimizer.
//!
//! Images use the `batch x channels x height x width` layout throughout.
//! All arithmetic is `f64`; finite-difference checks on the networks rely
//! on that precision.

mod kernels;
mod param;
mod tape;

pub use kernels::{Activation, Padding, UpsampleMode};
pub use param::{Nadam, ParamId, ParamStore, Parameter, RunningStats, StatsId};
pub use tape::{Gradients, Mode, Tape, Var, IGNORE_LABEL, LOG_CLAMP};

use crate::error::{Error, Result};

/// Dense row-major array of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::invalid(
                "Tensor::new",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::NonScalarLoss(self.shape.clone()));
        }
        Ok(self.data[0])
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    /// `(n, c, h, w)` of a rank-4 tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::invalid(
                "dims4",
                format!("expected rank-4 tensor, got shape {:?}", self.shape),
            )),
        }
    }

    pub fn at4(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        let (_, cc, h, w) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        self.data[((n * cc + c) * h + y) * w + x]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Channel slice `[c0, c1)` of a rank-4 tensor.
    pub fn channels(&self, c0: usize, c1: usize) -> Result<Tensor> {
        let (n, c, h, w) = self.dims4()?;
        if c0 > c1 || c1 > c {
            return Err(Error::invalid(
                "channels",
                format!("range {c0}..{c1} outside {c} channels"),
            ));
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * (c1 - c0) * plane);
        for b in 0..n {
            let base = b * c * plane;
            out.extend_from_slice(&self.data[base + c0 * plane..base + c1 * plane]);
        }
        Tensor::new(vec![n, c1 - c0, h, w], out)
    }

    /// Sample slice `[n0, n1)` along the batch axis.
    pub fn batch_slice(&self, n0: usize, n1: usize) -> Result<Tensor> {
        let n = self.shape[0];
        if n0 > n1 || n1 > n {
            return Err(Error::invalid(
                "batch_slice",
                format!("range {n0}..{n1} outside batch of {n}"),
            ));
        }
        let per: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = n1 - n0;
        Tensor::new(shape, self.data[n0 * per..n1 * per].to_vec())
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items.first().ok_or_else(|| Error::invalid("stack", "no tensors"))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::shape("stack", &first.shape, &t.shape));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Tensor::new(shape, data)
    }

    /// Concatenate rank-4 tensors along the batch axis.
    pub fn cat_batch(items: &[Tensor]) -> Result<Tensor> {
        let first = items.first().ok_or_else(|| Error::invalid("cat_batch", "no tensors"))?;
        let mut data = Vec::new();
        let mut n = 0;
        for t in items {
            if t.shape[1..] != first.shape[1..] {
                return Err(Error::shape("cat_batch", &first.shape, &t.shape));
            }
            n += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = n;
        Tensor::new(shape, data)
    }

    /// Round every value through `f32`, the precision of the checkpoint format.
    pub fn snap_to_f32(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }
}
