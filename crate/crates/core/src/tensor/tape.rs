//! Reverse-mode tape.
//!
//! Every differentiable op appends a node holding its output and what the
//! backward pass needs. `backward` walks the nodes in exact reverse order and
//! accumulates gradients in a fixed order, so replaying a tape is bitwise
//! reproducible.

use super::kernels::{self, Activation, ConvGeom, Padding, UpsampleMode, BN_EPS};
use super::param::{ParamId, ParamStore, StatUpdate, StatsId};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Network evaluation mode (batch-norm statistics source).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug)]
enum Op {
    Constant,
    Leaf,
    Param(ParamId),
    Conv2d {
        x: Var,
        k: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Upsample {
        x: Var,
        factor: usize,
        mode: UpsampleMode,
    },
    Act {
        x: Var,
        kind: Activation,
    },
    Softmax {
        x: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    GlobalAvgPool {
        x: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Concat {
        xs: Vec<Var>,
    },
    Scale {
        x: Var,
        s: Var,
    },
    Column {
        x: Var,
        col: usize,
    },
    Crop {
        x: Var,
        top: usize,
        left: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Sum {
        x: Var,
    },
    WeightedCe {
        y: Var,
        labels: Vec<u8>,
        alpha: Vec<f64>,
    },
    SquaredError {
        y: Var,
        target: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Record of executed operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    stat_updates: Vec<StatUpdate>,
}

/// Gradients of one backward pass, indexed by tape node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

/// Label value excluded from losses and metrics.
pub const IGNORE_LABEL: u8 = 255;

/// Smallest probability fed to the logarithm.
pub const LOG_CLAMP: f64 = 1e-12;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(name));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Input without gradient tracking.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Constant,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Gradient-tracked input not tied to a parameter.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Gradient-tracked copy of a stored parameter.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: store.get(id).value.clone(),
            op: Op::Param(id),
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Fold the running-statistics updates recorded by train-mode batch
    /// norms into `store`.
    pub fn commit_running_stats(&mut self, store: &mut ParamStore) {
        store.apply_stat_updates(std::mem::take(&mut self.stat_updates));
    }

    /// Cross-correlation of `x` (`N x C x H x W`) with `k` (`O x C x KH x KW`).
    pub fn conv2d(&mut self, x: Var, k: Var, b: Option<Var>, stride: usize, padding: Padding) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let (o, kc, kh, kw) = self.value(k).dims4()?;
        if kc != c {
            return Err(Error::shape("conv2d", self.value(x).shape(), self.value(k).shape()));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be at least 1"));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [o] {
                return Err(Error::shape("conv2d bias", self.value(b).shape(), &[o]));
            }
        }
        let (pad_y, pad_x) = match padding {
            Padding::Valid => (0, 0),
            Padding::Same | Padding::SameReflect => {
                if kh % 2 == 0 || kw % 2 == 0 {
                    return Err(Error::invalid("conv2d", "same padding needs odd kernel extents"));
                }
                (kh / 2, kw / 2)
            }
        };
        if padding == Padding::SameReflect && (pad_y >= h || pad_x >= w) {
            return Err(Error::invalid("conv2d", "reflect padding wider than input"));
        }
        if h + 2 * pad_y < kh || w + 2 * pad_x < kw {
            return Err(Error::shape("conv2d", self.value(x).shape(), self.value(k).shape()));
        }
        let geom = ConvGeom {
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad_y,
            pad_x,
            oh: (h + 2 * pad_y - kh) / stride + 1,
            ow: (w + 2 * pad_x - kw) / stride + 1,
            reflect: padding == Padding::SameReflect,
        };
        let mut out = vec![0.0; n * o * geom.oh * geom.ow];
        kernels::conv2d_forward(
            self.value(x).data(),
            n,
            self.value(k).data(),
            o,
            b.map(|b| self.value(b).data()),
            &geom,
            &mut out,
        );
        let value = Tensor::new(vec![n, o, geom.oh, geom.ow], out)?;
        let mut inputs = vec![x, k];
        inputs.extend(b);
        let rg = self.rg(&inputs);
        self.push(value, Op::Conv2d { x, k, b, geom }, rg, "conv2d")
    }

    pub fn max_pool2d(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if window == 0 || stride == 0 || window > h || window > w {
            return Err(Error::invalid(
                "max_pool2d",
                format!("window {window} stride {stride} on {h}x{w}"),
            ));
        }
        if (h - window) % stride != 0 || (w - window) % stride != 0 {
            return Err(Error::invalid(
                "max_pool2d",
                format!("extents {h}x{w} not divisible under window {window} stride {stride}"),
            ));
        }
        let (out, argmax) = kernels::max_pool_forward(self.value(x).data(), n * c, h, w, window, stride);
        let value = Tensor::new(vec![n, c, (h - window) / stride + 1, (w - window) / stride + 1], out)?;
        let rg = self.rg(&[x]);
        self.push(value, Op::MaxPool { x, argmax }, rg, "max_pool2d")
    }

    pub fn upsample(&mut self, x: Var, factor: usize, mode: UpsampleMode) -> Result<Var> {
        if factor < 1 {
            return Err(Error::invalid("upsample", "factor must be at least 1"));
        }
        let (n, c, h, w) = self.value(x).dims4()?;
        let out = kernels::upsample_forward(self.value(x).data(), n * c, h, w, factor, mode);
        let value = Tensor::new(vec![n, c, h * factor, w * factor], out)?;
        let rg = self.rg(&[x]);
        self.push(value, Op::Upsample { x, factor, mode }, rg, "upsample")
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let src = self.value(x);
        let data = src
            .data()
            .iter()
            .map(|&v| kernels::activation_forward(v, kind))
            .collect();
        let value = Tensor::new(src.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        self.push(value, Op::Act { x, kind }, rg, "activation")
    }

    pub fn elu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Elu)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Sigmoid)
    }

    /// Per-pixel softmax over the channel axis of a rank-4 tensor.
    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let out = kernels::softmax_forward(self.value(x).data(), n, c, h * w);
        let value = Tensor::new(vec![n, c, h, w], out)?;
        let rg = self.rg(&[x]);
        self.push(value, Op::Softmax { x }, rg, "softmax_channels")
    }

    /// Batch normalization. Train mode normalizes with batch statistics and
    /// records a running-statistics update (applied by the caller through
    /// [`ParamStore`]); eval mode uses the stored running statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        store: &ParamStore,
        stats: StatsId,
        mode: Mode,
    ) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::shape("batch_norm", self.value(gamma).shape(), &[c]));
        }
        let plane = h * w;
        let (mean, var) = match mode {
            Mode::Train => {
                let (mean, var) = kernels::channel_moments(self.value(x).data(), n, c, plane);
                self.stat_updates.push(StatUpdate {
                    id: stats,
                    mean: mean.clone(),
                    var: var.clone(),
                });
                (mean, var)
            }
            Mode::Eval => {
                let s = store.stats(stats);
                if !s.initialized {
                    return Err(Error::UninitializedStats(s.name.clone()));
                }
                (s.mean.clone(), s.var.clone())
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let xd = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * plane;
                for i in off..off + plane {
                    let xh = (xd[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + bt[ch];
                }
            }
        }
        let value = Tensor::new(vec![n, c, h, w], out)?;
        let rg = self.rg(&[x, gamma, beta]);
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            train: mode == Mode::Train,
        };
        self.push(value, op, rg, "batch_norm")
    }

    /// Spatial mean per channel: `N x C x H x W -> N x C`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let plane = h * w;
        let xd = self.value(x).data();
        let out = (0..n * c)
            .map(|i| xd[i * plane..(i + 1) * plane].iter().sum::<f64>() / plane as f64)
            .collect();
        let value = Tensor::new(vec![n, c], out)?;
        let rg = self.rg(&[x]);
        self.push(value, Op::GlobalAvgPool { x }, rg, "global_avg_pool")
    }

    /// Affine map `x W^T + b` with `x: N x F`, `W: O x F`, `b: O`.
    pub fn fully_connected(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let (n, f, o) = match (&xs[..], &ws[..]) {
            ([n, f], [o, wf]) if f == wf => (*n, *f, *o),
            _ => return Err(Error::shape("fully_connected", &xs, &ws)),
        };
        if self.value(b).shape() != [o] {
            return Err(Error::shape("fully_connected bias", self.value(b).shape(), &[o]));
        }
        let mut out = vec![0.0; n * o];
        kernels::gemm(
            n,
            f,
            o,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            0.0,
            &mut out,
        );
        let bd = self.value(b).data();
        for row in out.chunks_mut(o) {
            for (v, bb) in row.iter_mut().zip(bd) {
                *v += bb;
            }
        }
        let value = Tensor::new(vec![n, o], out)?;
        let rg = self.rg(&[x, w, b]);
        self.push(value, Op::Linear { x, w, b }, rg, "fully_connected")
    }

    /// Channel-wise concatenation in argument order.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::invalid("concat_channels", "no inputs"))?;
        let (n, _, h, w) = self.value(first).dims4()?;
        let mut total_c = 0;
        for &v in xs {
            let (vn, vc, vh, vw) = self.value(v).dims4()?;
            if (vn, vh, vw) != (n, h, w) {
                return Err(Error::shape(
                    "concat_channels",
                    self.value(first).shape(),
                    self.value(v).shape(),
                ));
            }
            total_c += vc;
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * total_c * plane);
        for b in 0..n {
            for &v in xs {
                let t = self.value(v);
                let c = t.shape()[1];
                out.extend_from_slice(&t.data()[b * c * plane..(b + 1) * c * plane]);
            }
        }
        let value = Tensor::new(vec![n, total_c, h, w], out)?;
        let rg = self.rg(xs);
        self.push(value, Op::Concat { xs: xs.to_vec() }, rg, "concat_channels")
    }

    /// Multiply each sample by a scalar: `s` has one element (shared) or one per sample.
    pub fn scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let xt = self.value(x);
        let n = xt.shape()[0];
        let per = xt.numel() / n.max(1);
        let sv = self.value(s).data();
        if sv.len() != 1 && sv.len() != n {
            return Err(Error::shape("scale", xt.shape(), self.value(s).shape()));
        }
        let data = xt
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * if sv.len() == 1 { sv[0] } else { sv[i / per] })
            .collect();
        let value = Tensor::new(xt.shape().to_vec(), data)?;
        let rg = self.rg(&[x, s]);
        self.push(value, Op::Scale { x, s }, rg, "scale")
    }

    /// Multiply every element by a constant scalar.
    pub fn scale_by_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        let s = self.constant(Tensor::scalar(s));
        self.scale(x, s)
    }

    /// Column `col` of an `N x K` matrix as a length-`N` vector.
    pub fn column(&mut self, x: Var, col: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let (n, k) = match xs[..] {
            [n, k] if col < k => (n, k),
            _ => return Err(Error::invalid("column", format!("column {col} of shape {xs:?}"))),
        };
        let xd = self.value(x).data();
        let data = (0..n).map(|r| xd[r * k + col]).collect();
        let value = Tensor::new(vec![n], data)?;
        let rg = self.rg(&[x]);
        self.push(value, Op::Column { x, col }, rg, "column")
    }

    /// Spatial crop `[top, top+h) x [left, left+w)` of a rank-4 tensor.
    pub fn crop(&mut self, x: Var, top: usize, left: usize, h: usize, w: usize) -> Result<Var> {
        let (n, c, ih, iw) = self.value(x).dims4()?;
        if top + h > ih || left + w > iw {
            return Err(Error::invalid(
                "crop",
                format!("{h}x{w} at ({top},{left}) outside {ih}x{iw}"),
            ));
        }
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * h * w);
        for p in 0..n * c {
            for y in top..top + h {
                let row = (p * ih + y) * iw;
                out.extend_from_slice(&xd[row + left..row + left + w]);
            }
        }
        let value = Tensor::new(vec![n, c, h, w], out)?;
        let rg = self.rg(&[x]);
        self.push(value, Op::Crop { x, top, left }, rg, "crop")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape("add", self.value(a).shape(), self.value(b).shape()));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Add { a, b }, rg, "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape("mul", self.value(a).shape(), self.value(b).shape()));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Mul { a, b }, rg, "mul")
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(value, Op::Sum { x }, rg, "sum")
    }

    /// `-sum_j alpha[l_j] log(max(y[l_j](j), 1e-12))` over pixels whose label is
    /// not [`IGNORE_LABEL`]; `labels` is `N x H x W`, `y` is `N x M x H x W`.
    pub fn weighted_cross_entropy(&mut self, y: Var, labels: &[u8], alpha: &[f64]) -> Result<Var> {
        let (n, m, h, w) = self.value(y).dims4()?;
        if labels.len() != n * h * w {
            return Err(Error::shape(
                "weighted_cross_entropy",
                self.value(y).shape(),
                &[n, h, w],
            ));
        }
        if alpha.len() != m {
            return Err(Error::shape("weighted_cross_entropy alpha", &[alpha.len()], &[m]));
        }
        let plane = h * w;
        let yd = self.value(y).data();
        let mut loss = 0.0;
        for b in 0..n {
            for p in 0..plane {
                let l = labels[b * plane + p];
                if l == IGNORE_LABEL {
                    continue;
                }
                let l = l as usize;
                if l >= m {
                    return Err(Error::invalid(
                        "weighted_cross_entropy",
                        format!("label {l} with {m} classes"),
                    ));
                }
                loss -= alpha[l] * yd[(b * m + l) * plane + p].max(LOG_CLAMP).ln();
            }
        }
        let rg = self.rg(&[y]);
        let op = Op::WeightedCe {
            y,
            labels: labels.to_vec(),
            alpha: alpha.to_vec(),
        };
        self.push(Tensor::scalar(loss), op, rg, "weighted_cross_entropy")
    }

    /// `sum (target - y)^2` over all elements.
    pub fn squared_error(&mut self, y: Var, target: &Tensor) -> Result<Var> {
        if self.value(y).shape() != target.shape() {
            return Err(Error::shape("squared_error", self.value(y).shape(), target.shape()));
        }
        let loss = self
            .value(y)
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (b - a) * (b - a))
            .sum();
        let rg = self.rg(&[y]);
        let op = Op::SquaredError {
            y,
            target: target.data().to_vec(),
        };
        self.push(Tensor::scalar(loss), op, rg, "squared_error")
    }

    /// Gradients of `loss` with respect to every gradient-tracked node.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(lt.shape().to_vec(), vec![1.0])?);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else {
                continue;
            };
            self.backprop(node, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    /// Backpropagate `loss` and write parameter gradients into `store`.
    /// Every parameter gradient in the store is overwritten; parameters not
    /// reachable from `loss` receive zero.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.gradients(loss)?;
        store.zero_grads();
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &grads.grads[i]) {
                let dst = store.get_mut(*id).grad.data_mut();
                for (d, s) in dst.iter_mut().zip(g.data()) {
                    *d += s;
                }
            }
        }
        Ok(())
    }

    fn accum<'g>(&self, grads: &'g mut [Option<Tensor>], v: Var) -> Option<&'g mut [f64]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.nodes[v.0].value.shape()));
        }
        slot.as_mut().map(|t| t.data_mut())
    }

    fn backprop(&self, node: &Node, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        let g = dy.data();
        match &node.op {
            Op::Constant | Op::Leaf | Op::Param(_) => {}
            Op::Conv2d { x, k, b, geom } => {
                let (n, _, _, _) = self.value(*x).dims4().expect("rank checked in forward");
                let o = self.value(*k).shape()[0];
                let xv = self.value(*x).data();
                let kv = self.value(*k).data();
                // take each gradient slot out so the three can be borrowed at once
                let mut dx = self.take_slot(grads, *x);
                let mut dk = self.take_slot(grads, *k);
                let mut db = b.and_then(|b| self.take_slot(grads, b));
                kernels::conv2d_backward(
                    xv,
                    n,
                    kv,
                    o,
                    geom,
                    g,
                    dx.as_mut().map(|t| t.data_mut()),
                    dk.as_mut().map(|t| t.data_mut()),
                    db.as_mut().map(|t| t.data_mut()),
                );
                for (v, t) in [(Some(*x), dx), (Some(*k), dk), (*b, db)] {
                    if let (Some(v), Some(t)) = (v, t) {
                        grads[v.0] = Some(t);
                    }
                }
            }
            Op::MaxPool { x, argmax } => {
                if let Some(dx) = self.accum(grads, *x) {
                    for (gi, &src) in g.iter().zip(argmax) {
                        dx[src] += gi;
                    }
                }
            }
            Op::Upsample { x, factor, mode } => {
                let (n, c, h, w) = self.value(*x).dims4().expect("rank checked in forward");
                if let Some(dx) = self.accum(grads, *x) {
                    kernels::upsample_backward(g, n * c, h, w, *factor, *mode, dx);
                }
            }
            Op::Act { x, kind } => {
                let xv = self.value(*x).data();
                let yv = node.value.data();
                if let Some(dx) = self.accum(grads, *x) {
                    for i in 0..dx.len() {
                        dx[i] += g[i] * kernels::activation_derivative(xv[i], yv[i], *kind);
                    }
                }
            }
            Op::Softmax { x } => {
                let (n, c, h, w) = node.value.dims4().expect("rank checked in forward");
                if let Some(dx) = self.accum(grads, *x) {
                    kernels::softmax_backward(node.value.data(), g, n, c, h * w, dx);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let (n, c, h, w) = node.value.dims4().expect("rank checked in forward");
                let plane = h * w;
                let count = (n * plane) as f64;
                let gam = self.value(*gamma).data();
                let mut sum_dy = vec![0.0; c];
                let mut sum_dy_xhat = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * plane;
                        for i in off..off + plane {
                            sum_dy[ch] += g[i];
                            sum_dy_xhat[ch] += g[i] * xhat[i];
                        }
                    }
                }
                if let Some(dg) = self.accum(grads, *gamma) {
                    for ch in 0..c {
                        dg[ch] += sum_dy_xhat[ch];
                    }
                }
                if let Some(dbeta) = self.accum(grads, *beta) {
                    for ch in 0..c {
                        dbeta[ch] += sum_dy[ch];
                    }
                }
                if let Some(dx) = self.accum(grads, *x) {
                    for b in 0..n {
                        for ch in 0..c {
                            let off = (b * c + ch) * plane;
                            let scale = gam[ch] * inv_std[ch];
                            for i in off..off + plane {
                                dx[i] += if *train {
                                    scale / count * (count * g[i] - sum_dy[ch] - xhat[i] * sum_dy_xhat[ch])
                                } else {
                                    scale * g[i]
                                };
                            }
                        }
                    }
                }
            }
            Op::GlobalAvgPool { x } => {
                let (_, _, h, w) = self.value(*x).dims4().expect("rank checked in forward");
                let plane = h * w;
                if let Some(dx) = self.accum(grads, *x) {
                    for (i, gi) in g.iter().enumerate() {
                        for d in &mut dx[i * plane..(i + 1) * plane] {
                            *d += gi / plane as f64;
                        }
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let (n, f) = (self.value(*x).shape()[0], self.value(*x).shape()[1]);
                let o = self.value(*w).shape()[0];
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                if let Some(dx) = self.accum(grads, *x) {
                    kernels::gemm(n, o, f, g, false, &wv, false, 1.0, dx);
                }
                if let Some(dw) = self.accum(grads, *w) {
                    kernels::gemm(o, n, f, g, true, &xv, false, 1.0, dw);
                }
                if let Some(db) = self.accum(grads, *b) {
                    for row in g.chunks(o) {
                        for (d, gi) in db.iter_mut().zip(row) {
                            *d += gi;
                        }
                    }
                }
            }
            Op::Concat { xs } => {
                let (n, total_c, h, w) = node.value.dims4().expect("rank checked in forward");
                let plane = h * w;
                let mut c0 = 0;
                for &v in xs {
                    let c = self.value(v).shape()[1];
                    if let Some(dx) = self.accum(grads, v) {
                        for b in 0..n {
                            let src = &g[(b * total_c + c0) * plane..(b * total_c + c0 + c) * plane];
                            for (d, s) in dx[b * c * plane..(b + 1) * c * plane].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    c0 += c;
                }
            }
            Op::Scale { x, s } => {
                let xv = self.value(*x).data();
                let sv = self.value(*s).data();
                let per = xv.len() / self.value(*x).shape()[0].max(1);
                let pick = |i: usize| if sv.len() == 1 { 0 } else { i / per };
                if let Some(dx) = self.accum(grads, *x) {
                    for i in 0..dx.len() {
                        dx[i] += g[i] * sv[pick(i)];
                    }
                }
                if let Some(ds) = self.accum(grads, *s) {
                    for i in 0..xv.len() {
                        ds[pick(i)] += g[i] * xv[i];
                    }
                }
            }
            Op::Column { x, col } => {
                let k = self.value(*x).shape()[1];
                if let Some(dx) = self.accum(grads, *x) {
                    for (r, gi) in g.iter().enumerate() {
                        dx[r * k + col] += gi;
                    }
                }
            }
            Op::Crop { x, top, left } => {
                let (n, c, ih, iw) = self.value(*x).dims4().expect("rank checked in forward");
                let (_, _, h, w) = node.value.dims4().expect("rank checked in forward");
                if let Some(dx) = self.accum(grads, *x) {
                    for p in 0..n * c {
                        for y in 0..h {
                            let dst = (p * ih + top + y) * iw + left;
                            let src = (p * h + y) * w;
                            for xx in 0..w {
                                dx[dst + xx] += g[src + xx];
                            }
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [a, b] {
                    if let Some(dx) = self.accum(grads, *v) {
                        for (d, gi) in dx.iter_mut().zip(g) {
                            *d += gi;
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if let Some(da) = self.accum(grads, *a) {
                    for i in 0..da.len() {
                        da[i] += g[i] * bv[i];
                    }
                }
                if let Some(db) = self.accum(grads, *b) {
                    for i in 0..db.len() {
                        db[i] += g[i] * av[i];
                    }
                }
            }
            Op::Sum { x } => {
                if let Some(dx) = self.accum(grads, *x) {
                    for d in dx.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::WeightedCe { y, labels, alpha } => {
                let (n, m, h, w) = self.value(*y).dims4().expect("rank checked in forward");
                let plane = h * w;
                let yv = self.value(*y).data();
                if let Some(dy_) = self.accum(grads, *y) {
                    for b in 0..n {
                        for p in 0..plane {
                            let l = labels[b * plane + p];
                            if l == IGNORE_LABEL {
                                continue;
                            }
                            let i = (b * m + l as usize) * plane + p;
                            // d/dy of -log(max(y, clamp)) vanishes below the clamp
                            if yv[i] > LOG_CLAMP {
                                dy_[i] -= g[0] * alpha[l as usize] / yv[i];
                            }
                        }
                    }
                }
            }
            Op::SquaredError { y, target } => {
                let yv = self.value(*y).data();
                if let Some(dy_) = self.accum(grads, *y) {
                    for i in 0..dy_.len() {
                        dy_[i] += g[0] * 2.0 * (yv[i] - target[i]);
                    }
                }
            }
        }
    }

    fn take_slot(&self, grads: &mut [Option<Tensor>], v: Var) -> Option<Tensor> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        Some(
            grads[v.0]
                .take()
                .unwrap_or_else(|| Tensor::zeros(self.nodes[v.0].value.shape())),
        )
    }
}
