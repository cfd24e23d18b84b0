//! Shared test helpers: seeded random tensors, brute-force loop oracles and
//! a central-difference gradient checker. Nothing here calls the kernels
//! under test.
#![allow(dead_code)]

use awmf_core::tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn idx4(shape: &[usize], n: usize, c: usize, y: usize, x: usize) -> usize {
    ((n * shape[1] + c) * shape[2] + y) * shape[3] + x
}

/// Direct quadruple-loop cross-correlation with zero "same" padding.
pub fn conv_oracle(x: &Tensor, k: &Tensor, b: &[f64], stride: usize) -> Tensor {
    let xs = x.shape();
    let ks = k.shape();
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (o, kh, kw) = (ks[0], ks[2], ks[3]);
    let (py, px) = (kh / 2, kw / 2);
    let oh = (h + 2 * py - kh) / stride + 1;
    let ow = (w + 2 * px - kw) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for bn in 0..n {
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = b[oc];
                    for ic in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - py as isize;
                                let ix = (ox * stride + kx) as isize - px as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                s += x.data()[idx4(xs, bn, ic, iy as usize, ix as usize)]
                                    * k.data()[idx4(ks, oc, ic, ky, kx)];
                            }
                        }
                    }
                    out[((bn * o + oc) * oh + oy) * ow + ox] = s;
                }
            }
        }
    }
    Tensor::new(vec![n, o, oh, ow], out).unwrap()
}

pub fn max_pool_oracle(x: &Tensor, window: usize, stride: usize) -> Tensor {
    let s = x.shape();
    let oh = (s[2] - window) / stride + 1;
    let ow = (s[3] - window) / stride + 1;
    let mut out = Vec::new();
    for n in 0..s[0] {
        for c in 0..s[1] {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut m = f64::NEG_INFINITY;
                    for dy in 0..window {
                        for dx in 0..window {
                            m = m.max(x.data()[idx4(s, n, c, oy * stride + dy, ox * stride + dx)]);
                        }
                    }
                    out.push(m);
                }
            }
        }
    }
    Tensor::new(vec![s[0], s[1], oh, ow], out).unwrap()
}

pub fn gap_oracle(x: &Tensor) -> Vec<f64> {
    let s = x.shape();
    let mut out = Vec::new();
    for n in 0..s[0] {
        for c in 0..s[1] {
            let mut acc = 0.0;
            for y in 0..s[2] {
                for xx in 0..s[3] {
                    acc += x.data()[idx4(s, n, c, y, xx)];
                }
            }
            out.push(acc / (s[2] * s[3]) as f64);
        }
    }
    out
}

pub fn fc_oracle(x: &Tensor, w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (n, f) = (x.shape()[0], x.shape()[1]);
    let o = w.shape()[0];
    let mut out = vec![0.0; n * o];
    for r in 0..n {
        for j in 0..o {
            let mut s = b.data()[j];
            for i in 0..f {
                s += x.data()[r * f + i] * w.data()[j * f + i];
            }
            out[r * o + j] = s;
        }
    }
    out
}

/// Align-corners-false bilinear interpolation evaluated pixel by pixel.
pub fn bilinear_oracle(src: &[f64], h: usize, w: usize, factor: usize) -> Vec<f64> {
    let coord = |o: usize, n: usize| {
        let s = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(n - 1);
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = Vec::new();
    for oy in 0..h * factor {
        for ox in 0..w * factor {
            let (y0, y1, ly) = coord(oy, h);
            let (x0, x1, lx) = coord(ox, w);
            let v = src[y0 * w + x0] * (1.0 - ly) * (1.0 - lx)
                + src[y0 * w + x1] * (1.0 - ly) * lx
                + src[y1 * w + x0] * ly * (1.0 - lx)
                + src[y1 * w + x1] * ly * lx;
            out.push(v);
        }
    }
    out
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Relative error used by every gradient check.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-7)
}

/// Central-difference check of `build` (inputs -> scalar) with step `h`.
/// Checks up to `samples` randomly chosen coordinates per input; returns the
/// worst relative error.
pub fn gradcheck<F>(inputs: &[Tensor], samples: usize, seed: u64, build: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let h = 1e-5;
    let eval = |ins: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars);
        tape.value(out).item().unwrap()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars);
    let grads = tape.gradients(out).unwrap();
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
        let picks: Vec<usize> = if t.numel() <= samples {
            (0..t.numel()).collect()
        } else {
            (0..samples).map(|_| r.random_range(0..t.numel())).collect()
        };
        for j in picks {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            worst = worst.max(rel_err(analytic.data()[j], numeric));
        }
    }
    worst
}

/// Random projection to a scalar so every output element carries a distinct weight.
pub fn project(tape: &mut Tape, y: Var, seed: u64) -> Var {
    let mut r = rng(seed);
    let shape = tape.value(y).shape().to_vec();
    let w = rand_tensor(&mut r, &shape);
    let c = tape.constant(w);
    let p = tape.mul(y, c).unwrap();
    tape.sum(p).unwrap()
}

/// Pixel counts `cm[truth][pred]`, skipping label 255.
pub fn confusion_oracle(pred: &[u8], gt: &[u8], m: usize) -> Vec<Vec<u64>> {
    let mut cm = vec![vec![0u64; m]; m];
    for i in 0..gt.len() {
        if gt[i] != 255 {
            cm[gt[i] as usize][pred[i] as usize] += 1;
        }
    }
    cm
}

/// (OP, PC, mIoU) straight from a count matrix; classes with a zero
/// denominator are left out of the mean.
pub fn scores_oracle(cm: &[Vec<u64>]) -> (f64, f64, f64) {
    let m = cm.len();
    let mut diag = 0u64;
    let mut total = 0u64;
    let (mut pc, mut npc, mut iou, mut niou) = (0.0, 0, 0.0, 0);
    for c in 0..m {
        let tp = cm[c][c];
        let mut col = 0;
        let mut row = 0;
        for o in 0..m {
            col += cm[o][c];
            row += cm[c][o];
            total += cm[c][o];
        }
        diag += tp;
        if col > 0 {
            pc += tp as f64 / col as f64;
            npc += 1;
        }
        let union = row + col - tp;
        if union > 0 {
            iou += tp as f64 / union as f64;
            niou += 1;
        }
    }
    (diag as f64 / total as f64, pc / npc as f64, iou / niou as f64)
}

/// Mean soft Dice over the classes present in `gt`, one class at a time.
pub fn dice_oracle(probs: &[f64], gt: &[u8], m: usize) -> f64 {
    let plane = gt.len();
    let mut sum = 0.0;
    let mut present = 0;
    for c in 0..m {
        let mut inter = 0.0;
        let mut ysum = 0.0;
        let mut tsum = 0.0;
        for p in 0..plane {
            if gt[p] == 255 {
                continue;
            }
            let t = if gt[p] as usize == c { 1.0 } else { 0.0 };
            let y = probs[c * plane + p];
            inter += y * t;
            ysum += y;
            tsum += t;
        }
        if tsum > 0.0 {
            sum += 2.0 * inter / (ysum + tsum);
            present += 1;
        }
    }
    sum / present as f64
}

/// Random per-pixel distributions (`m x plane`, channel-major).
pub fn rand_probs(rng: &mut ChaCha8Rng, m: usize, plane: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * plane];
    for p in 0..plane {
        let raw: Vec<f64> = (0..m).map(|_| rng.random_range(0.01..1.0)).collect();
        let s: f64 = raw.iter().sum();
        for c in 0..m {
            out[c * plane + p] = raw[c] / s;
        }
    }
    out
}

/// Random labels in `0..m`, roughly one in ten set to 255 when `ignore`.
pub fn rand_labels(rng: &mut ChaCha8Rng, m: usize, n: usize, ignore: bool) -> Vec<u8> {
    (0..n)
        .map(|_| {
            if ignore && rng.random_range(0..10) == 0 {
                255
            } else {
                rng.random_range(0..m) as u8
            }
        })
        .collect()
}
