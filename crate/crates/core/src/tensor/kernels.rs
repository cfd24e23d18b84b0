//! Raw forward/backward kernels over flat NCHW buffers.
//!
//! Convolution is cross-correlation (no kernel flip) lowered to im2col and a
//! dense `f64` GEMM. The tape in `tape.rs` owns shape checking; these
//! functions assume consistent extents.

/// Border handling for convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Padding {
    /// Zero padding that keeps the spatial extents for odd kernels at stride 1.
    #[default]
    Same,
    /// Mirror padding (reflection without repeating the edge pixel).
    SameReflect,
    /// No padding.
    Valid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum UpsampleMode {
    Nearest,
    /// Bilinear with the align-corners-false convention.
    #[default]
    Bilinear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Elu,
    Relu,
    Sigmoid,
}

/// Reflect an index into `[0, n)`; `-1 -> 1`, `n -> n - 2`.
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut j = i.rem_euclid(period);
    if j >= n {
        j = period - j;
    }
    j as usize
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_y: usize,
    pub pad_x: usize,
    pub oh: usize,
    pub ow: usize,
    pub reflect: bool,
}

impl ConvGeom {
    pub fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Whether im2col would be the identity (1x1 kernel, stride 1, no padding).
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad_x == 0 && self.pad_y == 0
    }

    fn src(&self, oy: usize, ky: usize, ox: usize, kx: usize) -> Option<(usize, usize)> {
        let iy = (oy * self.stride + ky) as isize - self.pad_y as isize;
        let ix = (ox * self.stride + kx) as isize - self.pad_x as isize;
        let inside = iy >= 0 && ix >= 0 && (iy as usize) < self.h && (ix as usize) < self.w;
        if inside {
            Some((iy as usize, ix as usize))
        } else if self.reflect {
            Some((reflect(iy, self.h), reflect(ix, self.w)))
        } else {
            None
        }
    }
}

/// Output columns `[lo, hi)` whose input column `ox + kx - pad_x` is inside
/// the image, for stride 1.
fn valid_span(g: &ConvGeom, kx: usize) -> (usize, usize) {
    let lo = g.pad_x.saturating_sub(kx).min(g.ow);
    let hi = (g.w + g.pad_x).saturating_sub(kx).min(g.ow).max(lo);
    (lo, hi)
}

pub(crate) fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let ncols = g.cols();
    let fast = g.stride == 1 && !g.reflect;
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                if fast {
                    let (lo, hi) = valid_span(g, kx);
                    for oy in 0..g.oh {
                        let d = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                        let iy = (oy + ky) as isize - g.pad_y as isize;
                        if iy < 0 || iy as usize >= g.h {
                            d.fill(0.0);
                            continue;
                        }
                        d[..lo].fill(0.0);
                        d[hi..].fill(0.0);
                        let start = iy as usize * g.w + lo + kx - g.pad_x;
                        d[lo..hi].copy_from_slice(&plane[start..start + hi - lo]);
                    }
                    continue;
                }
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        dst[oy * g.ow + ox] = match g.src(oy, ky, ox, kx) {
                            Some((iy, ix)) => plane[iy * g.w + ix],
                            None => 0.0,
                        };
                    }
                }
            }
        }
    }
}

pub(crate) fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let ncols = g.cols();
    let fast = g.stride == 1 && !g.reflect;
    for ci in 0..g.c {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                if fast {
                    let (lo, hi) = valid_span(g, kx);
                    for oy in 0..g.oh {
                        let iy = (oy + ky) as isize - g.pad_y as isize;
                        if iy < 0 || iy as usize >= g.h {
                            continue;
                        }
                        let start = iy as usize * g.w + lo + kx - g.pad_x;
                        let s = &src[oy * g.ow + lo..oy * g.ow + hi];
                        for (d, v) in plane[start..start + hi - lo].iter_mut().zip(s) {
                            *d += v;
                        }
                    }
                    continue;
                }
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        if let Some((iy, ix)) = g.src(oy, ky, ox, kx) {
                            plane[iy * g.w + ix] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `c = a' * b' + beta * c` for row-major matrices, `a'` is `m x k`, `b'` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices cover the addressed ranges (asserted above) and `c`
    // does not alias `a` or `b` because it is borrowed mutably.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn conv2d_forward(
    x: &[f64],
    n: usize,
    kernel: &[f64],
    out_ch: usize,
    bias: Option<&[f64]>,
    g: &ConvGeom,
    out: &mut [f64],
) {
    let in_per = g.c * g.h * g.w;
    let out_per = out_ch * g.cols();
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; g.rows() * g.cols()]
    };
    for b in 0..n {
        let xs = &x[b * in_per..(b + 1) * in_per];
        let os = &mut out[b * out_per..(b + 1) * out_per];
        let src: &[f64] = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, g, &mut cols);
            &cols
        };
        gemm(out_ch, g.rows(), g.cols(), kernel, false, src, false, 0.0, os);
        if let Some(bias) = bias {
            for (o, &bo) in bias.iter().enumerate() {
                for v in &mut os[o * g.cols()..(o + 1) * g.cols()] {
                    *v += bo;
                }
            }
        }
    }
}

/// Accumulates into `dx`, `dk` and `db` (each may be skipped).
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    x: &[f64],
    n: usize,
    kernel: &[f64],
    out_ch: usize,
    g: &ConvGeom,
    dy: &[f64],
    mut dx: Option<&mut [f64]>,
    mut dk: Option<&mut [f64]>,
    mut db: Option<&mut [f64]>,
) {
    let in_per = g.c * g.h * g.w;
    let out_per = out_ch * g.cols();
    let pointwise = g.is_pointwise();
    let mut cols = if pointwise {
        Vec::new()
    } else {
        vec![0.0; g.rows() * g.cols()]
    };
    let mut dcols = vec![0.0; g.rows() * g.cols()];
    for b in 0..n {
        let xs = &x[b * in_per..(b + 1) * in_per];
        let dys = &dy[b * out_per..(b + 1) * out_per];
        if let Some(dk) = dk.as_deref_mut() {
            let src: &[f64] = if pointwise {
                xs
            } else {
                im2col(xs, g, &mut cols);
                &cols
            };
            gemm(out_ch, g.cols(), g.rows(), dys, false, src, true, 1.0, dk);
        }
        if let Some(db) = db.as_deref_mut() {
            for (o, d) in db.iter_mut().enumerate() {
                *d += dys[o * g.cols()..(o + 1) * g.cols()].iter().sum::<f64>();
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxs = &mut dx[b * in_per..(b + 1) * in_per];
            if pointwise {
                gemm(g.rows(), out_ch, g.cols(), kernel, true, dys, false, 1.0, dxs);
            } else {
                gemm(g.rows(), out_ch, g.cols(), kernel, true, dys, false, 0.0, &mut dcols);
                col2im(&dcols, g, dxs);
            }
        }
    }
}

/// Returns the output and, per output element, the flat input index of its maximum.
pub(crate) fn max_pool_forward(
    x: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    window: usize,
    stride: usize,
) -> (Vec<f64>, Vec<usize>) {
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = base + oy * stride * w + ox * stride;
                for ky in 0..window {
                    for kx in 0..window {
                        let i = base + (oy * stride + ky) * w + ox * stride + kx;
                        // strict comparison keeps the first maximum in row-major order
                        if x[i] > best {
                            best = x[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    (out, arg)
}

/// Per-axis interpolation table for align-corners-false bilinear upsampling.
pub(crate) fn bilinear_taps(input: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..input * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub(crate) fn upsample_forward(
    x: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    factor: usize,
    mode: UpsampleMode,
) -> Vec<f64> {
    let (oh, ow) = (h * factor, w * factor);
    let mut out = vec![0.0; planes * oh * ow];
    match mode {
        UpsampleMode::Nearest => {
            for p in 0..planes {
                for oy in 0..oh {
                    for ox in 0..ow {
                        out[(p * oh + oy) * ow + ox] = x[(p * h + oy / factor) * w + ox / factor];
                    }
                }
            }
        }
        UpsampleMode::Bilinear => {
            let ty = bilinear_taps(h, factor);
            let tx = bilinear_taps(w, factor);
            for p in 0..planes {
                let src = &x[p * h * w..(p + 1) * h * w];
                for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                        let top = (1.0 - lx) * src[y0 * w + x0] + lx * src[y0 * w + x1];
                        let bot = (1.0 - lx) * src[y1 * w + x0] + lx * src[y1 * w + x1];
                        out[(p * oh + oy) * ow + ox] = (1.0 - ly) * top + ly * bot;
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn upsample_backward(
    dy: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    factor: usize,
    mode: UpsampleMode,
    dx: &mut [f64],
) {
    let (oh, ow) = (h * factor, w * factor);
    match mode {
        UpsampleMode::Nearest => {
            for p in 0..planes {
                for oy in 0..oh {
                    for ox in 0..ow {
                        dx[(p * h + oy / factor) * w + ox / factor] += dy[(p * oh + oy) * ow + ox];
                    }
                }
            }
        }
        UpsampleMode::Bilinear => {
            let ty = bilinear_taps(h, factor);
            let tx = bilinear_taps(w, factor);
            for p in 0..planes {
                let dst = &mut dx[p * h * w..(p + 1) * h * w];
                for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                        let g = dy[(p * oh + oy) * ow + ox];
                        dst[y0 * w + x0] += (1.0 - ly) * (1.0 - lx) * g;
                        dst[y0 * w + x1] += (1.0 - ly) * lx * g;
                        dst[y1 * w + x0] += ly * (1.0 - lx) * g;
                        dst[y1 * w + x1] += ly * lx * g;
                    }
                }
            }
        }
    }
}

pub(crate) fn activation_forward(x: f64, kind: Activation) -> f64 {
    match kind {
        Activation::Elu => {
            if x >= 0.0 {
                x
            } else {
                x.exp_m1()
            }
        }
        Activation::Relu => x.max(0.0),
        Activation::Sigmoid => {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        }
    }
}

/// Derivative expressed through input `x` and output `y`.
pub(crate) fn activation_derivative(x: f64, y: f64, kind: Activation) -> f64 {
    match kind {
        Activation::Elu => {
            if x >= 0.0 {
                1.0
            } else {
                y + 1.0
            }
        }
        Activation::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Activation::Sigmoid => y * (1.0 - y),
    }
}

pub(crate) fn softmax_forward(x: &[f64], n: usize, c: usize, plane: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        let base = b * c * plane;
        for p in 0..plane {
            let mut m = f64::NEG_INFINITY;
            for ch in 0..c {
                m = m.max(x[base + ch * plane + p]);
            }
            let mut s = 0.0;
            for ch in 0..c {
                let e = (x[base + ch * plane + p] - m).exp();
                out[base + ch * plane + p] = e;
                s += e;
            }
            for ch in 0..c {
                out[base + ch * plane + p] /= s;
            }
        }
    }
    out
}

pub(crate) fn softmax_backward(y: &[f64], dy: &[f64], n: usize, c: usize, plane: usize, dx: &mut [f64]) {
    for b in 0..n {
        let base = b * c * plane;
        for p in 0..plane {
            let mut dot = 0.0;
            for ch in 0..c {
                let i = base + ch * plane + p;
                dot += dy[i] * y[i];
            }
            for ch in 0..c {
                let i = base + ch * plane + p;
                dx[i] += y[i] * (dy[i] - dot);
            }
        }
    }
}

pub(crate) const BN_EPS: f64 = 1e-5;
pub(crate) const BN_MOMENTUM: f64 = 0.9;

/// Per-channel batch mean and biased variance over `n x plane` elements.
pub(crate) fn channel_moments(x: &[f64], n: usize, c: usize, plane: usize) -> (Vec<f64>, Vec<f64>) {
    let count = (n * plane) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for b in 0..n {
            let off = (b * c + ch) * plane;
            s += x[off..off + plane].iter().sum::<f64>();
        }
        let mu = s / count;
        let mut v = 0.0;
        for b in 0..n {
            let off = (b * c + ch) * plane;
            v += x[off..off + plane].iter().map(|t| (t - mu) * (t - mu)).sum::<f64>();
        }
        mean[ch] = mu;
        var[ch] = v / count;
    }
    (mean, var)
}
