//! Synthetic slides with a fine-texture factor and a coarse-context factor.
//!
//! The fine factor is a period-2 texture (1 px checkerboard versus 1 px
//! horizontal lines) that averages out in any aligned 2x2 block, so it is
//! only visible at full resolution. A fainter period-4 copy survives 2x but
//! not 4x averaging, so the middle field of view still sees the factor. The coarse factor is constant on the
//! nearest-dot cells of a sparse dot grid and each dot is bright or dark by
//! its cell's value. Dots are spaced wider than a target window, so the
//! factor needs a wide field of view to be read reliably.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{Image, LabelMap, Slide};
use crate::error::{Error, Result};
use crate::tensor::IGNORE_LABEL;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthMode {
    /// Labels are the coarse factor only; the fine texture is a nuisance.
    TwoClass,
    /// Label = 2 * coarse + fine.
    FourClass,
}

impl SynthMode {
    pub fn classes(self) -> usize {
        match self {
            SynthMode::TwoClass => 2,
            SynthMode::FourClass => 4,
        }
    }

    pub fn default_ratios(self) -> Vec<f64> {
        match self {
            SynthMode::TwoClass => vec![0.67, 0.33],
            SynthMode::FourClass => vec![0.25, 0.29, 0.23, 0.23],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub mode: SynthMode,
    pub width: usize,
    pub height: usize,
    /// Target area fraction per class; must sum to 1.
    pub ratios: Vec<f64>,
    /// Emit a tinted RGB raster instead of grayscale.
    pub color: bool,
    /// Lattice spacing (px) of the coarse-factor field.
    pub coarse_scale: f64,
    /// Lattice spacing (px) of the fine-factor field.
    pub fine_scale: f64,
    /// Amplitude of the period-2 texture.
    pub fine_amplitude: f64,
    /// Amplitude of the period-4 texture.
    pub mid_amplitude: f64,
    /// Grid spacing of coarse-cue dots.
    pub dot_spacing: f64,
    pub dot_radius: f64,
    pub dot_amplitude: f64,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
}

impl SynthConfig {
    pub fn new(mode: SynthMode) -> Self {
        SynthConfig {
            mode,
            width: 256,
            height: 256,
            ratios: mode.default_ratios(),
            color: false,
            coarse_scale: 64.0,
            fine_scale: 48.0,
            fine_amplitude: 0.12,
            mid_amplitude: 0.08,
            dot_spacing: 48.0,
            dot_radius: 5.0,
            dot_amplitude: 0.25,
            noise: 0.08,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.mode.classes();
        if self.ratios.len() != m {
            return Err(Error::Config(format!(
                "{} ratios given for {m} classes",
                self.ratios.len()
            )));
        }
        let sum: f64 = self.ratios.iter().sum();
        if self.ratios.iter().any(|r| !r.is_finite() || *r < 0.0) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Config(format!(
                "class ratios {:?} must be non-negative and sum to 1",
                self.ratios
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("slide extents must be positive".into()));
        }
        let positive = [self.coarse_scale, self.fine_scale, self.dot_spacing];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Config("field scales and dot spacing must be positive".into()));
        }
        let non_negative = [
            self.fine_amplitude,
            self.mid_amplitude,
            self.dot_radius,
            self.dot_amplitude,
            self.noise,
        ];
        if non_negative.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config(
                "amplitudes, radius and noise must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Value noise: smoothstep interpolation of a Gaussian lattice, two octaves.
fn smooth_field(rng: &mut ChaCha8Rng, w: usize, h: usize, scale: f64) -> Vec<f64> {
    let mut field = vec![0.0; w * h];
    for (octave, amp) in [(1.0, 1.0), (0.5, 0.5)] {
        let s = scale * octave;
        let gw = (w as f64 / s).ceil() as usize + 2;
        let gh = (h as f64 / s).ceil() as usize + 2;
        let lattice: Vec<f64> = (0..gw * gh).map(|_| rng.sample(StandardNormal)).collect();
        let (ox, oy): (f64, f64) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
        let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
        for y in 0..h {
            let fy = y as f64 / s + oy;
            let (iy, ty) = (fy.floor() as usize, smooth(fy.fract()));
            for x in 0..w {
                let fx = x as f64 / s + ox;
                let (ix, tx) = (fx.floor() as usize, smooth(fx.fract()));
                let g = |yy: usize, xx: usize| lattice[yy * gw + xx];
                let top = g(iy, ix) * (1.0 - tx) + g(iy, ix + 1) * tx;
                let bot = g(iy + 1, ix) * (1.0 - tx) + g(iy + 1, ix + 1) * tx;
                field[y * w + x] += amp * (top * (1.0 - ty) + bot * ty);
            }
        }
    }
    field
}

/// Mark the `round(fraction * |pixels|)` lowest-valued pixels as 0 and the
/// rest as 1. Ties are broken by pixel index so the split is exact.
fn split_by_rank(field: &[f64], pixels: &[usize], fraction: f64, out: &mut [u8]) {
    let mut order = pixels.to_vec();
    order.sort_by(|&a, &b| field[a].total_cmp(&field[b]).then(a.cmp(&b)));
    let k = (fraction * order.len() as f64).round() as usize;
    for (rank, &p) in order.iter().enumerate() {
        out[p] = u8::from(rank >= k);
    }
}

/// Dot centres on a jittered `spacing` grid.
fn dot_centres(rng: &mut ChaCha8Rng, w: usize, h: usize, spacing: f64) -> Vec<(f64, f64)> {
    let cells_y = (h as f64 / spacing).ceil() as usize;
    let cells_x = (w as f64 / spacing).ceil() as usize;
    let mut dots = Vec::with_capacity(cells_y * cells_x);
    for cy in 0..cells_y {
        for cx in 0..cells_x {
            let py = ((cy as f64 + rng.random_range(0.0..1.0)) * spacing).min(h as f64 - 0.5);
            let px = ((cx as f64 + rng.random_range(0.0..1.0)) * spacing).min(w as f64 - 0.5);
            dots.push((py, px));
        }
    }
    dots
}

/// Index of the nearest dot for every pixel centre (lowest index on ties).
fn voronoi(dots: &[(f64, f64)], w: usize, h: usize) -> Vec<usize> {
    let mut owner = vec![0; w * h];
    for y in 0..h {
        for x in 0..w {
            let (cy, cx) = (y as f64 + 0.5, x as f64 + 0.5);
            let mut best = (f64::INFINITY, 0);
            for (i, &(py, px)) in dots.iter().enumerate() {
                let d = (cy - py).powi(2) + (cx - px).powi(2);
                if d < best.0 {
                    best = (d, i);
                }
            }
            owner[y * w + x] = best.1;
        }
    }
    owner
}

/// Coarse factor per dot cell: cells ranked by the smooth field at their
/// dot, the lowest-ranked prefix whose area is closest to `fraction` gets 0.
fn coarse_cells(field: &[f64], dots: &[(f64, f64)], owner: &[usize], w: usize, fraction: f64) -> Vec<u8> {
    let mut area = vec![0usize; dots.len()];
    for &o in owner {
        area[o] += 1;
    }
    let at = |&(py, px): &(f64, f64)| field[py as usize * w + px as usize];
    let mut order: Vec<usize> = (0..dots.len()).collect();
    order.sort_by(|&a, &b| at(&dots[a]).total_cmp(&at(&dots[b])).then(a.cmp(&b)));
    let target = fraction * owner.len() as f64;
    let (mut best_k, mut best_gap, mut acc) = (0, target, 0.0);
    for (k, &i) in order.iter().enumerate() {
        acc += area[i] as f64;
        if (acc - target).abs() < best_gap {
            (best_k, best_gap) = (k + 1, (acc - target).abs());
        }
    }
    let mut class = vec![1u8; dots.len()];
    for &i in &order[..best_k] {
        class[i] = 0;
    }
    class
}

/// Generate one slide. Identical `(config, seed)` give identical bytes.
///
/// The coarse factor is constant on the nearest-dot cells of a jittered dot
/// grid and each dot's polarity shows its cell's value, so it can be read
/// off any field of view wide enough to hold the nearby dots. The fine
/// factor is a rank split of a smooth field inside each coarse group and
/// shows only as a period-2 texture.
pub fn synth_generate(config: &SynthConfig, seed: u64, id: impl Into<String>) -> Result<Slide> {
    config.validate()?;
    let (w, h) = (config.width, config.height);
    let n = w * h;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coarse_field = smooth_field(&mut rng, w, h, config.coarse_scale);
    let fine_field = smooth_field(&mut rng, w, h, config.fine_scale);
    let dots = dot_centres(&mut rng, w, h, config.dot_spacing);
    let owner = voronoi(&dots, w, h);
    let r = &config.ratios;
    let all: Vec<usize> = (0..n).collect();

    let coarse_fraction = match config.mode {
        SynthMode::TwoClass => r[0],
        SynthMode::FourClass => r[0] + r[1],
    };
    let cell_class = coarse_cells(&coarse_field, &dots, &owner, w, coarse_fraction);
    let coarse: Vec<u8> = owner.iter().map(|&o| cell_class[o]).collect();
    let mut fine = vec![0u8; n];
    let labels: Vec<u8> = match config.mode {
        SynthMode::TwoClass => {
            split_by_rank(&fine_field, &all, 0.5, &mut fine);
            coarse.clone()
        }
        SynthMode::FourClass => {
            for c in 0..2u8 {
                let (a, b) = (r[2 * c as usize], r[2 * c as usize + 1]);
                let group: Vec<usize> = all.iter().copied().filter(|&p| coarse[p] == c).collect();
                let frac = if a + b > 0.0 { a / (a + b) } else { 0.5 };
                split_by_rank(&fine_field, &group, frac, &mut fine);
            }
            (0..n).map(|p| 2 * coarse[p] + fine[p]).collect()
        }
    };

    let mut value = vec![0.5; n];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let sign = |v: usize| if v % 2 == 0 { 1.0 } else { -1.0 };
            let (fine2, fine4) = if fine[p] == 0 {
                (sign(x + y), sign(x / 2 + y / 2))
            } else {
                (sign(y), sign(y / 2))
            };
            value[p] += config.fine_amplitude * fine2 + config.mid_amplitude * fine4;
        }
    }

    let rad = config.dot_radius;
    for (i, &(py, px)) in dots.iter().enumerate() {
        let amp = if cell_class[i] == 0 {
            config.dot_amplitude
        } else {
            -config.dot_amplitude
        };
        let y0 = (py - rad).floor().max(0.0) as usize;
        let y1 = ((py + rad).ceil() as usize).min(h - 1);
        let x0 = (px - rad).floor().max(0.0) as usize;
        let x1 = ((px + rad).ceil() as usize).min(w - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let d2 = (y as f64 + 0.5 - py).powi(2) + (x as f64 + 0.5 - px).powi(2);
                if d2 <= rad * rad {
                    value[y * w + x] += amp;
                }
            }
        }
    }

    for v in &mut value {
        *v += config.noise * rng.sample::<f64, _>(StandardNormal);
    }
    let quant = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let (channels, data) = if config.color {
        let tint = [(1.0, 0.0), (0.75, 0.1), (0.85, 0.12)];
        let data = value
            .iter()
            .flat_map(|&v| tint.map(|(a, b)| quant(a * v + b)))
            .collect();
        (3, data)
    } else {
        (1, value.iter().map(|&v| quant(v)).collect())
    };
    let image = Image {
        width: w,
        height: h,
        channels,
        data,
    };
    let labels = LabelMap {
        width: w,
        height: h,
        data: labels,
    };
    Slide::new(id, image, labels)
}

/// Fraction of non-ignored pixels in each class.
pub fn class_areas(labels: &LabelMap, classes: usize) -> Vec<f64> {
    let mut counts = vec![0usize; classes];
    let mut total = 0;
    for &l in &labels.data {
        if l != IGNORE_LABEL && (l as usize) < classes {
            counts[l as usize] += 1;
            total += 1;
        }
    }
    counts
        .iter()
        .map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
        .collect()
}

/// Texture orientation statistic of an `h x w` plane:
/// `mean |dI/dx| - mean |dI/dy|`. Near 0 for the checkerboard texture and
/// strongly negative for horizontal lines at full resolution.
pub fn fine_cue_statistic(plane: &[f64], h: usize, w: usize) -> f64 {
    let mut gx = 0.0;
    let mut gy = 0.0;
    for y in 0..h {
        for x in 0..w {
            if x + 1 < w {
                gx += (plane[y * w + x + 1] - plane[y * w + x]).abs();
            }
            if y + 1 < h {
                gy += (plane[(y + 1) * w + x] - plane[y * w + x]).abs();
            }
        }
    }
    let nx = (h * w.saturating_sub(1)).max(1) as f64;
    let ny = (h.saturating_sub(1) * w).max(1) as f64;
    gx / nx - gy / ny
}
