//! Co-registered multi-magnification patches, image I/O, dataset splits
//! and the synthetic slide generator.

mod io;
mod synth;

pub use io::{
    decode_pnm, encode_pnm, load_image, load_labels, read_manifest, save_image, save_labels, write_manifest,
    ManifestEntry, SplitTag, MAX_EXTENT,
};
pub use synth::{class_areas, fine_cue_statistic, synth_generate, SynthConfig, SynthMode};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::networks::SCALES;
use crate::tensor::{Tensor, IGNORE_LABEL};

/// 8-bit raster, row-major, channels interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn at(&self, y: usize, x: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * self.channels + c]
    }
}

/// Per-pixel class indices; [`IGNORE_LABEL`] marks unannotated pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(width: usize, height: usize, fill: u8) -> Self {
        LabelMap {
            width,
            height,
            data: vec![fill; width * height],
        }
    }

    pub fn at(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Slide {
    pub id: String,
    pub image: Image,
    pub labels: LabelMap,
}

impl Slide {
    pub fn new(id: impl Into<String>, image: Image, labels: LabelMap) -> Result<Self> {
        if image.width != labels.width || image.height != labels.height {
            return Err(Error::invalid(
                "Slide::new",
                format!(
                    "image {}x{} vs labels {}x{}",
                    image.width, image.height, labels.width, labels.height
                ),
            ));
        }
        Ok(Slide {
            id: id.into(),
            image,
            labels,
        })
    }

    /// Verify every label is below `classes` or the ignore value.
    pub fn check_labels(&self, classes: usize) -> Result<()> {
        if let Some(&bad) = self
            .labels
            .data
            .iter()
            .find(|&&l| l != IGNORE_LABEL && l as usize >= classes)
        {
            return Err(Error::invalid(
                "Slide",
                format!("slide {} has label {bad} with {classes} classes", self.id),
            ));
        }
        Ok(())
    }
}

/// Three concentric fields of view around one target region.
///
/// `x[k]` is `C x W x W` with intensities in `[0, 1]`; field `k` covers a
/// `s W x s W` slide area (`s` = 1, 2, 4) centred on the target and
/// area-averaged down to `W x W`. `t[k]` holds the matching labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchTriplet {
    pub slide: String,
    /// Top-left slide coordinate of the target region.
    pub row: usize,
    pub col: usize,
    pub window: usize,
    pub x: [Tensor; 3],
    pub t: [Vec<u8>; 3],
}

impl PatchTriplet {
    /// Target-region identity used to keep dataset partitions disjoint.
    pub fn region(&self) -> (&str, usize, usize) {
        (&self.slide, self.row, self.col)
    }
}

/// Reflect-101 index into `0..n` for any integer position.
pub(crate) fn mirror(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Tile the slide with `W x W` targets at the given stride, row-major, all
/// fully inside the slide. Wider fields of view are mirror-padded at the
/// border; images are area-averaged and labels sampled by nearest neighbour.
pub fn extract_triplets(slide: &Slide, window: usize, stride: usize) -> Result<Vec<PatchTriplet>> {
    if window == 0 || window % 8 != 0 {
        return Err(Error::Config(format!(
            "window {window} must be a positive multiple of 8"
        )));
    }
    if stride == 0 {
        return Err(Error::Config("stride must be at least 1".into()));
    }
    let (sw, sh) = (slide.image.width, slide.image.height);
    if sw < window || sh < window {
        return Err(Error::invalid(
            "extract_triplets",
            format!("slide {} is {sw}x{sh}, smaller than window {window}", slide.id),
        ));
    }
    let mut out = Vec::new();
    for row in (0..=sh - window).step_by(stride) {
        for col in (0..=sw - window).step_by(stride) {
            out.push(extract_one(slide, window, row, col));
        }
    }
    Ok(out)
}

fn extract_one(slide: &Slide, window: usize, row: usize, col: usize) -> PatchTriplet {
    let img = &slide.image;
    let c = img.channels;
    let mut xs = Vec::with_capacity(3);
    let mut ts = Vec::with_capacity(3);
    for &f in &SCALES {
        let half = (f as isize - 1) * window as isize / 2;
        let top = row as isize - half;
        let left = col as isize - half;
        let mut x = vec![0.0; c * window * window];
        let mut t = vec![0u8; window * window];
        let norm = 255.0 * (f * f) as f64;
        for oy in 0..window {
            for ox in 0..window {
                let y0 = top + (oy * f) as isize;
                let x0 = left + (ox * f) as isize;
                for ch in 0..c {
                    let mut acc = 0u32;
                    for dy in 0..f as isize {
                        let sy = mirror(y0 + dy, img.height);
                        for dx in 0..f as isize {
                            let sx = mirror(x0 + dx, img.width);
                            acc += img.at(sy, sx, ch) as u32;
                        }
                    }
                    x[(ch * window + oy) * window + ox] = acc as f64 / norm;
                }
                let ly = mirror(y0 + (f / 2) as isize, img.height);
                let lx = mirror(x0 + (f / 2) as isize, img.width);
                t[oy * window + ox] = slide.labels.at(ly, lx);
            }
        }
        xs.push(Tensor::new(vec![c, window, window], x).expect("sized above"));
        ts.push(t);
    }
    let [x1, x2, x3]: [Tensor; 3] = xs.try_into().expect("three scales");
    let [t1, t2, t3]: [Vec<u8>; 3] = ts.try_into().expect("three scales");
    PatchTriplet {
        slide: slide.id.clone(),
        row,
        col,
        window,
        x: [x1, x2, x3],
        t: [t1, t2, t3],
    }
}

fn flip_plane<T: Copy>(data: &mut [T], h: usize, w: usize, horizontal: bool, vertical: bool) {
    for plane in data.chunks_mut(h * w) {
        if horizontal {
            for r in plane.chunks_mut(w) {
                r.reverse();
            }
        }
        if vertical {
            for y in 0..h / 2 {
                for x in 0..w {
                    plane.swap(y * w + x, (h - 1 - y) * w + x);
                }
            }
        }
    }
}

/// Mirror all six rasters of a triplet the same way.
pub fn flip(triplet: &PatchTriplet, horizontal: bool, vertical: bool) -> PatchTriplet {
    let mut out = triplet.clone();
    let w = triplet.window;
    for k in 0..3 {
        flip_plane(out.x[k].data_mut(), w, w, horizontal, vertical);
        flip_plane(&mut out.t[k], w, w, horizontal, vertical);
    }
    out
}

/// Random horizontal and vertical flips, each with probability 1/2.
pub fn flip_augment(triplet: &PatchTriplet, seed: u64) -> PatchTriplet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = rng.random_bool(0.5);
    let v = rng.random_bool(0.5);
    flip(triplet, h, v)
}

/// Training triplets, the weighting-network set X' (also used for
/// validation) and the held-out test set.
#[derive(Clone, Debug, Default)]
pub struct DatasetSplit {
    pub train: Vec<PatchTriplet>,
    pub weighting: Vec<PatchTriplet>,
    pub test: Vec<PatchTriplet>,
    pub seed: u64,
}

/// Seeded shuffle, then `round(n * val_fraction)` triplets go to X'.
pub fn split_dataset(
    triplets: Vec<PatchTriplet>,
    test: Vec<PatchTriplet>,
    val_fraction: f64,
    seed: u64,
) -> Result<DatasetSplit> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::Config(format!(
            "validation fraction {val_fraction} outside (0, 1)"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..triplets.len()).collect();
    order.shuffle(&mut rng);
    let n_val = (triplets.len() as f64 * val_fraction).round() as usize;
    if n_val == 0 || n_val == triplets.len() {
        return Err(Error::Config(format!(
            "{} triplets cannot be split with fraction {val_fraction}",
            triplets.len()
        )));
    }
    let mut in_val = vec![false; triplets.len()];
    for &i in &order[..n_val] {
        in_val[i] = true;
    }
    let mut split = DatasetSplit {
        seed,
        test,
        ..Default::default()
    };
    // membership is random, order within each set follows extraction order
    for (t, v) in triplets.into_iter().zip(in_val) {
        if v {
            split.weighting.push(t);
        } else {
            split.train.push(t);
        }
    }
    Ok(split)
}

/// Load every slide listed in a manifest, tagged with its split.
pub fn load_manifest_slides(path: impl AsRef<std::path::Path>) -> Result<Vec<(Slide, SplitTag)>> {
    let entries = read_manifest(path)?;
    let mut out = Vec::with_capacity(entries.len());
    for e in entries {
        let image = load_image(&e.slide)?;
        let labels = load_labels(&e.labels)?;
        let id = e
            .slide
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| e.slide.display().to_string());
        out.push((Slide::new(id, image, labels)?, e.split));
    }
    Ok(out)
}
