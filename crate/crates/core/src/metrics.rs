//! Segmentation scores, expert agreement analysis, mask stitching,
//! rendering and the two-stage cascade.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::networks::inference::segment_slide;
use crate::networks::{ModelBundle, Variant};
use crate::pyramid::{Image, LabelMap, Slide};
use crate::tensor::{UpsampleMode, IGNORE_LABEL};

/// `M x M` pixel counts, rows are ground truth and columns predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    /// Add one label map pair. Pixels whose ground truth is ignored are
    /// skipped; any other out-of-range value is an error.
    pub fn accumulate(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::shape("confusion", &[pred.len()], &[gt.len()]));
        }
        let m = self.classes;
        for (&p, &g) in pred.iter().zip(gt) {
            if g == IGNORE_LABEL {
                continue;
            }
            if g as usize >= m || p as usize >= m {
                return Err(Error::invalid(
                    "confusion",
                    format!("label pair ({g}, {p}) with {m} classes"),
                ));
            }
            self.counts[g as usize * m + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::shape("merge", &[self.classes], &[other.classes]));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn tp(&self, c: usize) -> u64 {
        self.get(c, c)
    }

    pub fn fp(&self, c: usize) -> u64 {
        (0..self.classes).map(|t| self.get(t, c)).sum::<u64>() - self.tp(c)
    }

    pub fn fn_(&self, c: usize) -> u64 {
        (0..self.classes).map(|p| self.get(c, p)).sum::<u64>() - self.tp(c)
    }
}

pub fn confusion(pred: &[u8], gt: &[u8], classes: usize) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(classes);
    cm.accumulate(pred, gt)?;
    Ok(cm)
}

/// A class-averaged score and how many classes entered the mean.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassMean {
    pub value: f64,
    pub per_class: Vec<Option<f64>>,
    pub effective_classes: usize,
}

fn class_mean(cm: &ConfusionMatrix, name: &str, den: impl Fn(usize) -> u64) -> ClassMean {
    let per_class: Vec<Option<f64>> = (0..cm.classes)
        .map(|c| {
            let d = den(c);
            (d > 0).then(|| cm.tp(c) as f64 / d as f64)
        })
        .collect();
    let used: Vec<f64> = per_class.iter().flatten().copied().collect();
    if used.len() < cm.classes {
        let skipped: Vec<usize> = (0..cm.classes).filter(|&c| per_class[c].is_none()).collect();
        log::warn!(
            "{name}: classes {skipped:?} have a zero denominator and are excluded; averaging over {} classes",
            used.len()
        );
    }
    let fractions: Vec<(u64, u64)> = (0..cm.classes)
        .map(|c| (cm.tp(c), den(c)))
        .filter(|&(_, d)| d > 0)
        .collect();
    let value = if used.is_empty() {
        0.0
    } else {
        exact_mean(&fractions).unwrap_or_else(|| used.iter().sum::<f64>() / used.len() as f64)
    };
    ClassMean {
        value,
        effective_classes: used.len(),
        per_class,
    }
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Mean of `n_i / d_i` summed as a reduced fraction and rounded once, so
/// small cases come out as the nearest double. `None` on overflow or when
/// the result does not fit in a double's exact integer range.
fn exact_mean(fractions: &[(u64, u64)]) -> Option<f64> {
    let (mut num, mut den) = (0u128, 1u128);
    for &(n, d) in fractions {
        let (n, d) = (n as u128, d as u128);
        let g = gcd(den, d);
        num = num.checked_mul(d / g)?.checked_add(n.checked_mul(den / g)?)?;
        den = den.checked_mul(d / g)?;
        let r = gcd(num, den).max(1);
        (num, den) = (num / r, den / r);
    }
    let den = den.checked_mul(fractions.len() as u128)?;
    let r = gcd(num, den).max(1);
    let (num, den) = (num / r, den / r);
    const EXACT: u128 = 1 << 53;
    (num <= EXACT && den <= EXACT).then(|| num as f64 / den as f64)
}

/// Overall pixel accuracy `sum TP / sum (TP + FP)`.
pub fn op_accuracy(cm: &ConfusionMatrix) -> f64 {
    let tp: u64 = (0..cm.classes).map(|c| cm.tp(c)).sum();
    let den: u64 = (0..cm.classes).map(|c| cm.tp(c) + cm.fp(c)).sum();
    if den == 0 {
        log::warn!("OP: no counted pixels");
        return 0.0;
    }
    tp as f64 / den as f64
}

/// Mean per-class accuracy in the precision form `TP / (TP + FP)`.
pub fn pc_detail(cm: &ConfusionMatrix) -> ClassMean {
    class_mean(cm, "PC", |c| cm.tp(c) + cm.fp(c))
}

pub fn pc_accuracy(cm: &ConfusionMatrix) -> f64 {
    pc_detail(cm).value
}

/// Mean intersection over union `TP / (TP + FP + FN)`.
pub fn miou_detail(cm: &ConfusionMatrix) -> ClassMean {
    class_mean(cm, "mIoU", |c| cm.tp(c) + cm.fp(c) + cm.fn_(c))
}

pub fn miou(cm: &ConfusionMatrix) -> f64 {
    miou_detail(cm).value
}

/// Pixel counts per correctness subset of the three experts. Subset index
/// bit `k` is set when expert `k + 1` is correct.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AgreementTable {
    pub overall: [u64; 8],
    pub per_class: Vec<[u64; 8]>,
}

impl AgreementTable {
    pub fn new(classes: usize) -> Self {
        AgreementTable {
            overall: [0; 8],
            per_class: vec![[0; 8]; classes],
        }
    }

    pub fn accumulate(&mut self, preds: [&[u8]; 3], gt: &[u8]) -> Result<()> {
        for p in preds {
            if p.len() != gt.len() {
                return Err(Error::shape("agreement", &[p.len()], &[gt.len()]));
            }
        }
        for (j, &g) in gt.iter().enumerate() {
            if g == IGNORE_LABEL {
                continue;
            }
            if g as usize >= self.per_class.len() {
                return Err(Error::invalid("agreement", format!("label {g}")));
            }
            let mut mask = 0;
            for (k, p) in preds.iter().enumerate() {
                if p[j] == g {
                    mask |= 1 << k;
                }
            }
            self.overall[mask] += 1;
            self.per_class[g as usize][mask] += 1;
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.overall.iter().sum()
    }

    /// Fraction of counted pixels in each of the 8 subsets.
    pub fn subset_rates(&self) -> [f64; 8] {
        rates(&self.overall)
    }

    /// Correct rate of expert `k` (1-based).
    pub fn expert_rate(&self, k: usize) -> f64 {
        self.rate_where(|m| m & (1 << (k - 1)) != 0)
    }

    /// Fraction correct for both experts `a` and `b` (1-based).
    pub fn pair_rate(&self, a: usize, b: usize) -> f64 {
        let bits = (1 << (a - 1)) | (1 << (b - 1));
        self.rate_where(|m| m & bits == bits)
    }

    pub fn union_rate(&self) -> f64 {
        self.rate_where(|m| m != 0)
    }

    pub fn intersection_rate(&self) -> f64 {
        self.rate_where(|m| m == 7)
    }

    fn rate_where(&self, pred: impl Fn(usize) -> bool) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let hit: u64 = (0..8).filter(|&m| pred(m)).map(|m| self.overall[m]).sum();
        hit as f64 / total as f64
    }
}

fn rates(counts: &[u64; 8]) -> [f64; 8] {
    let total: u64 = counts.iter().sum();
    let mut out = [0.0; 8];
    if total > 0 {
        for (o, &c) in out.iter_mut().zip(counts) {
            *o = c as f64 / total as f64;
        }
    }
    out
}

pub fn agreement(preds: [&[u8]; 3], gt: &[u8], classes: usize) -> Result<AgreementTable> {
    let mut t = AgreementTable::new(classes);
    t.accumulate(preds, gt)?;
    Ok(t)
}

/// A predicted label patch placed at `(row, col)` on a slide.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchMask {
    pub row: usize,
    pub col: usize,
    pub size: usize,
    pub labels: Vec<u8>,
}

/// Paste non-overlapping square patches into a slide-sized map; uncovered
/// pixels are [`IGNORE_LABEL`].
pub fn stitch_masks(patches: &[PatchMask], width: usize, height: usize) -> Result<LabelMap> {
    let mut out = LabelMap::new(width, height, IGNORE_LABEL);
    let mut covered = vec![false; width * height];
    for p in patches {
        if p.labels.len() != p.size * p.size || p.row + p.size > height || p.col + p.size > width {
            return Err(Error::invalid(
                "stitch_masks",
                format!(
                    "{0}x{0} patch at ({1}, {2}) does not fit {width}x{height}",
                    p.size, p.row, p.col
                ),
            ));
        }
        for y in 0..p.size {
            for x in 0..p.size {
                let i = (p.row + y) * width + p.col + x;
                if covered[i] {
                    return Err(Error::invalid(
                        "stitch_masks",
                        format!("patches overlap at ({}, {})", p.row + y, p.col + x),
                    ));
                }
                covered[i] = true;
                out.data[i] = p.labels[y * p.size + x];
            }
        }
    }
    Ok(out)
}

/// Class colours for rendering; ignored pixels use `ignore`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Palette {
    pub colors: Vec<[u8; 3]>,
    pub ignore: [u8; 3],
}

impl Default for Palette {
    /// Green, yellow, red, blue, purple; black for ignored pixels.
    fn default() -> Self {
        Palette {
            colors: vec![[0, 176, 80], [255, 255, 0], [255, 0, 0], [0, 112, 192], [112, 48, 160]],
            ignore: [0, 0, 0],
        }
    }
}

impl Palette {
    /// Parse `r,g,b;r,g,b;...` (class colours in order).
    pub fn parse(s: &str) -> Result<Self> {
        let mut colors = Vec::new();
        for item in s.split(';').map(str::trim).filter(|i| !i.is_empty()) {
            let parts: Vec<&str> = item.split(',').map(str::trim).collect();
            let rgb: Option<Vec<u8>> = parts.iter().map(|p| p.parse().ok()).collect();
            match rgb.as_deref() {
                Some([r, g, b]) => colors.push([*r, *g, *b]),
                _ => return Err(Error::Config(format!("bad palette colour {item:?}"))),
            }
        }
        if colors.is_empty() {
            return Err(Error::Config("empty palette".into()));
        }
        Ok(Palette {
            colors,
            ignore: [0, 0, 0],
        })
    }

    pub fn to_config_string(&self) -> String {
        self.colors
            .iter()
            .map(|[r, g, b]| format!("{r},{g},{b}"))
            .collect::<Vec<_>>()
            .join(";")
    }
}

pub fn render_mask(labels: &LabelMap, palette: &Palette) -> Result<Image> {
    let mut data = Vec::with_capacity(labels.data.len() * 3);
    for &l in &labels.data {
        let rgb = if l == IGNORE_LABEL {
            palette.ignore
        } else {
            *palette
                .colors
                .get(l as usize)
                .ok_or_else(|| Error::Config(format!("palette has no colour for class {l}")))?
        };
        data.extend_from_slice(&rgb);
    }
    Ok(Image {
        width: labels.width,
        height: labels.height,
        channels: 3,
        data,
    })
}

/// Two-stage merge: pixels the two-class model calls normal (0) stay 0 and
/// every other pixel takes the subtype model's label unchanged. The subtype
/// model is expected to share the label space, with 0 meaning normal.
pub fn merge_cascade(two_class: &LabelMap, subtype: &LabelMap) -> Result<LabelMap> {
    if two_class.width != subtype.width || two_class.height != subtype.height {
        return Err(Error::invalid(
            "cascade",
            format!(
                "{}x{} vs {}x{}",
                two_class.width, two_class.height, subtype.width, subtype.height
            ),
        ));
    }
    let data = two_class
        .data
        .iter()
        .zip(&subtype.data)
        .map(|(&t, &s)| match t {
            0 => 0,
            IGNORE_LABEL => IGNORE_LABEL,
            _ => s,
        })
        .collect();
    Ok(LabelMap {
        width: two_class.width,
        height: two_class.height,
        data,
    })
}

/// Two-stage segmentation: a two-class model separates normal from tumour,
/// then the subtype model labels the tumour pixels.
pub fn cascade_segment(
    two_class: &ModelBundle,
    subtype: &ModelBundle,
    slide: &Slide,
    crop_mode: UpsampleMode,
    batch: usize,
    threads: usize,
) -> Result<LabelMap> {
    let (a, b) = (&two_class.config, &subtype.config);
    if a.window != b.window || a.in_channels != b.in_channels {
        return Err(Error::Config(format!(
            "cascade models differ in geometry: W={} C={} vs W={} C={}",
            a.window, a.in_channels, b.window, b.in_channels
        )));
    }
    if a.classes != 2 {
        return Err(Error::Config(format!(
            "first cascade stage has {} classes, expected 2",
            a.classes
        )));
    }
    let first = segment_slide(two_class, slide, Variant::Adaptive, crop_mode, batch, threads)?;
    let second = segment_slide(subtype, slide, Variant::Adaptive, crop_mode, batch, threads)?;
    merge_cascade(&first, &second)
}

/// Per-model scores for a CSV report.
#[derive(Clone, Debug)]
pub struct ModelScores {
    pub model: String,
    pub cm: ConfusionMatrix,
}

/// One row per (model, class) plus an `all` summary row per model.
pub fn metrics_csv(models: &[ModelScores]) -> String {
    let mut s = String::from("model,class,tp,fp,fn,pc,iou,op\n");
    for m in models {
        let pc = pc_detail(&m.cm);
        let iou = miou_detail(&m.cm);
        let fmt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        for c in 0..m.cm.classes() {
            let _ = writeln!(
                s,
                "{},{c},{},{},{},{},{},",
                m.model,
                m.cm.tp(c),
                m.cm.fp(c),
                m.cm.fn_(c),
                fmt(pc.per_class[c]),
                fmt(iou.per_class[c]),
            );
        }
        let tp: u64 = (0..m.cm.classes()).map(|c| m.cm.tp(c)).sum();
        let fp: u64 = (0..m.cm.classes()).map(|c| m.cm.fp(c)).sum();
        let fn_: u64 = (0..m.cm.classes()).map(|c| m.cm.fn_(c)).sum();
        let _ = writeln!(
            s,
            "{},all,{tp},{fp},{fn_},{},{},{}",
            m.model,
            pc.value,
            iou.value,
            op_accuracy(&m.cm)
        );
    }
    s
}

/// Subset rates overall and per class, tagged with a stage name.
pub fn agreement_csv(tables: &[(String, AgreementTable)]) -> String {
    let mut s = String::from("stage,scope,pixels,none,e1,e2,e1_e2,e3,e1_e3,e2_e3,e1_e2_e3,union,intersection\n");
    for (stage, t) in tables {
        let mut row = |scope: String, counts: &[u64; 8]| {
            let total: u64 = counts.iter().sum();
            let r = rates(counts);
            let cells: Vec<String> = r.iter().map(|v| v.to_string()).collect();
            let union = if total == 0 { 0.0 } else { 1.0 - r[0] };
            let _ = writeln!(s, "{stage},{scope},{total},{},{union},{}", cells.join(","), r[7]);
        };
        row("overall".into(), &t.overall);
        for (c, counts) in t.per_class.iter().enumerate() {
            row(format!("class{c}"), counts);
        }
    }
    s
}
