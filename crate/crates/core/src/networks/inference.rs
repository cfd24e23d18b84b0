//! Eval-mode prediction for single experts and the aggregated model.

use rayon::prelude::*;

use super::{crop_and_upsample, ModelBundle};
use crate::error::{Error, Result};
use crate::metrics::{stitch_masks, PatchMask};
use crate::pyramid::{extract_triplets, LabelMap, PatchTriplet, Slide};
use crate::tensor::{Mode, Tape, Tensor, UpsampleMode};

/// Which model produces the segmentation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// A single expert (1-based), its map aligned to the target region.
    Expert(usize),
    /// Aggregator with every weight fixed to 1.
    Fixed,
    /// Aggregator with weights from the weighting network.
    Adaptive,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Expert(1),
        Variant::Expert(2),
        Variant::Expert(3),
        Variant::Fixed,
        Variant::Adaptive,
    ];

    pub fn name(self) -> String {
        match self {
            Variant::Expert(k) => format!("expert{k}"),
            Variant::Fixed => "fixed".into(),
            Variant::Adaptive => "adaptive".into(),
        }
    }
}

/// Target-frame prediction for one patch.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchPrediction {
    /// `M x W x W` class distribution.
    pub probs: Tensor,
    /// Per-pixel argmax, lowest class index on ties.
    pub labels: Vec<u8>,
    /// Weights used by the aggregator, if any.
    pub weights: Option<[f64; 3]>,
}

/// Per-pixel argmax of an `M x H x W` (or `1 x M x H x W`) distribution.
pub fn argmax_labels(probs: &Tensor) -> Vec<u8> {
    let s = probs.shape();
    let (m, plane) = (s[s.len() - 3], s[s.len() - 2] * s[s.len() - 1]);
    let d = probs.data();
    (0..plane)
        .map(|p| {
            let mut best = 0;
            for c in 1..m {
                if d[c * plane + p] > d[best * plane + p] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}

/// Eval-mode forward of a batch. `xs` are the three `N x C x W x W` inputs;
/// returns the `N x M x W x W` target-frame distribution and, for the
/// aggregated variants, the `N x 3` weights.
pub fn predict_batch(
    bundle: &ModelBundle,
    xs: [&Tensor; 3],
    variant: Variant,
    crop_mode: UpsampleMode,
) -> Result<(Tensor, Option<Tensor>)> {
    let mut tape = Tape::new();
    let vars = xs.map(|x| tape.constant(x.clone()));
    let n = xs[0].shape()[0];
    match variant {
        Variant::Expert(k) => {
            if !(1..=3).contains(&k) {
                return Err(Error::invalid("predict", format!("expert index {k}")));
            }
            let y = bundle.expert_forward(&mut tape, k, vars[k - 1], Mode::Eval)?;
            let y = crop_and_upsample(&mut tape, y, k, crop_mode)?;
            Ok((tape.value(y).clone(), None))
        }
        Variant::Fixed | Variant::Adaptive => {
            let w = if variant == Variant::Fixed {
                tape.constant(Tensor::full(&[n, 3], 1.0))
            } else {
                bundle.weighting_forward(&mut tape, vars[1], Mode::Eval)?
            };
            let out = bundle.integrated_forward(&mut tape, vars, w, crop_mode, Mode::Eval)?;
            Ok((tape.value(out.y).clone(), Some(tape.value(w).clone())))
        }
    }
}

/// Stack field of view `k` (0-based) of the given triplets into a batch.
pub fn stack_inputs(triplets: &[&PatchTriplet], k: usize) -> Result<Tensor> {
    let items: Vec<Tensor> = triplets.iter().map(|t| t.x[k].clone()).collect();
    Tensor::stack(&items)
}

fn predict_chunk(
    bundle: &ModelBundle,
    chunk: &[&PatchTriplet],
    variant: Variant,
    crop_mode: UpsampleMode,
) -> Result<Vec<PatchPrediction>> {
    let xs = [
        stack_inputs(chunk, 0)?,
        stack_inputs(chunk, 1)?,
        stack_inputs(chunk, 2)?,
    ];
    let (probs, weights) = predict_batch(bundle, [&xs[0], &xs[1], &xs[2]], variant, crop_mode)?;
    (0..chunk.len())
        .map(|i| {
            let p = probs.batch_slice(i, i + 1)?;
            let s = p.shape()[1..].to_vec();
            let p = p.reshape(s)?;
            Ok(PatchPrediction {
                labels: argmax_labels(&p),
                probs: p,
                weights: weights.as_ref().map(|w| {
                    let r = &w.data()[3 * i..3 * i + 3];
                    [r[0], r[1], r[2]]
                }),
            })
        })
        .collect()
}

/// Predict every triplet, in order. Batches fan out over `threads` workers
/// (eval mode is per-sample, so the result does not depend on the split).
pub fn predict_triplets(
    bundle: &ModelBundle,
    triplets: &[PatchTriplet],
    variant: Variant,
    crop_mode: UpsampleMode,
    batch: usize,
    threads: usize,
) -> Result<Vec<PatchPrediction>> {
    let refs: Vec<&PatchTriplet> = triplets.iter().collect();
    let chunks: Vec<&[&PatchTriplet]> = refs.chunks(batch.max(1)).collect();
    let per_chunk: Vec<Vec<PatchPrediction>> = if threads <= 1 {
        chunks
            .iter()
            .map(|c| predict_chunk(bundle, c, variant, crop_mode))
            .collect::<Result<_>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| {
            chunks
                .par_iter()
                .map(|c| predict_chunk(bundle, c, variant, crop_mode))
                .collect::<Result<_>>()
        })?
    };
    Ok(per_chunk.into_iter().flatten().collect())
}

/// Tile a slide with non-overlapping windows, predict each and stitch the
/// label patches. Pixels not covered by a full window are left ignored.
pub fn segment_slide(
    bundle: &ModelBundle,
    slide: &Slide,
    variant: Variant,
    crop_mode: UpsampleMode,
    batch: usize,
    threads: usize,
) -> Result<LabelMap> {
    let w = bundle.config.window;
    let triplets = extract_triplets(slide, w, w)?;
    let preds = predict_triplets(bundle, &triplets, variant, crop_mode, batch, threads)?;
    let patches: Vec<PatchMask> = triplets
        .iter()
        .zip(preds)
        .map(|(t, p)| PatchMask {
            row: t.row,
            col: t.col,
            size: w,
            labels: p.labels,
        })
        .collect();
    stitch_masks(&patches, slide.image.width, slide.image.height)
}
