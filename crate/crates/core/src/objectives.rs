//! Losses and weight targets.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var, IGNORE_LABEL};

/// Per-class balancing weights `alpha_c = N / (M * N_c)` where `N` counts
/// all non-ignored pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassWeights(pub Vec<f64>);

impl ClassWeights {
    pub fn uniform(classes: usize) -> Self {
        ClassWeights(vec![1.0; classes])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Class-balancing weights from a collection of label maps.
pub fn class_weights<'a, I>(label_maps: I, classes: usize) -> Result<ClassWeights>
where
    I: IntoIterator<Item = &'a [u8]>,
{
    let mut counts = vec![0u64; classes];
    for map in label_maps {
        for &l in map {
            if l == IGNORE_LABEL {
                continue;
            }
            let c = l as usize;
            if c >= classes {
                return Err(Error::invalid(
                    "class_weights",
                    format!("label {l} with {classes} classes"),
                ));
            }
            counts[c] += 1;
        }
    }
    let total: u64 = counts.iter().sum();
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::EmptyClass(c));
    }
    Ok(ClassWeights(
        counts
            .iter()
            .map(|&n| total as f64 / (classes as f64 * n as f64))
            .collect(),
    ))
}

/// `-sum_j sum_c alpha_c T_c(j) log Y_c(j)` over non-ignored pixels, with the
/// one-hot target given as class indices (`N x H x W`).
pub fn weighted_cross_entropy(tape: &mut Tape, y: Var, labels: &[u8], alpha: &ClassWeights) -> Result<Var> {
    tape.weighted_cross_entropy(y, labels, alpha.as_slice())
}

/// Soft Dice `2 sum(Y_c T_c) / (sum Y_c + sum T_c)` for every class of one
/// sample; `None` for classes absent from `labels`.
///
/// `probs` is `M x H x W` (or `1 x M x H x W`). Ignored pixels are excluded
/// from both sums.
pub fn dice_per_class(probs: &Tensor, labels: &[u8]) -> Result<Vec<Option<f64>>> {
    let s = probs.shape();
    if s.len() < 3 {
        return Err(Error::invalid("dice", format!("expected M x H x W, got {s:?}")));
    }
    let (m, plane) = (s[s.len() - 3], s[s.len() - 2] * s[s.len() - 1]);
    if probs.numel() != m * plane || labels.len() != plane {
        return Err(Error::shape("dice", s, &[labels.len()]));
    }
    let d = probs.data();
    let mut inter = vec![0.0; m];
    let mut pred = vec![0.0; m];
    let mut truth = vec![0usize; m];
    for (p, &l) in labels.iter().enumerate() {
        if l == IGNORE_LABEL {
            continue;
        }
        let l = l as usize;
        if l >= m {
            return Err(Error::invalid("dice", format!("label {l} with {m} classes")));
        }
        truth[l] += 1;
        inter[l] += d[l * plane + p];
        for c in 0..m {
            pred[c] += d[c * plane + p];
        }
    }
    Ok((0..m)
        .map(|c| (truth[c] > 0).then(|| 2.0 * inter[c] / (pred[c] + truth[c] as f64)))
        .collect())
}

/// Weight target of one expert on one sample: mean soft Dice over the
/// classes present in `labels`.
pub fn dice_weight_targets(probs: &Tensor, labels: &[u8]) -> Result<f64> {
    let per_class = dice_per_class(probs, labels)?;
    let present: Vec<f64> = per_class.into_iter().flatten().collect();
    if present.is_empty() {
        return Err(Error::invalid("dice", "no labelled pixels"));
    }
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

/// `sum_i sum_k (w_i^k - y_i^k)^2` for predicted `y` (`N x 3`) and targets.
pub fn mse_weight_loss(tape: &mut Tape, y: Var, target: &Tensor) -> Result<Var> {
    tape.squared_error(y, target)
}

/// Terms of the integrated training objective.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub aggregate: f64,
    pub experts: [f64; 3],
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        self.aggregate + self.experts.iter().sum::<f64>()
    }
}

/// Aggregated loss on the target frame plus every expert's loss on its own
/// full frame. Returns the scalar on the tape and the individual terms.
pub fn total_loss(
    tape: &mut Tape,
    y: Var,
    experts: [Var; 3],
    target: &[u8],
    expert_targets: [&[u8]; 3],
    alpha_experts: [&ClassWeights; 3],
    alpha_target: &ClassWeights,
) -> Result<(Var, LossBreakdown)> {
    let mut total = weighted_cross_entropy(tape, y, target, alpha_target)?;
    let mut parts = LossBreakdown {
        aggregate: tape.value(total).item()?,
        experts: [0.0; 3],
    };
    for k in 0..3 {
        let l = weighted_cross_entropy(tape, experts[k], expert_targets[k], alpha_experts[k])?;
        parts.experts[k] = tape.value(l).item()?;
        total = tape.add(total, l)?;
    }
    Ok((total, parts))
}
