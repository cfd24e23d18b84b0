//! Expert pre-training and the alternating weighting / end-to-end loop.
//!
//! Every shuffle and flip draws from a ChaCha stream keyed by
//! `(seed, stage, epoch)`, and the model is rounded to checkpoint precision
//! at the end of every epoch, so a run resumed from `epoch_<e>.awmf`
//! continues exactly like the uninterrupted run.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::metrics::{miou, ConfusionMatrix};
use crate::networks::inference::{argmax_labels, stack_inputs};
use crate::networks::{ModelBundle, Variant};
use crate::objectives::{class_weights, dice_weight_targets, total_loss, ClassWeights, LossBreakdown};
use crate::pyramid::{flip, DatasetSplit, PatchTriplet};
use crate::tensor::{Mode, Nadam, Tape, Tensor, UpsampleMode};

/// How the aggregator's expert weights are produced during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightingMode {
    /// Weights from the weighting network, trained on Dice targets.
    Adaptive,
    /// Every weight fixed to 1; the weighting network is not trained.
    Fixed,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    /// Alternating epochs `L`.
    pub max_epochs: usize,
    pub pretrain_epochs: usize,
    pub patience: usize,
    /// Relative validation-loss improvement that resets the patience counter.
    pub tol: f64,
    pub seed: u64,
    pub window: usize,
    pub classes: usize,
    pub crop_mode: UpsampleMode,
    /// Random horizontal/vertical flips of training triplets.
    pub augment: bool,
    pub weighting: WeightingMode,
    /// Workers for eval-mode fan-out (weight targets, validation).
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            batch: 8,
            max_epochs: 50,
            pretrain_epochs: 20,
            patience: 5,
            tol: 1e-4,
            seed: 0,
            window: 32,
            classes: 4,
            crop_mode: UpsampleMode::Bilinear,
            augment: true,
            weighting: WeightingMode::Adaptive,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if self.batch == 0 || self.patience == 0 || self.threads == 0 {
            return Err(Error::Config("batch, patience and threads must be positive".into()));
        }
        if !(self.tol.is_finite() && self.tol >= 0.0) {
            return Err(Error::Config(format!("tolerance {} must be non-negative", self.tol)));
        }
        Ok(())
    }

    fn check_bundle(&self, bundle: &ModelBundle) -> Result<()> {
        if bundle.config.window != self.window || bundle.config.classes != self.classes {
            return Err(Error::Config(format!(
                "model has W={} M={}, training expects W={} M={}",
                bundle.config.window, bundle.config.classes, self.window, self.classes
            )));
        }
        Ok(())
    }
}

/// Training stages, used to key random streams and error context.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Stage {
    Pretrain(usize),
    Weighting,
    EndToEnd,
}

impl Stage {
    fn stream(self) -> u64 {
        match self {
            Stage::Pretrain(k) => k as u64,
            Stage::Weighting => 4,
            Stage::EndToEnd => 5,
        }
    }

    fn label(self) -> &'static str {
        match self {
            Stage::Pretrain(1) => "pretrain expert 1",
            Stage::Pretrain(2) => "pretrain expert 2",
            Stage::Pretrain(_) => "pretrain expert 3",
            Stage::Weighting => "weighting epoch",
            Stage::EndToEnd => "end-to-end epoch",
        }
    }
}

fn epoch_rng(seed: u64, stage: Stage, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((stage.stream() << 32) | epoch as u64);
    rng
}

fn diverged(stage: Stage, epoch: usize, batch: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite(_) | Error::NonFiniteGradient(_) => Error::Divergence {
            stage: stage.label(),
            epoch,
            batch,
            msg: e.to_string(),
        },
        other => other,
    }
}

/// Shuffled order and per-sample flip decisions for one epoch.
fn epoch_plan(n: usize, seed: u64, stage: Stage, epoch: usize, augment: bool) -> Vec<(usize, bool, bool)> {
    let mut rng = epoch_rng(seed, stage, epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
        .into_iter()
        .map(|i| {
            if augment {
                (i, rng.random_bool(0.5), rng.random_bool(0.5))
            } else {
                (i, false, false)
            }
        })
        .collect()
}

fn batch_triplets(data: &[PatchTriplet], plan: &[(usize, bool, bool)]) -> Vec<PatchTriplet> {
    plan.iter()
        .map(|&(i, h, v)| if h || v { flip(&data[i], h, v) } else { data[i].clone() })
        .collect()
}

fn inputs(batch: &[&PatchTriplet]) -> Result<[Tensor; 3]> {
    Ok([
        stack_inputs(batch, 0)?,
        stack_inputs(batch, 1)?,
        stack_inputs(batch, 2)?,
    ])
}

fn labels(batch: &[&PatchTriplet], k: usize) -> Vec<u8> {
    batch.iter().flat_map(|t| t.t[k].iter().copied()).collect()
}

/// Class weights per magnification, computed on the training labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Alphas {
    pub experts: [ClassWeights; 3],
    /// Weights for the aggregated output (the target-frame labels).
    pub target: ClassWeights,
}

impl Alphas {
    pub fn from_triplets(data: &[PatchTriplet], classes: usize) -> Result<Self> {
        let per_k = |k: usize| class_weights(data.iter().map(|t| t.t[k].as_slice()), classes);
        let experts = [per_k(0)?, per_k(1)?, per_k(2)?];
        Ok(Alphas {
            target: experts[0].clone(),
            experts,
        })
    }
}

/// Per-patch training losses of one alternating epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EpochLosses {
    pub experts: [f64; 3],
    pub aggregate: f64,
    pub weights_mean: [f64; 3],
}

impl EpochLosses {
    pub fn total(&self) -> f64 {
        self.aggregate + self.experts.iter().sum::<f64>()
    }
}

/// One epoch of expert `k` trained alone on its own magnification.
pub fn pretrain_expert_epoch(
    bundle: &mut ModelBundle,
    data: &[PatchTriplet],
    alpha: &ClassWeights,
    k: usize,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<f64> {
    let stage = Stage::Pretrain(k);
    let plan = epoch_plan(data.len(), cfg.seed, stage, epoch, cfg.augment);
    let opt = Nadam::new(cfg.lr);
    let ids = bundle.expert_params(k);
    let mut total = 0.0;
    for (bi, chunk) in plan.chunks(cfg.batch).enumerate() {
        let err = diverged(stage, epoch, bi);
        let owned = batch_triplets(data, chunk);
        let batch: Vec<&PatchTriplet> = owned.iter().collect();
        let x = stack_inputs(&batch, k - 1)?;
        let t = labels(&batch, k - 1);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let y = bundle.expert_forward(&mut tape, k, xv, Mode::Train).map_err(&err)?;
        let loss = tape.weighted_cross_entropy(y, &t, alpha.as_slice()).map_err(&err)?;
        total += tape.value(loss).item()?;
        tape.backward(loss, &mut bundle.store).map_err(&err)?;
        opt.step(&mut bundle.store, &ids).map_err(&err)?;
        tape.commit_running_stats(&mut bundle.store);
    }
    Ok(total / data.len().max(1) as f64)
}

/// Map fixed-size batches of `data` through `f` on up to `threads` workers,
/// keeping input order.
fn fan_out<R: Send>(
    data: &[PatchTriplet],
    batch: usize,
    threads: usize,
    f: impl Fn(&[&PatchTriplet]) -> Result<Vec<R>> + Sync,
) -> Result<Vec<R>> {
    use rayon::prelude::*;
    let refs: Vec<&PatchTriplet> = data.iter().collect();
    let chunks: Vec<&[&PatchTriplet]> = refs.chunks(batch.max(1)).collect();
    let parts: Vec<Vec<R>> = if threads <= 1 {
        chunks.iter().map(|c| f(c)).collect::<Result<_>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| chunks.par_iter().map(|c| f(c)).collect::<Result<_>>())?
    };
    Ok(parts.into_iter().flatten().collect())
}

/// Per-expert eval-mode WCE on each expert's own frame, summed over `data`.
pub fn expert_losses(
    bundle: &ModelBundle,
    data: &[PatchTriplet],
    alphas: &Alphas,
    cfg: &TrainConfig,
) -> Result<[f64; 3]> {
    let rows = fan_out(data, cfg.batch, cfg.threads, |batch| {
        let mut out = [0.0; 3];
        for k in 1..=3 {
            let mut tape = Tape::new();
            let xv = tape.constant(stack_inputs(batch, k - 1)?);
            let y = bundle.expert_forward(&mut tape, k, xv, Mode::Eval)?;
            let l = tape.weighted_cross_entropy(y, &labels(batch, k - 1), alphas.experts[k - 1].as_slice())?;
            out[k - 1] = tape.value(l).item()?;
        }
        Ok(vec![out])
    })?;
    let mut sum = [0.0; 3];
    for r in rows {
        for k in 0..3 {
            sum[k] += r[k];
        }
    }
    Ok(sum)
}

/// Dice weight targets `w_i^k` for every triplet of X', from the current
/// experts evaluated on their full frames.
pub fn generate_weight_targets(
    bundle: &ModelBundle,
    xprime: &[PatchTriplet],
    cfg: &TrainConfig,
) -> Result<Vec<[f64; 3]>> {
    fan_out(xprime, cfg.batch, cfg.threads, |batch| {
        let mut rows = vec![[0.0; 3]; batch.len()];
        for k in 1..=3 {
            let mut tape = Tape::new();
            let xv = tape.constant(stack_inputs(batch, k - 1)?);
            let y = bundle.expert_forward(&mut tape, k, xv, Mode::Eval)?;
            let probs = tape.value(y);
            for (i, row) in rows.iter_mut().enumerate() {
                row[k - 1] = dice_weight_targets(&probs.batch_slice(i, i + 1)?, &batch[i].t[k - 1])?;
            }
        }
        Ok(rows)
    })
}

/// One MSE epoch of the weighting network on `(X', targets)`. Only the
/// weighting parameters change. Returns the loss per patch.
pub fn train_weighting_epoch(
    bundle: &mut ModelBundle,
    xprime: &[PatchTriplet],
    targets: &[[f64; 3]],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<f64> {
    if xprime.is_empty() || xprime.len() != targets.len() {
        return Err(Error::invalid(
            "train_weighting_epoch",
            format!("{} patches, {} targets", xprime.len(), targets.len()),
        ));
    }
    let stage = Stage::Weighting;
    let plan = epoch_plan(xprime.len(), cfg.seed, stage, epoch, false);
    let opt = Nadam::new(cfg.lr);
    let ids = bundle.weighting_params();
    let mut total = 0.0;
    for (bi, chunk) in plan.chunks(cfg.batch).enumerate() {
        let err = diverged(stage, epoch, bi);
        let batch: Vec<&PatchTriplet> = chunk.iter().map(|&(i, _, _)| &xprime[i]).collect();
        let target: Vec<f64> = chunk.iter().flat_map(|&(i, _, _)| targets[i]).collect();
        let target = Tensor::new(vec![batch.len(), 3], target)?;
        let mut tape = Tape::new();
        let xv = tape.constant(stack_inputs(&batch, 1)?);
        let y = bundle.weighting_forward(&mut tape, xv, Mode::Train).map_err(&err)?;
        let loss = tape.squared_error(y, &target).map_err(&err)?;
        total += tape.value(loss).item()?;
        tape.backward(loss, &mut bundle.store).map_err(&err)?;
        opt.step(&mut bundle.store, &ids).map_err(&err)?;
        tape.commit_running_stats(&mut bundle.store);
    }
    Ok(total / xprime.len() as f64)
}

/// Aggregator weights for a batch: the frozen weighting network's
/// prediction, or all ones.
fn batch_weights(bundle: &ModelBundle, x2: &Tensor, mode: WeightingMode) -> Result<Tensor> {
    let n = x2.shape()[0];
    match mode {
        WeightingMode::Fixed => Ok(Tensor::full(&[n, 3], 1.0)),
        WeightingMode::Adaptive => {
            let mut tape = Tape::new();
            let xv = tape.constant(x2.clone());
            let w = bundle.weighting_forward(&mut tape, xv, Mode::Eval)?;
            Ok(tape.value(w).clone())
        }
    }
}

/// One end-to-end epoch of experts plus aggregator with the weights held
/// constant. Returns per-patch loss terms and mean weights.
pub fn end_to_end_epoch(
    bundle: &mut ModelBundle,
    data: &[PatchTriplet],
    alphas: &Alphas,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<EpochLosses> {
    let stage = Stage::EndToEnd;
    let plan = epoch_plan(data.len(), cfg.seed, stage, epoch, cfg.augment);
    let opt = Nadam::new(cfg.lr);
    let ids = bundle.integrated_params();
    let mut acc = LossBreakdown::default();
    let mut wsum = [0.0; 3];
    for (bi, chunk) in plan.chunks(cfg.batch).enumerate() {
        let err = diverged(stage, epoch, bi);
        let owned = batch_triplets(data, chunk);
        let batch: Vec<&PatchTriplet> = owned.iter().collect();
        let xs = inputs(&batch)?;
        let w = batch_weights(bundle, &xs[1], cfg.weighting).map_err(&err)?;
        for row in w.data().chunks(3) {
            for k in 0..3 {
                wsum[k] += row[k];
            }
        }
        let ts = [labels(&batch, 0), labels(&batch, 1), labels(&batch, 2)];
        let mut tape = Tape::new();
        let [x1, x2, x3] = xs;
        let xv = [tape.constant(x1), tape.constant(x2), tape.constant(x3)];
        let wv = tape.constant(w);
        let out = bundle
            .integrated_forward(&mut tape, xv, wv, cfg.crop_mode, Mode::Train)
            .map_err(&err)?;
        let (loss, parts) = total_loss(
            &mut tape,
            out.y,
            out.experts,
            &ts[0],
            [&ts[0], &ts[1], &ts[2]],
            [&alphas.experts[0], &alphas.experts[1], &alphas.experts[2]],
            &alphas.target,
        )
        .map_err(&err)?;
        acc.aggregate += parts.aggregate;
        for k in 0..3 {
            acc.experts[k] += parts.experts[k];
        }
        tape.backward(loss, &mut bundle.store).map_err(&err)?;
        opt.step(&mut bundle.store, &ids).map_err(&err)?;
        tape.commit_running_stats(&mut bundle.store);
    }
    let n = data.len().max(1) as f64;
    Ok(EpochLosses {
        experts: acc.experts.map(|v| v / n),
        aggregate: acc.aggregate / n,
        weights_mean: wsum.map(|v| v / n),
    })
}

/// Eval-mode loss and mIoU of the integrated model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Validation {
    /// Total loss (aggregate plus expert terms) per patch.
    pub loss: f64,
    pub miou: f64,
}

pub fn validate(bundle: &ModelBundle, data: &[PatchTriplet], alphas: &Alphas, cfg: &TrainConfig) -> Result<Validation> {
    let variant = match cfg.weighting {
        WeightingMode::Adaptive => Variant::Adaptive,
        WeightingMode::Fixed => Variant::Fixed,
    };
    let rows = fan_out(data, cfg.batch, cfg.threads, |batch| {
        let xs = inputs(batch)?;
        let w = match variant {
            Variant::Fixed => Tensor::full(&[batch.len(), 3], 1.0),
            _ => batch_weights(bundle, &xs[1], WeightingMode::Adaptive)?,
        };
        let ts = [labels(batch, 0), labels(batch, 1), labels(batch, 2)];
        let mut tape = Tape::new();
        let [x1, x2, x3] = xs;
        let xv = [tape.constant(x1), tape.constant(x2), tape.constant(x3)];
        let wv = tape.constant(w);
        let out = bundle.integrated_forward(&mut tape, xv, wv, cfg.crop_mode, Mode::Eval)?;
        let (loss, _) = total_loss(
            &mut tape,
            out.y,
            out.experts,
            &ts[0],
            [&ts[0], &ts[1], &ts[2]],
            [&alphas.experts[0], &alphas.experts[1], &alphas.experts[2]],
            &alphas.target,
        )?;
        let probs = tape.value(out.y);
        let mut cm = ConfusionMatrix::new(cfg.classes);
        for (i, t) in batch.iter().enumerate() {
            cm.accumulate(&argmax_labels(&probs.batch_slice(i, i + 1)?), &t.t[0])?;
        }
        Ok(vec![(tape.value(loss).item()?, cm)])
    })?;
    let mut cm = ConfusionMatrix::new(cfg.classes);
    let mut loss = 0.0;
    for (l, c) in rows {
        loss += l;
        cm.merge(&c)?;
    }
    Ok(Validation {
        loss: loss / data.len().max(1) as f64,
        miou: miou(&cm),
    })
}

/// One row of the alternating-stage log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_e: [f64; 3],
    pub loss_w: f64,
    pub loss_a: f64,
    pub loss_total: f64,
    pub val_loss: f64,
    pub val_miou: f64,
    pub w_mean: [f64; 3],
    pub seconds: f64,
}

pub const TRAIN_LOG_HEADER: &str =
    "epoch,loss_e1,loss_e2,loss_e3,loss_w,loss_a,loss_total,val_loss,val_miou,w1_mean,w2_mean,w3_mean,seconds";

/// Append-only per-epoch log, serialized as CSV.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn push(&mut self, r: EpochRecord) {
        self.records.push(r);
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{TRAIN_LOG_HEADER}\n");
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.epoch,
                r.loss_e[0],
                r.loss_e[1],
                r.loss_e[2],
                r.loss_w,
                r.loss_a,
                r.loss_total,
                r.val_loss,
                r.val_miou,
                r.w_mean[0],
                r.w_mean[1],
                r.w_mean[2],
                r.seconds
            );
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(TRAIN_LOG_HEADER) {
            return Err(Error::Config("training log has an unexpected header".into()));
        }
        let mut log = TrainLog::default();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let v: Vec<f64> = line
                .split(',')
                .map(|f| f.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Config(format!("training log line {}: {e}", i + 2)))?;
            if v.len() != 13 {
                return Err(Error::Config(format!(
                    "training log line {} has {} fields",
                    i + 2,
                    v.len()
                )));
            }
            log.push(EpochRecord {
                epoch: v[0] as usize,
                loss_e: [v[1], v[2], v[3]],
                loss_w: v[4],
                loss_a: v[5],
                loss_total: v[6],
                val_loss: v[7],
                val_miou: v[8],
                w_mean: [v[9], v[10], v[11]],
                seconds: v[12],
            });
        }
        Ok(log)
    }
}

/// Per-epoch pre-training log.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PretrainLog {
    /// `(epoch, train loss per expert, validation loss per expert)`.
    pub records: Vec<(usize, [f64; 3], [f64; 3])>,
}

impl PretrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss_e1,loss_e2,loss_e3,val_e1,val_e2,val_e3\n");
        for (e, l, v) in &self.records {
            let _ = writeln!(s, "{e},{},{},{},{},{},{}", l[0], l[1], l[2], v[0], v[1], v[2]);
        }
        s
    }
}

/// Patience-based stopping on a loss that should decrease.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStop {
    pub best: f64,
    pub stale: usize,
    patience: usize,
    tol: f64,
}

impl EarlyStop {
    pub fn new(patience: usize, tol: f64) -> Self {
        EarlyStop {
            best: f64::INFINITY,
            stale: 0,
            patience,
            tol,
        }
    }

    /// Record a validation loss; returns whether it is the lowest so far.
    /// Patience resets only on a relative improvement above `tol`.
    pub fn observe(&mut self, loss: f64) -> bool {
        let improved = !self.best.is_finite() || self.best - loss > self.tol * self.best.abs();
        let lowest = loss < self.best;
        if lowest {
            self.best = loss;
        }
        self.stale = if improved { 0 } else { self.stale + 1 };
        lowest
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Pre-train the three experts independently, with early stopping on
/// the summed validation loss over X'.
pub fn pretrain_experts(
    bundle: &mut ModelBundle,
    split: &DatasetSplit,
    alphas: &Alphas,
    cfg: &TrainConfig,
) -> Result<PretrainLog> {
    cfg.validate()?;
    cfg.check_bundle(bundle)?;
    if split.train.is_empty() {
        return Err(Error::Config("no training triplets".into()));
    }
    let mut log = PretrainLog::default();
    let mut stop = EarlyStop::new(cfg.patience, cfg.tol);
    for epoch in 1..=cfg.pretrain_epochs {
        let mut train = [0.0; 3];
        for k in 1..=3 {
            train[k - 1] = pretrain_expert_epoch(bundle, &split.train, &alphas.experts[k - 1], k, cfg, epoch)?;
        }
        bundle.store.snap_to_f32();
        let val = if split.weighting.is_empty() {
            [0.0; 3]
        } else {
            expert_losses(bundle, &split.weighting, alphas, cfg)?.map(|v| v / split.weighting.len() as f64)
        };
        log::info!("pretrain epoch {epoch}: train {:.3?} val {:.3?}", train, val);
        log.records.push((epoch, train, val));
        stop.observe(val.iter().sum());
        if !split.weighting.is_empty() && stop.should_stop() {
            log::info!("pretraining stopped early after epoch {epoch}");
            break;
        }
    }
    Ok(log)
}

/// Where a run writes checkpoints and logs.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub dir: PathBuf,
}

impl RunOutput {
    pub fn epoch_path(&self, epoch: usize) -> PathBuf {
        self.dir.join(format!("epoch_{epoch}.awmf"))
    }

    pub fn best_path(&self) -> PathBuf {
        self.dir.join("best.awmf")
    }

    pub fn pretrained_path(&self) -> PathBuf {
        self.dir.join("pretrained.awmf")
    }

    pub fn log_path(&self) -> PathBuf {
        self.dir.join("train_log.csv")
    }

    pub fn pretrain_log_path(&self) -> PathBuf {
        self.dir.join("pretrain_log.csv")
    }
}

/// Result of the alternating stage.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub bundle: ModelBundle,
    pub log: TrainLog,
    /// Epoch with the lowest validation loss.
    pub best_epoch: usize,
}

/// Alternating stage starting after `start_epoch` (0 for a fresh run).
/// `prior` holds the log rows of epochs already completed.
pub fn run_alternating(
    mut bundle: ModelBundle,
    split: &DatasetSplit,
    alphas: &Alphas,
    cfg: &TrainConfig,
    out: Option<&RunOutput>,
    start_epoch: usize,
    prior: TrainLog,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    cfg.check_bundle(&bundle)?;
    if split.train.is_empty() || split.weighting.is_empty() {
        return Err(Error::Config("training and X' sets must both be non-empty".into()));
    }
    let mut stop = EarlyStop::new(cfg.patience, cfg.tol);
    let mut best_epoch = 0;
    for r in &prior.records {
        if stop.observe(r.val_loss) {
            best_epoch = r.epoch;
        }
    }
    let mut log = prior;
    if stop.should_stop() {
        return Ok(TrainOutcome {
            bundle,
            log,
            best_epoch,
        });
    }
    for epoch in start_epoch + 1..=cfg.max_epochs {
        let started = Instant::now();
        let loss_w = match cfg.weighting {
            WeightingMode::Adaptive => {
                let targets = generate_weight_targets(&bundle, &split.weighting, cfg)?;
                train_weighting_epoch(&mut bundle, &split.weighting, &targets, cfg, epoch)?
            }
            WeightingMode::Fixed => 0.0,
        };
        let losses = end_to_end_epoch(&mut bundle, &split.train, alphas, cfg, epoch)?;
        bundle.store.snap_to_f32();
        let val = validate(&bundle, &split.weighting, alphas, cfg)?;
        let record = EpochRecord {
            epoch,
            loss_e: losses.experts,
            loss_w,
            loss_a: losses.aggregate,
            loss_total: losses.total(),
            val_loss: val.loss,
            val_miou: val.miou,
            w_mean: losses.weights_mean,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: loss {:.3} (w {:.4}) val {:.3} mIoU {:.4} weights {:.3?}",
            record.loss_total,
            loss_w,
            val.loss,
            val.miou,
            record.w_mean
        );
        log.push(record);
        let is_best = stop.observe(val.loss);
        if is_best {
            best_epoch = epoch;
        }
        if let Some(out) = out {
            bundle.save(out.epoch_path(epoch))?;
            if is_best {
                bundle.save(out.best_path())?;
            }
            write_text(&out.log_path(), &log.to_csv())?;
        }
        if stop.should_stop() {
            log::info!("stopped early after epoch {epoch}");
            break;
        }
    }
    Ok(TrainOutcome {
        bundle,
        log,
        best_epoch,
    })
}

/// Full schedule: pre-training, then the alternating loop.
pub fn run_training(
    mut bundle: ModelBundle,
    split: &DatasetSplit,
    cfg: &TrainConfig,
    out: Option<&RunOutput>,
) -> Result<TrainOutcome> {
    let alphas = Alphas::from_triplets(&split.train, cfg.classes)?;
    if let Some(out) = out {
        std::fs::create_dir_all(&out.dir).map_err(|e| Error::io(format!("creating {}", out.dir.display()), e))?;
    }
    let plog = pretrain_experts(&mut bundle, split, &alphas, cfg)?;
    if let Some(out) = out {
        bundle.save(out.pretrained_path())?;
        write_text(&out.pretrain_log_path(), &plog.to_csv())?;
    }
    run_alternating(bundle, split, &alphas, cfg, out, 0, TrainLog::default())
}

/// Continue a run from its `epoch_<epoch>.awmf` checkpoint and log.
pub fn resume_training(split: &DatasetSplit, cfg: &TrainConfig, out: &RunOutput, epoch: usize) -> Result<TrainOutcome> {
    let bundle = ModelBundle::load(out.epoch_path(epoch))?;
    let text = std::fs::read_to_string(out.log_path())
        .map_err(|e| Error::io(format!("reading {}", out.log_path().display()), e))?;
    let mut prior = TrainLog::from_csv(&text)?;
    prior.records.retain(|r| r.epoch <= epoch);
    if prior.records.len() != epoch {
        return Err(Error::Config(format!(
            "training log has {} rows up to epoch {epoch}",
            prior.records.len()
        )));
    }
    let alphas = Alphas::from_triplets(&split.train, cfg.classes)?;
    run_alternating(bundle, split, &alphas, cfg, Some(out), epoch, prior)
}
