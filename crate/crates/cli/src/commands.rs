//! Subcommand implementations.

use std::path::{Path, PathBuf};

use awmf_core::metrics::{
    agreement_csv, cascade_segment, metrics_csv, miou, op_accuracy, pc_accuracy, render_mask, AgreementTable,
    ConfusionMatrix, ModelScores,
};
use awmf_core::networks::inference::{predict_triplets, segment_slide};
use awmf_core::networks::{ModelBundle, Variant};
use awmf_core::pyramid::{
    class_areas, extract_triplets, load_image, load_manifest_slides, save_image, save_labels, split_dataset,
    synth_generate, write_manifest, DatasetSplit, LabelMap, ManifestEntry, PatchTriplet, Slide, SplitTag,
};
use awmf_core::trainer::{
    pretrain_experts, resume_training, run_alternating, run_training, Alphas, RunOutput, TrainLog,
};
use awmf_core::{Error, Result};

use crate::config::{RunConfig, RunMode};

fn data_error(msg: String) -> Error {
    Error::InvalidArgument { op: "dataset", msg }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Synthetic slides, label maps and a manifest under `<out>/data`.
pub fn gen_data(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.out.join("data");
    let classes = cfg.synth.mode.classes();
    let mut entries = Vec::with_capacity(cfg.slides);
    let mut totals = vec![0.0; classes];
    let mut worst: f64 = 0.0;
    for i in 0..cfg.slides {
        let id = format!("slide_{i:03}");
        let seed = cfg.seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
        let slide = synth_generate(&cfg.synth, seed, &id)?;
        let ext = if slide.image.channels == 3 { "ppm" } else { "pgm" };
        let image = format!("{id}.{ext}");
        let labels = format!("{id}_labels.pgm");
        save_image(dir.join(&image), &slide.image)?;
        save_labels(dir.join(&labels), &slide.labels)?;
        let areas = class_areas(&slide.labels, classes);
        for (c, a) in areas.iter().enumerate() {
            totals[c] += a / cfg.slides as f64;
            worst = worst.max((a - cfg.synth.ratios[c]).abs());
        }
        entries.push(ManifestEntry {
            slide: image.into(),
            labels: labels.into(),
            split: if i + cfg.test_slides >= cfg.slides {
                SplitTag::Test
            } else {
                SplitTag::Train
            },
        });
    }
    let manifest = dir.join("manifest.txt");
    write_manifest(&manifest, &entries)?;
    println!("wrote {} slides and {}", cfg.slides, manifest.display());
    println!("class  target  generated");
    for c in 0..classes {
        println!("{c:>5}  {:>6.3}  {:>9.4}", cfg.synth.ratios[c], totals[c]);
    }
    let verdict = if worst <= 0.05 { "within" } else { "outside" };
    println!("largest per-slide deviation {worst:.4} ({verdict} 0.05)");
    Ok(manifest)
}

/// Slides of the manifest, split by tag, with their channel count.
pub struct Slides {
    pub train: Vec<Slide>,
    pub test: Vec<Slide>,
    pub channels: usize,
}

pub fn load_slides(cfg: &RunConfig, manifest: &Path, classes: usize) -> Result<Slides> {
    let all = load_manifest_slides(manifest)?;
    if all.is_empty() {
        return Err(data_error(format!("manifest {} lists no slides", manifest.display())));
    }
    let channels = all[0].0.image.channels;
    let mut out = Slides {
        train: vec![],
        test: vec![],
        channels,
    };
    for (slide, tag) in all {
        slide.check_labels(classes)?;
        if slide.image.channels != channels {
            return Err(data_error(format!(
                "slide {} has {} channels, expected {channels}",
                slide.id, slide.image.channels
            )));
        }
        match tag {
            SplitTag::Train => out.train.push(slide),
            SplitTag::Test => out.test.push(slide),
        }
    }
    if cfg.model.in_channels != 0 && cfg.model.in_channels != channels {
        return Err(Error::Config(format!(
            "model.in_channels = {} but the slides have {channels}",
            cfg.model.in_channels
        )));
    }
    Ok(out)
}

/// Training triplets split into train / X', plus the test triplets.
pub fn build_split(cfg: &RunConfig, slides: &Slides, window: usize) -> Result<DatasetSplit> {
    let stride = if cfg.model.window == window { cfg.stride } else { window };
    let mut train = Vec::new();
    for s in &slides.train {
        train.extend(extract_triplets(s, window, stride)?);
    }
    let mut test = Vec::new();
    for s in &slides.test {
        test.extend(extract_triplets(s, window, window)?);
    }
    if train.is_empty() {
        return Err(data_error("no training slides in the manifest".to_string()));
    }
    split_dataset(train, test, cfg.val_fraction, cfg.seed)
}

fn fresh_bundle(cfg: &RunConfig, channels: usize) -> Result<ModelBundle> {
    let mut model = cfg.model.clone();
    model.in_channels = channels;
    ModelBundle::new(model, cfg.seed)
}

pub fn pretrain(cfg: &RunConfig) -> Result<()> {
    let slides = load_slides(cfg, &cfg.manifest, cfg.train.classes)?;
    let split = build_split(cfg, &slides, cfg.model.window)?;
    let mut bundle = fresh_bundle(cfg, slides.channels)?;
    let alphas = Alphas::from_triplets(&split.train, cfg.train.classes)?;
    let log = pretrain_experts(&mut bundle, &split, &alphas, &cfg.train)?;
    let out = RunOutput { dir: cfg.out.clone() };
    bundle.save(out.pretrained_path())?;
    write_text(&out.pretrain_log_path(), &log.to_csv())?;
    println!(
        "pre-trained {} epochs on {} triplets; wrote {}",
        log.records.len(),
        split.train.len(),
        out.pretrained_path().display()
    );
    Ok(())
}

pub enum TrainStart {
    Fresh,
    Pretrained(PathBuf),
    Resume(usize),
}

pub fn train(cfg: &RunConfig, start: TrainStart) -> Result<()> {
    let slides = load_slides(cfg, &cfg.manifest, cfg.train.classes)?;
    let split = build_split(cfg, &slides, cfg.model.window)?;
    let out = RunOutput { dir: cfg.out.clone() };
    let result = match start {
        TrainStart::Fresh => run_training(fresh_bundle(cfg, slides.channels)?, &split, &cfg.train, Some(&out))?,
        TrainStart::Pretrained(path) => {
            let bundle = ModelBundle::load(&path)?;
            let alphas = Alphas::from_triplets(&split.train, cfg.train.classes)?;
            std::fs::create_dir_all(&out.dir).map_err(|e| Error::io(format!("creating {}", out.dir.display()), e))?;
            run_alternating(bundle, &split, &alphas, &cfg.train, Some(&out), 0, TrainLog::default())?
        }
        TrainStart::Resume(epoch) => resume_training(&split, &cfg.train, &out, epoch)?,
    };
    match result.log.records.iter().find(|r| r.epoch == result.best_epoch) {
        Some(best) => println!(
            "trained {} epochs; best epoch {} (val loss {:.4}, val mIoU {:.4}); wrote {}",
            result.log.records.len(),
            best.epoch,
            best.val_loss,
            best.val_miou,
            out.best_path().display()
        ),
        None => println!("no alternating epochs were run"),
    }
    Ok(())
}

fn stats_ready(bundle: &ModelBundle, prefix: &str) -> bool {
    bundle
        .store
        .all_stats()
        .iter()
        .filter(|s| s.name.starts_with(prefix))
        .all(|s| s.initialized)
}

/// Variants a checkpoint can evaluate: the experts always, the aggregated
/// ones once the aggregator (and for adaptive, the weighting network) has
/// been trained.
pub fn available_variants(bundle: &ModelBundle) -> Vec<Variant> {
    let mut v = vec![Variant::Expert(1), Variant::Expert(2), Variant::Expert(3)];
    if stats_ready(bundle, "aggregator.") {
        v.push(Variant::Fixed);
        if stats_ready(bundle, "weighting.") {
            v.push(Variant::Adaptive);
        }
    }
    v
}

pub fn parse_variant(s: &str) -> Result<Variant> {
    Variant::ALL
        .into_iter()
        .find(|v| v.name() == s)
        .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
}

fn slide_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "slide".into())
}

pub fn segment(
    cfg: &RunConfig,
    checkpoint: &Path,
    slide_path: &Path,
    subtype: Option<&Path>,
    variant: &str,
) -> Result<()> {
    let bundle = ModelBundle::load(checkpoint)?;
    let image = load_image(slide_path)?;
    let labels = LabelMap::new(image.width, image.height, awmf_core::tensor::IGNORE_LABEL);
    let stem = slide_stem(slide_path);
    let slide = Slide::new(stem.clone(), image, labels)?;
    if slide.image.channels != bundle.config.in_channels {
        return Err(Error::Config(format!(
            "checkpoint expects {} channels, slide has {}",
            bundle.config.in_channels, slide.image.channels
        )));
    }
    let crop = cfg.train.crop_mode;
    let mask = match (cfg.mode, subtype) {
        (RunMode::Cascade, None) => {
            return Err(Error::Config("cascade mode needs --subtype-checkpoint".into()));
        }
        (_, Some(sub)) => {
            let sub = ModelBundle::load(sub)?;
            cascade_segment(&bundle, &sub, &slide, crop, cfg.train.batch, cfg.threads)?
        }
        (_, None) => {
            let v = parse_variant(variant)?;
            if !available_variants(&bundle).contains(&v) {
                return Err(Error::Config(format!("checkpoint cannot run the {} variant", v.name())));
            }
            segment_slide(&bundle, &slide, v, crop, cfg.train.batch, cfg.threads)?
        }
    };
    let dir = cfg.out.join("segment");
    let label_path = dir.join(format!("{stem}_labels.pgm"));
    let mask_path = dir.join(format!("{stem}_mask.ppm"));
    save_labels(&label_path, &mask)?;
    save_image(&mask_path, &render_mask(&mask, &cfg.palette)?)?;
    let classes = mask
        .data
        .iter()
        .filter(|&&l| l != 255)
        .map(|&l| l as usize + 1)
        .max()
        .unwrap_or(0);
    let areas = class_areas(&mask, classes.max(bundle.config.classes));
    println!("wrote {} and {}", label_path.display(), mask_path.display());
    for (c, a) in areas.iter().enumerate() {
        println!("class {c}: {:.4} of labelled pixels", a);
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalSplit {
    Train,
    Val,
    Test,
}

impl EvalSplit {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(EvalSplit::Train),
            "val" => Ok(EvalSplit::Val),
            "test" => Ok(EvalSplit::Test),
            _ => Err(Error::Config(format!("split {s:?} is not train, val or test"))),
        }
    }

    fn name(self) -> &'static str {
        match self {
            EvalSplit::Train => "train",
            EvalSplit::Val => "val",
            EvalSplit::Test => "test",
        }
    }
}

fn eval_triplets(
    cfg: &RunConfig,
    bundle: &ModelBundle,
    manifest: &Path,
    which: EvalSplit,
) -> Result<Vec<PatchTriplet>> {
    let slides = load_slides(cfg, manifest, bundle.config.classes)?;
    if slides.channels != bundle.config.in_channels {
        return Err(Error::Config(format!(
            "checkpoint expects {} channels, slides have {}",
            bundle.config.in_channels, slides.channels
        )));
    }
    let split = build_split(cfg, &slides, bundle.config.window)?;
    let set = match which {
        EvalSplit::Train => split.train,
        EvalSplit::Val => split.weighting,
        EvalSplit::Test => split.test,
    };
    if set.is_empty() {
        return Err(data_error(format!("the {} split is empty", which.name())));
    }
    Ok(set)
}

fn confusion_for(
    cfg: &RunConfig,
    bundle: &ModelBundle,
    triplets: &[PatchTriplet],
    variant: Variant,
) -> Result<(ConfusionMatrix, Vec<Vec<u8>>)> {
    let preds = predict_triplets(
        bundle,
        triplets,
        variant,
        cfg.train.crop_mode,
        cfg.train.batch,
        cfg.threads,
    )?;
    let mut cm = ConfusionMatrix::new(bundle.config.classes);
    let mut labels = Vec::with_capacity(preds.len());
    for (p, t) in preds.into_iter().zip(triplets) {
        cm.accumulate(&p.labels, &t.t[0])?;
        labels.push(p.labels);
    }
    Ok((cm, labels))
}

pub fn eval(cfg: &RunConfig, checkpoint: &Path, manifest: &Path, which: EvalSplit) -> Result<Vec<ModelScores>> {
    let bundle = ModelBundle::load(checkpoint)?;
    let triplets = eval_triplets(cfg, &bundle, manifest, which)?;
    let mut scores = Vec::new();
    println!("{:<10} {:>8} {:>8} {:>8}", "model", "OP", "PC", "mIoU");
    for v in available_variants(&bundle) {
        let (cm, _) = confusion_for(cfg, &bundle, &triplets, v)?;
        println!(
            "{:<10} {:>8.4} {:>8.4} {:>8.4}",
            v.name(),
            op_accuracy(&cm),
            pc_accuracy(&cm),
            miou(&cm)
        );
        scores.push(ModelScores { model: v.name(), cm });
    }
    let path = cfg.out.join("eval").join(format!("metrics_{}.csv", which.name()));
    write_text(&path, &metrics_csv(&scores))?;
    println!("wrote {}", path.display());
    Ok(scores)
}

fn agreement_table(cfg: &RunConfig, bundle: &ModelBundle, triplets: &[PatchTriplet]) -> Result<AgreementTable> {
    let mut preds = Vec::new();
    for k in 1..=3 {
        preds.push(confusion_for(cfg, bundle, triplets, Variant::Expert(k))?.1);
    }
    let mut table = AgreementTable::new(bundle.config.classes);
    for (i, t) in triplets.iter().enumerate() {
        table.accumulate([&preds[0][i], &preds[1][i], &preds[2][i]], &t.t[0])?;
    }
    Ok(table)
}

pub fn agreement(
    cfg: &RunConfig,
    checkpoint: &Path,
    before: Option<&Path>,
    manifest: &Path,
    which: EvalSplit,
) -> Result<Vec<(String, AgreementTable)>> {
    let after = ModelBundle::load(checkpoint)?;
    let triplets = eval_triplets(cfg, &after, manifest, which)?;
    let mut tables = Vec::new();
    if let Some(path) = before {
        let b = ModelBundle::load(path)?;
        if b.config.window != after.config.window || b.config.classes != after.config.classes {
            return Err(Error::Config("checkpoints differ in window or class count".into()));
        }
        tables.push(("before".to_string(), agreement_table(cfg, &b, &triplets)?));
    }
    let tag = if before.is_some() { "after" } else { "model" };
    tables.push((tag.to_string(), agreement_table(cfg, &after, &triplets)?));
    for (stage, t) in &tables {
        println!(
            "{stage}: E1 {:.4} E2 {:.4} E3 {:.4} union {:.4} intersection {:.4}",
            t.expert_rate(1),
            t.expert_rate(2),
            t.expert_rate(3),
            t.union_rate(),
            t.intersection_rate()
        );
    }
    let path = cfg
        .out
        .join("agreement")
        .join(format!("agreement_{}.csv", which.name()));
    write_text(&path, &agreement_csv(&tables))?;
    println!("wrote {}", path.display());
    Ok(tables)
}
