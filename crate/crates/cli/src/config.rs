//! Line-oriented `key = value` run configuration.
//!
//! Keys are dotted (`train.lr = 1e-4`), `#` starts a comment, and every key
//! must appear in [`SCHEMA`]. Values given on the command line override the
//! file, which overrides the defaults.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use awmf_core::metrics::Palette;
use awmf_core::networks::BundleConfig;
use awmf_core::pyramid::{SynthConfig, SynthMode};
use awmf_core::tensor::UpsampleMode;
use awmf_core::trainer::{TrainConfig, WeightingMode};
use awmf_core::{Error, Result};

/// `(key, default, description)` for every accepted key.
pub const SCHEMA: &[(&str, &str, &str)] = &[
    ("run.mode", "four-class", "two-class | four-class | cascade"),
    ("run.out", "out", "output directory"),
    ("run.seed", "0", "seed for data generation, splits, init and shuffling"),
    ("run.threads", "1", "workers for patch-parallel inference"),
    (
        "data.manifest",
        "",
        "dataset manifest (default: <run.out>/data/manifest.txt)",
    ),
    ("data.val_fraction", "0.2", "share of training triplets held out as X'"),
    ("data.stride", "0", "tiling stride for training triplets (0 = window)"),
    ("synth.slides", "16", "slides written by gen-data"),
    ("synth.test_slides", "4", "how many of them are tagged test"),
    ("synth.width", "256", "slide width"),
    ("synth.height", "256", "slide height"),
    (
        "synth.ratios",
        "",
        "class area ratios, comma separated (default per mode)",
    ),
    ("synth.color", "false", "write RGB slides instead of grayscale"),
    ("synth.coarse_scale", "64", "smoothness of the coarse factor (px)"),
    ("synth.fine_scale", "48", "smoothness of the fine factor (px)"),
    ("synth.fine_amplitude", "0.12", "amplitude of the period-2 texture"),
    ("synth.mid_amplitude", "0.08", "amplitude of the period-4 texture"),
    ("synth.dot_spacing", "48", "grid spacing of coarse-cue dots"),
    ("synth.dot_radius", "5", "radius of coarse-cue dots"),
    ("synth.dot_amplitude", "0.25", "brightness of coarse-cue dots"),
    ("synth.noise", "0.08", "pixel noise standard deviation"),
    ("model.classes", "0", "class count (0 = from run.mode)"),
    ("model.window", "32", "patch size W"),
    ("model.in_channels", "0", "image channels (0 = from the data)"),
    ("model.expert_widths", "16,32,64", "expert channel widths per stage"),
    ("model.weighting_widths", "8,16,32,64", "weighting network widths"),
    ("model.aggregator_width", "16", "aggregator hidden width"),
    ("train.lr", "1e-4", "Nadam learning rate"),
    ("train.batch", "8", "batch size"),
    ("train.max_epochs", "50", "alternating epochs L"),
    ("train.pretrain_epochs", "20", "expert pre-training epochs"),
    ("train.patience", "5", "early-stop patience (epochs)"),
    ("train.tol", "1e-4", "relative validation-loss improvement that counts"),
    (
        "train.crop_mode",
        "bilinear",
        "bilinear | nearest resampling of expert crops",
    ),
    ("train.augment", "true", "random flips of training triplets"),
    ("train.weighting", "adaptive", "adaptive | fixed expert weights"),
    (
        "render.palette",
        "0,176,80;255,255,0;255,0,0;0,112,192;112,48,160",
        "class colours r,g,b;...",
    ),
];

/// Text listing every key and its default, for `--help`.
pub fn schema_help() -> String {
    let mut s = String::from("Configuration keys (key = default):\n");
    for (k, d, h) in SCHEMA {
        let shown = if d.is_empty() { "\"\"" } else { d };
        s.push_str(&format!("  {k} = {shown}\n      {h}\n"));
    }
    s.push_str("\nPrecedence: built-in defaults < --config file < command-line flags.\n");
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunMode {
    TwoClass,
    FourClass,
    Cascade,
}

/// Parsed configuration as raw strings, validated against [`SCHEMA`].
#[derive(Clone, Debug)]
pub struct RawConfig {
    values: BTreeMap<String, String>,
}

impl Default for RawConfig {
    fn default() -> Self {
        RawConfig {
            values: SCHEMA.iter().map(|(k, d, _)| (k.to_string(), d.to_string())).collect(),
        }
    }
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RawConfig::default();
        for (i, line) in text.lines().enumerate() {
            let line = match line.find('#') {
                Some(p) => &line[..p],
                None => line,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(Error::Config(format!("unknown key {key:?}"))),
        }
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).expect("key is in the schema")
    }

    fn parse_as<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key);
        v.parse()
            .map_err(|_| Error::Config(format!("{key} = {v:?} is not a valid value")))
    }

    fn list(&self, key: &str) -> Result<Vec<usize>> {
        self.get(key)
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("{key}: bad list item {s:?}")))
            })
            .collect()
    }

    pub fn resolve(&self) -> Result<RunConfig> {
        let mode = match self.get("run.mode") {
            "two-class" => RunMode::TwoClass,
            "four-class" => RunMode::FourClass,
            "cascade" => RunMode::Cascade,
            m => {
                return Err(Error::Config(format!(
                    "run.mode = {m:?} is not two-class, four-class or cascade"
                )))
            }
        };
        let synth_mode = if mode == RunMode::TwoClass {
            SynthMode::TwoClass
        } else {
            SynthMode::FourClass
        };
        let mut synth = SynthConfig::new(synth_mode);
        synth.width = self.parse_as("synth.width")?;
        synth.height = self.parse_as("synth.height")?;
        if !self.get("synth.ratios").is_empty() {
            synth.ratios = self
                .get("synth.ratios")
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Config(format!("synth.ratios = {:?}", self.get("synth.ratios"))))?;
        }
        synth.color = self.parse_as("synth.color")?;
        synth.coarse_scale = self.parse_as("synth.coarse_scale")?;
        synth.fine_scale = self.parse_as("synth.fine_scale")?;
        synth.fine_amplitude = self.parse_as("synth.fine_amplitude")?;
        synth.mid_amplitude = self.parse_as("synth.mid_amplitude")?;
        synth.dot_spacing = self.parse_as("synth.dot_spacing")?;
        synth.dot_radius = self.parse_as("synth.dot_radius")?;
        synth.dot_amplitude = self.parse_as("synth.dot_amplitude")?;
        synth.noise = self.parse_as("synth.noise")?;
        synth.validate()?;

        let classes = match self.parse_as::<usize>("model.classes")? {
            0 => synth_mode.classes(),
            c => c,
        };
        let window: usize = self.parse_as("model.window")?;
        let crop_mode = match self.get("train.crop_mode") {
            "bilinear" => UpsampleMode::Bilinear,
            "nearest" => UpsampleMode::Nearest,
            m => {
                return Err(Error::Config(format!(
                    "train.crop_mode = {m:?} is not bilinear or nearest"
                )))
            }
        };
        let weighting = match self.get("train.weighting") {
            "adaptive" => WeightingMode::Adaptive,
            "fixed" => WeightingMode::Fixed,
            m => {
                return Err(Error::Config(format!(
                    "train.weighting = {m:?} is not adaptive or fixed"
                )))
            }
        };
        let seed: u64 = self.parse_as("run.seed")?;
        let threads: usize = self.parse_as("run.threads")?;
        let train = TrainConfig {
            lr: self.parse_as("train.lr")?,
            batch: self.parse_as("train.batch")?,
            max_epochs: self.parse_as("train.max_epochs")?,
            pretrain_epochs: self.parse_as("train.pretrain_epochs")?,
            patience: self.parse_as("train.patience")?,
            tol: self.parse_as("train.tol")?,
            seed,
            window,
            classes,
            crop_mode,
            augment: self.parse_as("train.augment")?,
            weighting,
            threads,
        };
        train.validate()?;
        let model = BundleConfig {
            classes,
            window,
            in_channels: self.parse_as("model.in_channels")?,
            expert_widths: self.list("model.expert_widths")?,
            weighting_widths: self.list("model.weighting_widths")?,
            aggregator_width: self.parse_as("model.aggregator_width")?,
            zero_heads: false,
        };
        let val_fraction: f64 = self.parse_as("data.val_fraction")?;
        if !(val_fraction > 0.0 && val_fraction < 1.0) {
            return Err(Error::Config(format!(
                "data.val_fraction = {val_fraction} must lie in (0, 1)"
            )));
        }
        let slides: usize = self.parse_as("synth.slides")?;
        let test_slides: usize = self.parse_as("synth.test_slides")?;
        if test_slides > slides {
            return Err(Error::Config("synth.test_slides exceeds synth.slides".into()));
        }
        let out = PathBuf::from(self.get("run.out"));
        let manifest = match self.get("data.manifest") {
            "" => out.join("data").join("manifest.txt"),
            m => PathBuf::from(m),
        };
        let stride = match self.parse_as::<usize>("data.stride")? {
            0 => window,
            s => s,
        };
        Ok(RunConfig {
            mode,
            out,
            seed,
            threads,
            manifest,
            val_fraction,
            stride,
            slides,
            test_slides,
            synth,
            model,
            train,
            palette: Palette::parse(self.get("render.palette"))?,
        })
    }
}

/// Fully typed configuration.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub mode: RunMode,
    pub out: PathBuf,
    pub seed: u64,
    pub threads: usize,
    pub manifest: PathBuf,
    pub val_fraction: f64,
    pub stride: usize,
    pub slides: usize,
    pub test_slides: usize,
    pub synth: SynthConfig,
    /// `in_channels` is 0 until the data has been inspected.
    pub model: BundleConfig,
    pub train: TrainConfig,
    pub palette: Palette,
}
