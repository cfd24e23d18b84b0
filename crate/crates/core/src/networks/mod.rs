//! Expert, weighting and aggregating networks and their composition.

mod aggregator;
mod checkpoint;
mod expert;
pub mod inference;
mod layers;
mod weighting;

pub use aggregator::AggregatingNet;
pub use expert::ExpertNet;
pub use inference::Variant;
pub use weighting::WeightingNet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Mode, ParamId, ParamStore, Tape, UpsampleMode, Var};

/// Area ratio of each field of view relative to the target region.
pub const SCALES: [usize; 3] = [1, 2, 4];

/// Checkpoint format version.
pub const FORMAT_VERSION: u32 = 1;

/// Architecture hyperparameters shared by the five networks.
#[derive(Clone, Debug, PartialEq)]
pub struct BundleConfig {
    pub classes: usize,
    pub window: usize,
    pub in_channels: usize,
    pub expert_widths: Vec<usize>,
    pub weighting_widths: Vec<usize>,
    pub aggregator_width: usize,
    /// Zero the final expert and weighting layers (uniform heat maps, weights 0.5).
    pub zero_heads: bool,
}

impl Default for BundleConfig {
    fn default() -> Self {
        BundleConfig {
            classes: 4,
            window: 32,
            in_channels: 1,
            expert_widths: vec![16, 32, 64],
            weighting_widths: vec![8, 16, 32, 64],
            aggregator_width: 16,
            zero_heads: false,
        }
    }
}

impl BundleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.classes >= crate::tensor::IGNORE_LABEL as usize {
            return Err(Error::Config(format!("too many classes: {}", self.classes)));
        }
        // the 4x field of view keeps a W/4 target crop at offset 3W/8
        if self.window == 0 || self.window % 8 != 0 {
            return Err(Error::Config(format!(
                "window {} must be a positive multiple of 8",
                self.window
            )));
        }
        if self.in_channels == 0 || self.aggregator_width == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.expert_widths.is_empty() || self.expert_widths.contains(&0) {
            return Err(Error::Config("expert widths must be non-empty and positive".into()));
        }
        if self.weighting_widths.is_empty() || self.weighting_widths.contains(&0) {
            return Err(Error::Config("weighting widths must be non-empty and positive".into()));
        }
        let g = 1 << (self.expert_widths.len() - 1);
        if self.window % g != 0 {
            return Err(Error::Config(format!(
                "window {} not divisible by expert pooling factor {g}",
                self.window
            )));
        }
        Ok(())
    }
}

/// All five networks sharing one parameter store.
///
/// Parameter names carry the network prefix (`expert1.`, `expert2.`,
/// `expert3.`, `weighting.`, `aggregator.`), which is how training stages
/// select what they update.
#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub config: BundleConfig,
    pub store: ParamStore,
    pub experts: [ExpertNet; 3],
    pub weighting: WeightingNet,
    pub aggregator: AggregatingNet,
}

/// Outputs of one pass through the integrated network.
#[derive(Clone, Copy, Debug)]
pub struct IntegratedOutput {
    /// Aggregated target-frame distribution.
    pub y: Var,
    /// Full-frame expert distributions, before cropping.
    pub experts: [Var; 3],
}

impl ModelBundle {
    pub fn new(config: BundleConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut make = |k| {
            ExpertNet::new(
                &mut store,
                &mut rng,
                k,
                config.in_channels,
                &config.expert_widths,
                config.classes,
                config.zero_heads,
            )
        };
        let experts = [make(1)?, make(2)?, make(3)?];
        let weighting = WeightingNet::new(
            &mut store,
            &mut rng,
            config.in_channels,
            &config.weighting_widths,
            config.zero_heads,
        )?;
        let aggregator = AggregatingNet::new(&mut store, &mut rng, config.classes, config.aggregator_width)?;
        // start from storage precision so untouched groups survive the
        // per-epoch rounding unchanged
        store.snap_to_f32();
        Ok(ModelBundle {
            config,
            store,
            experts,
            weighting,
            aggregator,
        })
    }

    /// Parameters of expert `k` (1-based).
    pub fn expert_params(&self, k: usize) -> Vec<ParamId> {
        self.store.ids_with_prefix(&format!("expert{k}."))
    }

    pub fn weighting_params(&self) -> Vec<ParamId> {
        self.store.ids_with_prefix("weighting.")
    }

    pub fn aggregator_params(&self) -> Vec<ParamId> {
        self.store.ids_with_prefix("aggregator.")
    }

    /// Everything trained by the end-to-end stage: experts plus aggregator.
    pub fn integrated_params(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for k in 1..=3 {
            ids.extend(self.expert_params(k));
        }
        ids.extend(self.aggregator_params());
        ids
    }

    pub fn expert_forward(&self, tape: &mut Tape, k: usize, x: Var, mode: Mode) -> Result<Var> {
        self.check_patch(tape, x, "expert_forward")?;
        self.experts[k - 1].forward(tape, &self.store, x, mode)
    }

    pub fn weighting_forward(&self, tape: &mut Tape, x2: Var, mode: Mode) -> Result<Var> {
        self.check_patch(tape, x2, "weighting_forward")?;
        self.weighting.forward(tape, &self.store, x2, mode)
    }

    pub fn aggregate_forward(&self, tape: &mut Tape, aligned: [Var; 3], w: Var, mode: Mode) -> Result<Var> {
        self.aggregator.forward(tape, &self.store, aligned, w, mode)
    }

    /// Experts on their own fields of view, target-region alignment, then
    /// aggregation with per-sample weights `w` (`N x 3`).
    pub fn integrated_forward(
        &self,
        tape: &mut Tape,
        xs: [Var; 3],
        w: Var,
        crop_mode: UpsampleMode,
        mode: Mode,
    ) -> Result<IntegratedOutput> {
        let mut experts = [xs[0]; 3];
        let mut aligned = [xs[0]; 3];
        for k in 1..=3 {
            let y = self.expert_forward(tape, k, xs[k - 1], mode)?;
            experts[k - 1] = y;
            aligned[k - 1] = crop_and_upsample(tape, y, k, crop_mode)?;
        }
        let y = self.aggregate_forward(tape, aligned, w, mode)?;
        Ok(IntegratedOutput { y, experts })
    }

    fn check_patch(&self, tape: &Tape, x: Var, op: &'static str) -> Result<()> {
        let (_, c, h, w) = tape.value(x).dims4()?;
        let cfg = &self.config;
        if c != cfg.in_channels || h != cfg.window || w != cfg.window {
            return Err(Error::shape(
                op,
                tape.value(x).shape(),
                &[tape.value(x).shape()[0], cfg.in_channels, cfg.window, cfg.window],
            ));
        }
        Ok(())
    }
}

/// Target-region crop of expert `k`'s full-frame map, resampled back to
/// the window size. The target occupies the central `W/f` square where
/// `f` is the expert's scale factor.
pub fn crop_and_upsample(tape: &mut Tape, map: Var, k: usize, mode: UpsampleMode) -> Result<Var> {
    if !(1..=3).contains(&k) {
        return Err(Error::invalid("crop_and_upsample", format!("expert index {k}")));
    }
    let f = SCALES[k - 1];
    if f == 1 {
        return Ok(map);
    }
    let (_, _, h, w) = tape.value(map).dims4()?;
    if h != w || h % (2 * f) != 0 {
        return Err(Error::Config(format!(
            "window {h}x{w} cannot be centrally cropped by factor {f}"
        )));
    }
    let side = h / f;
    let offset = (h - side) / 2;
    let crop = tape.crop(map, offset, offset, side, side)?;
    tape.upsample(crop, f, mode)
}
