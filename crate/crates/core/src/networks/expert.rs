use rand_chacha::ChaCha8Rng;

use super::layers::{Conv, ConvBnElu};
use crate::error::{Error, Result};
use crate::tensor::{Mode, ParamStore, Tape, UpsampleMode, Var};

/// U-net style encoder-decoder for one magnification.
///
/// Every encoder stage is two conv-BN-ELU blocks; all but the last stage are
/// followed by a 2x2 max pool. The decoder mirrors the encoder with nearest
/// x2 upsampling and skip concatenation, and a 1x1 head maps to class
/// logits followed by a channel softmax.
#[derive(Clone, Debug)]
pub struct ExpertNet {
    /// Magnification index in `1..=3`.
    pub k: usize,
    encoder: Vec<[ConvBnElu; 2]>,
    decoder: Vec<[ConvBnElu; 2]>,
    head: Conv,
    depth: usize,
}

impl ExpertNet {
    pub(crate) fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        k: usize,
        in_channels: usize,
        widths: &[usize],
        classes: usize,
        zero_head: bool,
    ) -> Result<Self> {
        if widths.is_empty() {
            return Err(Error::Config("expert needs at least one stage".into()));
        }
        let p = format!("expert{k}");
        let mut encoder = Vec::new();
        let mut cin = in_channels;
        for (i, &w) in widths.iter().enumerate() {
            encoder.push([
                ConvBnElu::new(store, rng, &format!("{p}.enc{i}.conv0"), cin, w)?,
                ConvBnElu::new(store, rng, &format!("{p}.enc{i}.conv1"), w, w)?,
            ]);
            cin = w;
        }
        let mut decoder = Vec::new();
        for i in (0..widths.len() - 1).rev() {
            let w = widths[i];
            decoder.push([
                ConvBnElu::new(store, rng, &format!("{p}.dec{i}.conv0"), cin + w, w)?,
                ConvBnElu::new(store, rng, &format!("{p}.dec{i}.conv1"), w, w)?,
            ]);
            cin = w;
        }
        let head = Conv::new(store, rng, &format!("{p}.head"), cin, classes, 1, zero_head)?;
        Ok(ExpertNet {
            k,
            encoder,
            decoder,
            head,
            depth: widths.len(),
        })
    }

    /// Spatial extents must be divisible by this.
    pub fn granularity(&self) -> usize {
        1 << (self.depth - 1)
    }

    /// Per-pixel class distribution over the expert's own full field of view.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, mode: Mode) -> Result<Var> {
        let (_, _, h, w) = tape.value(x).dims4()?;
        let g = self.granularity();
        if h % g != 0 || w % g != 0 {
            return Err(Error::invalid(
                "expert_forward",
                format!("extent {h}x{w} not divisible by {g}"),
            ));
        }
        let mut skips = Vec::new();
        let mut y = x;
        for (i, [a, b]) in self.encoder.iter().enumerate() {
            y = a.forward(tape, store, y, mode)?;
            y = b.forward(tape, store, y, mode)?;
            if i + 1 < self.depth {
                skips.push(y);
                y = tape.max_pool2d(y, 2, 2)?;
            }
        }
        for [a, b] in &self.decoder {
            let skip = skips.pop().expect("one skip per pooled stage");
            y = tape.upsample(y, 2, UpsampleMode::Nearest)?;
            y = tape.concat_channels(&[y, skip])?;
            y = a.forward(tape, store, y, mode)?;
            y = b.forward(tape, store, y, mode)?;
        }
        let logits = self.head.forward(tape, store, y)?;
        tape.softmax_channels(logits)
    }
}
