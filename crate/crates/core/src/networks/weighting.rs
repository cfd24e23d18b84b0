use rand_chacha::ChaCha8Rng;

use super::layers::{he_normal, ConvBnElu};
use crate::error::{Error, Result};
use crate::tensor::{Mode, ParamId, ParamStore, Tape, Tensor, Var};

/// Small classifier producing one independent trust score in (0, 1) per
/// expert from the middle-magnification patch.
#[derive(Clone, Debug)]
pub struct WeightingNet {
    blocks: Vec<ConvBnElu>,
    fc_weight: ParamId,
    fc_bias: ParamId,
}

impl WeightingNet {
    pub(crate) fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        in_channels: usize,
        widths: &[usize],
        zero_head: bool,
    ) -> Result<Self> {
        if widths.is_empty() {
            return Err(Error::Config("weighting net needs at least one block".into()));
        }
        let mut blocks = Vec::new();
        let mut cin = in_channels;
        for (i, &w) in widths.iter().enumerate() {
            blocks.push(ConvBnElu::new(store, rng, &format!("weighting.block{i}"), cin, w)?);
            cin = w;
        }
        let w0 = if zero_head {
            Tensor::zeros(&[3, cin])
        } else {
            he_normal(rng, &[3, cin], cin)
        };
        let fc_weight = store.add("weighting.fc.weight", w0)?;
        let fc_bias = store.add("weighting.fc.bias", Tensor::zeros(&[3]))?;
        Ok(WeightingNet {
            blocks,
            fc_weight,
            fc_bias,
        })
    }

    /// `N x C x W x W` patches to `N x 3` weights. Each block is followed by
    /// a 2x2 pool while the extent is still even and at least 2.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, mode: Mode) -> Result<Var> {
        let mut y = x;
        for block in &self.blocks {
            y = block.forward(tape, store, y, mode)?;
            let (_, _, h, w) = tape.value(y).dims4()?;
            if h >= 2 && w >= 2 && h % 2 == 0 && w % 2 == 0 {
                y = tape.max_pool2d(y, 2, 2)?;
            }
        }
        let pooled = tape.global_avg_pool(y)?;
        let w = tape.param(store, self.fc_weight);
        let b = tape.param(store, self.fc_bias);
        let logits = tape.fully_connected(pooled, w, b)?;
        tape.sigmoid(logits)
    }
}
