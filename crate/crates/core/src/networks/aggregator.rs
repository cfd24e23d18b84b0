use rand_chacha::ChaCha8Rng;

use super::layers::{Conv, ConvBnElu};
use crate::error::{Error, Result};
use crate::tensor::{Mode, ParamStore, Tape, Var};

/// Five 3x3 convolutions fusing the weight-scaled expert maps.
#[derive(Clone, Debug)]
pub struct AggregatingNet {
    hidden: Vec<ConvBnElu>,
    out: Conv,
}

impl AggregatingNet {
    pub(crate) fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, classes: usize, width: usize) -> Result<Self> {
        let mut hidden = Vec::new();
        let mut cin = 3 * classes;
        for i in 0..4 {
            hidden.push(ConvBnElu::new(store, rng, &format!("aggregator.conv{i}"), cin, width)?);
            cin = width;
        }
        let out = Conv::new(store, rng, "aggregator.conv4", cin, classes, 3, false)?;
        Ok(AggregatingNet { hidden, out })
    }

    /// `aligned` are target-frame expert maps (`N x M x W x W`), `w` is
    /// `N x 3`. Each map is multiplied by its per-sample weight before the
    /// channel concatenation.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, aligned: [Var; 3], w: Var, mode: Mode) -> Result<Var> {
        let n = tape.value(aligned[0]).dims4()?.0;
        if tape.value(w).shape() != [n, 3] {
            return Err(Error::invalid(
                "aggregate_forward",
                format!("expected {n}x3 weights, got {:?}", tape.value(w).shape()),
            ));
        }
        let mut scaled = Vec::with_capacity(3);
        for (k, &map) in aligned.iter().enumerate() {
            let wk = tape.column(w, k)?;
            scaled.push(tape.scale(map, wk)?);
        }
        let mut y = tape.concat_channels(&scaled)?;
        for layer in &self.hidden {
            y = layer.forward(tape, store, y, mode)?;
        }
        let logits = self.out.forward(tape, store, y)?;
        tape.softmax_channels(logits)
    }
}
