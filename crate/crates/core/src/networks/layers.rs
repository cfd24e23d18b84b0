use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::tensor::{Mode, Padding, ParamId, ParamStore, StatsId, Tape, Tensor, Var};

/// He fan-in normal initialization.
pub(crate) fn he_normal(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

/// 3x3 convolution without bias, batch norm, ELU.
#[derive(Clone, Debug)]
pub(crate) struct ConvBnElu {
    kernel: ParamId,
    gamma: ParamId,
    beta: ParamId,
    stats: StatsId,
}

impl ConvBnElu {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize) -> Result<Self> {
        let kernel = store.add(format!("{name}.kernel"), he_normal(rng, &[cout, cin, 3, 3], cin * 9))?;
        let gamma = store.add(format!("{name}.bn.gamma"), Tensor::full(&[cout], 1.0))?;
        let beta = store.add(format!("{name}.bn.beta"), Tensor::zeros(&[cout]))?;
        let stats = store.add_stats(format!("{name}.bn"), cout)?;
        Ok(ConvBnElu {
            kernel,
            gamma,
            beta,
            stats,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, mode: Mode) -> Result<Var> {
        let k = tape.param(store, self.kernel);
        let y = tape.conv2d(x, k, None, 1, Padding::Same)?;
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        let y = tape.batch_norm(y, g, b, store, self.stats, mode)?;
        tape.elu(y)
    }
}

/// Convolution with bias and no normalization.
#[derive(Clone, Debug)]
pub(crate) struct Conv {
    kernel: ParamId,
    bias: ParamId,
}

impl Conv {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        size: usize,
        zero: bool,
    ) -> Result<Self> {
        let shape = [cout, cin, size, size];
        let value = if zero {
            Tensor::zeros(&shape)
        } else {
            he_normal(rng, &shape, cin * size * size)
        };
        let kernel = store.add(format!("{name}.kernel"), value)?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]))?;
        Ok(Conv { kernel, bias })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let k = tape.param(store, self.kernel);
        let b = tape.param(store, self.bias);
        tape.conv2d(x, k, Some(b), 1, Padding::Same)
    }
}
