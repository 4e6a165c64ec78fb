use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{RunningStats, Tensor};

/// A named trainable array.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor<f32>,
}

/// Running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnEntry {
    pub name: String,
    pub stats: RunningStats<f32>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Each parameter draws from its own stream keyed by name, so adding or
/// removing parts of the network leaves the other initial values unchanged.
fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(name.as_bytes()));
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Init {
    /// Uniform in `±sqrt(6 / fan_in)`.
    HeUniform { fan_in: usize },
    Zeros,
    Ones,
}

pub(crate) fn init_tensor(seed: u64, name: &str, shape: &[usize], init: Init) -> Tensor<f32> {
    match init {
        Init::Zeros => Tensor::zeros(shape),
        Init::Ones => Tensor::ones(shape),
        Init::HeUniform { fan_in } => {
            let bound = (6.0 / fan_in as f64).sqrt();
            let mut rng = param_rng(seed, name);
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| rng.random_range(-bound..bound) as f32).collect();
            Tensor::new(shape, data).expect("init shape")
        }
    }
}
