//! Seeded Gaussian sampling.
//!
//! Row `s` of a sample matrix is a pure function of `(seed, s)`: each row
//! draws from its own ChaCha8 stream. Drawing more rows never perturbs the
//! earlier ones, and per-head seeds are derived by mixing `(layer, head)`
//! into the request seed so heads can be processed in any order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RngSeed(pub u64);

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for the `(layer, head)` stream of a request.
pub fn stream_seed(seed: RngSeed, layer: usize, head: usize) -> RngSeed {
    let cell = ((layer as u64) << 32) | (head as u64 & 0xffff_ffff);
    RngSeed(seed.0 ^ splitmix64(cell))
}

/// `d` standard normal draws for row `index` of the stream rooted at `seed`.
pub fn standard_normal_row(seed: RngSeed, index: u64, d: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.0);
    rng.set_stream(index);
    (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// `count` i.i.d. rows from `N(mu, diag(var))`.
pub fn gaussian_sample(mu: &Tensor, var: &Tensor, count: usize, seed: RngSeed) -> Result<Tensor> {
    if mu.len() != var.len() {
        return Err(Error::Dimension {
            op: "gaussian_sample",
            left: mu.shape().to_vec(),
            right: var.shape().to_vec(),
        });
    }
    if let Some(v) = var.data().iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
        return Err(Error::domain(format!("variance must be finite and nonnegative, got {v}")));
    }
    let d = mu.len();
    let std: Vec<f64> = var.data().iter().map(|&v| f64::from(v).sqrt()).collect();
    let mut data = Vec::with_capacity(count * d);
    for s in 0..count {
        let z = standard_normal_row(seed, s as u64, d);
        for ((&m, &sd), z) in mu.data().iter().zip(&std).zip(z) {
            // sd == 0 keeps the mean bit-exact
            let v = if sd == 0.0 { m } else { (f64::from(m) + sd * z) as f32 };
            data.push(v);
        }
    }
    Tensor::new(vec![count, d], data)
}
