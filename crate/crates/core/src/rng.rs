//! Counter-based random streams.
//!
//! Every draw is a pure function of `(seed, stream id, draw index)`: the pair
//! `(seed, stream)` keys a ChaCha8 generator and the draw index selects the
//! ChaCha stream, so batches can be generated in any order, on any number of
//! threads, and still reproduce bit for bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::vector::Point;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStream {
    pub seed: u64,
    pub stream: u64,
}

/// Stream tags used by the estimation pipeline. Distinct tags give disjoint streams.
pub mod tags {
    pub const LADDER: u64 = 0x4c41_4444;
    pub const FINAL: u64 = 0x4649_4e41;
    pub const QUANTILE: u64 = 0x5155_414e;
    pub const ROUNDTRIP: u64 = 0x5254_5250;
    pub const STRATA: u64 = 0x5354_5241;
    pub const PILOT: u64 = 0x5049_4c54;
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        RngStream { seed, stream }
    }

    /// Child stream; the same `(parent, tag)` always yields the same child.
    pub fn substream(&self, tag: u64) -> RngStream {
        RngStream {
            seed: self.seed,
            stream: splitmix64(self.stream ^ splitmix64(tag.wrapping_add(0x5851_F42D_4C95_7F2D))),
        }
    }

    /// Generator for draw `index` of this stream.
    pub fn draw(&self, index: u64) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&self.seed.to_le_bytes());
        key[8..16].copy_from_slice(&self.stream.to_le_bytes());
        key[16..24].copy_from_slice(&splitmix64(self.seed).to_le_bytes());
        key[24..].copy_from_slice(&splitmix64(self.stream ^ 0xA5A5_A5A5).to_le_bytes());
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(index);
        rng
    }

    /// One `N(0, I_d)` point, as draw `index`.
    pub fn std_normal_point(&self, index: u64, d: usize) -> Point {
        let mut rng = self.draw(index);
        Point((0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
    }

    /// Uniform on `[0,1)` for draw `index`, followed by `N(0, I_d)` coordinates
    /// from the same draw.
    pub fn uniform_and_normal(&self, index: u64, d: usize) -> (f64, Vec<f64>) {
        let mut rng = self.draw(index);
        let u: f64 = rng.random();
        let y = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        (u, y)
    }

    /// Draws `start..start+n` as `N(0, I_d)` points, generated in parallel.
    pub fn std_normal_batch(&self, start: u64, n: usize, d: usize) -> Vec<Point> {
        (0..n as u64)
            .into_par_iter()
            .map(|i| self.std_normal_point(start + i, d))
            .collect()
    }
}

/// Draw `index` of `stream` as an i.i.d. standard normal point in `R^d`.
pub fn sample_std_normal(stream: &RngStream, index: u64, d: usize) -> Point {
    stream.std_normal_point(index, d)
}
