use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[inline]
fn mix(a: u64, b: u64) -> u64 {
    splitmix64(a ^ splitmix64(b))
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Named, counter-addressed random stream.
///
/// Every draw is a pure function of `(seed, name, lane, counter, index)`, so
/// the order in which workers consume draws never changes the values. `lane`
/// is an extra address word used to split one logical stream across windows
/// or passes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngStream {
    pub name: String,
    pub seed: u64,
    pub counter: u64,
    #[serde(default)]
    pub lane: u64,
}

impl RngStream {
    pub fn new(name: impl Into<String>, seed: u64) -> Self {
        Self {
            name: name.into(),
            seed,
            counter: 0,
            lane: 0,
        }
    }

    pub fn at(&self, counter: u64) -> Self {
        Self {
            counter,
            ..self.clone()
        }
    }

    /// Sub-stream addressed by an additional tag (window index, pass id, ...).
    pub fn lane(&self, tag: u64) -> Self {
        Self {
            lane: mix(self.lane, tag.wrapping_add(1)),
            ..self.clone()
        }
    }

    fn key(&self) -> u64 {
        mix(
            mix(mix(self.seed, fnv1a(&self.name)), self.lane),
            self.counter,
        )
    }

    /// Uniform draw in `[0, 1)` at element `index`.
    #[inline]
    pub fn uniform(&self, index: u64) -> f64 {
        let bits = mix(self.key(), index);
        (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draws for `n` consecutive element indices.
    pub fn uniforms(&self, n: usize) -> Vec<f64> {
        let key = self.key();
        (0..n as u64)
            .map(|i| (mix(key, i) >> 11) as f64 * (1.0 / (1u64 << 53) as f64))
            .collect()
    }

    /// Sequential generator seeded from this stream's address.
    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.key())
    }
}
