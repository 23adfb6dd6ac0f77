//! Named, independent random streams.
//!
//! Each stream is a ChaCha8 generator keyed by `(run seed, stream name)`, so
//! consuming one stream never shifts another and adding a new stochastic
//! source leaves existing sequences untouched.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::error::SimError;

/// A distribution descriptor. Duration-valued draws are in microseconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dist {
    Constant(f64),
    Uniform { low: f64, high: f64 },
    Exponential { mean: f64 },
}

impl Dist {
    pub fn constant_us(us: u64) -> Self {
        Dist::Constant(us as f64)
    }

    pub fn mean(&self) -> f64 {
        match *self {
            Dist::Constant(c) => c,
            Dist::Uniform { low, high } => (low + high) / 2.0,
            Dist::Exponential { mean } => mean,
        }
    }

    /// False for descriptors that cannot be sampled (inverted bounds,
    /// non-finite or negative parameters).
    pub fn is_well_formed(&self) -> bool {
        match *self {
            Dist::Constant(c) => c.is_finite() && c >= 0.0,
            Dist::Uniform { low, high } => low.is_finite() && high.is_finite() && low >= 0.0 && low <= high,
            Dist::Exponential { mean } => mean.is_finite() && mean > 0.0,
        }
    }

    /// True when every draw is strictly positive.
    pub fn is_strictly_positive(&self) -> bool {
        match *self {
            Dist::Constant(c) => c > 0.0,
            Dist::Uniform { low, .. } => low > 0.0,
            Dist::Exponential { .. } => true,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            Dist::Constant(c) => c,
            Dist::Uniform { low, high } => {
                if high <= low {
                    low
                } else {
                    rng.random_range(low..high)
                }
            }
            Dist::Exponential { mean } => {
                let exp = Exp::new(1.0 / mean).expect("exponential mean validated positive");
                exp.sample(rng)
            }
        }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug)]
pub struct RngStreams {
    seed: u64,
    streams: BTreeMap<String, ChaCha8Rng>,
}

impl RngStreams {
    pub fn new(seed: u64) -> Self {
        RngStreams {
            seed,
            streams: BTreeMap::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn register(&mut self, name: &str) {
        let key = splitmix64(self.seed ^ fnv1a(name.as_bytes()));
        self.streams
            .entry(name.to_string())
            .or_insert_with(|| ChaCha8Rng::seed_from_u64(key));
    }

    pub fn is_registered(&self, name: &str) -> bool {
        self.streams.contains_key(name)
    }

    pub fn draw(&mut self, stream: &str, dist: &Dist) -> Result<f64, SimError> {
        let rng = self
            .streams
            .get_mut(stream)
            .ok_or_else(|| SimError::UnknownStream(stream.to_string()))?;
        Ok(dist.sample(rng))
    }

    /// Draws a duration in whole microseconds. Non-constant draws are clamped
    /// to at least 1us so sampled latencies stay strictly positive.
    pub fn draw_us(&mut self, stream: &str, dist: &Dist) -> Result<u64, SimError> {
        let v = self.draw(stream, dist)?;
        let us = v.round().max(0.0) as u64;
        Ok(match dist {
            Dist::Constant(_) => us,
            _ => us.max(1),
        })
    }

    /// Bernoulli draw with probability `p` on the given stream.
    pub fn chance(&mut self, stream: &str, p: f64) -> Result<bool, SimError> {
        let u = self.draw(stream, &Dist::Uniform { low: 0.0, high: 1.0 })?;
        Ok(u < p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_is_constant() {
        let mut r = RngStreams::new(9);
        r.register("a");
        for _ in 0..100 {
            assert_eq!(r.draw("a", &Dist::Constant(3.5)).unwrap(), 3.5);
        }
    }

    #[test]
    fn uniform_mean_converges() {
        let mut r = RngStreams::new(42);
        r.register("u");
        let n = 100_000;
        let d = Dist::Uniform { low: 0.0, high: 1.0 };
        let sum: f64 = (0..n).map(|_| r.draw("u", &d).unwrap()).sum();
        let mean = sum / n as f64;
        assert!((mean - 0.5).abs() <= 0.01, "mean {mean}");
    }

    #[test]
    fn unknown_stream_errors() {
        let mut r = RngStreams::new(1);
        assert!(matches!(
            r.draw("nope", &Dist::Constant(1.0)),
            Err(SimError::UnknownStream(_))
        ));
    }

    #[test]
    fn streams_are_independent_of_interleaving() {
        let d = Dist::Uniform { low: 0.0, high: 1.0 };
        let mut solo = RngStreams::new(7);
        solo.register("a");
        solo.register("b");
        let a_alone: Vec<f64> = (0..50).map(|_| solo.draw("a", &d).unwrap()).collect();

        let mut mixed = RngStreams::new(7);
        mixed.register("b");
        mixed.register("a");
        let mut a_mixed = Vec::new();
        for i in 0..50 {
            if i % 3 == 0 {
                mixed.draw("b", &d).unwrap();
            }
            a_mixed.push(mixed.draw("a", &d).unwrap());
            mixed.draw("b", &d).unwrap();
        }
        assert_eq!(a_alone, a_mixed);
    }

    #[test]
    fn exponential_draws_positive() {
        let mut r = RngStreams::new(3);
        r.register("e");
        let d = Dist::Exponential { mean: 10.0 };
        for _ in 0..1000 {
            assert!(r.draw_us("e", &d).unwrap() >= 1);
        }
    }
}
