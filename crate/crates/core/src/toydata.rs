//! Seeded generators for eight 2-D benchmark densities.

use std::f64::consts::{FRAC_1_SQRT_2, PI, TAU};
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Stream, StreamRng};
use crate::tensor::Tensor;

/// Size of the held-out evaluation set.
pub const TEST_SET_SIZE: usize = 10_000;

pub const GAUSSIANS_SCALE: f64 = 4.0;
pub const GAUSSIANS_STD: f64 = 0.5;
pub const GAUSSIANS_DIVISOR: f64 = 1.414;
pub const RINGS_RADII: [f64; 4] = [1.0, 0.8, 0.55, 0.25];
pub const RINGS_SCALE: f64 = 3.0;
pub const RINGS_NOISE: f64 = 0.08;
pub const SWISSROLL_NOISE: f64 = 1.0;
pub const SWISSROLL_DIVISOR: f64 = 5.0;
pub const MOONS_NOISE: f64 = 0.1;
pub const SPIRALS_NOISE: f64 = 0.1;
pub const CIRCLES_FACTOR: f64 = 0.5;
pub const CIRCLES_NOISE: f64 = 0.08;
pub const CIRCLES_SCALE: f64 = 3.0;
pub const PINWHEEL_RADIAL_STD: f64 = 0.3;
pub const PINWHEEL_TANGENTIAL_STD: f64 = 0.1;
pub const PINWHEEL_ARMS: usize = 5;
pub const PINWHEEL_RATE: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Dataset {
    #[serde(rename = "8gaussians")]
    EightGaussians,
    #[serde(rename = "rings")]
    Rings,
    #[serde(rename = "swissroll")]
    SwissRoll,
    #[serde(rename = "moons")]
    Moons,
    #[serde(rename = "2spirals")]
    TwoSpirals,
    #[serde(rename = "circles")]
    Circles,
    #[serde(rename = "pinwheel")]
    Pinwheel,
    #[serde(rename = "checkerboard")]
    Checkerboard,
}

impl Dataset {
    pub const ALL: [Dataset; 8] = [
        Dataset::EightGaussians,
        Dataset::Rings,
        Dataset::SwissRoll,
        Dataset::Moons,
        Dataset::TwoSpirals,
        Dataset::Circles,
        Dataset::Pinwheel,
        Dataset::Checkerboard,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Dataset::EightGaussians => "8gaussians",
            Dataset::Rings => "rings",
            Dataset::SwissRoll => "swissroll",
            Dataset::Moons => "moons",
            Dataset::TwoSpirals => "2spirals",
            Dataset::Circles => "circles",
            Dataset::Pinwheel => "pinwheel",
            Dataset::Checkerboard => "checkerboard",
        }
    }

    pub fn dim(self) -> usize {
        2
    }

    /// Noise and scale constants of the generator.
    pub fn parameters(self) -> Vec<(&'static str, f64)> {
        match self {
            Dataset::EightGaussians => {
                vec![("scale", GAUSSIANS_SCALE), ("std", GAUSSIANS_STD), ("divisor", GAUSSIANS_DIVISOR)]
            }
            Dataset::Rings => vec![("scale", RINGS_SCALE), ("noise", RINGS_NOISE)],
            Dataset::SwissRoll => vec![("noise", SWISSROLL_NOISE), ("divisor", SWISSROLL_DIVISOR)],
            Dataset::Moons => vec![("noise", MOONS_NOISE)],
            Dataset::TwoSpirals => vec![("noise", SPIRALS_NOISE)],
            Dataset::Circles => vec![("factor", CIRCLES_FACTOR), ("noise", CIRCLES_NOISE), ("scale", CIRCLES_SCALE)],
            Dataset::Pinwheel => vec![
                ("radial_std", PINWHEEL_RADIAL_STD),
                ("tangential_std", PINWHEEL_TANGENTIAL_STD),
                ("arms", PINWHEEL_ARMS as f64),
                ("rate", PINWHEEL_RATE),
            ],
            Dataset::Checkerboard => vec![],
        }
    }

    /// `n` i.i.d. points drawn with `rng`.
    pub fn sample(self, n: usize, rng: &mut StreamRng) -> Tensor {
        let mut data = Vec::with_capacity(2 * n);
        for _ in 0..n {
            let (x, y) = self.point(rng);
            data.push(x);
            data.push(y);
        }
        Tensor::new(n, 2, data).expect("toy shape")
    }

    fn point(self, rng: &mut StreamRng) -> (f64, f64) {
        let normal = |rng: &mut StreamRng| -> f64 { rng.sample(StandardNormal) };
        match self {
            Dataset::EightGaussians => {
                const CENTERS: [(f64, f64); 8] = [
                    (1.0, 0.0),
                    (-1.0, 0.0),
                    (0.0, 1.0),
                    (0.0, -1.0),
                    (FRAC_1_SQRT_2, FRAC_1_SQRT_2),
                    (FRAC_1_SQRT_2, -FRAC_1_SQRT_2),
                    (-FRAC_1_SQRT_2, FRAC_1_SQRT_2),
                    (-FRAC_1_SQRT_2, -FRAC_1_SQRT_2),
                ];
                let (cx, cy) = CENTERS[rng.random_range(0..8)];
                let x = normal(rng) * GAUSSIANS_STD + cx * GAUSSIANS_SCALE;
                let y = normal(rng) * GAUSSIANS_STD + cy * GAUSSIANS_SCALE;
                (x / GAUSSIANS_DIVISOR, y / GAUSSIANS_DIVISOR)
            }
            Dataset::Rings => {
                let r = RINGS_RADII[rng.random_range(0..4)];
                let a = rng.random_range(0.0..TAU);
                let x = a.cos() * r * RINGS_SCALE + normal(rng) * RINGS_NOISE;
                let y = a.sin() * r * RINGS_SCALE + normal(rng) * RINGS_NOISE;
                (x, y)
            }
            Dataset::SwissRoll => {
                let t = 1.5 * PI * (1.0 + 2.0 * rng.random::<f64>());
                let x = t * t.cos() + normal(rng) * SWISSROLL_NOISE;
                let y = t * t.sin() + normal(rng) * SWISSROLL_NOISE;
                (x / SWISSROLL_DIVISOR, y / SWISSROLL_DIVISOR)
            }
            Dataset::Moons => {
                let a = rng.random_range(0.0..PI);
                let (x, y) = if rng.random::<bool>() { (a.cos(), a.sin()) } else { (1.0 - a.cos(), 0.5 - a.sin()) };
                let x = x + normal(rng) * MOONS_NOISE;
                let y = y + normal(rng) * MOONS_NOISE;
                (2.0 * x - 1.0, 2.0 * y - 0.2)
            }
            Dataset::TwoSpirals => {
                let n = rng.random::<f64>().sqrt() * 540.0 * TAU / 360.0;
                let mut x = -n.cos() * n + rng.random::<f64>() * 0.5;
                let mut y = n.sin() * n + rng.random::<f64>() * 0.5;
                if rng.random::<bool>() {
                    x = -x;
                    y = -y;
                }
                (x / 3.0 + normal(rng) * SPIRALS_NOISE, y / 3.0 + normal(rng) * SPIRALS_NOISE)
            }
            Dataset::Circles => {
                let r = if rng.random::<bool>() { 1.0 } else { CIRCLES_FACTOR };
                let a = rng.random_range(0.0..TAU);
                let x = a.cos() * r + normal(rng) * CIRCLES_NOISE;
                let y = a.sin() * r + normal(rng) * CIRCLES_NOISE;
                (x * CIRCLES_SCALE, y * CIRCLES_SCALE)
            }
            Dataset::Pinwheel => {
                let arm = rng.random_range(0..PINWHEEL_ARMS);
                let base = TAU * arm as f64 / PINWHEEL_ARMS as f64;
                let f0 = normal(rng) * PINWHEEL_RADIAL_STD + 1.0;
                let f1 = normal(rng) * PINWHEEL_TANGENTIAL_STD;
                let angle = base + PINWHEEL_RATE * f0.exp();
                let (s, c) = angle.sin_cos();
                (2.0 * (f0 * c - f1 * s), 2.0 * (f0 * s + f1 * c))
            }
            Dataset::Checkerboard => {
                let x1 = rng.random::<f64>() * 4.0 - 2.0;
                let k = rng.random_range(0..2) as f64;
                let x2 = rng.random::<f64>() - 2.0 * k + x1.floor().rem_euclid(2.0);
                (2.0 * x1, 2.0 * x2)
            }
        }
    }
}

impl FromStr for Dataset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Dataset::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| Error::UnknownDataset(s.to_string()))
    }
}

impl fmt::Display for Dataset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Whether `(x, y)` lies on a black square of the checkerboard lattice.
pub fn checkerboard_black(x: f64, y: f64) -> bool {
    ((x / 2.0).floor() + (y / 2.0).floor()).rem_euclid(2.0) == 0.0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub name: Dataset,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
}

fn default_batch() -> usize {
    512
}

impl DatasetSpec {
    pub fn new(name: Dataset, seed: u64, batch_size: usize) -> Self {
        Self { name, seed, batch_size }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("dataset.batch_size", "must be at least 1"));
        }
        Ok(())
    }

    /// Training batch number `call_index`; a pure function of its arguments.
    pub fn sample_batch(&self, call_index: u64) -> Result<Tensor> {
        self.validate()?;
        Ok(self.name.sample(self.batch_size, &mut rng::stream(self.seed, Stream::TrainBatch, call_index)))
    }

    /// The fixed held-out set for this dataset and seed.
    pub fn test_set(&self, n: usize) -> Tensor {
        self.name.sample(n, &mut rng::stream(self.seed, Stream::TestSet, 0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for d in Dataset::ALL {
            assert_eq!(d.name().parse::<Dataset>().unwrap(), d);
            let json = serde_json::to_string(&d).unwrap();
            assert_eq!(json, format!("\"{}\"", d.name()));
        }
        assert!(matches!("mnist".parse::<Dataset>(), Err(Error::UnknownDataset(_))));
    }

    #[test]
    fn batches_are_deterministic() {
        for d in Dataset::ALL {
            let spec = DatasetSpec::new(d, 9, 64);
            assert_eq!(spec.sample_batch(0).unwrap(), spec.sample_batch(0).unwrap());
            assert_ne!(spec.sample_batch(0).unwrap(), spec.sample_batch(1).unwrap());
            assert!(spec.sample_batch(3).unwrap().check_finite("toy").is_ok());
        }
    }

    #[test]
    fn zero_batch_rejected() {
        assert!(DatasetSpec::new(Dataset::Moons, 0, 0).sample_batch(0).is_err());
    }

    #[test]
    fn checkerboard_lattice() {
        assert!(checkerboard_black(0.5, 0.5));
        assert!(!checkerboard_black(2.5, 0.5));
        assert!(checkerboard_black(-0.5, -0.5));
        assert!(checkerboard_black(-3.0, 1.0));
    }
}
