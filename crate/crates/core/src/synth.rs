//! Synthetic height-field surfaces built from Gaussian bumps.
//!
//! These stand in for scanned faces in tests, examples and benchmarks: each
//! surface is a smooth `z = f(x, y)` over `[-1, 1]²`, and a seeded random
//! surface plays the part of one identity.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::cloud::{CloudError, PointCloud};

/// `amplitude · exp(−sharpness · ((x − cx)² + (y − cy)²))`
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bump {
    pub cx: f64,
    pub cy: f64,
    pub amplitude: f64,
    pub sharpness: f64,
}

impl Bump {
    pub fn height(&self, x: f64, y: f64) -> f64 {
        let r2 = (x - self.cx).powi(2) + (y - self.cy).powi(2);
        self.amplitude * (-self.sharpness * r2).exp()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BumpSurface {
    pub bumps: Vec<Bump>,
}

impl BumpSurface {
    /// The single centered bump `z = 0.5·exp(−4(x² + y²))`.
    pub fn benchmark() -> Self {
        Self { bumps: vec![Bump { cx: 0.0, cy: 0.0, amplitude: 0.5, sharpness: 4.0 }] }
    }

    /// `count` bumps with centers in `[-0.6, 0.6]²`, amplitudes in
    /// `[0.15, 0.4]` and widths (standard deviations) in `[0.25, 0.5]`.
    pub fn random(count: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bumps = (0..count)
            .map(|_| {
                let cx = rng.gen_range(-0.6..0.6);
                let cy = rng.gen_range(-0.6..0.6);
                let amplitude = rng.gen_range(0.15..0.4);
                let width: f64 = rng.gen_range(0.25..0.5);
                Bump { cx, cy, amplitude, sharpness: 1.0 / (2.0 * width * width) }
            })
            .collect();
        Self { bumps }
    }

    pub fn height(&self, x: f64, y: f64) -> f64 {
        self.bumps.iter().map(|b| b.height(x, y)).sum()
    }

    /// `n` points at uniform random `(x, y)` in `[-1, 1]²` with Gaussian
    /// depth noise of standard deviation `noise`.
    pub fn sample(&self, n: usize, noise: f64, seed: u64) -> Result<PointCloud, CloudError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        if !(noise >= 0.0 && noise.is_finite()) {
            return Err(CloudError::InvalidNoise(noise));
        }
        let normal = Normal::new(0.0, noise).map_err(|_| CloudError::InvalidNoise(noise))?;
        PointCloud::from_xyz((0..n).map(|_| {
            let x = rng.gen_range(-1.0..1.0);
            let y = rng.gen_range(-1.0..1.0);
            [x, y, self.height(x, y) + normal.sample(&mut rng)]
        }))
    }
}
