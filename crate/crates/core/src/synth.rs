//! Synthetic inputs with spatial structure: low-frequency 3D sinusoid fields
//! over a token grid.

use std::f64::consts::TAU;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::grid::TokenGrid;
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct FieldConfig {
    /// Sinusoids summed per channel.
    pub components: usize,
    /// Largest frequency per axis, in periods per grid extent.
    pub max_freq: f64,
    /// Standard deviation of i.i.d. noise added to every entry.
    pub noise: f64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig { components: 3, max_freq: 0.25, noise: 0.0 }
    }
}

/// `S x channels` matrix; each channel is a random sum of plane waves
/// `cos(2 pi (ft t / F + fh h / H + fw w / W) + phase)` with unit expected power.
pub fn smooth_field<R: Rng + ?Sized>(grid: &TokenGrid, channels: usize, cfg: &FieldConfig, rng: &mut R) -> Matrix {
    let comps = cfg.components.max(1);
    let amp_std = (2.0 / comps as f64).sqrt();
    let waves: Vec<Vec<(f64, [f64; 3], f64)>> = (0..channels)
        .map(|_| {
            (0..comps)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    let f = [0, 1, 2].map(|_| rng.random_range(0.0..=cfg.max_freq));
                    (z * amp_std, f, rng.random_range(0.0..TAU))
                })
                .collect()
        })
        .collect();
    let dims = grid.dims().map(|n| n as f64);
    Matrix::from_fn(grid.len(), channels, |i, c| {
        let (t, h, w) = grid.coords(i);
        let pos = [t as f64 / dims[0], h as f64 / dims[1], w as f64 / dims[2]];
        let v: f64 = waves[c]
            .iter()
            .map(|(a, f, ph)| a * (TAU * (f[0] * pos[0] + f[1] * pos[1] + f[2] * pos[2]) + ph).cos())
            .sum();
        if cfg.noise > 0.0 {
            let z: f64 = StandardNormal.sample(rng);
            v + cfg.noise * z
        } else {
            v
        }
    })
}

/// Six fixed channels: `sin` and `cos` of each normalized axis coordinate.
pub fn positional_features(grid: &TokenGrid) -> Matrix {
    let dims = grid.dims().map(|n| n as f64);
    Matrix::from_fn(grid.len(), 6, |i, c| {
        let (t, h, w) = grid.coords(i);
        let x = [t as f64, h as f64, w as f64][c / 2] / dims[c / 2];
        if c % 2 == 0 { (TAU * x).sin() } else { (TAU * x).cos() }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn neighbors_are_close() {
        let grid = TokenGrid::new(8, 8, 8).unwrap();
        let f = smooth_field(&grid, 16, &FieldConfig::default(), &mut ChaCha8Rng::seed_from_u64(1));
        let mut near = 0.0;
        let mut far = 0.0;
        for t in 0..7 {
            let (a, b, c) = (grid.index(t, 3, 3), grid.index(t + 1, 3, 3), grid.index((t + 4) % 8, 3, 3));
            let dist = |x: usize, y: usize| f.row(x).iter().zip(f.row(y)).map(|(p, q)| (p - q).powi(2)).sum::<f64>();
            near += dist(a, b);
            far += dist(a, c);
        }
        assert!(near < far);
    }

    #[test]
    fn deterministic_and_periodic_features() {
        let grid = TokenGrid::new(2, 3, 4).unwrap();
        let mk = || smooth_field(&grid, 3, &FieldConfig { noise: 0.1, ..FieldConfig::default() }, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(mk(), mk());
        let p = positional_features(&grid);
        assert_eq!(p.shape(), (24, 6));
        for i in 0..24 {
            for axis in 0..3 {
                let (s, c) = (p.get(i, 2 * axis), p.get(i, 2 * axis + 1));
                assert!((s * s + c * c - 1.0).abs() < 1e-12);
            }
        }
    }
}
