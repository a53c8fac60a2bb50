//! Deterministic stand-in for an external tile encoder. Downsamples a tile
//! to 16x16 by area averaging, standardizes each color channel, and mixes
//! the flattened 768-vector through a fixed seeded orthonormal map so that
//! embeddings look dense and uncorrelated while staying reproducible.

use crate::imaging::Tile;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const GRID: usize = 16;
pub const STUB_DIM: usize = GRID * GRID * 3;

pub struct StubExtractor {
    /// Row-major 768x768 orthonormal matrix.
    matrix: Vec<f64>,
    seed: u64,
}

impl StubExtractor {
    /// Builds the orthonormal map: seeded Gaussian matrix, rows
    /// orthonormalized by modified Gram-Schmidt.
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = STUB_DIM;
        let mut m: Vec<f64> = (0..d * d)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        for i in 0..d {
            for j in 0..i {
                let dot: f64 = (0..d).map(|k| m[i * d + k] * m[j * d + k]).sum();
                for k in 0..d {
                    m[i * d + k] -= dot * m[j * d + k];
                }
            }
            let norm: f64 = (0..d).map(|k| m[i * d + k] * m[i * d + k]).sum::<f64>().sqrt();
            for k in 0..d {
                m[i * d + k] /= norm;
            }
        }
        Self { matrix: m, seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// 768-dim embedding of one tile. Constant channels standardize to
    /// zero, so a constant tile maps to the zero vector.
    pub fn extract(&self, tile: &Tile) -> Vec<f32> {
        let pooled = area_average(tile);
        let mut x = [0.0f64; STUB_DIM];
        for c in 0..3 {
            let channel = &pooled[c];
            let mean = channel.iter().sum::<f64>() / channel.len() as f64;
            let var =
                channel.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / channel.len() as f64;
            let std = var.sqrt();
            if std > 0.0 {
                for (i, v) in channel.iter().enumerate() {
                    x[c * GRID * GRID + i] = (v - mean) / std;
                }
            }
        }
        let d = STUB_DIM;
        let mut out = vec![0.0f32; d];
        for (i, o) in out.iter_mut().enumerate() {
            let row = &self.matrix[i * d..(i + 1) * d];
            *o = row.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>() as f32;
        }
        out
    }
}

/// Per-channel 16x16 area averages. Box edges follow `floor(i*side/16)` so
/// any tile side >= 16 partitions exactly.
fn area_average(tile: &Tile) -> [Vec<f64>; 3] {
    let side = tile.side() as usize;
    let mut pooled: [Vec<f64>; 3] = std::array::from_fn(|_| vec![0.0; GRID * GRID]);
    for by in 0..GRID {
        let y0 = by * side / GRID;
        let y1 = (by + 1) * side / GRID;
        for bx in 0..GRID {
            let x0 = bx * side / GRID;
            let x1 = (bx + 1) * side / GRID;
            let mut acc = [0.0f64; 3];
            for y in y0..y1 {
                for x in x0..x1 {
                    let p = tile.pixels.get_pixel(x as u32, y as u32).0;
                    for c in 0..3 {
                        acc[c] += p[c] as f64;
                    }
                }
            }
            let count = ((y1 - y0) * (x1 - x0)) as f64;
            for c in 0..3 {
                pooled[c][by * GRID + bx] = acc[c] / count;
            }
        }
    }
    pooled
}
