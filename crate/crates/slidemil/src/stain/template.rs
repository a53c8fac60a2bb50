//! Bundled synthetic H&E-like template and the default reference profile
//! derived from it. Real cohort reference tiles are not redistributable,
//! so the default reference is generated: smooth two-stain concentration
//! fields rendered through canonical hematoxylin and eosin OD vectors.

use super::{estimate_stain_profile, od_to_rgb, rgb_to_od, MacenkoParams, StainProfile};
use crate::imaging::Tile;
use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::TAU;
use std::sync::OnceLock;

/// Canonical H&E optical-density directions (Ruifrok-style), unit norm.
const HEMATOXYLIN_OD: [f64; 3] = [0.65, 0.70, 0.29];
const EOSIN_OD: [f64; 3] = [0.07, 0.99, 0.11];

fn unit(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

/// Renders a tissue-like tile: both stains present everywhere, smoothly
/// varying concentrations plus light pixel noise. Deterministic in
/// `(side, seed)`.
pub fn synthetic_template(side: u32, seed: u64) -> Tile {
    let h = unit(HEMATOXYLIN_OD);
    let e = unit(EOSIN_OD);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phase: [f64; 4] = std::array::from_fn(|_| rng.random_range(0.0..TAU));
    let mut noise = vec![0.0f64; (side * side * 2) as usize];
    for v in &mut noise {
        *v = rng.random_range(-0.05..0.05);
    }
    let img = RgbImage::from_fn(side, side, |x, y| {
        let (xf, yf) = (x as f64, y as f64);
        let i = ((y * side + x) * 2) as usize;
        // Hematoxylin stays strong everywhere so every pixel clears the
        // tissue OD floor; eosin swings wider to spread the stain angles.
        let ch = 0.9
            + 0.4 * (TAU * xf / 37.0 + phase[0]).sin() * (TAU * yf / 53.0 + phase[1]).cos()
            + noise[i];
        let ce = 0.6
            + 0.4 * (TAU * xf / 61.0 + phase[2]).sin() * (TAU * yf / 41.0 + phase[3]).cos()
            + noise[i + 1];
        let (ch, ce) = (ch.max(0.05), ce.max(0.05));
        let od = [
            ch * h[0] + ce * e[0],
            ch * h[1] + ce * e[1],
            ch * h[2] + ce * e[2],
        ];
        Rgb(od_to_rgb(od))
    });
    Tile::new(img, 0, 0).expect("square template")
}

/// Default reference stain profile, estimated once from the bundled
/// template.
pub fn reference_profile() -> StainProfile {
    static PROFILE: OnceLock<StainProfile> = OnceLock::new();
    PROFILE
        .get_or_init(|| {
            let template = synthetic_template(256, 2024);
            estimate_stain_profile(&rgb_to_od(&template), &MacenkoParams::default())
                .expect("bundled template is estimable")
        })
        .clone()
}
