//! Macenko stain estimation and normalization in optical-density space.
//!
//! Tiles are mapped to optical density (OD), tissue pixels are kept by a
//! density floor, and the two dominant stain directions are recovered from
//! the principal plane of the OD covariance via angle percentiles. A tile
//! is normalized by expressing its pixels as stain concentrations, scaling
//! them to a reference profile, and reconstructing RGB from the reference
//! stain matrix. Estimation failures never abort a pipeline: the tile
//! passes through unchanged with its `normalized` flag cleared.

mod eigen;
mod template;

pub use eigen::sym_eigen3;
pub use template::{reference_profile, synthetic_template};

use crate::imaging::Tile;
use crate::metrics::quantile;
use image::RgbImage;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StainError {
    #[error("stain estimation failed: {reason}")]
    EstimationFailed { reason: &'static str },
    #[error("failed to read stain profile {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("stain profile {path} is not valid JSON: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid stain profile: {reason}")]
    InvalidProfile { reason: String },
}

/// Per-pixel optical densities of a tile, row-major.
#[derive(Debug, Clone)]
pub struct ODImage {
    pub od: Vec<[f64; 3]>,
    pub width: u32,
    pub height: u32,
}

/// Macenko hyperparameters: angle percentile and tissue OD floor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MacenkoParams {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for MacenkoParams {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.15,
        }
    }
}

/// Two unit-norm stain OD vectors (hematoxylin first) and the 99th
/// percentile concentration of each stain.
#[derive(Debug, Clone, PartialEq)]
pub struct StainProfile {
    pub hematoxylin: [f64; 3],
    pub eosin: [f64; 3],
    pub max_concentrations: [f64; 2],
}

/// On-disk form: `stain_matrix` is the 3x2 matrix in row-major order
/// (rows = RGB channels, columns = H then E).
#[derive(Serialize, Deserialize)]
struct StainProfileFile {
    stain_matrix: [f64; 6],
    max_concentrations: [f64; 2],
}

impl StainProfile {
    pub fn validate(&self) -> Result<(), StainError> {
        for (name, col) in [("hematoxylin", self.hematoxylin), ("eosin", self.eosin)] {
            let norm: f64 = col.iter().map(|x| x * x).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(StainError::InvalidProfile {
                    reason: format!("{name} column norm {norm} is not 1"),
                });
            }
            if col.iter().any(|&x| x < 0.0) {
                return Err(StainError::InvalidProfile {
                    reason: format!("{name} column has a negative entry"),
                });
            }
        }
        if self.max_concentrations.iter().any(|&c| !(c > 0.0)) {
            return Err(StainError::InvalidProfile {
                reason: format!(
                    "max_concentrations {:?} must be positive",
                    self.max_concentrations
                ),
            });
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), StainError> {
        let h = self.hematoxylin;
        let e = self.eosin;
        let file = StainProfileFile {
            stain_matrix: [h[0], e[0], h[1], e[1], h[2], e[2]],
            max_concentrations: self.max_concentrations,
        };
        let json = serde_json::to_string_pretty(&file).expect("profile serializes");
        std::fs::write(path, json).map_err(|source| StainError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, StainError> {
        let text = std::fs::read_to_string(path).map_err(|source| StainError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let file: StainProfileFile =
            serde_json::from_str(&text).map_err(|source| StainError::Json {
                path: path.to_path_buf(),
                source,
            })?;
        let m = file.stain_matrix;
        let profile = Self {
            hematoxylin: [m[0], m[2], m[4]],
            eosin: [m[1], m[3], m[5]],
            max_concentrations: file.max_concentrations,
        };
        profile.validate()?;
        Ok(profile)
    }
}

/// Optical density per channel: `OD = -log10((I + 1) / 256)`. White (255)
/// maps to 0, black (0) to log10(256).
pub fn rgb_to_od(tile: &Tile) -> ODImage {
    od_from_rgb(&tile.pixels)
}

pub(crate) fn od_from_rgb(img: &RgbImage) -> ODImage {
    let od = img
        .pixels()
        .map(|p| {
            let mut v = [0.0; 3];
            for c in 0..3 {
                v[c] = -((p.0[c] as f64 + 1.0) / 256.0).log10();
            }
            v
        })
        .collect();
    ODImage {
        od,
        width: img.width(),
        height: img.height(),
    }
}

/// Inverse of [`rgb_to_od`] for one pixel, with rounding and clipping.
pub fn od_to_rgb(od: [f64; 3]) -> [u8; 3] {
    let mut out = [0u8; 3];
    for c in 0..3 {
        let i = (256.0 * 10f64.powf(-od[c]) - 1.0).round();
        out[c] = i.clamp(0.0, 255.0) as u8;
    }
    out
}

fn dot3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn normalize3(v: [f64; 3]) -> Option<[f64; 3]> {
    let norm = dot3(&v, &v).sqrt();
    if norm <= 1e-12 {
        return None;
    }
    Some([v[0] / norm, v[1] / norm, v[2] / norm])
}

/// Least-squares concentrations of every pixel against a stain matrix,
/// clamped to be non-negative. Returns one `[c_h, c_e]` pair per pixel.
pub fn concentrations(od: &ODImage, profile: &StainProfile) -> Result<Vec<[f64; 2]>, StainError> {
    let h = profile.hematoxylin;
    let e = profile.eosin;
    // Normal equations for the 3x2 system: (M^T M) c = M^T od.
    let hh = dot3(&h, &h);
    let he = dot3(&h, &e);
    let ee = dot3(&e, &e);
    let det = hh * ee - he * he;
    if det.abs() <= 1e-12 {
        return Err(StainError::EstimationFailed {
            reason: "stain vectors are collinear",
        });
    }
    Ok(od
        .od
        .iter()
        .map(|p| {
            let bh = dot3(&h, p);
            let be = dot3(&e, p);
            let ch = (ee * bh - he * be) / det;
            let ce = (hh * be - he * bh) / det;
            [ch.max(0.0), ce.max(0.0)]
        })
        .collect())
}

/// Macenko profile estimation: beta-filter tissue pixels, find the
/// principal plane of their OD covariance, take the angle extremes at the
/// alpha percentiles, and read off unit stain vectors. Needs at least 50
/// tissue pixels and a genuinely two-dimensional OD cloud.
pub fn estimate_stain_profile(od: &ODImage, params: &MacenkoParams) -> Result<StainProfile, StainError> {
    let tissue: Vec<&[f64; 3]> = od
        .od
        .iter()
        .filter(|p| p.iter().all(|&c| c >= params.beta))
        .collect();
    if tissue.len() < 50 {
        return Err(StainError::EstimationFailed {
            reason: "fewer than 50 tissue pixels above the OD floor",
        });
    }

    let n = tissue.len() as f64;
    let mut mean = [0.0; 3];
    for p in &tissue {
        for c in 0..3 {
            mean[c] += p[c];
        }
    }
    for c in &mut mean {
        *c /= n;
    }
    let mut cov = [[0.0; 3]; 3];
    for p in &tissue {
        let d = [p[0] - mean[0], p[1] - mean[1], p[2] - mean[2]];
        for r in 0..3 {
            for c in 0..3 {
                cov[r][c] += d[r] * d[c];
            }
        }
    }
    for row in &mut cov {
        for v in row {
            *v /= n - 1.0;
        }
    }

    let (eigvals, eigvecs) = sym_eigen3(cov);
    if eigvals[1] <= 1e-12 * eigvals[0].max(1e-300) || eigvals[0] <= 0.0 {
        return Err(StainError::EstimationFailed {
            reason: "OD covariance is rank deficient",
        });
    }
    let mut e1 = [eigvecs[0][0], eigvecs[1][0], eigvecs[2][0]];
    let mut e2 = [eigvecs[0][1], eigvecs[1][1], eigvecs[2][1]];
    // Deterministic orientation: e1 points along the mean OD so projected
    // angles stay within (-90, 90) degrees; e2 gets a fixed sign.
    if dot3(&e1, &mean) < 0.0 {
        e1 = [-e1[0], -e1[1], -e1[2]];
    }
    if let Some(&lead) = e2.iter().find(|x| x.abs() > 1e-12) {
        if lead < 0.0 {
            e2 = [-e2[0], -e2[1], -e2[2]];
        }
    }

    let phis: Vec<f64> = tissue
        .iter()
        .map(|p| dot3(&e2, p).atan2(dot3(&e1, p)))
        .collect();
    let phi_min = quantile(&phis, params.alpha / 100.0);
    let phi_max = quantile(&phis, 1.0 - params.alpha / 100.0);
    let extreme = |phi: f64| {
        let (s, c) = phi.sin_cos();
        [
            c * e1[0] + s * e2[0],
            c * e1[1] + s * e2[1],
            c * e1[2] + s * e2[2],
        ]
    };
    // Stain vectors live in the non-negative OD octant; clip tiny negative
    // leakage from the percentile extremes and renormalize.
    let clip_unit = |v: [f64; 3]| normalize3([v[0].max(0.0), v[1].max(0.0), v[2].max(0.0)]);
    let (va, vb) = match (clip_unit(extreme(phi_min)), clip_unit(extreme(phi_max))) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(StainError::EstimationFailed {
                reason: "angle extreme collapsed to the zero vector",
            })
        }
    };

    // Hematoxylin is the column with the larger red OD component; ties fall
    // through to the green component.
    let a_first = match va[0].partial_cmp(&vb[0]).unwrap() {
        std::cmp::Ordering::Greater => true,
        std::cmp::Ordering::Less => false,
        std::cmp::Ordering::Equal => va[1] >= vb[1],
    };
    let (hematoxylin, eosin) = if a_first { (va, vb) } else { (vb, va) };

    let mut profile = StainProfile {
        hematoxylin,
        eosin,
        max_concentrations: [1.0, 1.0],
    };
    let conc = concentrations(od, &profile)?;
    let ch: Vec<f64> = conc.iter().map(|c| c[0]).collect();
    let ce: Vec<f64> = conc.iter().map(|c| c[1]).collect();
    profile.max_concentrations = [quantile(&ch, 0.99), quantile(&ce, 0.99)];
    if profile.max_concentrations.iter().any(|&c| !(c > 0.0)) {
        return Err(StainError::EstimationFailed {
            reason: "99th percentile concentration is zero",
        });
    }
    profile.validate().map_err(|_| StainError::EstimationFailed {
        reason: "estimated profile failed validation",
    })?;
    Ok(profile)
}

/// A tile after normalization, with a flag recording whether normalization
/// actually ran or the tile passed through untouched.
#[derive(Debug, Clone)]
pub struct NormalizedTile {
    pub tile: Tile,
    pub normalized: bool,
}

/// Normalizes a tile against a reference profile: estimate the tile's own
/// profile, rescale concentrations to the reference maxima, reconstruct
/// from the reference stain matrix. Estimation failure returns the input
/// unchanged with `normalized = false`.
pub fn normalize_tile(
    tile: &Tile,
    reference: &StainProfile,
    params: &MacenkoParams,
) -> NormalizedTile {
    let od = rgb_to_od(tile);
    let source = match estimate_stain_profile(&od, params) {
        Ok(p) => p,
        Err(_) => {
            return NormalizedTile {
                tile: tile.clone(),
                normalized: false,
            }
        }
    };
    normalize_with_source(tile, &od, &source, reference)
}

/// Normalization with an externally supplied source profile (used by the
/// per-slide estimation mode).
pub fn normalize_with_profile(
    tile: &Tile,
    source: &StainProfile,
    reference: &StainProfile,
) -> NormalizedTile {
    let od = rgb_to_od(tile);
    normalize_with_source(tile, &od, source, reference)
}

fn normalize_with_source(
    tile: &Tile,
    od: &ODImage,
    source: &StainProfile,
    reference: &StainProfile,
) -> NormalizedTile {
    let conc = match concentrations(od, source) {
        Ok(c) => c,
        Err(_) => {
            return NormalizedTile {
                tile: tile.clone(),
                normalized: false,
            }
        }
    };
    let scale = [
        reference.max_concentrations[0] / source.max_concentrations[0],
        reference.max_concentrations[1] / source.max_concentrations[1],
    ];
    let h = reference.hematoxylin;
    let e = reference.eosin;
    let mut out = RgbImage::new(od.width, od.height);
    for (i, pixel) in out.pixels_mut().enumerate() {
        let ch = conc[i][0] * scale[0];
        let ce = conc[i][1] * scale[1];
        let od_new = [
            ch * h[0] + ce * e[0],
            ch * h[1] + ce * e[1],
            ch * h[2] + ce * e[2],
        ];
        pixel.0 = od_to_rgb(od_new);
    }
    let mut normalized_tile = Tile::new(out, tile.grid_x, tile.grid_y).expect("same shape");
    normalized_tile.informative = tile.informative;
    NormalizedTile {
        tile: normalized_tile,
        normalized: true,
    }
}

/// Mean absolute per-channel difference between two same-sized tiles, on
/// the 0-255 scale.
pub fn mean_abs_diff(a: &Tile, b: &Tile) -> f64 {
    let total = (a.pixels.len()) as f64;
    let sum: f64 = a
        .pixels
        .as_raw()
        .iter()
        .zip(b.pixels.as_raw())
        .map(|(&x, &y)| (x as f64 - y as f64).abs())
        .sum();
    sum / total
}
