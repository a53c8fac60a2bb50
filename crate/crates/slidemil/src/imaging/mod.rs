//! Slide tessellation and tile-level quality filtering.
//!
//! A slide arrives as a plain RGB raster plus its resolution in microns per
//! pixel (mpp). `tessellate` resamples to the target resolution and cuts
//! non-overlapping square tiles; `is_informative` drops background and
//! blurry tiles by combining an RGB whiteness threshold with a Canny
//! edge-density test.

mod canny;

pub use canny::{canny_edge_map, gaussian_blur_gray, grayscale};

use image::imageops::{self, FilterType};
use image::RgbImage;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("failed to read image {path}: {source}")]
    Decode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("image has zero area ({width}x{height})")]
    EmptyImage { width: u32, height: u32 },
    #[error("mpp must be positive and finite, got {mpp}")]
    InvalidMpp { mpp: f64 },
    #[error("tile side must be at least 16 px, got {tile_px}")]
    TileTooSmall { tile_px: u32 },
    #[error("resampled image ({width}x{height}) holds no complete {tile_px} px tile")]
    EmptyGrid {
        width: u32,
        height: u32,
        tile_px: u32,
    },
    #[error("tile pixels must be square and non-empty, got {width}x{height}")]
    BadTileShape { width: u32, height: u32 },
}

/// An 8-bit RGB image with a physical resolution attached.
#[derive(Debug, Clone)]
pub struct RasterImage {
    pixels: RgbImage,
    mpp: f64,
}

impl RasterImage {
    pub fn new(pixels: RgbImage, mpp: f64) -> Result<Self, ImagingError> {
        if pixels.width() == 0 || pixels.height() == 0 {
            return Err(ImagingError::EmptyImage {
                width: pixels.width(),
                height: pixels.height(),
            });
        }
        if !(mpp.is_finite() && mpp > 0.0) {
            return Err(ImagingError::InvalidMpp { mpp });
        }
        Ok(Self { pixels, mpp })
    }

    pub fn open(path: &Path, mpp: f64) -> Result<Self, ImagingError> {
        let img = image::open(path).map_err(|source| ImagingError::Decode {
            path: path.to_path_buf(),
            source,
        })?;
        Self::new(img.to_rgb8(), mpp)
    }

    pub fn pixels(&self) -> &RgbImage {
        &self.pixels
    }

    pub fn mpp(&self) -> f64 {
        self.mpp
    }
}

/// One square tile cut from a slide, carrying its grid position.
#[derive(Debug, Clone, PartialEq)]
pub struct Tile {
    pub pixels: RgbImage,
    pub grid_x: u32,
    pub grid_y: u32,
    pub informative: bool,
}

impl Tile {
    pub fn new(pixels: RgbImage, grid_x: u32, grid_y: u32) -> Result<Self, ImagingError> {
        if pixels.width() == 0 || pixels.width() != pixels.height() {
            return Err(ImagingError::BadTileShape {
                width: pixels.width(),
                height: pixels.height(),
            });
        }
        Ok(Self {
            pixels,
            grid_x,
            grid_y,
            informative: true,
        })
    }

    pub fn side(&self) -> u32 {
        self.pixels.width()
    }
}

/// All tiles of one slide in row-major grid order.
#[derive(Debug, Clone, PartialEq)]
pub struct TileGrid {
    pub slide_id: String,
    pub tiles: Vec<Tile>,
    pub grid_cols: u32,
    pub grid_rows: u32,
    pub source_mpp: f64,
    pub target_mpp: f64,
    pub tile_px: u32,
}

/// Thresholds for the background / blur filter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterParams {
    /// A pixel counts as background when all three channels exceed this.
    pub white_threshold: u8,
    /// Maximum tolerated background fraction.
    pub max_background: f64,
    /// Gaussian sigma for the Canny pre-blur.
    pub sigma: f64,
    /// Canny hysteresis low threshold on the 0-255 gradient scale.
    pub low: f64,
    /// Canny hysteresis high threshold on the 0-255 gradient scale.
    pub high: f64,
    /// Minimum fraction of edge pixels for a tile to count as in-focus
    /// tissue.
    pub min_edge_fraction: f64,
}

impl Default for FilterParams {
    fn default() -> Self {
        Self {
            white_threshold: 224,
            max_background: 0.9,
            sigma: 1.4,
            low: 40.0,
            high: 100.0,
            min_edge_fraction: 0.02,
        }
    }
}

/// Sidecar manifest written next to preprocessed tiles.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridManifest {
    pub slide_id: String,
    pub source_mpp: f64,
    pub target_mpp: f64,
    pub tile_px: u32,
    pub grid_cols: u32,
    pub grid_rows: u32,
    pub kept: Vec<[u32; 2]>,
    pub rejected: usize,
    pub filter: FilterParams,
}

impl GridManifest {
    pub fn from_grid(grid: &TileGrid, filter: &FilterParams) -> Self {
        let kept: Vec<[u32; 2]> = grid
            .tiles
            .iter()
            .filter(|t| t.informative)
            .map(|t| [t.grid_x, t.grid_y])
            .collect();
        Self {
            slide_id: grid.slide_id.clone(),
            source_mpp: grid.source_mpp,
            target_mpp: grid.target_mpp,
            tile_px: grid.tile_px,
            grid_cols: grid.grid_cols,
            grid_rows: grid.grid_rows,
            rejected: grid.tiles.len() - kept.len(),
            kept,
            filter: filter.clone(),
        }
    }
}

/// Resamples the slide to `target_mpp` (bilinear) and cuts it into
/// non-overlapping `tile_px` squares in row-major order. Partial tiles at
/// the right and bottom edges are dropped.
pub fn tessellate(
    image: &RasterImage,
    target_mpp: f64,
    tile_px: u32,
    slide_id: &str,
) -> Result<TileGrid, ImagingError> {
    if !(target_mpp.is_finite() && target_mpp > 0.0) {
        return Err(ImagingError::InvalidMpp { mpp: target_mpp });
    }
    if tile_px < 16 {
        return Err(ImagingError::TileTooSmall { tile_px });
    }
    let factor = image.mpp / target_mpp;
    let new_w = ((image.pixels.width() as f64 * factor).round() as u32).max(1);
    let new_h = ((image.pixels.height() as f64 * factor).round() as u32).max(1);
    let resampled = if (new_w, new_h) == (image.pixels.width(), image.pixels.height()) {
        image.pixels.clone()
    } else {
        imageops::resize(&image.pixels, new_w, new_h, FilterType::Triangle)
    };
    let grid_cols = new_w / tile_px;
    let grid_rows = new_h / tile_px;
    if grid_cols == 0 || grid_rows == 0 {
        return Err(ImagingError::EmptyGrid {
            width: new_w,
            height: new_h,
            tile_px,
        });
    }
    let mut tiles = Vec::with_capacity((grid_cols * grid_rows) as usize);
    for gy in 0..grid_rows {
        for gx in 0..grid_cols {
            let view =
                imageops::crop_imm(&resampled, gx * tile_px, gy * tile_px, tile_px, tile_px);
            tiles.push(Tile::new(view.to_image(), gx, gy)?);
        }
    }
    Ok(TileGrid {
        slide_id: slide_id.to_string(),
        tiles,
        grid_cols,
        grid_rows,
        source_mpp: image.mpp,
        target_mpp,
        tile_px,
    })
}

/// Fraction of pixels whose three channels all exceed `white_threshold`.
pub fn background_fraction(tile: &Tile, white_threshold: u8) -> f64 {
    let total = (tile.side() as u64) * (tile.side() as u64);
    let white = tile
        .pixels
        .pixels()
        .filter(|p| p.0.iter().all(|&c| c > white_threshold))
        .count();
    white as f64 / total as f64
}

/// Fraction of pixels marked as edges by a Canny detector with the given
/// blur sigma and hysteresis thresholds (0-255 gradient scale).
pub fn canny_edge_fraction(tile: &Tile, sigma: f64, low: f64, high: f64) -> f64 {
    let side = tile.side() as usize;
    let edges = canny_edge_map(&tile.pixels, sigma, low, high);
    let count = edges.iter().filter(|&&e| e).count();
    count as f64 / (side * side) as f64
}

/// Per-tile keep/drop decision: enough non-background pixels and enough
/// edge response to rule out blur.
pub fn is_informative(tile: &Tile, params: &FilterParams) -> bool {
    if background_fraction(tile, params.white_threshold) > params.max_background {
        return false;
    }
    canny_edge_fraction(tile, params.sigma, params.low, params.high) >= params.min_edge_fraction
}

/// Applies [`is_informative`] to every tile of a grid in parallel.
pub fn filter_grid(grid: &mut TileGrid, params: &FilterParams) {
    use rayon::prelude::*;
    grid.tiles
        .par_iter_mut()
        .for_each(|tile| tile.informative = is_informative(tile, params));
}
