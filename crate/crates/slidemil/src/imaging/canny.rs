//! Canny edge detection on RGB tiles: grayscale, Gaussian blur, Sobel
//! gradients, non-maximum suppression, and hysteresis thresholding.

use image::RgbImage;

/// Luminance conversion (ITU-R BT.601 weights) to a 0-255 float buffer.
pub fn grayscale(img: &RgbImage) -> Vec<f32> {
    img.pixels()
        .map(|p| 0.299 * p.0[0] as f32 + 0.587 * p.0[1] as f32 + 0.114 * p.0[2] as f32)
        .collect()
}

/// Separable Gaussian blur with clamped borders. `sigma <= 0` is a no-op.
pub fn gaussian_blur_gray(gray: &[f32], width: usize, height: usize, sigma: f64) -> Vec<f32> {
    if sigma <= 0.0 {
        return gray.to_vec();
    }
    let radius = (3.0 * sigma).ceil().max(1.0) as i64;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    for i in -radius..=radius {
        kernel.push((-((i * i) as f64) / (2.0 * sigma * sigma)).exp());
    }
    let sum: f64 = kernel.iter().sum();
    let kernel: Vec<f32> = kernel.iter().map(|k| (k / sum) as f32).collect();

    let clamp = |v: i64, max: usize| v.clamp(0, max as i64 - 1) as usize;
    let mut horizontal = vec![0.0f32; gray.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (k, w) in kernel.iter().enumerate() {
                let sx = clamp(x as i64 + k as i64 - radius, width);
                acc += w * gray[y * width + sx];
            }
            horizontal[y * width + x] = acc;
        }
    }
    let mut out = vec![0.0f32; gray.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (k, w) in kernel.iter().enumerate() {
                let sy = clamp(y as i64 + k as i64 - radius, height);
                acc += w * horizontal[sy * width + x];
            }
            out[y * width + x] = acc;
        }
    }
    out
}

/// Sobel gradients; returns (gx, gy) with y growing downward.
fn sobel(gray: &[f32], width: usize, height: usize) -> (Vec<f32>, Vec<f32>) {
    let mut gx = vec![0.0f32; gray.len()];
    let mut gy = vec![0.0f32; gray.len()];
    let at = |x: i64, y: i64| {
        let cx = x.clamp(0, width as i64 - 1) as usize;
        let cy = y.clamp(0, height as i64 - 1) as usize;
        gray[cy * width + cx]
    };
    for y in 0..height as i64 {
        for x in 0..width as i64 {
            let tl = at(x - 1, y - 1);
            let tc = at(x, y - 1);
            let tr = at(x + 1, y - 1);
            let ml = at(x - 1, y);
            let mr = at(x + 1, y);
            let bl = at(x - 1, y + 1);
            let bc = at(x, y + 1);
            let br = at(x + 1, y + 1);
            let i = y as usize * width + x as usize;
            gx[i] = (tr + 2.0 * mr + br) - (tl + 2.0 * ml + bl);
            gy[i] = (bl + 2.0 * bc + br) - (tl + 2.0 * tc + tr);
        }
    }
    (gx, gy)
}

/// Full Canny pipeline. Returns a row-major boolean edge mask. Thresholds
/// are on the Sobel magnitude of the 0-255 grayscale image (the largest
/// possible magnitude is `sqrt(5) * 2 * 255`, about 1140).
pub fn canny_edge_map(img: &RgbImage, sigma: f64, low: f64, high: f64) -> Vec<bool> {
    let (width, height) = (img.width() as usize, img.height() as usize);
    let gray = grayscale(img);
    let blurred = gaussian_blur_gray(&gray, width, height, sigma);
    let (gx, gy) = sobel(&blurred, width, height);
    let mag: Vec<f32> = gx.iter().zip(&gy).map(|(a, b)| a.hypot(*b)).collect();

    // Non-maximum suppression over the four quantized gradient directions;
    // border pixels are suppressed outright.
    let mut thin = vec![0.0f32; mag.len()];
    if width > 2 && height > 2 {
        for y in 1..height - 1 {
            for x in 1..width - 1 {
                let i = y * width + x;
                let mut angle = gy[i].atan2(gx[i]).to_degrees();
                if angle < 0.0 {
                    angle += 180.0;
                }
                let (n1, n2) = if !(22.5..157.5).contains(&angle) {
                    (mag[i - 1], mag[i + 1])
                } else if angle < 67.5 {
                    (mag[i + width + 1], mag[i - width - 1])
                } else if angle < 112.5 {
                    (mag[i - width], mag[i + width])
                } else {
                    (mag[i + width - 1], mag[i - width + 1])
                };
                if mag[i] >= n1 && mag[i] >= n2 {
                    thin[i] = mag[i];
                }
            }
        }
    }

    // Hysteresis: seed from strong pixels, flood through weak neighbors.
    let low = low.min(high) as f32;
    let high = high as f32;
    let mut edges = vec![false; thin.len()];
    let mut stack = Vec::new();
    for start in 0..thin.len() {
        if thin[start] >= high && !edges[start] {
            edges[start] = true;
            stack.push(start);
            while let Some(i) = stack.pop() {
                let x = (i % width) as i64;
                let y = (i / width) as i64;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        if dx == 0 && dy == 0 {
                            continue;
                        }
                        let (nx, ny) = (x + dx, y + dy);
                        if nx < 0 || ny < 0 || nx >= width as i64 || ny >= height as i64 {
                            continue;
                        }
                        let ni = ny as usize * width + nx as usize;
                        if !edges[ni] && thin[ni] >= low {
                            edges[ni] = true;
                            stack.push(ni);
                        }
                    }
                }
            }
        }
    }
    edges
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    #[test]
    fn grayscale_uses_bt601_weights() {
        let img = RgbImage::from_pixel(2, 1, Rgb([100, 50, 200]));
        let g = grayscale(&img);
        let expected = 0.299 * 100.0 + 0.587 * 50.0 + 0.114 * 200.0;
        assert!((g[0] - expected).abs() < 1e-4);
    }

    #[test]
    fn blur_preserves_constant_images() {
        let gray = vec![42.0f32; 64];
        let out = gaussian_blur_gray(&gray, 8, 8, 1.4);
        for v in out {
            assert!((v - 42.0).abs() < 1e-4);
        }
    }

    #[test]
    fn blur_preserves_mean_roughly() {
        let mut gray = vec![0.0f32; 256];
        gray[8 * 16 + 8] = 255.0;
        let out = gaussian_blur_gray(&gray, 16, 16, 1.4);
        let sum: f32 = out.iter().sum();
        assert!((sum - 255.0).abs() < 1.0);
        let center = out[8 * 16 + 8];
        assert!(center < 255.0 && center > 0.0);
    }

    #[test]
    fn sobel_detects_horizontal_ramp_direction() {
        // Luminance increasing left to right: gx > 0, gy == 0 away from
        // corners.
        let width = 8;
        let gray: Vec<f32> = (0..64).map(|i| (i % width) as f32 * 10.0).collect();
        let (gx, gy) = sobel(&gray, width, 8);
        let i = 3 * width + 4;
        assert!(gx[i] > 0.0);
        assert!(gy[i].abs() < 1e-4);
    }

    #[test]
    fn hysteresis_connects_weak_to_strong() {
        // A line whose magnitude dips below the high threshold but stays
        // above low should survive as one connected edge.
        let img = RgbImage::from_fn(32, 32, |x, _| if x == 16 { Rgb([255; 3]) } else { Rgb([0; 3]) });
        let edges = canny_edge_map(&img, 1.0, 20.0, 80.0);
        let count = edges.iter().filter(|&&e| e).count();
        assert!(count > 0);
    }
}
