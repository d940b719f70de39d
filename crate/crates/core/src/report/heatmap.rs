use std::path::Path;

use crate::error::Result;
use crate::ingest::image::{resize_plane, write_gray, write_rgb, RgbImage};
use crate::metrics::AggregateMap;

/// Scales values linearly onto `[0, 1]`. A constant input maps to all zeros.
pub fn normalize_min_max(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if span.is_nan() || span <= 0.0 {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - lo) / span).collect()
}

/// Aggregate map upsampled to `height × width` and normalized for display.
pub fn heatmap_plane(agg: &AggregateMap, height: usize, width: usize) -> Vec<f64> {
    normalize_min_max(&resize_plane(&agg.values, agg.height, agg.width, height, width))
}

pub fn to_gray(plane: &[f64]) -> Vec<u8> {
    plane.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

/// Even blend of the image with the grey heatmap.
pub fn overlay(image: &RgbImage, gray: &[u8]) -> RgbImage {
    let mut out = image.clone();
    for (px, &g) in out.data.chunks_exact_mut(3).zip(gray) {
        for c in px {
            *c = (u16::from(*c) + u16::from(g)).div_ceil(2) as u8;
        }
    }
    out
}

/// Writes the heatmap for `image` to `out`, and the overlay when asked.
/// The file extension picks PNG or PGM/PPM.
pub fn render_heatmap(agg: &AggregateMap, image: &RgbImage, out: &Path, overlay_out: Option<&Path>) -> Result<()> {
    let gray = to_gray(&heatmap_plane(agg, image.height, image.width));
    write_gray(out, image.width, image.height, &gray)?;
    if let Some(p) = overlay_out {
        write_rgb(p, &overlay(image, &gray))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn agg(h: usize, w: usize, values: Vec<f64>) -> AggregateMap {
        AggregateMap { height: h, width: w, values }
    }

    /// Bilinear sample with half-pixel centres, written from the textbook formula.
    fn oracle(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
        let mut out = vec![0.0; oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let sy = ((oy as f64 + 0.5) * h as f64 / oh as f64 - 0.5).max(0.0).min((h - 1) as f64);
                let sx = ((ox as f64 + 0.5) * w as f64 / ow as f64 - 0.5).max(0.0).min((w - 1) as f64);
                let mut acc = 0.0;
                for y in 0..h {
                    for x in 0..w {
                        let wy = (1.0 - (sy - y as f64).abs()).max(0.0);
                        let wx = (1.0 - (sx - x as f64).abs()).max(0.0);
                        acc += wy * wx * src[y * w + x];
                    }
                }
                out[oy * ow + ox] = acc;
            }
        }
        out
    }

    #[test]
    fn constant_map_is_black() {
        let plane = heatmap_plane(&agg(4, 4, vec![0.25; 16]), 32, 32);
        assert!(plane.iter().all(|&v| v == 0.0));
        assert!(to_gray(&plane).iter().all(|&g| g == 0));
    }

    #[test]
    fn one_hot_lights_its_cell() {
        let mut v = vec![0.0; 16];
        v[4 + 2] = 1.0;
        let plane = heatmap_plane(&agg(4, 4, v), 32, 32);
        let (argmax, &peak) = plane
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap();
        assert_eq!(peak, 1.0);
        let (y, x) = (argmax / 32, argmax % 32);
        assert_eq!((y / 8, x / 8), (1, 2));
        // far corners stay dark
        assert_eq!(plane[0], 0.0);
        assert_eq!(plane[32 * 32 - 1], 0.0);
    }

    #[test]
    fn upsample_matches_bilinear_oracle() {
        let h = 5;
        let w = 7;
        let src: Vec<f64> = (0..h * w).map(|i| ((i * 37) % 11) as f64 / 10.0).collect();
        for &(oh, ow) in &[(20, 28), (64, 64), (13, 9)] {
            let got = resize_plane(&src, h, w, oh, ow);
            let want = oracle(&src, h, w, oh, ow);
            let diff = got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(diff < 1e-5, "{oh}x{ow}: {diff}");
        }
    }

    #[test]
    fn overlay_averages() {
        let mut img = RgbImage::new(1, 1);
        img.put(0, 0, [200, 0, 100]);
        assert_eq!(overlay(&img, &[100]).get(0, 0), [150, 50, 100]);
    }

    #[test]
    fn writes_files() {
        let dir = tempfile::tempdir().unwrap();
        let img = RgbImage::new(8, 8);
        let mut v = vec![0.0; 4];
        v[3] = 2.0;
        let out = dir.path().join("h.png");
        let ov = dir.path().join("o.png");
        render_heatmap(&agg(2, 2, v), &img, &out, Some(&ov)).unwrap();
        assert!(out.exists() && ov.exists());
    }
}
