//! Grayscale image helpers shared across modules: bilinear resize, crops,
//! [0,1] <-> [-1,1] range maps, PNG round-trips and a tiny line-plot writer
//! for training curves.

use crate::error::{Error, Result};
use ndarray::Array2;
use std::path::Path;

/// Bilinear resize of a [0,1] (or any-range) grayscale image.
pub fn resize_bilinear(src: &Array2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = src.dim();
    if h == out_h && w == out_w {
        return src.clone();
    }
    let mut out = Array2::zeros((out_h, out_w));
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    for oy in 0..out_h {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f64;
        for ox in 0..out_w {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f64;
            out[[oy, ox]] = src[[y0, x0]] * (1.0 - wy) * (1.0 - wx)
                + src[[y0, x1]] * (1.0 - wy) * wx
                + src[[y1, x0]] * wy * (1.0 - wx)
                + src[[y1, x1]] * wy * wx;
        }
    }
    out
}

/// Crop a `size`*`size` window whose center is offset from the image center.
pub fn crop_centered(src: &Array2<f64>, size: usize, dy: i64, dx: i64) -> Result<Array2<f64>> {
    let (h, w) = src.dim();
    if h < size || w < size {
        return Err(Error::Shape(format!(
            "cannot crop {size}x{size} from {h}x{w}"
        )));
    }
    let y0 = (((h - size) / 2) as i64 + dy).clamp(0, (h - size) as i64) as usize;
    let x0 = (((w - size) / 2) as i64 + dx).clamp(0, (w - size) as i64) as usize;
    Ok(src
        .slice(ndarray::s![y0..y0 + size, x0..x0 + size])
        .to_owned())
}

/// [0,1] -> [-1,1]
pub fn to_signed(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| 2.0 * v - 1.0)
}

/// [-1,1] -> [0,1], clamped.
pub fn to_unit(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0))
}

/// Save a [0,1] grayscale image as an 8-bit PNG.
pub fn save_png(path: &Path, img: &Array2<f64>) -> Result<()> {
    let (h, w) = img.dim();
    let mut buf = image::GrayImage::new(w as u32, h as u32);
    for ((y, x), v) in img.indexed_iter() {
        buf.put_pixel(x as u32, y as u32, image::Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8]));
    }
    buf.save(path)?;
    Ok(())
}

/// Load an 8-bit grayscale PNG into [0,1].
pub fn load_png(path: &Path) -> Result<Array2<f64>> {
    let img = image::open(path)?.into_luma8();
    let (w, h) = img.dimensions();
    let mut out = Array2::zeros((h as usize, w as usize));
    for (x, y, p) in img.enumerate_pixels() {
        out[[y as usize, x as usize]] = p.0[0] as f64 / 255.0;
    }
    Ok(out)
}

/// Render simple line plots (one series per curve) into a PNG. Used for the
/// loss/accuracy training curves; values are min-max scaled per plot.
pub fn save_line_plot(path: &Path, series: &[(&str, &[f64])], title: &str) -> Result<()> {
    let w = 640usize;
    let h = 360usize;
    let mut canvas = Array2::from_elem((h, w), 1.0f64);
    let margin = 30usize;
    let lo = series
        .iter()
        .flat_map(|(_, v)| v.iter())
        .cloned()
        .fold(f64::INFINITY, f64::min);
    let hi = series
        .iter()
        .flat_map(|(_, v)| v.iter())
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    let maxlen = series.iter().map(|(_, v)| v.len()).max().unwrap_or(2).max(2);
    // axes
    for x in margin..w - margin {
        canvas[[h - margin, x]] = 0.0;
    }
    for y in margin..h - margin {
        canvas[[y, margin]] = 0.0;
    }
    for (si, (_, vals)) in series.iter().enumerate() {
        let shade = 0.15 + 0.25 * si as f64;
        let pts: Vec<(usize, usize)> = vals
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let x = margin + i * (w - 2 * margin) / (maxlen - 1);
                let yv = (v - lo) / span;
                let y = h - margin - (yv * (h - 2 * margin - 2) as f64) as usize;
                (y, x)
            })
            .collect();
        for pair in pts.windows(2) {
            draw_line(&mut canvas, pair[0], pair[1], shade);
        }
    }
    let _ = title;
    save_png(path, &canvas)
}

fn draw_line(canvas: &mut Array2<f64>, a: (usize, usize), b: (usize, usize), shade: f64) {
    let (h, w) = canvas.dim();
    let (y0, x0) = (a.0 as i64, a.1 as i64);
    let (y1, x1) = (b.0 as i64, b.1 as i64);
    let steps = (y1 - y0).abs().max((x1 - x0).abs()).max(1);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let y = (y0 as f64 + t * (y1 - y0) as f64).round() as i64;
        let x = (x0 as f64 + t * (x1 - x0) as f64).round() as i64;
        if y >= 0 && (y as usize) < h && x >= 0 && (x as usize) < w {
            canvas[[y as usize, x as usize]] = shade;
        }
    }
}

/// 10-point moving average used for the smoothed training curves.
pub fn moving_average(vals: &[f64], window: usize) -> Vec<f64> {
    if vals.is_empty() {
        return Vec::new();
    }
    let half = window / 2;
    (0..vals.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(vals.len());
            vals[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_identity_and_downscale() {
        let img = Array2::from_shape_fn((70, 70), |(y, x)| ((y + x) % 10) as f64 / 10.0);
        assert_eq!(resize_bilinear(&img, 70, 70), img);
        let small = resize_bilinear(&img, 64, 64);
        assert_eq!(small.dim(), (64, 64));
        assert!(small.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn crop_bounds() {
        let img = Array2::zeros((70, 70));
        assert!(crop_centered(&img, 64, 0, 0).is_ok());
        assert!(crop_centered(&img, 80, 0, 0).is_err());
    }

    #[test]
    fn png_round_trip() {
        let dir = std::env::temp_dir().join("cxrjust_imgutil_test");
        std::fs::create_dir_all(&dir).unwrap();
        let img = Array2::from_shape_fn((16, 16), |(y, x)| ((y * 16 + x) % 256) as f64 / 255.0);
        let p = dir.join("t.png");
        save_png(&p, &img).unwrap();
        let back = load_png(&p).unwrap();
        assert!(img
            .iter()
            .zip(back.iter())
            .all(|(a, b)| (a - b).abs() < 1.0 / 255.0 + 1e-9));
    }

    #[test]
    fn moving_average_window() {
        let v = vec![1.0, 2.0, 3.0, 4.0, 5.0];
        let sm = moving_average(&v, 10);
        assert_eq!(sm.len(), v.len());
        assert!((sm[2] - 3.0).abs() < 1e-12);
    }
}
