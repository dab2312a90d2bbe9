//! Small RGB raster helpers shared by the data generator, the pretext
//! transforms and the renderers. Images are `(height, width, channels)`
//! arrays of `f64` intensities in `[0, 1]`.

use std::path::Path;

use ndarray::{s, Array3, ArrayView3};

use crate::error::{Error, Result};

pub type Image = Array3<f64>;

/// Bilinear resize with half-pixel centres and edge clamping.
///
/// Output pixel `(i, j)` samples source coordinate
/// `((i + 0.5) * in_h / out_h - 0.5, (j + 0.5) * in_w / out_w - 0.5)`.
pub fn resize_bilinear(src: ArrayView3<f64>, out_h: usize, out_w: usize) -> Image {
    let (in_h, in_w, ch) = src.dim();
    if in_h == out_h && in_w == out_w {
        return src.to_owned();
    }
    let rows = axis_taps(in_h, out_h);
    let cols = axis_taps(in_w, out_w);
    let mut out = Array3::zeros((out_h, out_w, ch));
    for (i, &(r0, r1, fr)) in rows.iter().enumerate() {
        for (j, &(c0, c1, fc)) in cols.iter().enumerate() {
            for k in 0..ch {
                let top = src[[r0, c0, k]] * (1.0 - fc) + src[[r0, c1, k]] * fc;
                let bot = src[[r1, c0, k]] * (1.0 - fc) + src[[r1, c1, k]] * fc;
                out[[i, j, k]] = top * (1.0 - fr) + bot * fr;
            }
        }
    }
    out
}

fn axis_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|i| {
            let x = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
            let x0 = x.floor() as usize;
            let x1 = (x0 + 1).min(n_in - 1);
            (x0, x1, x - x0 as f64)
        })
        .collect()
}

/// Counter-clockwise rotation by `quarter_turns * 90` degrees.
pub fn rotate_ccw(img: &Image, quarter_turns: usize) -> Image {
    let mut out = img.clone();
    for _ in 0..quarter_turns % 4 {
        out = quarter_turn_ccw(&out);
    }
    out
}

// new[i][j] = old[j][W - 1 - i]
fn quarter_turn_ccw(img: &Image) -> Image {
    let (h, w, c) = img.dim();
    Array3::from_shape_fn((w, h, c), |(i, j, k)| img[[j, w - 1 - i, k]])
}

/// Mirrors columns: `c -> W - 1 - c`.
pub fn flip_horizontal(img: &Image) -> Image {
    img.slice(s![.., ..;-1, ..]).to_owned()
}

pub fn to_rgb8(img: &Image) -> image::RgbImage {
    let (h, w, _) = img.dim();
    image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |k| (img[[y as usize, x as usize, k]].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    })
}

pub fn from_rgb8(buf: &image::RgbImage) -> Image {
    let (w, h) = buf.dimensions();
    Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, k)| {
        buf.get_pixel(x as u32, y as u32)[k] as f64 / 255.0
    })
}

/// Lossless 8-bit PNG.
pub fn save_png(img: &Image, path: &Path) -> Result<()> {
    to_rgb8(img).save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

pub fn load_png(path: &Path) -> Result<Image> {
    let dynimg = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(source) => Error::Path { path: path.to_path_buf(), source },
        other => Error::Image(other),
    })?;
    Ok(from_rgb8(&dynimg.to_rgb8()))
}

/// Single-channel map to a grayscale RGB image (values clamped to [0, 1]).
pub fn gray_to_rgb(map: &ndarray::Array2<f64>) -> Image {
    let (h, w) = map.dim();
    Array3::from_shape_fn((h, w, 3), |(i, j, _)| map[[i, j]].clamp(0.0, 1.0))
}

/// Tiles equally sized images into a grid with `cols` columns and a
/// `gap`-pixel white border.
pub fn tile_grid(images: &[Image], cols: usize, gap: usize) -> Image {
    if images.is_empty() {
        return Array3::ones((1, 1, 3));
    }
    let (h, w, _) = images[0].dim();
    let cols = cols.max(1);
    let rows = images.len().div_ceil(cols);
    let mut out = Array3::ones((rows * (h + gap) + gap, cols * (w + gap) + gap, 3));
    for (n, img) in images.iter().enumerate() {
        let (r, c) = (n / cols, n % cols);
        let (y, x) = (gap + r * (h + gap), gap + c * (w + gap));
        out.slice_mut(s![y..y + h, x..x + w, ..]).assign(img);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Image {
        Array3::from_shape_fn((h, w, 3), |(i, j, k)| (i * w + j) as f64 / (h * w) as f64 + k as f64 * 0.01)
    }

    #[test]
    fn resize_identity_is_exact() {
        let img = ramp(5, 7);
        assert_eq!(resize_bilinear(img.view(), 5, 7), img);
    }

    #[test]
    fn halving_averages_two_by_two_blocks() {
        let img = ramp(8, 8);
        let half = resize_bilinear(img.view(), 4, 4);
        for i in 0..4 {
            for j in 0..4 {
                let avg = (img[[2 * i, 2 * j, 1]]
                    + img[[2 * i + 1, 2 * j, 1]]
                    + img[[2 * i, 2 * j + 1, 1]]
                    + img[[2 * i + 1, 2 * j + 1, 1]])
                    / 4.0;
                assert!((half[[i, j, 1]] - avg).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rotation_and_flip_geometry() {
        let img = ramp(4, 4);
        let r2 = rotate_ccw(&img, 2);
        assert_eq!(r2[[0, 0, 0]], img[[3, 3, 0]]);
        assert_eq!(r2[[1, 2, 2]], img[[2, 1, 2]]);
        let r1 = rotate_ccw(&img, 1);
        // top-right corner moves to top-left under a ccw quarter turn
        assert_eq!(r1[[0, 0, 0]], img[[0, 3, 0]]);
        assert_eq!(rotate_ccw(&r1, 3), img);
        let f = flip_horizontal(&img);
        assert_eq!(f[[1, 0, 0]], img[[1, 3, 0]]);
        assert_eq!(flip_horizontal(&f), img);
    }

    #[test]
    fn png_round_trip_is_lossless_on_8bit_values() {
        let img = Array3::from_shape_fn((3, 4, 3), |(i, j, k)| ((i * 40 + j * 10 + k) % 256) as f64 / 255.0);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        save_png(&img, &p).unwrap();
        let back = load_png(&p).unwrap();
        for (a, b) in img.iter().zip(back.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
