//! PNG/JPEG reading and writing. Pixel values map to `[0, 1]` by `v / 255`.

use std::path::{Path, PathBuf};

use image::{GrayImage, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| match source {
        image::ImageError::IoError(e) => Error::io(path, e),
        source => Error::Image {
            path: path.to_path_buf(),
            source,
        },
    })
}

/// Decodes an image as a `[1, 3, h, w]` tensor.
pub fn read_rgb(path: &Path) -> Result<Tensor<f32>> {
    let img = open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0f32; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = px.0[c] as f32 / 255.0;
        }
    }
    Tensor::from_vec([1, 3, h, w], data)
}

/// Decodes an image as a `[1, 1, h, w]` grayscale tensor.
pub fn read_gray(path: &Path) -> Result<Tensor<f32>> {
    let img = open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
    Tensor::plane(h, w, data)
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn save(img: impl FnOnce(&Path) -> image::ImageResult<()>, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes the first plane of `t` as an 8-bit grayscale PNG.
pub fn write_gray_png(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let (h, w) = (t.height(), t.width());
    let raw = t.plane_slice(0, 0).iter().map(|&v| quantize(v)).collect();
    let img = GrayImage::from_raw(w as u32, h as u32, raw).expect("buffer sized to image");
    save(|p| img.save_with_format(p, image::ImageFormat::Png), path)
}

/// Writes an RGB `[1, 3, h, w]` tensor as PNG.
pub fn write_rgb_png(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let (h, w) = (t.height(), t.width());
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let at = |c| quantize(t.at(0, c, y as usize, x as usize));
        Rgb([at(0), at(1), at(2)])
    });
    save(|p| img.save_with_format(p, image::ImageFormat::Png), path)
}

/// Maps `t in [0, 1]` onto a black-red-yellow-white ramp.
pub fn heat_color(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    let r = (t * 3.0).min(1.0);
    let g = (t * 3.0 - 1.0).clamp(0.0, 1.0);
    let b = (t * 3.0 - 2.0).clamp(0.0, 1.0);
    [(r * 255.0).round() as u8, (g * 255.0).round() as u8, (b * 255.0).round() as u8]
}

/// Writes `values` (row-major `h x w`) as a heat map scaled to `[0, max]`.
pub fn write_heatmap_png(path: &Path, values: &[f64], h: usize, w: usize, max: f64) -> Result<()> {
    let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        Rgb(heat_color(values[y as usize * w + x as usize] * scale))
    });
    save(|p| img.save_with_format(p, image::ImageFormat::Png), path)
}

/// Files in `dir` whose extension (lower-cased) is one of `exts`, sorted by path.
pub fn list_files(dir: &Path, exts: &[&str]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        if path.is_file() && ext.is_some_and(|e| exts.contains(&e.as_str())) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

pub fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}
