//! Browser demo: contour ground truth, loss weight maps and PR curves for a
//! mask drawn on a canvas. The prediction is the mask blurred by a box
//! filter, so every map can be computed without a trained model.

use rcsbnet::data::gen_contour;
use rcsbnet::io::heat_color;
use rcsbnet::losses::{box_mean, confidence_map, dc_weight_map, focal_weight, wiou_weights, LossConfig, WIOU_GAIN};
use rcsbnet::metrics::pr_f_curves;
use rcsbnet::Tensor;
use wasm_bindgen::prelude::*;

pub const WEIGHT_MAPS: &[&str] = &["confidence", "dc_saliency", "dc_contour", "wiou", "focal"];

fn mask_plane(mask: &[u8], width: usize, height: usize) -> Result<Vec<f32>, String> {
    if width == 0 || height == 0 || mask.len() != width * height {
        return Err(format!("mask has {} bytes for {width}x{height}", mask.len()));
    }
    Ok(mask.iter().map(|&v| if v >= 128 { 1.0 } else { 0.0 }).collect())
}

fn to_bytes(v: &[f32]) -> Vec<u8> {
    v.iter().map(|&x| (x.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

/// Contour band of a mask (bytes >= 128 are foreground), as 0/255 bytes.
pub fn contour_bytes(mask: &[u8], width: usize, height: usize, kernel: usize) -> Result<Vec<u8>, String> {
    let plane = Tensor::plane(height, width, mask_plane(mask, width, height)?).map_err(|e| e.to_string())?;
    let c = gen_contour(&plane, kernel).map_err(|e| e.to_string())?;
    Ok(to_bytes(c.data()))
}

/// Soft prediction: `k x k` box blur of the mask, `k = 2 * radius + 1`.
pub fn soften(mask: &[u8], width: usize, height: usize, radius: usize) -> Result<Vec<f64>, String> {
    let y: Vec<f64> = mask_plane(mask, width, height)?.iter().map(|&v| v as f64).collect();
    Ok(box_mean(&y, height, width, 2 * radius + 1))
}

/// One loss weight map as an RGBA heat map. `kind` is one of [`WEIGHT_MAPS`].
pub fn weight_map_rgba(kind: &str, mask: &[u8], width: usize, height: usize, radius: usize) -> Result<Vec<u8>, String> {
    let cfg = LossConfig::default();
    let ys: Vec<f64> = mask_plane(mask, width, height)?.iter().map(|&v| v as f64).collect();
    let yc: Vec<f64> = contour_bytes(mask, width, height, 5)?
        .iter()
        .map(|&v| (v / 255) as f64)
        .collect();
    let xs = soften(mask, width, height, radius)?;
    let xc = box_mean(&yc, height, width, 2 * radius + 1);
    let e = |r: rcsbnet::Result<Vec<f64>>| r.map_err(|e| e.to_string());
    let (values, max) = match kind {
        "confidence" => {
            let m = e(confidence_map(&xs, &ys, cfg.beta, 1.0))?;
            let max = m.iter().cloned().fold(0.0, f64::max);
            (m, max)
        }
        "dc_saliency" => (e(dc_weight_map(&xc, &yc, cfg.theta))?, cfg.theta + 1.0),
        "dc_contour" => (e(dc_weight_map(&xs, &ys, cfg.theta))?, cfg.theta + 1.0),
        "wiou" => (wiou_weights(&ys, height, width), 1.0 + WIOU_GAIN),
        "focal" => (e(focal_weight(&xs, &ys, cfg.focal_alpha, cfg.focal_gamma))?, cfg.focal_alpha),
        other => return Err(format!("unknown weight map {other:?}; expected one of {WEIGHT_MAPS:?}")),
    };
    let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
    let mut out = Vec::with_capacity(values.len() * 4);
    for v in values {
        out.extend_from_slice(&heat_color(v * scale));
        out.push(255);
    }
    Ok(out)
}

/// Precision, recall and F at thresholds 0..=255 of the softened mask,
/// concatenated into one array of 768 values.
pub fn pr_curve_values(mask: &[u8], width: usize, height: usize, radius: usize) -> Result<Vec<f64>, String> {
    let y: Vec<f64> = mask_plane(mask, width, height)?.iter().map(|&v| v as f64).collect();
    let x = soften(mask, width, height, radius)?;
    let c = pr_f_curves(&x, &y).map_err(|e| e.to_string())?;
    Ok(c.precision.into_iter().chain(c.recall).chain(c.f).collect())
}

#[wasm_bindgen]
pub fn contour(mask: &[u8], width: usize, height: usize, kernel: usize) -> Result<Vec<u8>, JsError> {
    contour_bytes(mask, width, height, kernel).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn weight_map(kind: &str, mask: &[u8], width: usize, height: usize, radius: usize) -> Result<Vec<u8>, JsError> {
    weight_map_rgba(kind, mask, width, height, radius).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn pr_curve(mask: &[u8], width: usize, height: usize, radius: usize) -> Result<Vec<f64>, JsError> {
    pr_curve_values(mask, width, height, radius).map_err(|e| JsError::new(&e))
}
