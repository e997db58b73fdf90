//! Saliency evaluation: MAE, precision/recall/F curves over 256 thresholds,
//! mean F, weighted F (Margolin et al., CVPR 2014) and the enhanced-alignment
//! measure (Fan et al., IJCAI 2018).

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use crate::data::binarize;
use crate::error::{io as io_err, Error, Result};
use crate::io;
use crate::tensor::Float;

/// `beta^2` of the F-measure.
pub const F_BETA2: f64 = 0.3;
/// Guard for empty denominators in the precision/recall curves.
pub const CURVE_EPS: f64 = 1e-12;
pub const THRESHOLDS: usize = 256;

/// Gaussian window of the weighted F-measure.
pub const WF_WINDOW: usize = 7;
pub const WF_SIGMA: f64 = 5.0;

fn check_pair<A, B>(x: &[A], y: &[B], what: &str) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!(
            "{what}: prediction has {} pixels, ground truth {}",
            x.len(),
            y.len()
        )));
    }
    Ok(())
}

fn check_binary(y: &[f64], what: &str) -> Result<()> {
    if let Some(v) = y.iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::Invalid(format!("{what}: ground truth must be binary, found {v}")));
    }
    Ok(())
}

fn check_unit(x: &[f64], what: &str) -> Result<()> {
    if let Some(v) = x.iter().find(|&&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::Invalid(format!("{what}: prediction must lie in [0, 1], found {v}")));
    }
    Ok(())
}

pub fn mae<T: Float>(x: &[T], y: &[T]) -> Result<f64> {
    check_pair(x, y, "mae")?;
    if x.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = x.iter().zip(y).map(|(a, b)| (a.as_f64() - b.as_f64()).abs()).sum();
    Ok(s / x.len() as f64)
}

/// `(1 + b2) P R / (b2 P + R + eps)`.
pub fn f_measure(precision: f64, recall: f64, beta2: f64) -> f64 {
    (1.0 + beta2) * precision * recall / (beta2 * precision + recall + CURVE_EPS)
}

/// Curves indexed by threshold `t`, where a pixel is foreground iff `x >= t / 255`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrCurves {
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f: Vec<f64>,
}

/// Largest `t` in `0..=255` with `x >= t / 255`, or `None` when `x < 0`.
fn top_threshold(x: f64) -> Option<usize> {
    if x < 0.0 {
        return None;
    }
    let mut k = ((x * 255.0).floor() as i64).clamp(0, 255);
    while k < 255 && x >= (k + 1) as f64 / 255.0 {
        k += 1;
    }
    while k > 0 && x < k as f64 / 255.0 {
        k -= 1;
    }
    Some(k as usize)
}

pub fn pr_f_curves(x: &[f64], y: &[f64]) -> Result<PrCurves> {
    check_pair(x, y, "pr_f_curves")?;
    check_binary(y, "pr_f_curves")?;
    check_unit(x, "pr_f_curves")?;
    let mut fg_hist = [0u64; THRESHOLDS];
    let mut bg_hist = [0u64; THRESHOLDS];
    let mut positives = 0u64;
    for (&xi, &yi) in x.iter().zip(y) {
        let k = top_threshold(xi).expect("checked range");
        if yi == 1.0 {
            fg_hist[k] += 1;
            positives += 1;
        } else {
            bg_hist[k] += 1;
        }
    }
    let mut curves = PrCurves {
        precision: vec![0.0; THRESHOLDS],
        recall: vec![0.0; THRESHOLDS],
        f: vec![0.0; THRESHOLDS],
    };
    let (mut tp, mut fp) = (0u64, 0u64);
    for t in (0..THRESHOLDS).rev() {
        tp += fg_hist[t];
        fp += bg_hist[t];
        let fnn = positives - tp;
        let p = tp as f64 / (tp as f64 + fp as f64 + CURVE_EPS);
        let r = tp as f64 / (tp as f64 + fnn as f64 + CURVE_EPS);
        curves.precision[t] = p;
        curves.recall[t] = r;
        curves.f[t] = f_measure(p, r, F_BETA2);
    }
    Ok(curves)
}

pub fn mean_f(f_curve: &[f64]) -> f64 {
    if f_curve.is_empty() {
        return 0.0;
    }
    f_curve.iter().sum::<f64>() / f_curve.len() as f64
}

/// For every pixel, the squared distance to the nearest foreground pixel of
/// `y` and that pixel's row-major index (smallest index among ties).
/// Returns `None` if `y` has no foreground.
pub fn nearest_foreground(y: &[f64], h: usize, w: usize) -> Option<(Vec<u64>, Vec<usize>)> {
    if !y.iter().any(|&v| v == 1.0) {
        return None;
    }
    // up[r][c] / down[r][c]: row of the nearest foreground at or above / below r in column c
    let mut up = vec![usize::MAX; h * w];
    let mut down = vec![usize::MAX; h * w];
    for c in 0..w {
        let mut last = usize::MAX;
        for r in 0..h {
            if y[r * w + c] == 1.0 {
                last = r;
            }
            up[r * w + c] = last;
        }
        last = usize::MAX;
        for r in (0..h).rev() {
            if y[r * w + c] == 1.0 {
                last = r;
            }
            down[r * w + c] = last;
        }
    }
    let mut dist = vec![0u64; h * w];
    let mut index = vec![0usize; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut best = (u64::MAX, usize::MAX);
            for cc in 0..w {
                let dc = (c as i64 - cc as i64).unsigned_abs();
                for rr in [up[r * w + cc], down[r * w + cc]] {
                    if rr == usize::MAX {
                        continue;
                    }
                    let dr = (r as i64 - rr as i64).unsigned_abs();
                    let cand = (dr * dr + dc * dc, rr * w + cc);
                    if cand < best {
                        best = cand;
                    }
                }
            }
            dist[r * w + c] = best.0;
            index[r * w + c] = best.1;
        }
    }
    Some((dist, index))
}

/// Normalised 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let taps: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

fn separable_filter(x: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let r = taps.len() / 2;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for c in 0..w {
            let mut s = 0.0;
            for (k, t) in taps.iter().enumerate() {
                let cc = c as isize + k as isize - r as isize;
                if cc >= 0 && (cc as usize) < w {
                    s += t * x[y * w + cc as usize];
                }
            }
            tmp[y * w + c] = s;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for c in 0..w {
            let mut s = 0.0;
            for (k, t) in taps.iter().enumerate() {
                let yy = y as isize + k as isize - r as isize;
                if yy >= 0 && (yy as usize) < h {
                    s += t * tmp[yy as usize * w + c];
                }
            }
            out[y * w + c] = s;
        }
    }
    out
}

/// Weighted F-measure with `beta^2 = 1`.
pub fn weighted_f(x: &[f64], y: &[f64], h: usize, w: usize) -> Result<f64> {
    check_pair(x, y, "weighted_f")?;
    check_binary(y, "weighted_f")?;
    check_unit(x, "weighted_f")?;
    if x.len() != h * w {
        return Err(Error::Shape(format!("weighted_f: {} pixels for {h}x{w}", x.len())));
    }
    let Some((dist, nearest)) = nearest_foreground(y, h, w) else {
        return Ok(if x.iter().all(|&v| v == 0.0) { 1.0 } else { 0.0 });
    };
    let err: Vec<f64> = x.iter().zip(y).map(|(a, b)| (a - b).abs()).collect();
    let spread: Vec<f64> = (0..h * w)
        .map(|i| if y[i] == 1.0 { err[i] } else { err[nearest[i]] })
        .collect();
    let blurred = separable_filter(&spread, h, w, &gaussian_taps(WF_WINDOW, WF_SIGMA));
    let alpha = 0.5f64.ln() / 5.0;
    let (mut fg, mut ew_fg, mut ew_bg) = (0.0, 0.0, 0.0);
    for i in 0..h * w {
        if y[i] == 1.0 {
            fg += 1.0;
            ew_fg += err[i].min(blurred[i]);
        } else {
            let b = 2.0 - (alpha * (dist[i] as f64).sqrt()).exp();
            ew_bg += err[i] * b;
        }
    }
    let eps = f64::EPSILON;
    let tp = fg - ew_fg;
    let recall = 1.0 - ew_fg / fg;
    let precision = tp / (eps + tp + ew_bg);
    Ok((2.0 * recall * precision / (eps + recall + precision)).clamp(0.0, 1.0))
}

/// Enhanced alignment between a binary prediction and a binary ground truth.
pub fn e_measure_binary(x_bin: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x_bin, y, "e_measure")?;
    check_binary(y, "e_measure")?;
    check_binary(x_bin, "e_measure")?;
    if y.is_empty() {
        return Ok(0.0);
    }
    let n = y.len() as f64;
    let fg = y.iter().sum::<f64>();
    let enhanced: f64 = if fg == 0.0 {
        x_bin.iter().map(|v| 1.0 - v).sum()
    } else if fg == n {
        x_bin.iter().sum()
    } else {
        let mx = x_bin.iter().sum::<f64>() / n;
        let my = fg / n;
        x_bin
            .iter()
            .zip(y)
            .map(|(a, b)| {
                let (px, py) = (a - mx, b - my);
                let den = px * px + py * py;
                let xi = if den == 0.0 { 0.0 } else { 2.0 * px * py / den };
                (xi + 1.0) * (xi + 1.0) / 4.0
            })
            .sum()
    };
    Ok(enhanced / n)
}

/// Adaptive threshold `min(2 mean(x), 1)`; a pixel is foreground iff strictly above it.
pub fn adaptive_binarize(x: &[f64]) -> Vec<f64> {
    let mean = if x.is_empty() { 0.0 } else { x.iter().sum::<f64>() / x.len() as f64 };
    let t = (2.0 * mean).min(1.0);
    x.iter().map(|&v| if v > t { 1.0 } else { 0.0 }).collect()
}

pub fn e_measure(x: &[f64], y: &[f64]) -> Result<f64> {
    check_unit(x, "e_measure")?;
    e_measure_binary(&adaptive_binarize(x), y)
}

/// All measures for one prediction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub mae: f64,
    pub mean_f: f64,
    pub weighted_f: f64,
    pub e_measure: f64,
    pub curves: PrCurves,
}

pub fn evaluate_image(x: &[f64], y: &[f64], h: usize, w: usize) -> Result<ImageMetrics> {
    let curves = pr_f_curves(x, y)?;
    Ok(ImageMetrics {
        mae: mae(x, y)?,
        mean_f: mean_f(&curves.f),
        weighted_f: weighted_f(x, y, h, w)?,
        e_measure: e_measure(x, y)?,
        curves,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub images: usize,
    pub mean_f: f64,
    pub mae: f64,
    pub weighted_f: f64,
    pub e_measure: f64,
    /// `(precision, recall)` per threshold.
    pub pr_curve: Vec<(f64, f64)>,
    pub f_curve: Vec<f64>,
}

impl MetricsReport {
    /// Per-image measures averaged over images; curves averaged pointwise.
    pub fn aggregate(items: &[ImageMetrics]) -> Self {
        let n = items.len().max(1) as f64;
        let avg = |f: &dyn Fn(&ImageMetrics) -> f64| items.iter().map(f).sum::<f64>() / n;
        let curve = |f: &dyn Fn(&PrCurves) -> &Vec<f64>| -> Vec<f64> {
            (0..THRESHOLDS)
                .map(|t| items.iter().map(|m| f(&m.curves)[t]).sum::<f64>() / n)
                .collect()
        };
        let p = curve(&|c| &c.precision);
        let r = curve(&|c| &c.recall);
        Self {
            images: items.len(),
            mean_f: avg(&|m| m.mean_f),
            mae: avg(&|m| m.mae),
            weighted_f: avg(&|m| m.weighted_f),
            e_measure: avg(&|m| m.e_measure),
            pr_curve: p.into_iter().zip(r).collect(),
            f_curve: curve(&|c| &c.f),
        }
    }

    /// Writes `report.json` and `curves.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let json = dir.join("report.json");
        let text = serde_json::to_string_pretty(self).expect("report serialises");
        std::fs::write(&json, text + "\n").map_err(|e| io_err(&json, e))?;
        let csv = dir.join("curves.csv");
        let mut out = String::from("threshold,precision,recall,f\n");
        for (t, ((p, r), f)) in self.pr_curve.iter().zip(&self.f_curve).enumerate() {
            out.push_str(&format!("{t},{p},{r},{f}\n"));
        }
        std::fs::write(&csv, out).map_err(|e| io_err(&csv, e))?;
        Ok((json, csv))
    }
}

/// Evaluates every prediction in `pred_dir` against the same-stem mask in
/// `gt_dir`. Ground truth is binarized at 0.5.
pub fn evaluate_dataset(pred_dir: &Path, gt_dir: &Path) -> Result<MetricsReport> {
    let preds = io::list_files(pred_dir, crate::data::IMAGE_EXTENSIONS)?;
    let gts = io::list_files(gt_dir, crate::data::IMAGE_EXTENSIONS)?;
    let pred_stems: Vec<String> = preds.iter().map(|p| io::stem(p)).collect();
    let gt_stems: Vec<String> = gts.iter().map(|p| io::stem(p)).collect();
    let mut unmatched: Vec<String> = pred_stems
        .iter()
        .filter(|s| !gt_stems.contains(s))
        .chain(gt_stems.iter().filter(|s| !pred_stems.contains(s)))
        .cloned()
        .collect();
    if !unmatched.is_empty() {
        unmatched.sort();
        return Err(Error::Unmatched(unmatched));
    }
    let mut items = Vec::with_capacity(preds.len());
    for (pred_path, stem) in preds.iter().zip(&pred_stems) {
        let gt_path = &gts[gt_stems.iter().position(|s| s == stem).expect("matched")];
        let pred = io::read_gray(pred_path)?;
        let gt = binarize(&io::read_gray(gt_path)?);
        if pred.shape() != gt.shape() {
            return Err(Error::Shape(format!(
                "{stem}: prediction {:?} and ground truth {:?} differ in size",
                pred.shape(),
                gt.shape()
            )));
        }
        let x: Vec<f64> = pred.data().iter().map(|&v| (v as f64 * 255.0).round() / 255.0).collect();
        let y: Vec<f64> = gt.data().iter().map(|&v| v as f64).collect();
        items.push(evaluate_image(&x, &y, gt.height(), gt.width())?);
    }
    Ok(MetricsReport::aggregate(&items))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_f_value() {
        assert!((f_measure(0.8, 0.5, 0.3) - 0.52 / 0.74).abs() < 1e-9);
        assert_eq!(format!("{:.4}", f_measure(0.8, 0.5, 0.3)), "0.7027");
    }

    #[test]
    fn thresholds_are_exact() {
        for t in 0..256usize {
            let x = t as f64 / 255.0;
            assert_eq!(top_threshold(x), Some(t));
        }
        assert_eq!(top_threshold(1.0), Some(255));
        assert_eq!(top_threshold(0.0), Some(0));
        assert_eq!(top_threshold(-0.1), None);
    }

    #[test]
    fn perfect_prediction() {
        let y: Vec<f64> = (0..64).map(|i| ((i / 8 + i % 8) % 3 == 0) as u8 as f64).collect();
        let c = pr_f_curves(&y, &y).unwrap();
        assert!((c.precision[128] - 1.0).abs() < 1e-9);
        assert!((c.recall[128] - 1.0).abs() < 1e-9);
        assert!((c.f[128] - 1.0).abs() < 1e-9);
        assert!((weighted_f(&y, &y, 8, 8).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(e_measure_binary(&y, &y).unwrap(), 1.0);
        assert_eq!(mae(&y, &y).unwrap(), 0.0);
    }

    #[test]
    fn degenerate_cases() {
        let zeros = vec![0.0; 16];
        let ones = vec![1.0; 16];
        assert_eq!(mae(&ones, &zeros).unwrap(), 1.0);
        let border = weighted_f(&zeros, &ones, 4, 4).unwrap();
        assert!(border > 0.0 && border < 1.0, "{border}");
        let block: Vec<f64> = (0..400)
            .map(|i| ((5..15).contains(&(i / 20)) && (5..15).contains(&(i % 20))) as u8 as f64)
            .collect();
        assert_eq!(weighted_f(&vec![0.0; 400], &block, 20, 20).unwrap(), 0.0);
        assert_eq!(weighted_f(&zeros, &zeros, 4, 4).unwrap(), 1.0);
        assert_eq!(weighted_f(&ones, &zeros, 4, 4).unwrap(), 0.0);
        assert_eq!(e_measure_binary(&zeros, &zeros).unwrap(), 1.0);
        assert_eq!(e_measure_binary(&ones, &ones).unwrap(), 1.0);
        assert_eq!(e_measure_binary(&ones, &zeros).unwrap(), 0.0);
        let checker: Vec<f64> = (0..16).map(|i| ((i / 4 + i % 4) % 2) as f64).collect();
        let inverse: Vec<f64> = checker.iter().map(|v| 1.0 - v).collect();
        assert_eq!(e_measure_binary(&inverse, &checker).unwrap(), 0.0);
        assert!(pr_f_curves(&zeros, &vec![0.5; 16]).is_err());
        assert!(pr_f_curves(&vec![1.5; 16], &zeros).is_err());
    }

    #[test]
    fn gaussian_taps_normalised() {
        let t = gaussian_taps(7, 5.0);
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(t[0], t[6]);
        assert!(t[3] > t[2]);
    }

    #[test]
    fn aggregate_is_mean() {
        let y: Vec<f64> = (0..16).map(|i| (i % 3 == 0) as u8 as f64).collect();
        let a = evaluate_image(&vec![0.2; 16], &y, 4, 4).unwrap();
        let b = evaluate_image(&y, &y, 4, 4).unwrap();
        let r = MetricsReport::aggregate(&[a.clone(), b.clone()]);
        assert!((r.mae - (a.mae + b.mae) / 2.0).abs() < 1e-15);
        assert!((r.f_curve[7] - (a.curves.f[7] + b.curves.f[7]) / 2.0).abs() < 1e-15);
        assert_eq!(r.pr_curve.len(), 256);
    }
}
