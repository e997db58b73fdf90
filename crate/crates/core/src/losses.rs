//! Training losses and weight maps.
//!
//! Every loss takes post-sigmoid predictions `x` and ground truth `y` for one
//! image as flat row-major slices and returns the value together with its
//! analytic gradient. All losses are non-negative penalties: the binary
//! cross-entropy term is `-(y ln x + (1 - y) ln(1 - x))`.
//!
//! Predictions are clamped to `[CLAMP_EPS, 1 - CLAMP_EPS]` before any
//! logarithm; the gradient of a clamped element is zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Float;

pub const CLAMP_EPS: f64 = 1e-7;

/// Side of the local-contrast window used by the weighted IoU loss.
pub const WIOU_WINDOW: usize = 31;
/// Gain on the local-contrast term of the weighted IoU loss.
pub const WIOU_GAIN: f64 = 5.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Scale of the confidence score `beta * x * (1 - x)`.
    pub beta: f64,
    /// Weight of the unconfidence penalty.
    pub lambda: f64,
    /// Gain of the cross-stream weight map.
    pub theta: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            beta: 2.0,
            lambda: 0.3,
            theta: 4.0,
            focal_alpha: 2.0,
            focal_gamma: 2.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("beta", self.beta),
            ("lambda", self.lambda),
            ("theta", self.theta),
            ("focal_alpha", self.focal_alpha),
            ("focal_gamma", self.focal_gamma),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss.{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// A scalar loss and its gradient with respect to the prediction.
#[derive(Clone, Debug)]
pub struct LossGrad<T> {
    pub value: T,
    pub grad: Vec<T>,
}

fn same_len<T>(a: &[T], b: &[T], what: &str) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "{what}: prediction has {} pixels, target has {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::Shape(format!("{what}: empty map")));
    }
    Ok(())
}

fn unit_range<T: Float>(x: &[T], what: &str) -> Result<()> {
    if let Some(v) = x.iter().find(|v| !(**v >= T::zero() && **v <= T::one())) {
        return Err(Error::Invalid(format!("{what}: value {v:?} outside [0, 1]")));
    }
    Ok(())
}

#[inline]
fn clamp<T: Float>(x: T) -> (T, bool) {
    let lo = T::c(CLAMP_EPS);
    let hi = T::one() - lo;
    if x < lo {
        (lo, false)
    } else if x > hi {
        (hi, false)
    } else {
        (x, true)
    }
}

/// Cross-entropy of one pixel with its partial derivatives `(value, d/dx, d/dy)`.
#[inline]
fn bce_terms<T: Float>(x: T, y: T) -> (T, T, T) {
    let (xc, live) = clamp(x);
    let one = T::one();
    let value = -(y * xc.ln() + (one - y) * (one - xc).ln());
    let dx = if live {
        -y / xc + (one - y) / (one - xc)
    } else {
        T::zero()
    };
    let dy = (one - xc).ln() - xc.ln();
    (value, dx, dy)
}

/// Per-pixel cross-entropy (non-negative).
pub fn bce<T: Float>(x: T, y: T) -> T {
    bce_terms(x, y).0
}

/// Mean binary cross-entropy.
pub fn bce_loss<T: Float>(x: &[T], y: &[T]) -> Result<LossGrad<T>> {
    same_len(x, y, "bce")?;
    let inv_n = T::one() / T::c(x.len() as f64);
    let mut value = T::zero();
    let mut grad = Vec::with_capacity(x.len());
    for (&xi, &yi) in x.iter().zip(y) {
        let (v, dx, _) = bce_terms(xi, yi);
        value += v;
        grad.push(dx * inv_n);
    }
    Ok(LossGrad {
        value: value * inv_n,
        grad,
    })
}

/// Confidence score `beta * x * (1 - x)`; peaks at `beta / 4` for `x = 0.5`.
pub fn confidence_weight<T: Float>(x: &[T], beta: f64) -> Result<Vec<T>> {
    unit_range(x, "confidence_weight")?;
    let b = T::c(beta);
    Ok(x.iter().map(|&v| b * v * (T::one() - v)).collect())
}

/// Mean of `W_c * bce(x, y) + lambda * W_c` with `W_c = beta * x * (1 - x)`.
pub fn confidence_loss<T: Float>(x: &[T], y: &[T], cfg: &LossConfig) -> Result<LossGrad<T>> {
    same_len(x, y, "confidence_loss")?;
    let beta = T::c(cfg.beta);
    let lambda = T::c(cfg.lambda);
    let inv_n = T::one() / T::c(x.len() as f64);
    let two = T::c(2.0);
    let mut value = T::zero();
    let mut grad = Vec::with_capacity(x.len());
    for (&xi, &yi) in x.iter().zip(y) {
        let (xc, live) = clamp(xi);
        let (l, dl, _) = bce_terms(xi, yi);
        let w = beta * xc * (T::one() - xc);
        value += w * (l + lambda);
        let d = if live {
            beta * (T::one() - two * xc) * (l + lambda) + w * dl
        } else {
            T::zero()
        };
        grad.push(d * inv_n);
    }
    Ok(LossGrad {
        value: value * inv_n,
        grad,
    })
}

/// Per-pixel confidence penalty `W_c * (bce + lambda)`, for weight-map inspection.
pub fn confidence_map<T: Float>(x: &[T], y: &[T], beta: f64, lambda: f64) -> Result<Vec<T>> {
    same_len(x, y, "confidence_map")?;
    let (beta, lambda) = (T::c(beta), T::c(lambda));
    Ok(x.iter()
        .zip(y)
        .map(|(&xi, &yi)| {
            let (xc, _) = clamp(xi);
            beta * xc * (T::one() - xc) * (bce(xi, yi) + lambda)
        })
        .collect())
}

/// Cross-stream weight `theta * max(x_other, y_other) + 1`, in `[1, theta + 1]`.
pub fn dc_weight_map<T: Float>(x_other: &[T], y_other: &[T], theta: f64) -> Result<Vec<T>> {
    same_len(x_other, y_other, "dc_weight_map")?;
    let t = T::c(theta);
    Ok(x_other
        .iter()
        .zip(y_other)
        .map(|(&x, &y)| x.max(y) * t + T::one())
        .collect())
}

/// Dual confinement loss with gradients for all four inputs.
#[derive(Clone, Debug)]
pub struct DualConfinement<T> {
    pub value: T,
    pub sal: T,
    pub ctr: T,
    pub d_x_sal: Vec<T>,
    pub d_y_sal: Vec<T>,
    pub d_x_ctr: Vec<T>,
    pub d_y_ctr: Vec<T>,
}

/// Saliency cross-entropy weighted by the contour pair plus contour
/// cross-entropy weighted by the saliency pair.
pub fn dual_confinement_loss<T: Float>(
    x_sal: &[T],
    y_sal: &[T],
    x_ctr: &[T],
    y_ctr: &[T],
    cfg: &LossConfig,
) -> Result<DualConfinement<T>> {
    same_len(x_sal, y_sal, "dual_confinement_loss")?;
    same_len(x_sal, x_ctr, "dual_confinement_loss")?;
    same_len(x_sal, y_ctr, "dual_confinement_loss")?;
    let n = x_sal.len();
    let inv_n = T::one() / T::c(n as f64);
    let theta = T::c(cfg.theta);
    let mut out = DualConfinement {
        value: T::zero(),
        sal: T::zero(),
        ctr: T::zero(),
        d_x_sal: vec![T::zero(); n],
        d_y_sal: vec![T::zero(); n],
        d_x_ctr: vec![T::zero(); n],
        d_y_ctr: vec![T::zero(); n],
    };
    for i in 0..n {
        let (ls, dls_x, dls_y) = bce_terms(x_sal[i], y_sal[i]);
        let (lc, dlc_x, dlc_y) = bce_terms(x_ctr[i], y_ctr[i]);
        let w_sal = x_ctr[i].max(y_ctr[i]) * theta + T::one();
        let w_ctr = x_sal[i].max(y_sal[i]) * theta + T::one();
        out.sal += w_sal * ls;
        out.ctr += w_ctr * lc;

        out.d_x_sal[i] += w_sal * dls_x * inv_n;
        out.d_y_sal[i] += w_sal * dls_y * inv_n;
        out.d_x_ctr[i] += w_ctr * dlc_x * inv_n;
        out.d_y_ctr[i] += w_ctr * dlc_y * inv_n;

        // the weight maps route through whichever argument of the max wins
        let from_sal = theta * ls * inv_n;
        if x_ctr[i] > y_ctr[i] {
            out.d_x_ctr[i] += from_sal;
        } else {
            out.d_y_ctr[i] += from_sal;
        }
        let from_ctr = theta * lc * inv_n;
        if x_sal[i] > y_sal[i] {
            out.d_x_sal[i] += from_ctr;
        } else {
            out.d_y_sal[i] += from_ctr;
        }
    }
    out.sal = out.sal * inv_n;
    out.ctr = out.ctr * inv_n;
    out.value = out.sal + out.ctr;
    Ok(out)
}

/// Zero-padded `k x k` mean filter (divisor always `k * k`), via a summed-area table.
pub fn box_mean<T: Float>(y: &[T], h: usize, w: usize, k: usize) -> Vec<T> {
    let r = (k / 2) as isize;
    let mut sat = vec![T::zero(); (h + 1) * (w + 1)];
    for yy in 0..h {
        let mut row = T::zero();
        for xx in 0..w {
            row += y[yy * w + xx];
            sat[(yy + 1) * (w + 1) + xx + 1] = sat[yy * (w + 1) + xx + 1] + row;
        }
    }
    let norm = T::c((k * k) as f64);
    let mut out = vec![T::zero(); h * w];
    for yy in 0..h as isize {
        let y0 = (yy - r).max(0) as usize;
        let y1 = ((yy + r + 1).min(h as isize)) as usize;
        for xx in 0..w as isize {
            let x0 = (xx - r).max(0) as usize;
            let x1 = ((xx + r + 1).min(w as isize)) as usize;
            let s = sat[y1 * (w + 1) + x1] - sat[y0 * (w + 1) + x1] - sat[y1 * (w + 1) + x0]
                + sat[y0 * (w + 1) + x0];
            out[yy as usize * w + xx as usize] = s / norm;
        }
    }
    out
}

/// Boundary-emphasising pixel weights `1 + 5 * |mean_31x31(y) - y|`.
pub fn wiou_weights<T: Float>(y: &[T], h: usize, w: usize) -> Vec<T> {
    let pooled = box_mean(y, h, w, WIOU_WINDOW);
    let gain = T::c(WIOU_GAIN);
    pooled
        .iter()
        .zip(y)
        .map(|(&p, &t)| T::one() + gain * (p - t).abs())
        .collect()
}

/// `1 - (sum(w x y) + 1) / (sum(w (x + y - x y)) + 1)` on an `h x w` map.
pub fn weighted_iou_loss<T: Float>(x: &[T], y: &[T], h: usize, w: usize) -> Result<LossGrad<T>> {
    same_len(x, y, "weighted_iou_loss")?;
    if x.len() != h * w {
        return Err(Error::Shape(format!(
            "weighted_iou_loss: {} pixels for a {h}x{w} map",
            x.len()
        )));
    }
    let omega = wiou_weights(y, h, w);
    let mut inter = T::one();
    let mut union = T::one();
    for i in 0..x.len() {
        inter += omega[i] * x[i] * y[i];
        union += omega[i] * (x[i] + y[i] - x[i] * y[i]);
    }
    let u2 = union * union;
    let grad = (0..x.len())
        .map(|i| -(omega[i] * y[i] * union - inter * omega[i] * (T::one() - y[i])) / u2)
        .collect();
    Ok(LossGrad {
        value: T::one() - inter / union,
        grad,
    })
}

/// Focal-style weight `alpha * |y - x|^gamma`, used only for inspection.
pub fn focal_weight<T: Float>(x: &[T], y: &[T], alpha: f64, gamma: f64) -> Result<Vec<T>> {
    same_len(x, y, "focal_weight")?;
    let (a, g) = (T::c(alpha), T::c(gamma));
    Ok(x.iter().zip(y).map(|(&xi, &yi)| a * (yi - xi).abs().powf(g)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(lo..hi)).collect()
    }

    fn binary_map(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect()
    }

    fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
        let h = 1e-5;
        (0..x.len())
            .map(|i| {
                let mut p = x.to_vec();
                p[i] += h;
                let mut m = x.to_vec();
                m[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn assert_close(analytic: &[f64], numeric: &[f64]) {
        for (a, n) in analytic.iter().zip(numeric) {
            let rel = (a - n).abs() / n.abs().max(a.abs()).max(1e-8);
            assert!(rel < 1e-4, "analytic {a} vs numeric {n}");
        }
    }

    #[test]
    fn confidence_weight_values() {
        let w = confidence_weight(&[0.5f64, 0.0, 1.0, 0.25], 2.0).unwrap();
        assert_eq!(w[0], 0.5);
        assert_eq!(w[1], 0.0);
        assert_eq!(w[2], 0.0);
        assert!((w[3] - 0.375).abs() < 1e-15);
        assert!(confidence_weight(&[1.2], 2.0).is_err());
        assert!(confidence_weight(&[f64::NAN], 2.0).is_err());
    }

    #[test]
    fn confidence_loss_at_half_is_closed_form() {
        let x = vec![0.5; 16];
        let y: Vec<f64> = (0..16).map(|i| (i % 3 == 0) as u8 as f64).collect();
        let l = confidence_loss(&x, &y, &LossConfig::default()).unwrap();
        let expected = 0.5 * std::f64::consts::LN_2 + 0.3 * 0.5;
        assert!((l.value - expected).abs() < 1e-12);
        assert!((l.value - 0.4966).abs() < 1e-4);
    }

    #[test]
    fn confident_correct_predictions_cost_nothing() {
        let y = [0.0, 1.0, 1.0, 0.0];
        let x = [1e-7, 1.0 - 1e-7, 1.0, 0.0];
        let cfg = LossConfig::default();
        assert!(confidence_loss(&x, &y, &cfg).unwrap().value < 1e-5);
        let dc = dual_confinement_loss(&x, &y, &x, &y, &cfg).unwrap();
        assert!(dc.value < 1e-5);
        assert!(bce_loss(&x, &y).unwrap().value < 1e-6);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let cfg = LossConfig::default();
        assert!(confidence_loss(&[0.5, 0.5], &[1.0], &cfg).is_err());
        assert!(dual_confinement_loss(&[0.5], &[1.0], &[0.5, 0.1], &[0.0], &cfg).is_err());
        assert!(weighted_iou_loss(&[0.5; 4], &[1.0; 4], 3, 3).is_err());
    }

    #[test]
    fn dc_weight_map_values() {
        assert_eq!(dc_weight_map(&[0.0], &[0.0], 4.0).unwrap(), vec![1.0]);
        assert_eq!(dc_weight_map(&[1.0, 0.2], &[0.0, 1.0], 4.0).unwrap(), vec![5.0, 5.0]);
        assert_eq!(dc_weight_map(&[0.5], &[0.0], 4.0).unwrap(), vec![3.0]);
    }

    #[test]
    fn dc_loss_with_empty_contours_is_plain_bce() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xs = random_map(&mut rng, 64, 0.01, 0.99);
        let ys = binary_map(&mut rng, 64);
        let zeros = vec![0.0; 64];
        let dc = dual_confinement_loss(&xs, &ys, &zeros, &zeros, &LossConfig::default()).unwrap();
        let plain = bce_loss(&xs, &ys).unwrap();
        assert!((dc.sal - plain.value).abs() < 1e-12);
    }

    #[test]
    fn wiou_values() {
        let y: Vec<f64> = (0..16).map(|i| ((i / 4 + i % 4) % 2) as f64).collect();
        assert!(weighted_iou_loss(&y, &y, 4, 4).unwrap().value.abs() < 1e-15);
        // x = 0, y = 1 on 4x4: every 31x31 window covers all 16 pixels plus padding
        let ones = vec![1.0; 16];
        let zeros = vec![0.0; 16];
        let omega_sum: f64 = 16.0 * (1.0 + 5.0 * (1.0 - 16.0 / 961.0));
        let l = weighted_iou_loss(&zeros, &ones, 4, 4).unwrap();
        assert!((l.value - (1.0 - 1.0 / (omega_sum + 1.0))).abs() < 1e-12);
    }

    #[test]
    fn box_mean_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (h, w, k) = (9, 7, 5);
        let y = random_map(&mut rng, h * w, 0.0, 1.0);
        let fast = box_mean(&y, h, w, k);
        for r in 0..h as i64 {
            for c in 0..w as i64 {
                let mut s = 0.0;
                for dr in -2..=2 {
                    for dc in -2..=2 {
                        let (rr, cc) = (r + dr, c + dc);
                        if rr >= 0 && rr < h as i64 && cc >= 0 && cc < w as i64 {
                            s += y[(rr * w as i64 + cc) as usize];
                        }
                    }
                }
                assert!((fast[(r * w as i64 + c) as usize] - s / 25.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn focal_weight_values() {
        assert_eq!(focal_weight(&[0.3], &[0.3], 2.0, 2.0).unwrap(), vec![0.0]);
        assert_eq!(focal_weight(&[0.0, 1.0], &[1.0, 0.0], 2.0, 2.0).unwrap(), vec![2.0, 2.0]);
        assert_eq!(focal_weight(&[0.5], &[1.0], 2.0, 2.0).unwrap(), vec![0.5]);
    }

    #[test]
    fn gradients_match_central_differences() {
        let cfg = LossConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let x = random_map(&mut rng, 64, 0.02, 0.98);
            let y = binary_map(&mut rng, 64);
            let g = confidence_loss(&x, &y, &cfg).unwrap();
            assert_close(&g.grad, &central_diff(|p| confidence_loss(p, &y, &cfg).unwrap().value, &x));
            let g = bce_loss(&x, &y).unwrap();
            assert_close(&g.grad, &central_diff(|p| bce_loss(p, &y).unwrap().value, &x));
            let g = weighted_iou_loss(&x, &y, 8, 8).unwrap();
            assert_close(&g.grad, &central_diff(|p| weighted_iou_loss(p, &y, 8, 8).unwrap().value, &x));
        }
    }

    #[test]
    fn confidence_penalty_decreases_towards_correct_confidence() {
        let cfg = LossConfig::default();
        let mut prev = f64::INFINITY;
        for i in 0..50 {
            let x = 0.5 + 0.49999 * i as f64 / 49.0;
            let v = confidence_loss(&[x], &[1.0], &cfg).unwrap().value;
            assert!(v < prev, "x = {x}");
            prev = v;
        }
    }
}
