//! Contour ground truth by morphological gradient: `dilate(mask) - erode(mask)`
//! with a square structuring element. Pixels outside the image count as background.

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Structuring element side used for contour ground truth.
pub const DEFAULT_CONTOUR_KERNEL: usize = 5;

/// Sliding max (`dilate`) or min (`erode`) along rows then columns.
fn sweep(src: &[u8], h: usize, w: usize, radius: usize, dilate: bool) -> Vec<u8> {
    let pick = |a: u8, b: u8| if dilate { a.max(b) } else { a.min(b) };
    let r = radius as isize;
    let mut rows = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w as isize {
            let mut acc = if dilate { 0 } else { 1 };
            for dx in -r..=r {
                let xx = x + dx;
                let v = if xx < 0 || xx >= w as isize { 0 } else { src[y * w + xx as usize] };
                acc = pick(acc, v);
            }
            rows[y * w + x as usize] = acc;
        }
    }
    let mut out = vec![0u8; h * w];
    for y in 0..h as isize {
        for x in 0..w {
            let mut acc = if dilate { 0 } else { 1 };
            for dy in -r..=r {
                let yy = y + dy;
                let v = if yy < 0 || yy >= h as isize { 0 } else { rows[yy as usize * w + x] };
                acc = pick(acc, v);
            }
            out[y as usize * w + x] = acc;
        }
    }
    out
}

fn to_bits<T: Float>(mask: &Tensor<T>) -> Result<Vec<u8>> {
    mask.data()
        .iter()
        .map(|&v| {
            if v == T::zero() {
                Ok(0)
            } else if v == T::one() {
                Ok(1)
            } else {
                Err(Error::Invalid(format!(
                    "contour generation needs a binary mask, found {v:?} (binarize at 0.5 first)"
                )))
            }
        })
        .collect()
}

fn check_kernel(kernel: usize) -> Result<usize> {
    if kernel < 3 || kernel % 2 == 0 {
        return Err(Error::Invalid(format!(
            "morphology kernel must be odd and at least 3, got {kernel}"
        )));
    }
    Ok(kernel / 2)
}

fn from_bits<T: Float>(shape: [usize; 4], bits: Vec<u8>) -> Tensor<T> {
    Tensor::from_vec(shape, bits.into_iter().map(|b| T::c(b as f64)).collect())
        .expect("same number of pixels")
}

/// Binary dilation of a single-channel mask with a `kernel x kernel` square.
pub fn dilate<T: Float>(mask: &Tensor<T>, kernel: usize) -> Result<Tensor<T>> {
    let r = check_kernel(kernel)?;
    let [n, c, h, w] = mask.shape();
    if n * c != 1 {
        return Err(Error::Shape(format!("expected a single plane, got {:?}", mask.shape())));
    }
    Ok(from_bits(mask.shape(), sweep(&to_bits(mask)?, h, w, r, true)))
}

/// Binary erosion of a single-channel mask with a `kernel x kernel` square.
pub fn erode<T: Float>(mask: &Tensor<T>, kernel: usize) -> Result<Tensor<T>> {
    let r = check_kernel(kernel)?;
    let [n, c, h, w] = mask.shape();
    if n * c != 1 {
        return Err(Error::Shape(format!("expected a single plane, got {:?}", mask.shape())));
    }
    Ok(from_bits(mask.shape(), sweep(&to_bits(mask)?, h, w, r, false)))
}

/// Boundary band of a binary mask: `dilate(mask) - erode(mask)`.
pub fn gen_contour<T: Float>(mask: &Tensor<T>, kernel: usize) -> Result<Tensor<T>> {
    let r = check_kernel(kernel)?;
    let [n, c, h, w] = mask.shape();
    if n * c != 1 {
        return Err(Error::Shape(format!("expected a single plane, got {:?}", mask.shape())));
    }
    let bits = to_bits(mask)?;
    let grown = sweep(&bits, h, w, r, true);
    let shrunk = sweep(&bits, h, w, r, false);
    let band = grown.iter().zip(&shrunk).map(|(&d, &e)| d - e).collect();
    Ok(from_bits(mask.shape(), band))
}
