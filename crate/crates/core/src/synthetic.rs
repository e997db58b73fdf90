//! Procedural shape images with exact masks, for smoke tests and overfitting runs.

use rand::Rng;

use crate::data::Sample;
use crate::error::Result;
use crate::params::rng_from_seed;
use crate::tensor::Tensor;

/// `count` samples of size `h x w`: one ellipse or rectangle in a distinct
/// colour over a noisy two-tone background. Ids are `syn0000`, `syn0001`, ...
pub fn shapes(count: usize, h: usize, w: usize, seed: u64, contour_kernel: usize) -> Result<Vec<Sample>> {
    (0..count)
        .map(|i| shape_sample(i, h, w, seed, contour_kernel))
        .collect()
}

fn shape_sample(index: usize, h: usize, w: usize, seed: u64, contour_kernel: usize) -> Result<Sample> {
    let mut rng = rng_from_seed(seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let (hf, wf) = (h as f32, w as f32);
    let cy = rng.gen_range(0.3..0.7) * hf;
    let cx = rng.gen_range(0.3..0.7) * wf;
    let ry = rng.gen_range(0.15..0.3) * hf;
    let rx = rng.gen_range(0.15..0.3) * wf;
    let ellipse = rng.gen_bool(0.5);
    let fg: [f32; 3] = [rng.gen(), rng.gen(), rng.gen()];
    let bg_a: [f32; 3] = fg.map(|c| (c + rng.gen_range(0.35..0.65)) % 1.0);
    let bg_b: [f32; 3] = bg_a.map(|c| (c + rng.gen_range(-0.1..0.1f32)).clamp(0.0, 1.0));
    let split = rng.gen_range(0.2..0.8) * wf;

    let mut mask = vec![0f32; h * w];
    let mut image = vec![0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = ((y as f32 + 0.5 - cy) / ry, (x as f32 + 0.5 - cx) / rx);
            let inside = if ellipse {
                dy * dy + dx * dx <= 1.0
            } else {
                dy.abs() <= 1.0 && dx.abs() <= 1.0
            };
            let colour = if inside {
                fg
            } else if (x as f32) < split {
                bg_a
            } else {
                bg_b
            };
            mask[y * w + x] = inside as u8 as f32;
            for c in 0..3 {
                let noise = rng.gen_range(-0.05..0.05f32);
                image[c * h * w + y * w + x] = (colour[c] + noise).clamp(0.0, 1.0);
            }
        }
    }
    Sample::new(
        format!("syn{index:04}"),
        Tensor::from_vec([1, 3, h, w], image)?,
        Tensor::from_vec([1, 1, h, w], mask)?,
        contour_kernel,
    )
}
