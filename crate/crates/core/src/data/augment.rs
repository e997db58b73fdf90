use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Sample;
use crate::tensor::{Float, Tensor};

/// The geometric transforms applied to one sample. Flip is applied before rotation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AugmentOps {
    pub flip: bool,
    pub rotate: bool,
}

impl AugmentOps {
    /// Draws each transform independently with probability 0.5.
    pub fn from_seed(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            flip: rng.gen_bool(0.5),
            rotate: rng.gen_bool(0.5),
        }
    }

    pub fn apply<T: Float>(&self, t: &Tensor<T>) -> Tensor<T> {
        let flipped = if self.flip { flip_horizontal(t) } else { t.clone() };
        if self.rotate {
            rotate90(&flipped)
        } else {
            flipped
        }
    }
}

/// Reverses the column order of every plane.
pub fn flip_horizontal<T: Float>(t: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = t.shape();
    let mut data = Vec::with_capacity(t.numel());
    for p in 0..n * c {
        let plane = &t.data()[p * h * w..(p + 1) * h * w];
        for row in plane.chunks(w) {
            data.extend(row.iter().rev());
        }
    }
    Tensor::from_vec([n, c, h, w], data).expect("same size")
}

/// Rotates every plane by 90 degrees counter-clockwise; `h x w` becomes `w x h`.
pub fn rotate90<T: Float>(t: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = t.shape();
    let mut data = Vec::with_capacity(t.numel());
    for p in 0..n * c {
        let plane = &t.data()[p * h * w..(p + 1) * h * w];
        for y in 0..w {
            for x in 0..h {
                data.push(plane[x * w + (w - 1 - y)]);
            }
        }
    }
    Tensor::from_vec([n, c, w, h], data).expect("same size")
}

pub fn augment_with(sample: &Sample, ops: AugmentOps) -> Sample {
    Sample {
        id: sample.id.clone(),
        image: ops.apply(&sample.image),
        saliency: ops.apply(&sample.saliency),
        contour: ops.apply(&sample.contour),
    }
}

/// Random flip and/or rotation, identical for image and both masks; deterministic in `seed`.
pub fn augment(sample: &Sample, seed: u64) -> Sample {
    augment_with(sample, AugmentOps::from_seed(seed))
}
