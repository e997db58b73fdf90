//! Dataset ingestion: image/mask pairs, contour ground truth, augmentation and batching.

mod augment;
mod contour;

use std::path::{Path, PathBuf};

pub use augment::{augment, augment_with, flip_horizontal, rotate90, AugmentOps};
pub use contour::{dilate, erode, gen_contour, DEFAULT_CONTOUR_KERNEL};

use crate::error::{Error, Result};
use crate::io;
use crate::ops::resize_bilinear;
use crate::tensor::Tensor;

pub const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg"];

/// One training example. All three arrays share height and width.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `[1, 3, h, w]` in `[0, 1]`.
    pub image: Tensor<f32>,
    /// `[1, 1, h, w]`, binary.
    pub saliency: Tensor<f32>,
    /// `[1, 1, h, w]`, binary.
    pub contour: Tensor<f32>,
}

impl Sample {
    /// Builds a sample from an image and a binary mask, deriving the contour.
    pub fn new(id: impl Into<String>, image: Tensor<f32>, saliency: Tensor<f32>, kernel: usize) -> Result<Self> {
        let contour = gen_contour(&saliency, kernel)?;
        let s = Self {
            id: id.into(),
            image,
            saliency,
            contour,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn height(&self) -> usize {
        self.image.height()
    }

    pub fn width(&self) -> usize {
        self.image.width()
    }

    pub fn validate(&self) -> Result<()> {
        let [_, _, h, w] = self.image.shape();
        self.image.expect_shape([1, 3, h, w])?;
        self.saliency.expect_shape([1, 1, h, w])?;
        self.contour.expect_shape([1, 1, h, w])?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub image_dir: PathBuf,
    pub mask_dir: PathBuf,
    /// `(height, width)` after resizing.
    pub resize_to: (usize, usize),
    pub augment: bool,
    pub contour_kernel: usize,
}

impl DatasetSpec {
    /// `<root>/images` and `<root>/masks` at 256x256.
    pub fn from_root(root: &Path) -> Self {
        Self {
            image_dir: root.join("images"),
            mask_dir: root.join("masks"),
            resize_to: (256, 256),
            augment: true,
            contour_kernel: DEFAULT_CONTOUR_KERNEL,
        }
    }
}

/// Thresholds a plane at 0.5.
pub fn binarize(t: &Tensor<f32>) -> Tensor<f32> {
    t.map(|v| if v >= 0.5 { 1.0 } else { 0.0 })
}

/// Loads every image with a same-stem PNG mask, ordered by id.
///
/// Images and masks are resized bilinearly to `resize_to`; masks are then
/// binarized at 0.5 and the contour is derived at the resized resolution.
pub fn load_dataset(spec: &DatasetSpec) -> Result<Vec<Sample>> {
    let (h, w) = spec.resize_to;
    if h == 0 || w == 0 {
        return Err(Error::Invalid(format!("resize target {h}x{w} must be positive")));
    }
    let mut images = io::list_files(&spec.image_dir, IMAGE_EXTENSIONS)?;
    images.sort_by_key(|p| io::stem(p));
    let mut samples = Vec::with_capacity(images.len());
    for path in images {
        let id = io::stem(&path);
        let mask_path = spec.mask_dir.join(format!("{id}.png"));
        if !mask_path.is_file() {
            return Err(Error::MissingMask(id));
        }
        let image = resize_bilinear(&io::read_rgb(&path)?, h, w)?;
        let mask = binarize(&resize_bilinear(&io::read_gray(&mask_path)?, h, w)?);
        samples.push(Sample::new(id, image, mask, spec.contour_kernel)?);
    }
    Ok(samples)
}

/// A stacked mini-batch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub ids: Vec<String>,
    pub images: Tensor<f32>,
    pub saliency: Tensor<f32>,
    pub contour: Tensor<f32>,
}

impl Batch {
    pub fn from_samples(samples: &[Sample]) -> Result<Self> {
        Ok(Self {
            ids: samples.iter().map(|s| s.id.clone()).collect(),
            images: Tensor::stack(&samples.iter().map(|s| &s.image).collect::<Vec<_>>())?,
            saliency: Tensor::stack(&samples.iter().map(|s| &s.saliency).collect::<Vec<_>>())?,
            contour: Tensor::stack(&samples.iter().map(|s| &s.contour).collect::<Vec<_>>())?,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Writes `<root>/contours/<stem>.png` for every mask in `<root>/masks`.
pub fn write_contours(root: &Path, kernel: usize) -> Result<Vec<PathBuf>> {
    let out_dir = root.join("contours");
    let mut written = Vec::new();
    for mask_path in io::list_files(&root.join("masks"), &["png"])? {
        let mask = binarize(&io::read_gray(&mask_path)?);
        let contour = gen_contour(&mask, kernel)?;
        let out = out_dir.join(format!("{}.png", io::stem(&mask_path)));
        io::write_gray_png(&out, &contour)?;
        written.push(out);
    }
    Ok(written)
}
