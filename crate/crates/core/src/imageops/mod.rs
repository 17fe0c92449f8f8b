//! Image preprocessing: cropping, bilinear size normalization, affine
//! augmentation, and conversion to network input tensors.

mod affine;
mod augment;
mod resize;

use thiserror::Error;

pub use affine::{apply_affine, compose, make_preset, parse_presets, AffineTransform, Amount, Preset, Transform};
pub use augment::{augment_dataset, augmented_id, AugmentPolicy, AugmentedDataset};
pub use resize::{resize_bilinear, sample_bilinear};

use crate::neuralnet::Tensor;
use crate::raster::{CropRect, Image, SourceError};

/// Edge length of the square network input when nothing else is configured.
pub const DEFAULT_INPUT_SIZE: usize = 256;

#[derive(Debug, Error)]
pub enum ImageOpsError {
    #[error("crop {rect} does not fit inside {image} ({width}x{height})")]
    CropBounds {
        image: String,
        rect: CropRect,
        width: usize,
        height: usize,
    },
    #[error("output dimensions must be positive, got {0}x{1}")]
    ZeroSize(usize, usize),
    #[error("affine transform has non-finite entries")]
    NonFinite,
    #[error("invalid preset: {0}")]
    Preset(String),
    #[error("expected a {expected}x{expected} image, got {width}x{height}")]
    WrongSize {
        expected: usize,
        width: usize,
        height: usize,
    },
    #[error("no training images to average")]
    EmptySet,
    #[error(transparent)]
    Source(#[from] SourceError),
}

/// Output pixel (i, j) is input pixel (x + i, y + j).
pub fn crop(img: &Image, rect: CropRect) -> Result<Image, ImageOpsError> {
    crop_named(img, rect, "image")
}

/// [`crop`] with an image name for the bounds error.
pub fn crop_named(img: &Image, rect: CropRect, name: &str) -> Result<Image, ImageOpsError> {
    let fits = rect.width > 0
        && rect.height > 0
        && rect.x.checked_add(rect.width).is_some_and(|r| r <= img.width())
        && rect.y.checked_add(rect.height).is_some_and(|b| b <= img.height());
    if !fits {
        return Err(ImageOpsError::CropBounds {
            image: name.to_string(),
            rect,
            width: img.width(),
            height: img.height(),
        });
    }
    let pixels = (rect.y..rect.y + rect.height)
        .flat_map(|y| {
            let row = y * img.width();
            img.pixels()[row + rect.x..row + rect.x + rect.width].iter().copied()
        })
        .collect();
    Ok(Image::new(rect.width, rect.height, pixels).expect("crop keeps invariants"))
}

/// Largest centered square, offsets rounded down.
pub fn center_square_crop(img: &Image) -> Image {
    let side = img.width().min(img.height());
    let rect = CropRect::new((img.width() - side) / 2, (img.height() - side) / 2, side, side);
    crop(img, rect).expect("centered square always fits")
}

/// Crop (explicit rectangle, else centered square) then resize to `size`×`size`.
pub fn preprocess_image(
    img: &Image,
    rect: Option<CropRect>,
    size: usize,
    name: &str,
) -> Result<Image, ImageOpsError> {
    let cropped = match rect {
        Some(r) => crop_named(img, r, name)?,
        None => center_square_crop(img),
    };
    resize_bilinear(&cropped, size, size)
}

/// A `[3, S, S]` network input with the channel means that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct InputTensor {
    pub data: Tensor<f32>,
    pub channel_means: [f32; 3],
}

impl InputTensor {
    pub fn size(&self) -> usize {
        self.data.shape()[1]
    }
}

/// `value[c][y][x] = pixel / 255 − channel_means[c]`.
pub fn to_tensor(img: &Image, size: usize, channel_means: [f32; 3]) -> Result<InputTensor, ImageOpsError> {
    if img.width() != size || img.height() != size {
        return Err(ImageOpsError::WrongSize {
            expected: size,
            width: img.width(),
            height: img.height(),
        });
    }
    let plane = size * size;
    let mut data = vec![0.0f32; 3 * plane];
    for (i, px) in img.pixels().iter().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = px[c] as f32 / 255.0 - channel_means[c];
        }
    }
    Ok(InputTensor {
        data: Tensor::new(vec![3, size, size], data).expect("extents match"),
        channel_means,
    })
}

/// Per-channel mean of `pixel / 255` over every pixel of every image.
pub fn compute_channel_means<'a>(
    images: impl IntoIterator<Item = &'a Image>,
) -> Result<[f32; 3], ImageOpsError> {
    let mut sums = [0u64; 3];
    let mut count = 0u64;
    for img in images {
        for px in img.pixels() {
            for c in 0..3 {
                sums[c] += px[c] as u64;
            }
        }
        count += img.pixels().len() as u64;
    }
    if count == 0 {
        return Err(ImageOpsError::EmptySet);
    }
    Ok(sums.map(|s| (s as f64 / (255.0 * count as f64)) as f32))
}
