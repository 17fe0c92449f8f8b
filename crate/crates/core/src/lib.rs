//! Dermoscopic lesion classification pipeline: PPM/CSV inputs, cropping and
//! resizing, affine augmentation, a from-scratch CNN trained with SGD, and
//! calibrated two-task scoring.

pub mod config;
pub mod imageops;
pub mod neuralnet;
pub mod predictor;
pub mod raster;
pub mod rng;
pub mod trainer;

pub use imageops::{AffineTransform, AugmentPolicy, InputTensor, Preset};
pub use neuralnet::{Architecture, Parameters, Tensor};
pub use predictor::{CalibrationParams, PredictionTable};
pub use raster::{CropSpec, DatasetManifest, Image, ImageSource, ManifestEntry};
pub use trainer::{ModelCheckpoint, Task, TaskLabeling, TrainConfig};
