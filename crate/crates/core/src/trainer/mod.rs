//! Dual-task relabeling, deterministic minibatch training, and checkpoints.

mod checkpoint;

use std::fmt;

use rayon::prelude::*;
use thiserror::Error;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError, MAGIC, VERSION};

use crate::imageops::{compute_channel_means, to_tensor, ImageOpsError, DEFAULT_INPUT_SIZE};
use crate::neuralnet::{
    bce_grad, bce_with_logits, model_backward, model_forward, Architecture, NetError, Parameters,
    Sgd, Tensor,
};
use crate::raster::{DatasetManifest, ImageSource};
use crate::rng::SplitMix64;

/// The two binary tasks: melanoma vs rest, and seborrheic keratosis vs rest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Task {
    Melanoma,
    Keratosis,
}

impl Task {
    pub const ALL: [Task; 2] = [Task::Melanoma, Task::Keratosis];

    /// 1 or 2, as used in checkpoints and on the command line.
    pub fn tag(self) -> u8 {
        match self {
            Task::Melanoma => 1,
            Task::Keratosis => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            1 => Some(Task::Melanoma),
            2 => Some(Task::Keratosis),
            _ => None,
        }
    }

    /// Column name in manifests and submissions.
    pub fn column(self) -> &'static str {
        match self {
            Task::Melanoma => "melanoma",
            Task::Keratosis => "seborrheic_keratosis",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "task{}", self.tag())
    }
}

/// Binary labels for one task, in manifest order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskLabeling {
    pub task: Task,
    labels: Vec<(String, bool)>,
}

impl TaskLabeling {
    pub fn from_manifest(manifest: &DatasetManifest, task: Task) -> Self {
        let labels = manifest
            .entries()
            .iter()
            .map(|e| {
                let positive = match task {
                    Task::Melanoma => e.melanoma,
                    Task::Keratosis => e.seborrheic_keratosis,
                };
                (e.image_id.clone(), positive)
            })
            .collect();
        Self { task, labels }
    }

    pub fn labels(&self) -> &[(String, bool)] {
        &self.labels
    }

    pub fn get(&self, id: &str) -> Option<bool> {
        self.labels.iter().find(|(i, _)| i == id).map(|&(_, l)| l)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|(_, l)| *l).count()
    }
}

/// Both task labelings over the same images.
pub fn relabel_dual(manifest: &DatasetManifest) -> (TaskLabeling, TaskLabeling) {
    (
        TaskLabeling::from_manifest(manifest, Task::Melanoma),
        TaskLabeling::from_manifest(manifest, Task::Keratosis),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub input_size: usize,
    pub architecture: Architecture,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
    pub mean_subtraction: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            input_size: DEFAULT_INPUT_SIZE,
            architecture: Architecture::default(),
            epochs: 30,
            batch_size: 8,
            lr: 0.01,
            momentum: 0.9,
            seed: 0,
            mean_subtraction: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad(format!("lr must be finite and non-negative, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        self.architecture.shape_chain(self.input_size)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub task: Task,
    pub architecture: Architecture,
    pub input_size: usize,
    pub channel_means: [f32; 3],
    pub params: Parameters<f32>,
    pub seed: u64,
    pub epochs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    /// 1-based.
    pub epoch: usize,
    /// Mean BCE over every sample of the epoch.
    pub mean_loss: f64,
    /// Fraction of samples whose pre-update logit sign matched the label.
    pub train_accuracy: f64,
}

impl EpochStats {
    pub const CSV_HEADER: &'static str = "epoch,mean_loss,train_accuracy";

    pub fn csv_line(&self) -> String {
        format!("{},{:.6},{:.6}", self.epoch, self.mean_loss, self.train_accuracy)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: ModelCheckpoint,
    pub history: Vec<EpochStats>,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training set is empty")]
    EmptyDataset,
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("epoch {epoch}, batch {batch}: {source}")]
    Step {
        epoch: usize,
        batch: usize,
        source: NetError,
    },
    #[error("image {id}: {source}")]
    Image { id: String, source: ImageOpsError },
    #[error(transparent)]
    Net(#[from] NetError),
}

/// Trains one task model. `on_epoch` sees each epoch's stats as it finishes.
pub fn train(
    config: &TrainConfig,
    labeling: &TaskLabeling,
    source: &dyn ImageSource,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if labeling.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let size = config.input_size;
    let images = labeling
        .labels()
        .par_iter()
        .map(|(id, _)| {
            source.load(id).map_err(|e| TrainError::Image {
                id: id.clone(),
                source: e.into(),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let channel_means = if config.mean_subtraction {
        compute_channel_means(&images).map_err(|e| TrainError::Image {
            id: String::new(),
            source: e,
        })?
    } else {
        [0.0; 3]
    };
    let inputs = images
        .par_iter()
        .zip(labeling.labels())
        .map(|(img, (id, _))| {
            to_tensor(img, size, channel_means)
                .map(|t| t.data)
                .map_err(|e| TrainError::Image {
                    id: id.clone(),
                    source: e,
                })
        })
        .collect::<Result<Vec<_>, _>>()?;
    drop(images);
    let labels: Vec<bool> = labeling.labels().iter().map(|&(_, l)| l).collect();

    let arch = &config.architecture;
    let mut params = Parameters::<f32>::init(arch, size, config.seed)?;
    let mut opt = Sgd::new(&params, config.lr, config.momentum)?;
    let mut history = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..inputs.len()).collect();

    for epoch in 0..config.epochs {
        order.sort_unstable();
        SplitMix64::new(config.seed ^ epoch as u64).shuffle(&mut order);
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch = Tensor::stack(&chunk.iter().map(|&i| &inputs[i]).collect::<Vec<_>>())?;
            let (logits, cache) = model_forward(arch, &params, &batch)?;
            let scale = 1.0 / chunk.len() as f32;
            let mut grad = Vec::with_capacity(chunk.len());
            let mut batch_loss = 0.0f64;
            for (&z, &i) in logits.data().iter().zip(chunk) {
                let y = labels[i];
                batch_loss += bce_with_logits(z, y) as f64;
                grad.push(bce_grad(z, y) * scale);
                if (z >= 0.0) == y {
                    correct += 1;
                }
            }
            if !batch_loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch: epoch + 1, batch: b });
            }
            loss_sum += batch_loss;
            let grad = Tensor::new(logits.shape().to_vec(), grad)?;
            let mut step = || -> Result<(), NetError> {
                let grads = model_backward(arch, &params, &cache, &grad)?;
                opt.step(&mut params, &grads)
            };
            step().map_err(|source| TrainError::Step {
                epoch: epoch + 1,
                batch: b,
                source,
            })?;
        }
        let stats = EpochStats {
            epoch: epoch + 1,
            mean_loss: loss_sum / inputs.len() as f64,
            train_accuracy: correct as f64 / inputs.len() as f64,
        };
        on_epoch(&stats);
        history.push(stats);
    }

    Ok(TrainOutcome {
        checkpoint: ModelCheckpoint {
            task: labeling.task,
            architecture: arch.clone(),
            input_size: size,
            channel_means,
            params,
            seed: config.seed,
            epochs: config.epochs,
        },
        history,
    })
}
