//! Desk-scale MNIST training loop.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use capsroute_core::autodiff::AutodiffError;
use capsroute_core::capsnet::{
    count_correct, CapsError, DeskModel, DeskModelConfig, LossMode, RoutingAlgorithm,
};
use capsroute_core::data::rng;
use capsroute_core::optim::{Adam, AdamConfig};
use capsroute_core::routing::RoutingError;
use rand::seq::SliceRandom;
use serde::Serialize;

use crate::checkpoint::{self, CheckpointError};
use crate::idx::{LabeledImages, CLASSES, PIXELS};

pub const METRICS_HEADER: &str = "epoch,train_loss,train_acc,test_loss,test_acc,epoch_seconds";

#[derive(Debug, Clone, Serialize)]
pub struct TrainConfig {
    pub train_size: usize,
    pub test_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch: usize,
    pub primary_caps: usize,
    pub k: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_loss: f64,
    pub test_acc: f64,
    pub epoch_seconds: f64,
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{:.3}",
            self.epoch,
            self.train_loss,
            self.train_acc,
            self.test_loss,
            self.test_acc,
            self.epoch_seconds
        )
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("training diverged at epoch {epoch}, batch {batch}: {reason}")]
    Diverged {
        epoch: usize,
        batch: usize,
        reason: String,
    },
    #[error("batch size must be at least 2 (batch normalization), got {0}")]
    BatchSize(usize),
    #[error("empty {0} split")]
    Empty(&'static str),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] CapsError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub struct TrainOutcome {
    pub model: DeskModel,
    pub history: Vec<EpochMetrics>,
}

fn evaluate(
    model: &DeskModel,
    data: &LabeledImages,
    chunk: usize,
) -> Result<(f64, f64), TrainError> {
    let mut loss = 0.0;
    let mut correct = 0;
    for start in (0..data.len()).step_by(chunk) {
        let end = (start + chunk).min(data.len());
        let images = &data.images[start * PIXELS..end * PIXELS];
        let labels = &data.labels[start..end];
        let (l, acts) = model.evaluate(images, labels)?;
        loss += l * labels.len() as f64;
        correct += count_correct(&acts, labels, CLASSES);
    }
    let n = data.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Trains on `train`, evaluating on `test` after every epoch. Batches whose
/// final remainder is a single example are dropped (training-mode batch
/// normalization needs two rows). `on_epoch` sees each epoch's metrics as
/// soon as they are known.
pub fn train(
    cfg: &TrainConfig,
    algorithm: RoutingAlgorithm,
    loss: LossMode,
    train: &LabeledImages,
    test: &LabeledImages,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome, TrainError> {
    if cfg.batch < 2 {
        return Err(TrainError::BatchSize(cfg.batch));
    }
    if train.is_empty() {
        return Err(TrainError::Empty("train"));
    }
    if test.is_empty() {
        return Err(TrainError::Empty("test"));
    }
    let mut r = rng(cfg.seed);
    let model_cfg = DeskModelConfig {
        input_dim: PIXELS,
        primary_caps: cfg.primary_caps,
        k: cfg.k,
        classes: CLASSES,
        algorithm,
        loss,
    };
    let mut model = DeskModel::init(model_cfg, &mut r)?;
    let mut adam = Adam::new(
        AdamConfig {
            learning_rate: cfg.learning_rate,
            ..AdamConfig::default()
        },
        &model.parameter_sizes(),
    );
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut images = Vec::with_capacity(cfg.batch * PIXELS);
    let mut labels = Vec::with_capacity(cfg.batch);
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut r);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        let mut correct = 0usize;
        for (b, chunk) in order.chunks(cfg.batch).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            images.clear();
            labels.clear();
            for &idx in chunk {
                images.extend_from_slice(train.image(idx));
                labels.push(train.labels[idx]);
            }
            let diverged = |reason: String| TrainError::Diverged {
                epoch,
                batch: b,
                reason,
            };
            let step = match model.train_step(&images, &labels, &mut adam) {
                Ok(step) => step,
                Err(e) if is_non_finite(&e) => return Err(diverged(e.to_string())),
                Err(e) => return Err(e.into()),
            };
            if !step.loss.is_finite() {
                return Err(diverged(format!("loss is {}", step.loss)));
            }
            loss_sum += step.loss * chunk.len() as f64;
            seen += chunk.len();
            correct += step.correct;
        }
        let (test_loss, test_acc) = evaluate(&model, test, 500)?;
        let m = EpochMetrics {
            epoch,
            train_loss: loss_sum / seen as f64,
            train_acc: correct as f64 / seen as f64,
            test_loss,
            test_acc,
            epoch_seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&m);
        history.push(m);
    }
    Ok(TrainOutcome { model, history })
}

fn is_non_finite(e: &AutodiffError) -> bool {
    matches!(
        e,
        AutodiffError::Caps(
            CapsError::NonFinite
                | CapsError::NonFiniteStats
                | CapsError::Routing(RoutingError::NonFinite { .. })
        ) | AutodiffError::Routing(RoutingError::NonFinite { .. })
    )
}

/// Appends one metrics row, writing the header first if the file is new.
pub fn append_metrics(path: &Path, m: &EpochMetrics) -> Result<(), TrainError> {
    let io = |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    };
    let fresh = !path.exists();
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io)?;
    if fresh {
        writeln!(f, "{METRICS_HEADER}").map_err(io)?;
    }
    writeln!(f, "{}", m.csv_row()).map_err(io)
}

pub fn save_checkpoint(model: &DeskModel, path: &Path) -> Result<(), TrainError> {
    Ok(checkpoint::save(model, path)?)
}
