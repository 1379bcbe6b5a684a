//! Per-defect binary U-net classifier: construction, training, inference, checkpoints.

mod checkpoint;
mod model;
mod train;

use ndarray::{Array4, Axis};
use thiserror::Error;

use crate::nn::Scalar;
use crate::raster::Raster;

pub use checkpoint::{load_encoder_weights, CheckpointBundle, CheckpointMeta};
pub use model::{ForwardTrace, ModelConfig, UNetClassifier};
pub use train::{bce_with_logits, f_measure, train, EpochRecord, LabeledCrop, TrainConfig};

#[derive(Debug, Error)]
pub enum ClassifierError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("invalid training config: {0}")]
    TrainConfig(String),
    #[error("bad input shape: {0}")]
    Shape(String),
    #[error("{0} set is empty")]
    EmptySet(&'static str),
    #[error("training diverged at epoch {epoch}, batch {batch}: loss {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },
    #[error("class index {index} out of range for a {classes}-logit model")]
    UnknownClass { index: usize, classes: usize },
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: String, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Probability of the defect class for one patch of exactly `input_size` pixels.
pub fn predict<T: Scalar>(model: &UNetClassifier<T>, patch: &Raster) -> Result<f64, ClassifierError> {
    Ok(predict_batch(model, std::slice::from_ref(patch))?[0])
}

/// Batched [`predict`]; output order follows input order.
pub fn predict_batch<T: Scalar>(model: &UNetClassifier<T>, patches: &[Raster]) -> Result<Vec<f64>, ClassifierError> {
    let size = model.config().input_size;
    if patches.is_empty() {
        return Ok(Vec::new());
    }
    for p in patches {
        if p.height() != size || p.width() != size {
            return Err(ClassifierError::Shape(format!(
                "patch is {}x{}, model expects {size}x{size}",
                p.height(),
                p.width()
            )));
        }
    }
    let views: Vec<_> = patches.iter().map(|p| p.data().view()).collect();
    let batch: Array4<T> = ndarray::stack(Axis(0), &views)
        .expect("equal patch shapes")
        .mapv(|v| T::from_f64(v as f64));
    let logits = model.logits(&batch);
    Ok(logits.column(0).iter().map(|&z| sigmoid(z.to_f64())).collect())
}
