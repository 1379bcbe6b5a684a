use std::collections::HashMap;
use std::fs;
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use super::{ClassifierError, EpochRecord, ModelConfig, TrainConfig, UNetClassifier};
use crate::nn::{ParamKind, Scalar};

pub const WEIGHTS_FILE: &str = "weights.safetensors";
pub const MODEL_CONFIG_FILE: &str = "model_config.json";
pub const TRAIN_CONFIG_FILE: &str = "train_config.json";
pub const LOG_FILE: &str = "training_log.csv";
pub const META_FILE: &str = "meta.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub defect_class: Option<String>,
    pub best_epoch: usize,
    pub best_f_measure: f64,
}

/// A trained model plus everything needed to reproduce or audit it.
///
/// On disk this is a directory holding `weights.safetensors`,
/// `model_config.json`, `train_config.json`, `training_log.csv`
/// (`epoch,loss,f_measure`) and `meta.json`.
#[derive(Clone, Debug)]
pub struct CheckpointBundle {
    pub model: UNetClassifier<f32>,
    pub train_config: TrainConfig,
    pub log: Vec<EpochRecord>,
    pub meta: CheckpointMeta,
}

fn ck_err(path: &Path, reason: impl Into<String>) -> ClassifierError {
    ClassifierError::Checkpoint { path: path.display().to_string(), reason: reason.into() }
}

impl CheckpointBundle {
    pub fn new(model: UNetClassifier<f32>, train_config: TrainConfig, log: Vec<EpochRecord>, best_epoch: usize, best_f_measure: f64) -> Self {
        Self { model, train_config, log, meta: CheckpointMeta { defect_class: None, best_epoch, best_f_measure } }
    }

    pub fn with_class(mut self, class: impl Into<String>) -> Self {
        self.meta.defect_class = Some(class.into());
        self
    }

    pub fn save(&self, dir: &Path) -> Result<(), ClassifierError> {
        fs::create_dir_all(dir)?;
        write_weights(&self.model, &dir.join(WEIGHTS_FILE))?;
        fs::write(dir.join(MODEL_CONFIG_FILE), serde_json::to_string_pretty(self.model.config())?)?;
        fs::write(dir.join(TRAIN_CONFIG_FILE), serde_json::to_string_pretty(&self.train_config)?)?;
        fs::write(dir.join(META_FILE), serde_json::to_string_pretty(&self.meta)?)?;
        let mut w = csv::Writer::from_path(dir.join(LOG_FILE))?;
        for r in &self.log {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, ClassifierError> {
        if !dir.join(WEIGHTS_FILE).is_file() {
            return Err(ck_err(dir, format!("missing {WEIGHTS_FILE}")));
        }
        let config: ModelConfig = serde_json::from_slice(&fs::read(dir.join(MODEL_CONFIG_FILE))?)?;
        let train_config: TrainConfig = serde_json::from_slice(&fs::read(dir.join(TRAIN_CONFIG_FILE))?)?;
        let meta: CheckpointMeta = serde_json::from_slice(&fs::read(dir.join(META_FILE))?)?;
        let mut model = UNetClassifier::new(config)?;
        let loaded = read_weights(&mut model, &dir.join(WEIGHTS_FILE), |_| true)?;
        if loaded != model.params().len() {
            return Err(ck_err(dir, format!("weights cover {loaded} of {} tensors", model.params().len())));
        }
        let mut log = Vec::new();
        for rec in csv::Reader::from_path(dir.join(LOG_FILE))?.deserialize() {
            log.push(rec?);
        }
        Ok(Self { model, train_config, log, meta })
    }
}

fn write_weights(model: &UNetClassifier<f32>, path: &Path) -> Result<(), ClassifierError> {
    let store = model.params();
    let buffers: Vec<(String, Vec<usize>, Vec<u8>)> = store
        .iter()
        .map(|(_, name, _, v)| {
            let bytes = v.iter().flat_map(|x| x.to_le_bytes()).collect();
            (name.to_string(), v.shape().to_vec(), bytes)
        })
        .collect();
    let views = buffers
        .iter()
        .map(|(name, shape, bytes)| {
            TensorView::new(Dtype::F32, shape.clone(), bytes).map(|v| (name.clone(), v))
        })
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| ck_err(path, e.to_string()))?;
    let data = safetensors::serialize(views, None::<HashMap<String, String>>).map_err(|e| ck_err(path, e.to_string()))?;
    fs::write(path, data)?;
    Ok(())
}

/// Copies every tensor accepted by `filter` whose name exists in the model.
/// Shapes must match. Returns the number of tensors copied.
fn read_weights<T: Scalar>(model: &mut UNetClassifier<T>, path: &Path, filter: impl Fn(&str) -> bool) -> Result<usize, ClassifierError> {
    let bytes = fs::read(path)?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| ck_err(path, e.to_string()))?;
    let mut copied = 0;
    for (name, view) in st.tensors() {
        if !filter(&name) {
            continue;
        }
        let Some(id) = model.params().find(&name) else { continue };
        let target = model.params_mut().get_mut(id);
        if target.shape() != view.shape() {
            return Err(ck_err(path, format!("{name}: shape {:?} does not match model {:?}", view.shape(), target.shape())));
        }
        let data = view.data();
        let values: Vec<f64> = match view.dtype() {
            Dtype::F32 => data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect(),
            Dtype::F64 => data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect(),
            other => return Err(ck_err(path, format!("{name}: unsupported dtype {other:?}"))),
        };
        for (t, v) in target.iter_mut().zip(values) {
            *t = T::from_f64(v);
        }
        copied += 1;
    }
    Ok(copied)
}

/// Initializes the encoder (stem and residual stages) from a safetensors file
/// using residual-network tensor names (`conv1.weight`, `layer1.0.bn1.running_mean`, ...).
///
/// Returns the names that were loaded.
pub fn load_encoder_weights<T: Scalar>(model: &mut UNetClassifier<T>, path: &Path) -> Result<Vec<String>, ClassifierError> {
    let is_encoder = |n: &str| n.starts_with("conv1.") || n.starts_with("bn1.") || n.starts_with("layer");
    read_weights(model, path, is_encoder)?;
    let bytes = fs::read(path)?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| ck_err(path, e.to_string()))?;
    let mut names: Vec<String> = st
        .names()
        .into_iter()
        .filter(|n| is_encoder(n) && model.params().find(n).is_some())
        .map(str::to_string)
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(ck_err(path, "no encoder tensors matched the model"));
    }
    let trainable = names
        .iter()
        .filter(|n| model.params().find(n).is_some_and(|id| model.params().kind(id) == ParamKind::Trainable))
        .count();
    log::info!("loaded {} encoder tensors ({trainable} trainable) from {}", names.len(), path.display());
    Ok(names)
}
