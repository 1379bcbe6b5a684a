//! Campaign configuration: one JSON document with a section per stage.
//! Fields left out take their defaults; `--set a.b=v` overrides a single
//! field, with `v` read as JSON when it parses and as a string otherwise.

use std::path::{Path, PathBuf};

use camlabel_core::classes::{ClassRegistry, DefectClass};
use camlabel_core::classifier::{ModelConfig, TrainConfig};
use camlabel_core::postproc::PostprocConfig;
use camlabel_core::proposer::{ProposerConfig, TilingConfig};
use camlabel_core::synth::SceneParams;
use camlabel_core::weakset::CropDatasetSpec;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{user, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Defaults to `<out_dir>/manifest.json`.
    pub manifest: Option<PathBuf>,
    /// Defaults to `<out_dir>/labels.json`.
    pub labels: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self { manifest: None, labels: None, out_dir: PathBuf::from("camlabel-out") }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProposeSection {
    /// Images to propose on; defaults to the training manifest.
    pub manifest: Option<PathBuf>,
    /// Subset of image ids; empty means all.
    pub images: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeSection {
    pub bind: String,
    /// Defaults to `<out_dir>/events.jsonl`.
    pub log: Option<PathBuf>,
    /// Load the checkpoints so clients can regenerate proposals.
    pub preview: bool,
}

impl Default for ServeSection {
    fn default() -> Self {
        Self { bind: "127.0.0.1:8080".into(), log: None, preview: true }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportSection {
    /// CSV with header `defect,instance_count,95,75,50`.
    pub tallies: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    /// Defaults to `paths.out_dir`.
    pub out_dir: Option<PathBuf>,
    pub scenes: usize,
    /// Scenes with no defects, only negative clicks.
    pub blank_scenes: usize,
    pub params: SceneParams,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self { out_dir: None, scenes: 20, blank_scenes: 0, params: SceneParams::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CampaignConfig {
    /// Copied into the dataset, model-init and training seeds, and the base
    /// seed of generated scenes.
    pub seed: u64,
    pub classes: Vec<String>,
    pub paths: Paths,
    pub dataset: CropDatasetSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub proposer: ProposerConfig,
    pub propose: ProposeSection,
    pub serve: ServeSection,
    pub report: ReportSection,
    pub synth: SynthSection,
}

impl Default for CampaignConfig {
    /// Desk-scale settings: 32 px crops and tiles with the shallow model.
    fn default() -> Self {
        let size = 32;
        Self {
            seed: 0,
            classes: vec!["crack".into(), "spalling".into(), "rust".into()],
            paths: Paths::default(),
            dataset: CropDatasetSpec { crop_size: size, ..CropDatasetSpec::default() },
            model: ModelConfig::shallow(size),
            train: TrainConfig { max_epochs: 10, batch_size: 16, learning_rate: 1e-3, ..TrainConfig::default() },
            proposer: ProposerConfig {
                tiling: TilingConfig { tile_size: size, ..TilingConfig::default() },
                postproc: PostprocConfig { theta: 0.6, ..PostprocConfig::default() },
                ..ProposerConfig::default()
            },
            propose: ProposeSection::default(),
            serve: ServeSection::default(),
            report: ReportSection::default(),
            synth: SynthSection::default(),
        }
    }
}

/// Overlays `patch` on `base`; every key in `patch` must already exist in
/// `base` unless the base value is null (an unset optional).
fn merge(base: &mut Value, patch: Value, at: &str) -> Result<()> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let path = if at.is_empty() { k.clone() } else { format!("{at}.{k}") };
                let slot = b.get_mut(&k).ok_or_else(|| user(format!("unknown config key {path:?}")))?;
                merge(slot, v, &path)?;
            }
            Ok(())
        }
        (b, p) => {
            *b = p;
            Ok(())
        }
    }
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let here = parts[..=i].join(".");
        cur = match cur {
            Value::Object(m) => m.get_mut(*part).ok_or_else(|| user(format!("unknown config key {here:?}")))?,
            Value::Array(a) => {
                let idx: usize = part.parse().map_err(|_| user(format!("{here:?}: expected an array index")))?;
                let len = a.len();
                a.get_mut(idx).ok_or_else(|| user(format!("{here:?}: index out of range (length {len})")))?
            }
            Value::Null => return Err(user(format!("{here:?}: {:?} is unset; set it as a whole JSON value", parts[..i].join(".")))),
            _ => return Err(user(format!("{here:?}: {:?} is not an object", parts[..i].join(".")))),
        };
    }
    *cur = value;
    Ok(())
}

impl CampaignConfig {
    /// Defaults, then the file, then `--seed`, then each `key=value` override.
    pub fn load(file: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Self> {
        let mut value = serde_json::to_value(Self::default()).expect("defaults serialize");
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| user(format!("cannot read config {}: {e}", path.display())))?;
            let doc: Value = serde_json::from_str(&text).map_err(|e| user(format!("config {}: {e}", path.display())))?;
            merge(&mut value, doc, "")?;
        }
        if let Some(s) = seed {
            value["seed"] = Value::from(s);
        }
        for kv in overrides {
            let (k, v) = kv.split_once('=').ok_or_else(|| user(format!("--set expects key=value, got {kv:?}")))?;
            let v = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
            set_path(&mut value, k.trim(), v)?;
        }
        let mut cfg: Self = serde_json::from_value(value).map_err(|e| user(format!("config: {e}")))?;
        cfg.apply_seed();
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply_seed(&mut self) {
        self.dataset.seed = self.seed;
        self.model.init_seed = self.seed;
        self.train.seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.registry()?;
        self.dataset.validate().map_err(|e| user(e.to_string()))?;
        self.model.validate().map_err(|e| user(e.to_string()))?;
        self.train.validate().map_err(|e| user(e.to_string()))?;
        self.proposer.tiling.validate().map_err(|e| user(e.to_string()))?;
        self.proposer.climb.validate().map_err(|e| user(e.to_string()))?;
        self.proposer.postproc.validate().map_err(|e| user(e.to_string()))?;
        if self.dataset.crop_size != self.model.input_size {
            return Err(user(format!(
                "dataset.crop_size ({}) must equal model.input_size ({})",
                self.dataset.crop_size, self.model.input_size
            )));
        }
        Ok(())
    }

    pub fn registry(&self) -> Result<ClassRegistry> {
        if self.classes.is_empty() {
            return Err(user("classes must list at least one defect class"));
        }
        ClassRegistry::from_names(self.classes.iter().cloned()).map_err(|e| user(e.to_string()))
    }

    pub fn class_list(&self) -> Result<Vec<DefectClass>> {
        Ok(self.registry()?.iter().cloned().collect())
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.paths.manifest.clone().unwrap_or_else(|| self.paths.out_dir.join("manifest.json"))
    }

    pub fn labels_path(&self) -> PathBuf {
        self.paths.labels.clone().unwrap_or_else(|| self.paths.out_dir.join("labels.json"))
    }

    pub fn dataset_path(&self, class: &DefectClass) -> PathBuf {
        self.paths.out_dir.join("dataset").join(format!("{class}.json"))
    }

    pub fn checkpoint_dir(&self, class: &DefectClass) -> PathBuf {
        self.paths.out_dir.join("checkpoints").join(class.as_str())
    }

    pub fn proposals_path(&self) -> PathBuf {
        self.paths.out_dir.join("proposals.json")
    }

    pub fn propose_manifest_path(&self) -> PathBuf {
        self.propose.manifest.clone().unwrap_or_else(|| self.manifest_path())
    }

    pub fn log_path(&self) -> PathBuf {
        self.serve.log.clone().unwrap_or_else(|| self.paths.out_dir.join("events.jsonl"))
    }

    pub fn synth_dir(&self) -> PathBuf {
        self.synth.out_dir.clone().unwrap_or_else(|| self.paths.out_dir.clone())
    }
}
