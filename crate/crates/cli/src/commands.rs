//! One function per subcommand. Each reads its inputs from the paths in the
//! config, writes its artifacts under `paths.out_dir`, and returns a summary
//! for printing.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use camlabel_core::classes::DefectClass;
use camlabel_core::classifier::{f_measure, predict_batch, train, CheckpointBundle, LabeledCrop, UNetClassifier};
use camlabel_core::metrics::{aggregate, tallies_from_csv, TimeSavingReport};
use camlabel_core::proposer::{propose, proposals_from_json, proposals_to_json, InstanceProposal, ProposerError};
use camlabel_core::raster::Raster;
use camlabel_core::synth::{generate_synthetic_scene, GtRecord, SceneParams};
use camlabel_core::weakset::{
    ingest_labels, labels_to_json, load_crops, load_manifest, ClassDataset, CropLabel, ImageEntry, ImageManifest, WeakLabel, WeaksetError,
};
use camlabel_service::{derive_weak_labels, read_log, router, Preview, Service};
use chrono::DateTime;
use serde::Serialize;

use crate::config::CampaignConfig;
use crate::error::{require, user, Result};

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text).map_err(|e| anyhow::anyhow!("cannot write {}: {e}", path.display()))
}

fn weakset_err(e: WeaksetError) -> anyhow::Error {
    match e {
        WeaksetError::Raster(_) => anyhow::Error::new(e),
        other => user(other.to_string()),
    }
}

pub fn read_manifest(path: &Path, producer: Option<&str>) -> Result<ImageManifest> {
    require("image manifest", path, producer)?;
    load_manifest(path).map_err(weakset_err)
}

/// Labels of the label file, validated against the manifest and classes.
pub fn read_labels(cfg: &CampaignConfig, manifest: &ImageManifest) -> Result<Vec<WeakLabel>> {
    let path = cfg.labels_path();
    require("label file", &path, None)?;
    let text = fs::read_to_string(&path)?;
    ingest_labels(&text, manifest, &cfg.registry()?).map_err(|e| user(format!("{}: {e}", path.display())))
}

// ---- synth

#[derive(Debug, Serialize)]
pub struct SynthSummary {
    pub images: usize,
    pub labels: usize,
    pub instances: usize,
}

/// Scenes `scene000..` (seeds `seed + i`) and defect-free `blank000..`
/// (seeds `seed + 1_000_000 + i`), with a manifest, click labels and the
/// ground-truth masks.
pub fn synth(cfg: &CampaignConfig) -> Result<SynthSummary> {
    let dir = cfg.synth_dir();
    let classes = cfg.class_list()?;
    let epoch = DateTime::from_timestamp(0, 0).expect("epoch");
    let p = &cfg.synth.params;
    let mut jobs: Vec<(String, SceneParams, u64)> =
        (0..cfg.synth.scenes).map(|i| (format!("scene{i:03}"), p.clone(), cfg.seed + i as u64)).collect();
    let blank = SceneParams::blank(p.height, p.width, p.negatives.max(1));
    jobs.extend((0..cfg.synth.blank_scenes).map(|i| (format!("blank{i:03}"), blank.clone(), cfg.seed + 1_000_000 + i as u64)));
    if jobs.is_empty() {
        return Err(user("synth.scenes and synth.blank_scenes are both 0"));
    }
    let mut manifest = ImageManifest::new();
    let mut labels = Vec::new();
    let mut truth: BTreeMap<String, Vec<GtRecord>> = BTreeMap::new();
    fs::create_dir_all(dir.join("images"))?;
    for (id, params, seed) in jobs {
        let scene = generate_synthetic_scene(&params, seed).map_err(|e| user(format!("{id}: {e}")))?;
        let rel = Path::new("images").join(format!("{id}.png"));
        scene.image.save_png(&dir.join(&rel))?;
        manifest.insert(id.clone(), ImageEntry { path: rel, height: params.height, width: params.width });
        labels.extend(scene.weak_labels(&id, &classes, epoch));
        truth.insert(id, scene.ground_truth());
    }
    write(&dir.join("manifest.json"), &serde_json::to_string_pretty(&manifest)?)?;
    write(&dir.join("labels.json"), &labels_to_json(&labels))?;
    write(&dir.join("ground_truth.json"), &serde_json::to_string_pretty(&truth)?)?;
    Ok(SynthSummary { images: manifest.len(), labels: labels.len(), instances: truth.values().map(Vec::len).sum() })
}

// ---- build-dataset

pub struct BuildSummary {
    pub datasets: Vec<ClassDataset>,
}

impl BuildSummary {
    /// Classes as columns; positive clicks, then crops per split.
    pub fn table(&self) -> String {
        let mut rows: Vec<Vec<String>> = vec![vec!["defect".into()], vec!["instances".into()]];
        for split in ["train", "val", "test"] {
            rows.push(vec![format!("{split} defect/no-defect")]);
        }
        for d in &self.datasets {
            rows[0].push(d.defect_class.to_string());
            let positives: std::collections::HashSet<&str> =
                d.train.iter().chain(&d.val).chain(&d.test).filter(|s| s.label == CropLabel::Defect).map(|s| s.origin_label_id.as_str()).collect();
            rows[1].push(positives.len().to_string());
            for (i, split) in [&d.train, &d.val, &d.test].into_iter().enumerate() {
                rows[2 + i].push(format!("{}/{}", ClassDataset::count(split, CropLabel::Defect), ClassDataset::count(split, CropLabel::NoDefect)));
            }
        }
        let widths: Vec<usize> = (0..rows[0].len()).map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0)).collect();
        let mut out = String::new();
        for r in rows {
            let cells: Vec<String> = r.iter().enumerate().map(|(c, v)| if c == 0 { format!("{v:<w$}", w = widths[c]) } else { format!("{v:>w$}", w = widths[c]) }).collect();
            let _ = writeln!(out, "{}", cells.join("  "));
        }
        out
    }
}

pub fn build_dataset(cfg: &CampaignConfig) -> Result<BuildSummary> {
    let manifest = read_manifest(&cfg.manifest_path(), Some("synth"))?;
    let labels = read_labels(cfg, &manifest)?;
    let mut datasets = Vec::new();
    for class in cfg.class_list()? {
        let d = ClassDataset::build(&labels, &class, &cfg.dataset, &manifest).map_err(weakset_err)?;
        write(&cfg.dataset_path(&class), &serde_json::to_string_pretty(&d)?)?;
        datasets.push(d);
    }
    Ok(BuildSummary { datasets })
}

// ---- train

#[derive(Debug, Serialize)]
pub struct TrainSummary {
    pub defect_class: String,
    pub train_crops: usize,
    pub best_epoch: usize,
    pub val_f_measure: f64,
    /// F1 on the test split at probability 0.5, when it is nonempty.
    pub test_f_measure: Option<f64>,
}

fn read_dataset(cfg: &CampaignConfig, class: &DefectClass) -> Result<ClassDataset> {
    let path = cfg.dataset_path(class);
    require(&format!("dataset for class {class}"), &path, Some("build-dataset"))?;
    let d: ClassDataset = serde_json::from_str(&fs::read_to_string(&path)?)
        .map_err(|e| user(format!("{}: {e}; rerun `camlabel build-dataset`", path.display())))?;
    if d.spec.crop_size != cfg.model.input_size {
        return Err(user(format!(
            "{} has {} px crops but model.input_size is {}; rerun `camlabel build-dataset`",
            path.display(),
            d.spec.crop_size,
            cfg.model.input_size
        )));
    }
    Ok(d)
}

fn crops(samples: &[camlabel_core::weakset::CropSample], manifest: &ImageManifest) -> Result<Vec<LabeledCrop>> {
    load_crops(samples, manifest).map_err(|e| user(format!("{e}; the dataset may be stale, rerun `camlabel build-dataset`")))
}

pub fn train_all(cfg: &CampaignConfig) -> Result<Vec<TrainSummary>> {
    let manifest = read_manifest(&cfg.manifest_path(), Some("synth"))?;
    let mut out = Vec::new();
    for class in cfg.class_list()? {
        let d = read_dataset(cfg, &class)?;
        let (tr, va, te) = (crops(&d.train, &manifest)?, crops(&d.val, &manifest)?, crops(&d.test, &manifest)?);
        log::info!("{class}: training on {} crops, validating on {}", tr.len(), va.len());
        let model = UNetClassifier::new(cfg.model.clone()).map_err(|e| user(e.to_string()))?;
        let bundle = train(model, &tr, &va, &cfg.train).map_err(|e| user(format!("{class}: {e}")))?.with_class(class.as_str());
        bundle.save(&cfg.checkpoint_dir(&class))?;
        let test_f_measure = if te.is_empty() {
            None
        } else {
            let pixels: Vec<Raster> = te.iter().map(|c| c.pixels.clone()).collect();
            let probs = predict_batch(&bundle.model, &pixels)?;
            let predicted: Vec<bool> = probs.iter().map(|&p| p >= 0.5).collect();
            let actual: Vec<bool> = te.iter().map(|c| c.defect).collect();
            Some(f_measure(&predicted, &actual))
        };
        out.push(TrainSummary {
            defect_class: class.to_string(),
            train_crops: tr.len(),
            best_epoch: bundle.meta.best_epoch,
            val_f_measure: bundle.meta.best_f_measure,
            test_f_measure,
        });
    }
    Ok(out)
}

// ---- propose

pub fn load_models(cfg: &CampaignConfig) -> Result<BTreeMap<DefectClass, UNetClassifier<f32>>> {
    let mut models = BTreeMap::new();
    for class in cfg.class_list()? {
        let dir = cfg.checkpoint_dir(&class);
        if !dir.exists() {
            return Err(user(format!("{} (expected at {})", ProposerError::MissingCheckpoint(class.to_string()), dir.display())));
        }
        let bundle = CheckpointBundle::load(&dir).map_err(|e| user(format!("{e}; retrain with `camlabel train`")))?;
        if bundle.meta.defect_class.as_deref().is_some_and(|c| c != class.as_str()) {
            return Err(user(format!("{} holds a model for {:?}, not {class}", dir.display(), bundle.meta.defect_class)));
        }
        models.insert(class, bundle.model);
    }
    Ok(models)
}

#[derive(Debug, Serialize)]
pub struct ProposeSummary {
    pub images: usize,
    pub per_class: BTreeMap<String, usize>,
}

/// Images selected by `propose.manifest` and `propose.images`.
pub fn propose_images(cfg: &CampaignConfig) -> Result<ImageManifest> {
    let manifest = read_manifest(&cfg.propose_manifest_path(), Some("synth"))?;
    if cfg.propose.images.is_empty() {
        return Ok(manifest);
    }
    cfg.propose
        .images
        .iter()
        .map(|id| manifest.get(id).map(|e| (id.clone(), e.clone())).ok_or_else(|| user(format!("propose.images: unknown image {id}"))))
        .collect()
}

pub fn propose_all(cfg: &CampaignConfig) -> Result<ProposeSummary> {
    let models = load_models(cfg)?;
    let images = propose_images(cfg)?;
    let classes = cfg.class_list()?;
    let mut all: Vec<InstanceProposal> = Vec::new();
    for (id, entry) in &images {
        let raster = Raster::load(&entry.path)?;
        let props = propose(id, &raster, &classes, &models, &cfg.proposer).map_err(|e| match e {
            ProposerError::ImageTooSmall { .. } | ProposerError::Config(_) => user(format!("{id}: {e}")),
            other => anyhow::Error::new(other),
        })?;
        log::info!("{id}: {} proposals", props.len());
        all.extend(props);
    }
    write(&cfg.proposals_path(), &proposals_to_json(&all))?;
    let mut per_class: BTreeMap<String, usize> = classes.iter().map(|c| (c.to_string(), 0)).collect();
    for p in &all {
        *per_class.entry(p.defect_class.to_string()).or_default() += 1;
    }
    Ok(ProposeSummary { images: images.len(), per_class })
}

pub fn read_proposals(cfg: &CampaignConfig) -> Result<Vec<InstanceProposal>> {
    let path = cfg.proposals_path();
    require("proposal document", &path, Some("propose"))?;
    proposals_from_json(&fs::read_to_string(&path)?).map_err(|e| user(format!("{}: {e}; rerun `camlabel propose`", path.display())))
}

// ---- serve

/// Starts the review service and blocks until interrupted.
pub fn serve(cfg: &CampaignConfig) -> Result<()> {
    let images = propose_images(cfg)?;
    let proposals = read_proposals(cfg)?;
    let preview = if cfg.serve.preview {
        match load_models(cfg) {
            Ok(models) => Some(Preview { models, config: cfg.proposer.clone() }),
            Err(e) => {
                log::warn!("regeneration disabled: {e}");
                None
            }
        }
    } else {
        None
    };
    let log_path = cfg.log_path();
    if let Some(dir) = log_path.parent() {
        fs::create_dir_all(dir)?;
    }
    let service = Service::start(images, proposals, &log_path, preview).map_err(|e| user(e.to_string()))?;
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(&cfg.serve.bind)
            .await
            .map_err(|e| user(format!("cannot bind {}: {e}", cfg.serve.bind)))?;
        println!("listening on http://{}", listener.local_addr()?);
        axum::serve(listener, router(&service))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}

// ---- derive-labels

#[derive(Debug, Serialize)]
pub struct DeriveSummary {
    pub events: usize,
    pub derived: usize,
    /// Derived labels not already in the label file.
    pub added: usize,
    pub warnings: Vec<String>,
}

/// Adds entries of `extra` missing from the manifest file at `path`, keeping
/// the existing entries as written.
fn extend_manifest(path: &Path, extra: &ImageManifest, needed: &[&str]) -> Result<ImageManifest> {
    let mut raw: ImageManifest = serde_json::from_str(&fs::read_to_string(path)?).map_err(|e| user(format!("{}: {e}", path.display())))?;
    let mut changed = false;
    for id in needed {
        if !raw.contains_key(*id) {
            let entry = extra.get(*id).ok_or_else(|| user(format!("reviewed image {id} is in neither manifest")))?;
            let abs = fs::canonicalize(&entry.path).unwrap_or_else(|_| entry.path.clone());
            raw.insert(id.to_string(), ImageEntry { path: abs, ..entry.clone() });
            changed = true;
        }
    }
    if changed {
        write(path, &serde_json::to_string_pretty(&raw)?)?;
    }
    load_manifest(path).map_err(weakset_err)
}

/// Turns the review log into click labels and appends the new ones to the
/// label file; reviewed images missing from the training manifest are added.
pub fn derive_labels(cfg: &CampaignConfig) -> Result<DeriveSummary> {
    let log_path = cfg.log_path();
    require("interaction log", &log_path, Some("serve"))?;
    let events = read_log(&log_path).map_err(|e| user(e.to_string()))?;
    let proposals: BTreeMap<String, InstanceProposal> = read_proposals(cfg)?.into_iter().map(|p| (p.proposal_id.clone(), p)).collect();
    let derived = derive_weak_labels(&events, &proposals);
    for w in &derived.warnings {
        log::warn!("{w}");
    }
    write(&cfg.paths.out_dir.join("derived_labels.json"), &serde_json::to_string_pretty(&derived)?)?;

    let manifest_path = cfg.manifest_path();
    require("image manifest", &manifest_path, Some("synth"))?;
    let mut needed: Vec<&str> = derived.labels.iter().map(|l| l.image_id.as_str()).collect();
    needed.dedup();
    let review_images = read_manifest(&cfg.propose_manifest_path(), None)?;
    let manifest = extend_manifest(&manifest_path, &review_images, &needed)?;
    let mut labels = if cfg.labels_path().exists() { read_labels(cfg, &manifest)? } else { Vec::new() };
    let known: BTreeMap<String, WeakLabel> = labels.iter().map(|l| (l.id.clone(), l.clone())).collect();
    let mut added = 0;
    for l in &derived.labels {
        match known.get(&l.id) {
            Some(existing) if existing == l => {}
            Some(_) => return Err(user(format!("label {} already exists with different content", l.id))),
            None => {
                labels.push(l.clone());
                added += 1;
            }
        }
    }
    let text = labels_to_json(&labels);
    ingest_labels(&text, &manifest, &cfg.registry()?).map_err(|e| user(format!("derived labels do not validate: {e}")))?;
    write(&cfg.labels_path(), &text)?;
    Ok(DeriveSummary { events: events.len(), derived: derived.labels.len(), added, warnings: derived.warnings })
}

// ---- report

pub fn report(cfg: &CampaignConfig) -> Result<TimeSavingReport> {
    let path = cfg.report.tallies.clone().ok_or_else(|| user("report.tallies is not set; pass --set report.tallies=<csv>"))?;
    require("tally file", &path, None)?;
    let tallies = tallies_from_csv(&fs::read_to_string(&path)?).map_err(|e| user(format!("{}: {e}", path.display())))?;
    let report = aggregate(&tallies).map_err(|e| user(format!("{}: {e}", path.display())))?;
    write(&cfg.paths.out_dir.join("report.csv"), &report.to_csv())?;
    write(&cfg.paths.out_dir.join("report.json"), &report.to_json())?;
    Ok(report)
}
