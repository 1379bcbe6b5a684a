//! Click-level weak labels and the per-class binary crop datasets built from them.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classes::{ClassRegistry, DefectClass};
use crate::classifier::LabeledCrop;
use crate::geometry::{Pixel, Window};
use crate::raster::{Raster, RasterError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    Manual,
    InteractionLog,
}

/// One annotator click.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeakLabel {
    pub id: String,
    pub image_id: String,
    /// `[row, col]`
    pub point: Pixel,
    pub defect_class: DefectClass,
    pub polarity: Polarity,
    pub source: LabelSource,
    pub created_at: DateTime<Utc>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub path: PathBuf,
    pub height: usize,
    pub width: usize,
}

/// `{image_id: {path, height, width}}`, ordered by id.
pub type ImageManifest = BTreeMap<String, ImageEntry>;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RecordIssue {
    pub index: usize,
    pub line: usize,
    pub id: Option<String>,
    pub reason: String,
}

impl fmt::Display for RecordIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: record {}", self.line, self.index)?;
        if let Some(id) = &self.id {
            write!(f, " ({id:?})")?;
        }
        write!(f, ": {}", self.reason)
    }
}

fn list_issues(issues: &[RecordIssue]) -> String {
    issues.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

#[derive(Debug, Error)]
pub enum WeaksetError {
    #[error("malformed label document: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("{} invalid label record(s): {}", .0.len(), list_issues(.0))]
    Validation(Vec<RecordIssue>),
    #[error("invalid dataset spec: {0}")]
    Spec(String),
    #[error("image {image_id} is {height}x{width}, smaller than the {crop_size}px crop")]
    ImageTooSmall { image_id: String, height: usize, width: usize, crop_size: usize },
    #[error("image {0} has no recorded size")]
    UnknownImage(String),
    #[error("no positive labels for class {0}")]
    EmptyDataset(String),
    #[error("no negative labels for class {0}; at least one is needed to balance the dataset")]
    NoNegatives(String),
    #[error("{images} distinct image(s) cannot fill {splits} nonempty split(s)")]
    InfeasibleSplit { images: usize, splits: usize },
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Raster(#[from] RasterError),
}

/// 1-based line on which each element of the top-level array starts.
fn element_lines(text: &str) -> Vec<usize> {
    let mut lines = Vec::new();
    let (mut depth, mut in_str, mut escaped, mut line) = (0usize, false, false, 1usize);
    let mut expect_element = false;
    for ch in text.chars() {
        if ch == '\n' {
            line += 1;
        }
        if in_str {
            match (escaped, ch) {
                (true, _) => escaped = false,
                (false, '\\') => escaped = true,
                (false, '"') => in_str = false,
                _ => {}
            }
            continue;
        }
        if depth == 1 && expect_element && !ch.is_whitespace() && ch != ']' {
            lines.push(line);
            expect_element = false;
        }
        match ch {
            '"' => in_str = true,
            '[' | '{' => {
                depth += 1;
                if depth == 1 {
                    expect_element = true;
                }
            }
            ']' | '}' => depth = depth.saturating_sub(1),
            ',' if depth == 1 => expect_element = true,
            _ => {}
        }
    }
    lines
}

/// Parses and validates a label document against image sizes and the class
/// registry. All invalid records are reported together.
pub fn ingest_labels(text: &str, manifest: &ImageManifest, registry: &ClassRegistry) -> Result<Vec<WeakLabel>, WeaksetError> {
    let records: Vec<serde_json::Value> = serde_json::from_str(text)?;
    let lines = element_lines(text);
    let mut issues = Vec::new();
    let mut labels = Vec::with_capacity(records.len());
    let mut ids = HashSet::new();
    for (index, value) in records.into_iter().enumerate() {
        let line = lines.get(index).copied().unwrap_or(0);
        let id = value.get("id").and_then(|v| v.as_str()).map(str::to_string);
        let mut issue = |reason: String| issues.push(RecordIssue { index, line, id: id.clone(), reason });
        let label: WeakLabel = match serde_json::from_value(value) {
            Ok(l) => l,
            Err(e) => {
                issue(e.to_string());
                continue;
            }
        };
        if !ids.insert(label.id.clone()) {
            issue("duplicate id".into());
        }
        if !registry.contains(&label.defect_class) {
            issue(format!("class {} is not registered", label.defect_class));
        }
        match manifest.get(&label.image_id) {
            None => issue(format!("unknown image {}", label.image_id)),
            Some(img) if label.point.row >= img.height || label.point.col >= img.width => issue(format!(
                "point [{}, {}] outside {}x{} image {}",
                label.point.row, label.point.col, img.height, img.width, label.image_id
            )),
            Some(_) => {}
        }
        labels.push(label);
    }
    if issues.is_empty() {
        Ok(labels)
    } else {
        Err(WeaksetError::Validation(issues))
    }
}

pub fn labels_to_json(labels: &[WeakLabel]) -> String {
    serde_json::to_string_pretty(labels).expect("labels serialize")
}

fn read(path: &Path) -> Result<String, WeaksetError> {
    std::fs::read_to_string(path).map_err(|source| WeaksetError::Io { path: path.display().to_string(), source })
}

/// Reads a manifest file; relative image paths are resolved against its directory.
pub fn load_manifest(path: &Path) -> Result<ImageManifest, WeaksetError> {
    let mut manifest: ImageManifest = serde_json::from_str(&read(path)?)?;
    let base = path.parent().unwrap_or(Path::new("."));
    for entry in manifest.values_mut() {
        if entry.path.is_relative() {
            entry.path = base.join(&entry.path);
        }
    }
    Ok(manifest)
}

pub fn load_labels(path: &Path, manifest: &ImageManifest, registry: &ClassRegistry) -> Result<Vec<WeakLabel>, WeaksetError> {
    ingest_labels(&read(path)?, manifest, registry)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropLabel {
    Defect,
    NoDefect,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropSample {
    pub image_id: String,
    pub window: Window,
    pub label: CropLabel,
    pub defect_class: DefectClass,
    pub origin_label_id: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CropDatasetSpec {
    pub crop_size: usize,
    pub crops_per_positive: usize,
    pub seed: u64,
    /// (train, val, test)
    pub split_fractions: [f64; 3],
}

impl Default for CropDatasetSpec {
    fn default() -> Self {
        Self { crop_size: 320, crops_per_positive: 5, seed: 0, split_fractions: [0.8, 0.1, 0.1] }
    }
}

impl CropDatasetSpec {
    pub fn validate(&self) -> Result<(), WeaksetError> {
        let bad = |m: String| Err(WeaksetError::Spec(m));
        if self.crops_per_positive == 0 {
            return bad("crops_per_positive must be at least 1".into());
        }
        if self.crop_size < 32 {
            return bad(format!("crop_size must be at least 32, got {}", self.crop_size));
        }
        let f = self.split_fractions;
        if f.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return bad(format!("split fractions must be nonnegative and sum to 1, got {f:?}"));
        }
        Ok(())
    }
}

/// Window of side `size` centred on `center` shifted by a jitter, clamped into the image.
fn jittered_window(center: Pixel, size: usize, (h, w): (usize, usize), rng: &mut ChaCha8Rng) -> Window {
    let radius = (size / 4) as i64;
    let place = |c: usize, extent: usize, rng: &mut ChaCha8Rng| {
        let offset = rng.random_range(-radius..=radius);
        let start = c as i64 + offset - (size / 2) as i64;
        start.clamp(0, (extent - size) as i64) as usize
    };
    let row0 = place(center.row, h, rng);
    let col0 = place(center.col, w, rng);
    Window::new(row0, col0, size, size)
}

/// Positive crops jittered around each positive click of `class`, then the
/// same number of negative crops cycling through the negative clicks.
pub fn sample_crops(
    labels: &[WeakLabel],
    class: &DefectClass,
    spec: &CropDatasetSpec,
    image_sizes: &BTreeMap<String, (usize, usize)>,
) -> Result<Vec<CropSample>, WeaksetError> {
    spec.validate()?;
    let of_class: Vec<&WeakLabel> = labels.iter().filter(|l| &l.defect_class == class).collect();
    let positives: Vec<&WeakLabel> = of_class.iter().copied().filter(|l| l.polarity == Polarity::Positive).collect();
    let negatives: Vec<&WeakLabel> = of_class.iter().copied().filter(|l| l.polarity == Polarity::Negative).collect();
    if positives.is_empty() {
        return Err(WeaksetError::EmptyDataset(class.to_string()));
    }
    if negatives.is_empty() {
        return Err(WeaksetError::NoNegatives(class.to_string()));
    }
    let s = spec.crop_size;
    let size_of = |l: &WeakLabel| -> Result<(usize, usize), WeaksetError> {
        let &(h, w) = image_sizes.get(&l.image_id).ok_or_else(|| WeaksetError::UnknownImage(l.image_id.clone()))?;
        if h < s || w < s {
            return Err(WeaksetError::ImageTooSmall { image_id: l.image_id.clone(), height: h, width: w, crop_size: s });
        }
        Ok((h, w))
    };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(2 * positives.len() * spec.crops_per_positive);
    for l in &positives {
        let dims = size_of(l)?;
        for _ in 0..spec.crops_per_positive {
            let window = jittered_window(l.point, s, dims, &mut rng);
            debug_assert!(window.contains(l.point));
            out.push(CropSample {
                image_id: l.image_id.clone(),
                window,
                label: CropLabel::Defect,
                defect_class: class.clone(),
                origin_label_id: l.id.clone(),
            });
        }
    }
    let wanted = out.len();
    for i in 0..wanted {
        let l = negatives[i % negatives.len()];
        let window = jittered_window(l.point, s, size_of(l)?, &mut rng);
        out.push(CropSample {
            image_id: l.image_id.clone(),
            window,
            label: CropLabel::NoDefect,
            defect_class: class.clone(),
            origin_label_id: l.id.clone(),
        });
    }
    Ok(out)
}

/// Largest-remainder apportionment of `n` items, with at least one item for
/// every nonzero fraction.
fn apportion(n: usize, fractions: &[f64; 3]) -> Result<[usize; 3], WeaksetError> {
    let nonzero = fractions.iter().filter(|&&f| f > 0.0).count();
    if n < nonzero {
        return Err(WeaksetError::InfeasibleSplit { images: n, splits: nonzero });
    }
    let quotas: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts = [0usize; 3];
    for i in 0..3 {
        counts[i] = quotas[i].floor() as usize;
    }
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| (quotas[b] - quotas[b].floor()).total_cmp(&(quotas[a] - quotas[a].floor())).then(a.cmp(&b)));
    let mut left = n - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if fractions[i] > 0.0 {
            counts[i] += 1;
            left -= 1;
        }
    }
    for i in 0..3 {
        if fractions[i] > 0.0 && counts[i] == 0 {
            let donor = (0..3).max_by_key(|&j| (counts[j], std::cmp::Reverse(j))).expect("three splits");
            counts[donor] -= 1;
            counts[i] += 1;
        }
    }
    Ok(counts)
}

/// Splits by image so no image contributes to two splits.
pub fn split_dataset(
    samples: &[CropSample],
    spec: &CropDatasetSpec,
) -> Result<(Vec<CropSample>, Vec<CropSample>, Vec<CropSample>), WeaksetError> {
    spec.validate()?;
    let mut images: Vec<&str> = samples.iter().map(|s| s.image_id.as_str()).collect::<HashSet<_>>().into_iter().collect();
    images.sort_unstable();
    if images.is_empty() {
        return Err(WeaksetError::InfeasibleSplit { images: 0, splits: 1 });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(1));
    images.shuffle(&mut rng);
    let counts = apportion(images.len(), &spec.split_fractions)?;
    let mut which = HashMap::new();
    let mut it = images.into_iter();
    for (split, &count) in counts.iter().enumerate() {
        for img in it.by_ref().take(count) {
            which.insert(img, split);
        }
    }
    let mut parts = (Vec::new(), Vec::new(), Vec::new());
    for s in samples {
        match which[s.image_id.as_str()] {
            0 => parts.0.push(s.clone()),
            1 => parts.1.push(s.clone()),
            _ => parts.2.push(s.clone()),
        }
    }
    Ok(parts)
}

/// The three splits of one class, as written to disk by the pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassDataset {
    pub defect_class: DefectClass,
    pub spec: CropDatasetSpec,
    pub train: Vec<CropSample>,
    pub val: Vec<CropSample>,
    pub test: Vec<CropSample>,
}

impl ClassDataset {
    pub fn build(labels: &[WeakLabel], class: &DefectClass, spec: &CropDatasetSpec, manifest: &ImageManifest) -> Result<Self, WeaksetError> {
        let sizes = manifest.iter().map(|(k, v)| (k.clone(), (v.height, v.width))).collect();
        let samples = sample_crops(labels, class, spec, &sizes)?;
        let (train, val, test) = split_dataset(&samples, spec)?;
        Ok(Self { defect_class: class.clone(), spec: spec.clone(), train, val, test })
    }

    pub fn count(split: &[CropSample], label: CropLabel) -> usize {
        split.iter().filter(|s| s.label == label).count()
    }
}

/// Loads the pixels of each sample, decoding every image once.
pub fn load_crops(samples: &[CropSample], manifest: &ImageManifest) -> Result<Vec<LabeledCrop>, WeaksetError> {
    let mut cache: HashMap<&str, Raster> = HashMap::new();
    let mut out = Vec::with_capacity(samples.len());
    for s in samples {
        if !cache.contains_key(s.image_id.as_str()) {
            let entry = manifest.get(&s.image_id).ok_or_else(|| WeaksetError::UnknownImage(s.image_id.clone()))?;
            cache.insert(&s.image_id, Raster::load(&entry.path)?);
        }
        let pixels = cache[s.image_id.as_str()].crop(s.window)?;
        out.push(LabeledCrop { pixels, defect: s.label == CropLabel::Defect });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn element_lines_track_records() {
        let text = "[\n  {\"a\": \"}\\\"\"},\n\n  {\"b\": [1, 2]}\n]";
        assert_eq!(element_lines(text), vec![2, 4]);
        assert_eq!(element_lines("[]"), Vec::<usize>::new());
    }

    #[test]
    fn apportion_cases() {
        assert_eq!(apportion(10, &[0.8, 0.1, 0.1]).unwrap(), [8, 1, 1]);
        assert_eq!(apportion(3, &[0.8, 0.1, 0.1]).unwrap(), [1, 1, 1]);
        assert_eq!(apportion(5, &[1.0, 0.0, 0.0]).unwrap(), [5, 0, 0]);
        assert!(apportion(2, &[0.8, 0.1, 0.1]).is_err());
        for n in 3..40 {
            assert_eq!(apportion(n, &[0.7, 0.2, 0.1]).unwrap().iter().sum::<usize>(), n);
        }
    }
}
