//! Full-image proposals: tile, climb per tile, merge, post-process, emit.

use std::collections::BTreeMap;

use ndarray::{s, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attribution::{normalize, AttributionMap, Generator};
use crate::classes::DefectClass;
use crate::classifier::{predict, UNetClassifier};
use crate::climb::{advcam, ClimbConfig};
use crate::geometry::Window;
use crate::polygon::Polygon;
use crate::postproc::{components, postprocess_stages, PostprocConfig, PostprocStages};
use crate::raster::Raster;
use crate::rle::Rle;

#[derive(Debug, Error)]
pub enum ProposerError {
    #[error("invalid tiling config: {0}")]
    Config(String),
    #[error("{height}x{width} image is smaller than the {tile}px tile")]
    ImageTooSmall { height: usize, width: usize, tile: usize },
    #[error("no checkpoint for class {0}; train one with `camlabel train`")]
    MissingCheckpoint(String),
    #[error("class {class}: {} tile(s) failed: {}", failed.len(), failed.iter().map(|(w, e)| format!("{w:?}: {e}")).collect::<Vec<_>>().join("; "))]
    TilesFailed { class: String, failed: Vec<(Window, String)> },
    #[error(transparent)]
    Postproc(#[from] crate::postproc::PostprocError),
    #[error(transparent)]
    Climb(#[from] crate::climb::ClimbError),
}

/// How tile maps are brought to a common scale before the max-merge.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TileScale {
    /// Merge the unnormalized sums and normalize once over the whole image,
    /// so tiles the model barely responds to stay faint.
    #[default]
    Global,
    /// Merge the unit-max aggregate of every tile.
    PerTile,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TilingConfig {
    pub tile_size: usize,
    pub overlap_fraction: f64,
    pub scale: TileScale,
    /// Skip tiles whose classifier probability is below `prefilter_threshold`.
    pub prefilter: bool,
    pub prefilter_threshold: f64,
    /// Worker threads for tiles; 0 uses the global pool.
    pub workers: usize,
}

impl Default for TilingConfig {
    fn default() -> Self {
        Self { tile_size: 320, overlap_fraction: 0.5, scale: TileScale::Global, prefilter: false, prefilter_threshold: 0.05, workers: 0 }
    }
}

impl TilingConfig {
    pub fn validate(&self) -> Result<(), ProposerError> {
        if self.tile_size == 0 {
            return Err(ProposerError::Config("tile_size must be positive".into()));
        }
        if !(0.0..=0.9).contains(&self.overlap_fraction) {
            return Err(ProposerError::Config(format!("overlap_fraction must lie in [0, 0.9], got {}", self.overlap_fraction)));
        }
        Ok(())
    }

    pub fn stride(&self) -> usize {
        ((self.tile_size as f64 * (1.0 - self.overlap_fraction)).floor() as usize).max(1)
    }
}

fn axis_offsets(extent: usize, tile: usize, stride: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (0..).map(|i| i * stride).take_while(|&p| p + tile < extent).collect();
    let last = extent - tile;
    if out.last() != Some(&last) {
        out.push(last);
    }
    out
}

/// Regular grid of square tiles; the last row and column are shifted inward
/// so every tile lies inside the image.
pub fn tile(height: usize, width: usize, config: &TilingConfig) -> Result<Vec<Window>, ProposerError> {
    config.validate()?;
    let t = config.tile_size;
    if height < t || width < t {
        return Err(ProposerError::ImageTooSmall { height, width, tile: t });
    }
    let stride = config.stride();
    let rows = axis_offsets(height, t, stride);
    let cols = axis_offsets(width, t, stride);
    Ok(rows.iter().flat_map(|&r| cols.iter().map(move |&c| Window::new(r, c, t, t))).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProposerConfig {
    pub tiling: TilingConfig,
    pub climb: ClimbConfig,
    pub postproc: PostprocConfig,
    /// Douglas-Peucker tolerance for polygons, in pixels (0 keeps every corner).
    pub polygon_tolerance: f64,
}

impl Default for ProposerConfig {
    fn default() -> Self {
        Self { tiling: TilingConfig::default(), climb: ClimbConfig::default(), postproc: PostprocConfig::default(), polygon_tolerance: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceProposal {
    pub proposal_id: String,
    pub image_id: String,
    pub defect_class: DefectClass,
    pub mask: Rle,
    pub polygon: Polygon,
    /// Largest normalized map value inside the mask.
    pub score: f64,
    pub area: usize,
    pub bbox: Window,
    /// `[row, col]` mean of the mask pixels.
    pub centroid: [f64; 2],
    /// Settings that produced this proposal.
    pub generator: ProposerConfig,
}

/// Map values a tile contributes to the merge.
pub fn tile_values(
    model: &UNetClassifier<f32>,
    image: &Raster,
    window: Window,
    config: &ProposerConfig,
) -> Result<Array2<f64>, ProposerError> {
    let crop = image.crop(window).map_err(|e| ProposerError::Config(e.to_string()))?;
    if config.tiling.prefilter {
        let p = predict(model, &crop).map_err(|e| ProposerError::Config(e.to_string()))?;
        if p < config.tiling.prefilter_threshold {
            return Ok(Array2::zeros((window.height, window.width)));
        }
    }
    let trace = advcam(model, &crop.to_batch::<f32>(), 0, &config.climb)?;
    let agg = trace.aggregate;
    Ok(match config.tiling.scale {
        TileScale::Global => agg.values.mapv(|v| v * agg.scale),
        TileScale::PerTile => agg.values,
    })
}

/// Pixelwise maximum of tile values placed at their windows.
pub fn merge_max(height: usize, width: usize, tiles: &[(Window, Array2<f64>)]) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros((height, width));
    for (w, v) in tiles {
        let mut view = out.slice_mut(s![w.row0..w.row_end(), w.col0..w.col_end()]);
        view.zip_mut_with(v, |o, &t| *o = o.max(t));
    }
    out
}

/// Normalized full-image map of one class.
pub fn class_map(model: &UNetClassifier<f32>, image: &Raster, class: &DefectClass, config: &ProposerConfig) -> Result<AttributionMap, ProposerError> {
    let windows = tile(image.height(), image.width(), &config.tiling)?;
    let run = || -> Vec<(Window, Result<Array2<f64>, ProposerError>)> {
        windows.par_iter().map(|&w| (w, tile_values(model, image, w, config))).collect()
    };
    let results = if config.tiling.workers > 0 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.tiling.workers)
            .build()
            .map_err(|e| ProposerError::Config(e.to_string()))?;
        pool.install(run)
    } else {
        run()
    };
    let mut tiles = Vec::with_capacity(results.len());
    let mut failed = Vec::new();
    for (w, r) in results {
        match r {
            Ok(v) => tiles.push((w, v)),
            Err(e) => failed.push((w, e.to_string())),
        }
    }
    if !failed.is_empty() {
        return Err(ProposerError::TilesFailed { class: class.to_string(), failed });
    }
    let merged = merge_max(image.height(), image.width(), &tiles);
    Ok(normalize(&AttributionMap::raw(merged, 0, Generator::AdvCam)))
}

/// Everything computed for one class of one image.
#[derive(Clone, Debug)]
pub struct ClassProposals {
    pub map: AttributionMap,
    pub stages: PostprocStages,
    pub proposals: Vec<InstanceProposal>,
}

impl ClassProposals {
    /// Components of the thresholded map before closure and area filtering.
    pub fn candidate_count(&self, config: &PostprocConfig) -> usize {
        components(&self.stages.binary, config.connectivity).len()
    }
}

pub fn propose_class(
    model: &UNetClassifier<f32>,
    image_id: &str,
    image: &Raster,
    class: &DefectClass,
    config: &ProposerConfig,
) -> Result<ClassProposals, ProposerError> {
    let map = class_map(model, image, class, config)?.with_image_ref(image_id);
    let stages = postprocess_stages(&map, &config.postproc)?;
    let (h, w) = (image.height(), image.width());
    let mut proposals: Vec<InstanceProposal> = stages
        .kept
        .components
        .iter()
        .map(|comp| {
            let mask = comp.to_mask(h, w);
            let polygon = Polygon::trace(&mask, config.postproc.connectivity)
                .expect("kept components are nonempty")
                .simplify(config.polygon_tolerance);
            let score = comp.pixels.iter().map(|p| map.values[[p.row, p.col]]).fold(0.0, f64::max);
            InstanceProposal {
                proposal_id: String::new(),
                image_id: image_id.to_string(),
                defect_class: class.clone(),
                mask: Rle::encode(&mask),
                polygon,
                score,
                area: comp.area(),
                bbox: comp.bbox,
                centroid: [comp.centroid.0, comp.centroid.1],
                generator: config.clone(),
            }
        })
        .collect();
    proposals.sort_by_key(|p| (p.bbox.row0, p.bbox.col0));
    for (i, p) in proposals.iter_mut().enumerate() {
        p.proposal_id = format!("{image_id}/{class}/{i:04}");
    }
    Ok(ClassProposals { map, stages, proposals })
}

/// Proposals for every requested class, ordered by (class, box row, box col).
pub fn propose(
    image_id: &str,
    image: &Raster,
    classes: &[DefectClass],
    models: &BTreeMap<DefectClass, UNetClassifier<f32>>,
    config: &ProposerConfig,
) -> Result<Vec<InstanceProposal>, ProposerError> {
    let mut out = Vec::new();
    let mut sorted: Vec<&DefectClass> = classes.iter().collect();
    sorted.sort();
    for class in sorted {
        let model = models.get(class).ok_or_else(|| ProposerError::MissingCheckpoint(class.to_string()))?;
        out.extend(propose_class(model, image_id, image, class, config)?.proposals);
    }
    Ok(out)
}

pub fn proposals_to_json(proposals: &[InstanceProposal]) -> String {
    serde_json::to_string_pretty(proposals).expect("proposals serialize")
}

pub fn proposals_from_json(text: &str) -> Result<Vec<InstanceProposal>, serde_json::Error> {
    serde_json::from_str(text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(tile_size: usize, overlap: f64) -> TilingConfig {
        TilingConfig { tile_size, overlap_fraction: overlap, ..Default::default() }
    }

    #[test]
    fn exact_fit_is_one_tile() {
        assert_eq!(tile(320, 320, &cfg(320, 0.5)).unwrap(), vec![Window::new(0, 0, 320, 320)]);
    }

    #[test]
    fn wide_image_offsets() {
        // stride 160: 0, 160, then 320 is the last in-bounds start
        let cols: Vec<usize> = tile(320, 640, &cfg(320, 0.5)).unwrap().iter().map(|w| w.col0).collect();
        assert_eq!(cols, vec![0, 160, 320]);
        let cols: Vec<usize> = tile(320, 700, &cfg(320, 0.5)).unwrap().iter().map(|w| w.col0).collect();
        assert_eq!(cols, vec![0, 160, 320, 380]);
    }

    #[test]
    fn small_image_and_bad_overlap_are_errors() {
        assert!(matches!(tile(100, 400, &cfg(320, 0.5)), Err(ProposerError::ImageTooSmall { .. })));
        assert!(matches!(tile(400, 400, &cfg(320, 0.95)), Err(ProposerError::Config(_))));
    }

    #[test]
    fn merge_takes_pixelwise_max() {
        let a = (Window::new(0, 0, 2, 2), Array2::from_elem((2, 2), 1.0));
        let b = (Window::new(1, 1, 2, 2), Array2::from_elem((2, 2), 3.0));
        let m = merge_max(3, 3, &[a, b]);
        assert_eq!(m[[0, 0]], 1.0);
        assert_eq!(m[[1, 1]], 3.0);
        assert_eq!(m[[0, 2]], 0.0);
    }
}
