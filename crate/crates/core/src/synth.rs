//! Synthetic inspection scenes with exact ground truth: dark curvilinear
//! cracks, grey spalling blobs and orange rust blobs on a concrete-like
//! background.

use std::f64::consts::PI;

use chrono::{DateTime, Utc};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classes::DefectClass;
use crate::geometry::Pixel;
use crate::mask::BinaryMask;
use crate::raster::Raster;
use crate::rle::Rle;
use crate::weakset::{LabelSource, Polarity, WeakLabel};

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("invalid scene parameters: {0}")]
    Params(String),
    #[error("could not place instance {index} without overlap after {tries} tries")]
    Crowded { index: usize, tries: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneParams {
    pub height: usize,
    pub width: usize,
    pub cracks: usize,
    pub spalls: usize,
    pub rust: usize,
    /// Stroke width range in pixels.
    pub crack_width: [f64; 2],
    pub crack_segments: [usize; 2],
    pub crack_segment_length: [f64; 2],
    pub blob_radius: [f64; 2],
    /// Clean points to emit as negative clicks.
    pub negatives: usize,
    /// Side of the square around a negative click that must be free of defects.
    pub negative_clearance: usize,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            height: 128,
            width: 128,
            cracks: 2,
            spalls: 1,
            rust: 1,
            crack_width: [1.0, 4.0],
            crack_segments: [2, 4],
            crack_segment_length: [15.0, 35.0],
            blob_radius: [7.0, 13.0],
            negatives: 2,
            negative_clearance: 32,
        }
    }
}

impl SceneParams {
    pub fn blank(height: usize, width: usize, negatives: usize) -> Self {
        Self { height, width, cracks: 0, spalls: 0, rust: 0, negatives, ..Self::default() }
    }

    pub fn instance_count(&self) -> usize {
        self.cracks + self.spalls + self.rust
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::Params(m.to_string()));
        if self.height < 16 || self.width < 16 {
            return bad("scene must be at least 16x16");
        }
        if self.instance_count() == 0 && self.negatives == 0 {
            return bad("scene requests no instances and no negative clicks");
        }
        let ranges = [self.crack_width, self.crack_segment_length, self.blob_radius];
        if ranges.iter().any(|[lo, hi]| !(lo.is_finite() && hi.is_finite() && *lo > 0.0 && lo <= hi)) {
            return bad("ranges must be positive and ordered");
        }
        if self.crack_segments[0] == 0 || self.crack_segments[0] > self.crack_segments[1] {
            return bad("crack_segments must be a positive ordered range");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GtInstance {
    pub class: DefectClass,
    pub mask: BinaryMask,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtRecord {
    pub defect_class: DefectClass,
    pub mask: Rle,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub image: Raster,
    pub instances: Vec<GtInstance>,
    /// One click per instance, at the mask pixel nearest its centroid.
    pub positive_clicks: Vec<Pixel>,
    pub negative_clicks: Vec<Pixel>,
    pub params: SceneParams,
    pub seed: u64,
}

const PLACEMENT_TRIES: usize = 200;

fn uniform(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dr, dc) = (b.0 - a.0, b.1 - a.1);
    let len2 = dr * dr + dc * dc;
    let t = if len2 == 0.0 { 0.0 } else { (((p.0 - a.0) * dr + (p.1 - a.1) * dc) / len2).clamp(0.0, 1.0) };
    ((p.0 - a.0 - t * dr).powi(2) + (p.1 - a.1 - t * dc).powi(2)).sqrt()
}

/// Per-pixel coverage in `[0, 1]` for one instance shape.
struct Shape {
    coverage: ndarray::Array2<f64>,
}

impl Shape {
    fn mask(&self) -> BinaryMask {
        BinaryMask::from_array(self.coverage.mapv(|c| c >= 0.5))
    }
}

fn crack_shape(p: &SceneParams, rng: &mut ChaCha8Rng) -> Shape {
    let (h, w) = (p.height as f64, p.width as f64);
    let margin = 3.0;
    let mut pts = vec![(rng.random_range(margin..h - margin), rng.random_range(margin..w - margin))];
    let mut heading = rng.random_range(0.0..2.0 * PI);
    let segs = rng.random_range(p.crack_segments[0]..=p.crack_segments[1]);
    for _ in 0..segs {
        heading += rng.random_range(-0.7..0.7);
        let len = uniform(rng, p.crack_segment_length);
        let &(r, c) = pts.last().expect("starts with one point");
        let next = ((r + len * heading.sin()).clamp(margin, h - margin), (c + len * heading.cos()).clamp(margin, w - margin));
        pts.push(next);
    }
    let width = uniform(rng, p.crack_width);
    let coverage = ndarray::Array2::from_shape_fn((p.height, p.width), |(r, c)| {
        let q = (r as f64 + 0.5, c as f64 + 0.5);
        let d = pts.windows(2).map(|s| segment_distance(q, s[0], s[1])).fold(f64::INFINITY, f64::min);
        (width / 2.0 + 0.5 - d).clamp(0.0, 1.0)
    });
    Shape { coverage }
}

fn blob_shape(p: &SceneParams, rng: &mut ChaCha8Rng) -> Shape {
    let r0 = uniform(rng, p.blob_radius);
    let margin = r0 * 1.5;
    let (h, w) = (p.height as f64, p.width as f64);
    let center = (
        rng.random_range(margin.min(h / 2.0)..(h - margin).max(h / 2.0 + 1e-9)),
        rng.random_range(margin.min(w / 2.0)..(w - margin).max(w / 2.0 + 1e-9)),
    );
    let harmonics: Vec<(f64, f64, f64)> =
        (2..=4).map(|k| (k as f64, rng.random_range(0.0..0.18), rng.random_range(0.0..2.0 * PI))).collect();
    let coverage = ndarray::Array2::from_shape_fn((p.height, p.width), |(r, c)| {
        let (dr, dc) = (r as f64 + 0.5 - center.0, c as f64 + 0.5 - center.1);
        let theta = dr.atan2(dc);
        let radius = r0 * (1.0 + harmonics.iter().map(|(k, a, ph)| a * (k * theta + ph).cos()).sum::<f64>());
        (radius + 0.5 - (dr * dr + dc * dc).sqrt()).clamp(0.0, 1.0)
    });
    Shape { coverage }
}

fn grown(mask: &BinaryMask, radius: isize) -> BinaryMask {
    let (h, w) = mask.dims();
    BinaryMask::from_fn(h, w, |r, c| {
        (-radius..=radius).any(|dr| (-radius..=radius).any(|dc| mask.get_signed(r as isize + dr, c as isize + dc)))
    })
}

fn nearest_to_centroid(mask: &BinaryMask) -> Pixel {
    let (cr, cc) = mask.centroid().expect("instances are nonempty");
    mask.pixels()
        .min_by(|a, b| {
            let da = (a.row as f64 - cr).powi(2) + (a.col as f64 - cc).powi(2);
            let db = (b.row as f64 - cr).powi(2) + (b.col as f64 - cc).powi(2);
            da.total_cmp(&db)
        })
        .expect("instances are nonempty")
}

/// Square of side `clearance` around `p` is free of `occupied` pixels.
fn is_clear(occupied: &BinaryMask, p: Pixel, clearance: usize) -> bool {
    let half = (clearance / 2) as isize;
    (-half..=half).all(|dr| (-half..=half).all(|dc| !occupied.get_signed(p.row as isize + dr, p.col as isize + dc)))
}

pub fn generate_synthetic_scene(params: &SceneParams, seed: u64) -> Result<SyntheticScene, SynthError> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (params.height, params.width);

    // background: grey with a little tint, smooth undulation and grain
    let base = rng.random_range(0.5..0.65);
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            (rng.random_range(0.02..0.12), rng.random_range(0.02..0.12), rng.random_range(0.0..2.0 * PI), rng.random_range(0.01..0.03))
        })
        .collect();
    let grain = Normal::new(0.0, 0.02).expect("valid sigma");
    let tint = [1.0, 0.98, 0.94];
    let mut img = Array3::<f64>::zeros((3, h, w));
    for r in 0..h {
        for c in 0..w {
            let undulation: f64 = waves.iter().map(|(fr, fc, ph, a)| a * (fr * r as f64 + fc * c as f64 + ph).sin()).sum();
            let v = base + undulation + grain.sample(&mut rng);
            for ch in 0..3 {
                img[[ch, r, c]] = v * tint[ch];
            }
        }
    }

    let kinds: Vec<&str> = std::iter::repeat_n("crack", params.cracks)
        .chain(std::iter::repeat_n("spalling", params.spalls))
        .chain(std::iter::repeat_n("rust", params.rust))
        .collect();
    let mut occupied = BinaryMask::new(h, w);
    let mut instances = Vec::new();
    let texture = Normal::new(0.0, 0.05).expect("valid sigma");
    for (index, kind) in kinds.iter().enumerate() {
        let mut placed = None;
        for _ in 0..PLACEMENT_TRIES {
            let shape = if *kind == "crack" { crack_shape(params, &mut rng) } else { blob_shape(params, &mut rng) };
            let mask = shape.mask();
            if mask.is_empty() || grown(&mask, 3).intersection_count(&occupied).expect("same dims") > 0 {
                continue;
            }
            placed = Some((shape, mask));
            break;
        }
        let (shape, mask) = placed.ok_or(SynthError::Crowded { index, tries: PLACEMENT_TRIES })?;
        let darkness = rng.random_range(0.6..0.8);
        for r in 0..h {
            for c in 0..w {
                let a = shape.coverage[[r, c]];
                if a <= 0.0 {
                    continue;
                }
                let n = texture.sample(&mut rng);
                for ch in 0..3 {
                    let bg = img[[ch, r, c]];
                    let fg = match *kind {
                        "crack" => bg * (1.0 - darkness),
                        "spalling" => [0.36, 0.37, 0.40][ch] + n,
                        _ => [0.58, 0.31, 0.12][ch] * (1.0 + 2.0 * n),
                    };
                    img[[ch, r, c]] = bg * (1.0 - a) + fg * a;
                }
            }
        }
        occupied = occupied.union(&mask).expect("same dims");
        instances.push(GtInstance { class: DefectClass::new(*kind).expect("built-in name"), mask });
    }

    let positive_clicks = instances.iter().map(|i| nearest_to_centroid(&i.mask)).collect();
    let mut negative_clicks = Vec::new();
    for _ in 0..params.negatives {
        for _ in 0..PLACEMENT_TRIES {
            let p = Pixel::new(rng.random_range(0..h), rng.random_range(0..w));
            if is_clear(&occupied, p, params.negative_clearance) {
                negative_clicks.push(p);
                break;
            }
        }
    }
    let image = Raster::new(img.mapv(|v| v.clamp(0.0, 1.0) as f32)).expect("three channels");
    Ok(SyntheticScene { image, instances, positive_clicks, negative_clicks, params: params.clone(), seed })
}

impl SyntheticScene {
    /// Union of the ground-truth masks of one class.
    pub fn class_mask(&self, class: &DefectClass) -> BinaryMask {
        let (h, w) = (self.image.height(), self.image.width());
        self.instances
            .iter()
            .filter(|i| &i.class == class)
            .fold(BinaryMask::new(h, w), |acc, i| acc.union(&i.mask).expect("same dims"))
    }

    pub fn ground_truth(&self) -> Vec<GtRecord> {
        self.instances.iter().map(|i| GtRecord { defect_class: i.class.clone(), mask: Rle::encode(&i.mask) }).collect()
    }

    /// Click labels an annotator would give this scene: one positive per
    /// instance, and for every class a negative at each clean point and at
    /// the clicks of other-class instances far enough from that class.
    pub fn weak_labels(&self, image_id: &str, classes: &[DefectClass], created_at: DateTime<Utc>) -> Vec<WeakLabel> {
        let label = |id: String, point: Pixel, class: &DefectClass, polarity| WeakLabel {
            id,
            image_id: image_id.to_string(),
            point,
            defect_class: class.clone(),
            polarity,
            source: LabelSource::Manual,
            created_at,
        };
        let mut out = Vec::new();
        for (i, (inst, &p)) in self.instances.iter().zip(&self.positive_clicks).enumerate() {
            if classes.contains(&inst.class) {
                out.push(label(format!("{image_id}-p{i}"), p, &inst.class, Polarity::Positive));
            }
        }
        for class in classes {
            let own = self.class_mask(class);
            for (i, &p) in self.negative_clicks.iter().enumerate() {
                out.push(label(format!("{image_id}-n{i}-{class}"), p, class, Polarity::Negative));
            }
            for (i, (inst, &p)) in self.instances.iter().zip(&self.positive_clicks).enumerate() {
                if &inst.class != class && is_clear(&own, p, self.params.negative_clearance) {
                    out.push(label(format!("{image_id}-x{i}-{class}"), p, class, Polarity::Negative));
                }
            }
        }
        out
    }
}
