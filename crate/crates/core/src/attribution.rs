//! Gradient-weighted class activation maps from the last decoder layer.

use std::path::Path;

use ndarray::{Array2, Array4, ArrayView3, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{ForwardTrace, UNetClassifier};
use crate::nn::{Mode, Scalar};

#[derive(Debug, Error)]
pub enum AttributionError {
    #[error("class index {index} out of range for a {classes}-logit model")]
    UnknownClass { index: usize, classes: usize },
    #[error("non-finite gradient of the class logit")]
    NonFinite,
    #[error("expected a single-image batch, got {0}")]
    Batch(usize),
    #[error("cannot write debug map {path}: {reason}")]
    Dump { path: String, reason: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    Raw,
    UnitMax,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Generator {
    GradCam,
    AdvCam,
}

/// Nonnegative relevance per pixel for one class.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributionMap {
    pub values: Array2<f64>,
    pub normalization: Normalization,
    pub class_id: usize,
    pub image_ref: Option<String>,
    pub generator: Generator,
    /// Factor the values were divided by to reach the current normalization
    /// (1 for raw maps).
    pub scale: f64,
    /// Set when normalizing an identically zero map.
    pub degenerate: bool,
}

impl AttributionMap {
    pub fn raw(values: Array2<f64>, class_id: usize, generator: Generator) -> Self {
        Self { values, normalization: Normalization::Raw, class_id, image_ref: None, generator, scale: 1.0, degenerate: false }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    pub fn with_image_ref(mut self, image_ref: impl Into<String>) -> Self {
        self.image_ref = Some(image_ref.into());
        self
    }
}

/// What attribution and climbing need from a differentiable classifier.
///
/// Implementations evaluate a single forward pass into a trace that later
/// backward calls read, so no state lives on the model itself.
pub trait CamModel<T: Scalar> {
    type Trace;

    fn num_classes(&self) -> usize;
    fn run(&self, x: &Array4<T>) -> Self::Trace;
    /// Last feature maps `(N, C, h, w)`.
    fn features<'t>(&self, trace: &'t Self::Trace) -> &'t Array4<T>;
    fn logits<'t>(&self, trace: &'t Self::Trace) -> &'t Array2<T>;
    /// Pulls logit gradients back to the feature maps.
    fn features_grad(&self, trace: &Self::Trace, dlogits: &Array2<T>) -> Array4<T>;
    /// Pulls feature-map gradients back to the input.
    fn input_grad(&self, trace: &Self::Trace, dfeatures: &Array4<T>) -> Array4<T>;
}

impl<T: Scalar> CamModel<T> for UNetClassifier<T> {
    type Trace = ForwardTrace<T>;

    fn num_classes(&self) -> usize {
        self.config().num_classes
    }

    fn run(&self, x: &Array4<T>) -> ForwardTrace<T> {
        self.forward(x, Mode::Eval)
    }

    fn features<'t>(&self, trace: &'t ForwardTrace<T>) -> &'t Array4<T> {
        trace.features()
    }

    fn logits<'t>(&self, trace: &'t ForwardTrace<T>) -> &'t Array2<T> {
        trace.logits()
    }

    fn features_grad(&self, trace: &ForwardTrace<T>, dlogits: &Array2<T>) -> Array4<T> {
        self.head_backward(trace, dlogits, None)
    }

    fn input_grad(&self, trace: &ForwardTrace<T>, dfeatures: &Array4<T>) -> Array4<T> {
        self.backward_features(trace, dfeatures, None)
    }
}

/// One evaluated forward pass with the class-logit gradient at the features.
pub(crate) struct CamPass<Tr> {
    pub trace: Tr,
    /// Channel weights: spatial means of the feature gradient.
    pub alpha: Vec<f64>,
    /// `Σ_k alpha_k F_k` before rectification, at feature resolution.
    pub pre: Array2<f64>,
}

pub(crate) fn one_hot<T: Scalar>(classes: usize, class_id: usize) -> Array2<T> {
    let mut d = Array2::zeros((1, classes));
    d[[0, class_id]] = T::one();
    d
}

pub(crate) fn check_class(classes: usize, class_id: usize) -> Result<(), AttributionError> {
    if class_id >= classes {
        return Err(AttributionError::UnknownClass { index: class_id, classes });
    }
    Ok(())
}

pub(crate) fn cam_pass<T: Scalar, M: CamModel<T>>(
    model: &M,
    x: &Array4<T>,
    class_id: usize,
) -> Result<CamPass<M::Trace>, AttributionError> {
    check_class(model.num_classes(), class_id)?;
    if x.dim().0 != 1 {
        return Err(AttributionError::Batch(x.dim().0));
    }
    let trace = model.run(x);
    let dfeat = model.features_grad(&trace, &one_hot(model.num_classes(), class_id));
    if dfeat.iter().any(|v| !v.is_finite()) {
        return Err(AttributionError::NonFinite);
    }
    let alpha = channel_weights(dfeat.index_axis(Axis(0), 0));
    let pre = weighted_sum(model.features(&trace).index_axis(Axis(0), 0), &alpha);
    Ok(CamPass { trace, alpha, pre })
}

/// Spatial mean of each channel of a gradient field `(C, h, w)`.
pub fn channel_weights<T: Scalar>(grad: ArrayView3<T>) -> Vec<f64> {
    let n = (grad.dim().1 * grad.dim().2) as f64;
    grad.outer_iter().map(|ch| ch.iter().map(|&v| v.to_f64()).sum::<f64>() / n).collect()
}

/// `Σ_k alpha_k F_k` over the channels of `(C, h, w)` features.
pub fn weighted_sum<T: Scalar>(features: ArrayView3<T>, alpha: &[f64]) -> Array2<f64> {
    let (_, h, w) = features.dim();
    let mut out = Array2::<f64>::zeros((h, w));
    for (ch, &a) in features.outer_iter().zip(alpha) {
        out.zip_mut_with(&ch, |o, &f| *o += a * f.to_f64());
    }
    out
}

/// `max(0, v)` that never yields negative zero.
pub fn rectify(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

/// Nearest-neighbour resize with the same index rule as the decoder.
pub fn resize_map(map: &Array2<f64>, height: usize, width: usize) -> Array2<f64> {
    let (h, w) = map.dim();
    if (h, w) == (height, width) {
        return map.clone();
    }
    Array2::from_shape_fn((height, width), |(r, c)| map[[r * h / height, c * w / width]])
}

/// Raw Grad-CAM of `class_id` for a single-image batch, at input resolution.
pub fn gradcam<T: Scalar, M: CamModel<T>>(model: &M, x: &Array4<T>, class_id: usize) -> Result<AttributionMap, AttributionError> {
    let pass = cam_pass(model, x, class_id)?;
    let (_, _, h, w) = x.dim();
    let values = resize_map(&pass.pre.mapv(rectify), h, w);
    Ok(AttributionMap::raw(values, class_id, Generator::GradCam))
}

/// Divides by the maximum. An identically zero map stays zero and is flagged.
pub fn normalize(map: &AttributionMap) -> AttributionMap {
    let max = map.max();
    let mut out = map.clone();
    out.normalization = Normalization::UnitMax;
    if max > 0.0 {
        out.values.mapv_inplace(|v| v / max);
        out.scale = map.scale * max;
        out.degenerate = false;
    } else {
        out.degenerate = true;
    }
    out
}

#[derive(Serialize)]
struct DumpSidecar<'a> {
    class_id: usize,
    image_ref: Option<&'a str>,
    generator: Generator,
    raw_min: f64,
    raw_max: f64,
    degenerate: bool,
}

/// Writes the unit-max version of `map` as a 16-bit grayscale PNG and a JSON
/// sidecar next to it (same stem, `.json`) with the raw value range.
pub fn write_debug_png(map: &AttributionMap, path: &Path) -> Result<(), AttributionError> {
    let err = |reason: String| AttributionError::Dump { path: path.display().to_string(), reason };
    let norm = if map.normalization == Normalization::UnitMax { map.clone() } else { normalize(map) };
    let (h, w) = norm.dims();
    let img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_fn(w as u32, h as u32, |c, r| {
        image::Luma([(norm.values[[r as usize, c as usize]].clamp(0.0, 1.0) * 65535.0).round() as u16])
    });
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| err(e.to_string()))?;
    let min = norm.values.iter().copied().fold(f64::INFINITY, f64::min);
    let sidecar = DumpSidecar {
        class_id: map.class_id,
        image_ref: map.image_ref.as_deref(),
        generator: map.generator,
        raw_min: if min.is_finite() { min * norm.scale } else { 0.0 },
        raw_max: norm.max() * norm.scale,
        degenerate: norm.degenerate,
    };
    let json = serde_json::to_string_pretty(&sidecar).map_err(|e| err(e.to_string()))?;
    std::fs::write(path.with_extension("json"), json).map_err(|e| err(e.to_string()))
}
