//! Anti-adversarial climbing: push the input along the gradient of the class
//! logit and accumulate the Grad-CAM of every iterate.

use std::path::Path;

use ndarray::{Array2, Array4, Axis, Zip};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attribution::{
    cam_pass, normalize, rectify, resize_map, write_debug_png, AttributionError, AttributionMap, CamModel, CamPass,
    Generator,
};
use crate::nn::Scalar;

#[derive(Debug, Error)]
pub enum ClimbError {
    #[error(transparent)]
    Attribution(#[from] AttributionError),
    #[error("non-finite input gradient at iteration {iteration}")]
    NonFinite { iteration: usize },
    #[error("invalid climb config: {0}")]
    Config(String),
    #[error("cannot write climb trace: {0}")]
    Io(#[from] std::io::Error),
}

/// How the input gradient is turned into a step before multiplying by `xi`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepScaling {
    /// Use the gradient as is.
    Raw,
    /// Divide by the largest absolute gradient entry, so `xi` bounds the
    /// per-pixel change.
    #[default]
    MaxAbs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Ascend,
    Descend,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClimbConfig {
    pub xi: f64,
    pub iterations: usize,
    pub saliency_mask_threshold: f64,
    /// Weight of the mean absolute change of the map inside the salient
    /// region, relative to the class logit.
    pub regularization_weight: f64,
    /// Subtract the other class logits from the objective (no effect on
    /// single-logit models).
    pub restrict_other_logits: bool,
    /// Damp the gradient and penalize map growth where the accumulated map
    /// already exceeds `saliency_mask_threshold`.
    pub suppress_salient: bool,
    pub step_scaling: StepScaling,
}

impl Default for ClimbConfig {
    fn default() -> Self {
        Self {
            xi: 8.0 / 255.0,
            iterations: 2,
            saliency_mask_threshold: 0.5,
            regularization_weight: 7.0,
            restrict_other_logits: true,
            suppress_salient: true,
            step_scaling: StepScaling::MaxAbs,
        }
    }
}

impl ClimbConfig {
    /// Plain gradient step on the class logit.
    pub fn unregularized(xi: f64) -> Self {
        Self { xi, suppress_salient: false, regularization_weight: 0.0, step_scaling: StepScaling::Raw, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), ClimbError> {
        let bad = |m: String| Err(ClimbError::Config(m));
        if !(self.xi.is_finite() && self.xi >= 0.0) {
            return bad(format!("xi must be finite and nonnegative, got {}", self.xi));
        }
        if !(self.saliency_mask_threshold > 0.0 && self.saliency_mask_threshold < 1.0) {
            return bad(format!("saliency_mask_threshold must lie in (0, 1), got {}", self.saliency_mask_threshold));
        }
        if !(self.regularization_weight.is_finite() && self.regularization_weight >= 0.0) {
            return bad(format!("regularization_weight must be finite and nonnegative, got {}", self.regularization_weight));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub logit: f64,
    /// Distance of the iterate from the original input.
    pub perturbation_l2: f64,
    pub perturbation_linf: f64,
    /// Fraction of pixel values the range clamp changed in the step that
    /// produced this iterate.
    pub saturated_fraction: f64,
}

#[derive(Clone, Debug)]
pub struct ClimbTrace {
    pub class_id: usize,
    pub config: ClimbConfig,
    /// `iterations + 1` entries; entry 0 is the unperturbed input.
    pub records: Vec<IterationRecord>,
    /// Raw rectified map of each iterate, at input resolution.
    pub maps: Vec<AttributionMap>,
    /// Normalized sum of `maps`.
    pub aggregate: AttributionMap,
    pub warnings: Vec<String>,
}

#[derive(Serialize)]
struct TraceExport<'a> {
    class_id: usize,
    config: &'a ClimbConfig,
    iterations: &'a [IterationRecord],
    warnings: &'a [String],
}

impl ClimbTrace {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&TraceExport {
            class_id: self.class_id,
            config: &self.config,
            iterations: &self.records,
            warnings: &self.warnings,
        })
        .expect("trace serializes")
    }

    /// Writes `trace.json` plus `iter_<t>.png` and `aggregate.png` (with sidecars) into `dir`.
    pub fn write_debug(&self, dir: &Path) -> Result<(), ClimbError> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("trace.json"), self.to_json())?;
        for (t, m) in self.maps.iter().enumerate() {
            write_debug_png(m, &dir.join(format!("iter_{t}.png")))?;
        }
        write_debug_png(&self.aggregate, &dir.join("aggregate.png"))?;
        Ok(())
    }
}

const SATURATION_WARNING: f64 = 0.9;

struct Regularizer {
    cam0: Array2<f64>,
    /// Normalized accumulated map at feature resolution.
    salient: Array2<f64>,
}

fn logit_gradient_target<T: Scalar>(classes: usize, class_id: usize, restrict_others: bool) -> Array2<T> {
    Array2::from_shape_fn((1, classes), |(_, k)| {
        if k == class_id {
            T::one()
        } else if restrict_others {
            -T::one()
        } else {
            T::zero()
        }
    })
}

/// Gradient of the climbing objective with respect to the input, after the
/// saliency damping, for the iterate evaluated in `pass`.
fn objective_gradient<T: Scalar, M: CamModel<T>>(
    model: &M,
    pass: &CamPass<M::Trace>,
    class_id: usize,
    config: &ClimbConfig,
    reg: Option<&Regularizer>,
    iteration: usize,
) -> Result<Array4<T>, ClimbError> {
    let dlogits = logit_gradient_target(model.num_classes(), class_id, config.restrict_other_logits);
    let mut dfeat = model.features_grad(&pass.trace, &dlogits);
    let (_, _, h, w) = model.features(&pass.trace).dim();
    if let Some(reg) = reg.filter(|_| config.regularization_weight > 0.0) {
        // d/dF_k of -lambda * mean |mask * (relu(pre) - cam0)| with alpha held fixed
        let tau = config.saliency_mask_threshold;
        let lambda = config.regularization_weight / (h * w) as f64;
        let mut coeff = Array2::<f64>::zeros((h, w));
        Zip::from(&mut coeff).and(&pass.pre).and(&reg.cam0).and(&reg.salient).for_each(|g, &pre, &c0, &s| {
            if s > tau && pre > 0.0 {
                let diff = pre - c0;
                if diff != 0.0 {
                    *g = -lambda * diff.signum();
                }
            }
        });
        let mut sample = dfeat.index_axis_mut(Axis(0), 0);
        for (mut ch, &a) in sample.outer_iter_mut().zip(&pass.alpha) {
            ch.zip_mut_with(&coeff, |d, &g| *d += T::from_f64(g * a));
        }
    }
    let mut dx = model.input_grad(&pass.trace, &dfeat);
    if dx.iter().any(|v| !v.is_finite()) {
        return Err(ClimbError::NonFinite { iteration });
    }
    if let Some(reg) = reg {
        let (_, _, ih, iw) = dx.dim();
        let damp = resize_map(&reg.salient, ih, iw)
            .mapv(|s| if s > config.saliency_mask_threshold { 1.0 - s } else { 1.0 });
        for mut plane in dx.index_axis_mut(Axis(0), 0).outer_iter_mut() {
            plane.zip_mut_with(&damp, |g, &d| *g *= T::from_f64(d));
        }
    }
    Ok(dx)
}

/// Applies one step and clamps to `[0, 1]`. Returns the new iterate and the
/// fraction of values the clamp changed.
fn apply_step<T: Scalar>(x: &Array4<T>, grad: &Array4<T>, config: &ClimbConfig, direction: Direction) -> (Array4<T>, f64) {
    let scale = match config.step_scaling {
        StepScaling::Raw => 1.0,
        StepScaling::MaxAbs => {
            let m = grad.iter().fold(0.0f64, |m, &v| m.max(v.to_f64().abs()));
            if m > 0.0 {
                1.0 / m
            } else {
                0.0
            }
        }
    };
    let signed = match direction {
        Direction::Ascend => config.xi * scale,
        Direction::Descend => -config.xi * scale,
    };
    let step = T::from_f64(signed);
    let mut clamped = 0usize;
    let next = Zip::from(x).and(grad).map_collect(|&v, &g| {
        let y = v + step * g;
        if y < T::zero() {
            clamped += 1;
            T::zero()
        } else if y > T::one() {
            clamped += 1;
            T::one()
        } else {
            y
        }
    });
    (next, clamped as f64 / x.len().max(1) as f64)
}

/// One climbing step from `x`, using the map of `x` itself as the salient
/// region. With `xi = 0` the result equals `x`.
pub fn climb_step<T: Scalar, M: CamModel<T>>(
    model: &M,
    x: &Array4<T>,
    class_id: usize,
    config: &ClimbConfig,
) -> Result<Array4<T>, ClimbError> {
    climb_step_directed(model, x, class_id, config, Direction::Ascend)
}

/// [`climb_step`] with an explicit direction; `Descend` is the ordinary
/// adversarial step.
pub fn climb_step_directed<T: Scalar, M: CamModel<T>>(
    model: &M,
    x: &Array4<T>,
    class_id: usize,
    config: &ClimbConfig,
    direction: Direction,
) -> Result<Array4<T>, ClimbError> {
    config.validate()?;
    let pass = cam_pass(model, x, class_id)?;
    let reg = config.suppress_salient.then(|| {
        let cam0 = pass.pre.mapv(rectify);
        let salient = normalize(&AttributionMap::raw(cam0.clone(), class_id, Generator::GradCam)).values;
        Regularizer { cam0, salient }
    });
    let grad = objective_gradient(model, &pass, class_id, config, reg.as_ref(), 1)?;
    Ok(apply_step(x, &grad, config, direction).0)
}

fn record<T: Scalar>(iteration: usize, logit: f64, x: &Array4<T>, x0: &Array4<T>, saturated: f64) -> IterationRecord {
    let (mut l2, mut linf) = (0.0f64, 0.0f64);
    Zip::from(x).and(x0).for_each(|&a, &b| {
        let d = (a - b).to_f64().abs();
        l2 += d * d;
        linf = linf.max(d);
    });
    IterationRecord { iteration, logit, perturbation_l2: l2.sqrt(), perturbation_linf: linf, saturated_fraction: saturated }
}

/// Runs `config.iterations` climbing steps from `x` (a single-image batch)
/// and aggregates the rectified Grad-CAM of every iterate, the input included.
pub fn advcam<T: Scalar, M: CamModel<T>>(
    model: &M,
    x: &Array4<T>,
    class_id: usize,
    config: &ClimbConfig,
) -> Result<ClimbTrace, ClimbError> {
    config.validate()?;
    let (_, _, h, w) = x.dim();
    let mut pass = cam_pass(model, x, class_id)?;
    let cam0 = pass.pre.mapv(rectify);
    let mut acc = cam0.clone();
    let logit = |p: &CamPass<M::Trace>| model.logits(&p.trace)[[0, class_id]].to_f64();
    let mut records = vec![record(0, logit(&pass), x, x, 0.0)];
    let mut maps = vec![AttributionMap::raw(resize_map(&cam0, h, w), class_id, Generator::AdvCam)];
    let mut warnings = Vec::new();
    let mut xt = x.clone();
    for t in 1..=config.iterations {
        let reg = config.suppress_salient.then(|| Regularizer {
            cam0: cam0.clone(),
            salient: normalize(&AttributionMap::raw(acc.clone(), class_id, Generator::AdvCam)).values,
        });
        let grad = objective_gradient(model, &pass, class_id, config, reg.as_ref(), t)?;
        let (next, saturated) = apply_step(&xt, &grad, config, Direction::Ascend);
        if saturated > SATURATION_WARNING {
            warnings.push(format!("iteration {t}: range clamp changed {:.1}% of pixel values", saturated * 100.0));
        }
        xt = next;
        pass = cam_pass(model, &xt, class_id)?;
        let cam = pass.pre.mapv(rectify);
        acc += &cam;
        records.push(record(t, logit(&pass), &xt, x, saturated));
        maps.push(AttributionMap::raw(resize_map(&cam, h, w), class_id, Generator::AdvCam));
    }
    let aggregate = normalize(&AttributionMap::raw(resize_map(&acc, h, w), class_id, Generator::AdvCam));
    Ok(ClimbTrace { class_id, config: config.clone(), records, maps, aggregate, warnings })
}
