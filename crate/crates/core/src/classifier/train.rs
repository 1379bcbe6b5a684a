use std::time::Instant;

use ndarray::{Array2, Array4, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{sigmoid, CheckpointBundle, ClassifierError, UNetClassifier};
use crate::nn::{AdamW, AdamWConfig, Gradients, Mode};
use crate::raster::Raster;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    /// Wall-clock budget; training stops after the epoch that exceeds it.
    pub max_seconds: Option<f64>,
    /// Random flips and quarter turns of each crop.
    pub augment: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            learning_rate: 1e-4,
            weight_decay: 1e-2,
            max_epochs: 50,
            max_seconds: None,
            augment: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ClassifierError> {
        let bad = |m: &str| Err(ClassifierError::TrainConfig(m.to_string()));
        if self.batch_size == 0 || self.max_epochs == 0 {
            return bad("batch_size and max_epochs must be positive");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad("learning_rate must be finite and nonnegative");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight_decay must be finite and nonnegative");
        }
        if self.max_seconds.is_some_and(|s| !(s > 0.0)) {
            return bad("max_seconds must be positive");
        }
        Ok(())
    }
}

/// A crop with its pixels loaded and a binary defect label.
#[derive(Clone, Debug)]
pub struct LabeledCrop {
    pub pixels: Raster,
    pub defect: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub f_measure: f64,
}

/// Mean binary cross-entropy on raw logits and its gradient per logit.
pub fn bce_with_logits(logits: &[f64], targets: &[bool]) -> (f64, Vec<f64>) {
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let grads = logits
        .iter()
        .zip(targets)
        .map(|(&z, &t)| {
            let y = if t { 1.0 } else { 0.0 };
            loss += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
            (sigmoid(z) - y) / n
        })
        .collect();
    (loss / n, grads)
}

/// F1 score of `predicted` against `actual`; 0 when there is nothing to score.
pub fn f_measure(predicted: &[bool], actual: &[bool]) -> f64 {
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&p, &a) in predicted.iter().zip(actual) {
        match (p, a) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            _ => {}
        }
    }
    let denom = 2 * tp + fp + fneg;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

fn batch_tensor(crops: &[&LabeledCrop], rng: Option<&mut ChaCha8Rng>) -> Array4<f32> {
    let views: Vec<Raster> = match rng {
        Some(rng) => crops
            .iter()
            .map(|c| {
                let turns = rng.random_range(0..4u8);
                let flip = rng.random_bool(0.5);
                c.pixels.dihedral(turns, flip)
            })
            .collect(),
        None => crops.iter().map(|c| c.pixels.clone()).collect(),
    };
    let v: Vec<_> = views.iter().map(|r| r.data().view()).collect();
    ndarray::stack(Axis(0), &v).expect("crops share one size")
}

fn evaluate(model: &UNetClassifier<f32>, set: &[LabeledCrop], batch_size: usize) -> f64 {
    let mut predicted = Vec::with_capacity(set.len());
    for chunk in set.chunks(batch_size) {
        let refs: Vec<&LabeledCrop> = chunk.iter().collect();
        let logits = model.logits(&batch_tensor(&refs, None));
        // sigmoid(z) >= 0.5 <=> z >= 0
        predicted.extend(logits.column(0).iter().map(|&z| z >= 0.0));
    }
    let actual: Vec<bool> = set.iter().map(|c| c.defect).collect();
    f_measure(&predicted, &actual)
}

/// Trains with AdamW on binary cross-entropy and keeps the epoch with the
/// highest validation F1 (earliest epoch on ties).
pub fn train(
    mut model: UNetClassifier<f32>,
    train_set: &[LabeledCrop],
    val_set: &[LabeledCrop],
    config: &TrainConfig,
) -> Result<CheckpointBundle, ClassifierError> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(ClassifierError::EmptySet("training"));
    }
    if val_set.is_empty() {
        return Err(ClassifierError::EmptySet("validation"));
    }
    let size = model.config().input_size;
    if let Some(c) = train_set.iter().chain(val_set).find(|c| c.pixels.height() != size || c.pixels.width() != size) {
        return Err(ClassifierError::Shape(format!(
            "crop is {}x{}, model expects {size}x{size}",
            c.pixels.height(),
            c.pixels.width()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = AdamW::new(
        AdamWConfig { learning_rate: config.learning_rate, weight_decay: config.weight_decay, ..Default::default() },
        model.params(),
    );
    let started = Instant::now();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = Vec::new();
    let mut best: Option<(usize, f64, UNetClassifier<f32>)> = None;

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (batch_idx, idx) in order.chunks(config.batch_size).enumerate() {
            let crops: Vec<&LabeledCrop> = idx.iter().map(|&i| &train_set[i]).collect();
            let x = batch_tensor(&crops, config.augment.then_some(&mut rng));
            let trace = model.forward(&x, Mode::Train);
            let logits: Vec<f64> = trace.logits().column(0).iter().map(|&z| z as f64).collect();
            let targets: Vec<bool> = crops.iter().map(|c| c.defect).collect();
            let (loss, dz) = bce_with_logits(&logits, &targets);
            if !loss.is_finite() {
                return Err(ClassifierError::Diverged { epoch, batch: batch_idx, loss });
            }
            let dlogits = Array2::from_shape_vec((dz.len(), 1), dz.iter().map(|&g| g as f32).collect())
                .expect("one logit per crop");
            let mut grads = Gradients::for_store(model.params());
            model.backward(&trace, &dlogits, Some(&mut grads));
            if !grads.all_finite() {
                return Err(ClassifierError::Diverged { epoch, batch: batch_idx, loss: f64::NAN });
            }
            opt.step(model.params_mut(), &grads);
            model.update_running_stats(&trace);
            loss_sum += loss * crops.len() as f64;
        }
        let f = evaluate(&model, val_set, config.batch_size);
        let loss = loss_sum / train_set.len() as f64;
        log::info!("epoch {epoch}: loss {loss:.5}, val f-measure {f:.4}");
        log.push(EpochRecord { epoch, loss, f_measure: f });
        if best.as_ref().is_none_or(|(_, bf, _)| f > *bf) {
            best = Some((epoch, f, model.clone()));
        }
        if config.max_seconds.is_some_and(|s| started.elapsed().as_secs_f64() > s) {
            break;
        }
    }
    let (best_epoch, best_f, best_model) = best.expect("at least one epoch ran");
    Ok(CheckpointBundle::new(best_model, config.clone(), log, best_epoch, best_f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::ModelConfig;
    use ndarray::Array3;

    #[test]
    fn bce_matches_closed_form() {
        let (loss, g) = bce_with_logits(&[0.0, 2.0], &[true, false]);
        let expect = (2f64.ln() + (1.0 + 2f64.exp()).ln()) / 2.0;
        assert!((loss - expect).abs() < 1e-12);
        assert!((g[0] - (-0.25)).abs() < 1e-12);
        assert!((g[1] - sigmoid(2.0) / 2.0).abs() < 1e-12);
        // large logits stay finite
        let (l, _) = bce_with_logits(&[800.0, -800.0], &[false, true]);
        assert!((l - 800.0).abs() < 1e-9);
    }

    #[test]
    fn f_measure_cases() {
        assert_eq!(f_measure(&[true, false], &[true, false]), 1.0);
        assert_eq!(f_measure(&[false, false], &[true, true]), 0.0);
        assert!((f_measure(&[true, true, false], &[true, false, true]) - 0.5).abs() < 1e-12);
    }

    fn crop(value: f32, defect: bool) -> LabeledCrop {
        LabeledCrop { pixels: Raster::new(Array3::from_elem((3, 32, 32), value)).unwrap(), defect }
    }

    #[test]
    fn empty_sets_and_bad_shapes_are_errors() {
        let model = UNetClassifier::<f32>::new(ModelConfig::compact(32)).unwrap();
        let cfg = TrainConfig { max_epochs: 1, ..Default::default() };
        let set = vec![crop(0.1, false), crop(0.9, true)];
        assert!(matches!(train(model.clone(), &set, &[], &cfg), Err(ClassifierError::EmptySet("validation"))));
        assert!(matches!(train(model.clone(), &[], &set, &cfg), Err(ClassifierError::EmptySet("training"))));
        let odd = vec![LabeledCrop { pixels: Raster::filled(40, 40, [0.0; 3]), defect: true }];
        assert!(matches!(train(model, &odd, &set, &cfg), Err(ClassifierError::Shape(_))));
    }

    #[test]
    fn zero_learning_rate_step_leaves_parameters_unchanged() {
        let model = UNetClassifier::<f32>::new(ModelConfig::compact(32)).unwrap();
        let set = vec![crop(0.1, false), crop(0.9, true)];
        let cfg = TrainConfig { max_epochs: 1, learning_rate: 0.0, ..Default::default() };
        let bundle = train(model.clone(), &set, &set, &cfg).unwrap();
        for (id, _, kind, v) in model.params().iter() {
            if kind == crate::nn::ParamKind::Trainable {
                assert_eq!(bundle.model.params().get(id).view(), v, "{}", model.params().name(id));
            }
        }
    }

    #[test]
    fn best_checkpoint_matches_log_maximum() {
        let model = UNetClassifier::<f32>::new(ModelConfig::compact(32)).unwrap();
        let set: Vec<_> = (0..8).map(|i| crop(i as f32 / 8.0, i >= 4)).collect();
        let cfg = TrainConfig { max_epochs: 3, batch_size: 4, learning_rate: 1e-3, ..Default::default() };
        let bundle = train(model, &set, &set, &cfg).unwrap();
        let max = bundle.log.iter().map(|r| r.f_measure).fold(f64::MIN, f64::max);
        assert_eq!(bundle.meta.best_f_measure, max);
        assert_eq!(bundle.log.len(), 3);
        let first_max = bundle.log.iter().find(|r| r.f_measure == max).unwrap().epoch;
        assert_eq!(bundle.meta.best_epoch, first_max);
    }
}
