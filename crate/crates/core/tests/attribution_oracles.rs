//! Grad-CAM against its closed form under a global-average-pool linear head,
//! and backward passes against central differences.

mod common;

use camlabel_core::attribution::{gradcam, normalize, rectify, resize_map, CamModel, Normalization};
use camlabel_core::classifier::{ModelConfig, UNetClassifier};
use common::{input_gradient_error, random_input, ConvGapModel, FixedFeatures};
use ndarray::{array, Array2, Array4, Axis};
use proptest::prelude::*;

/// `(1/HW) max(0, Σ_k w_k F_k)` for `(C, h, w)` features and one weight row.
fn closed_form(features: &Array4<f64>, w: &[f64]) -> Array2<f64> {
    let (_, _, h, wd) = features.dim();
    let f = features.index_axis(Axis(0), 0);
    Array2::from_shape_fn((h, wd), |(r, c)| {
        let s: f64 = w.iter().enumerate().map(|(k, wk)| wk * f[[k, r, c]]).sum();
        s.max(0.0) / (h * wd) as f64
    })
}

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn two_channel_toy() -> FixedFeatures {
    let f0 = Array2::from_shape_fn((4, 4), |(r, c)| (r * 4 + c) as f64 / 15.0);
    let f1 = Array2::from_shape_fn((4, 4), |(r, c)| if (r + c) % 2 == 0 { 1.0 } else { -0.5 });
    let mut features = Array4::zeros((1, 2, 4, 4));
    features.index_axis_mut(Axis(1), 0).index_axis_mut(Axis(0), 0).assign(&f0);
    features.index_axis_mut(Axis(1), 1).index_axis_mut(Axis(0), 0).assign(&f1);
    FixedFeatures { features, weights: array![[1.5, -0.8], [-0.3, 2.0]], bias: vec![0.1, -0.2] }
}

#[test]
fn toy_map_matches_closed_form() {
    let model = two_channel_toy();
    let x = Array4::zeros((1, 3, 4, 4));
    for class in 0..2 {
        let w: Vec<f64> = model.weights.row(class).to_vec();
        let got = gradcam(&model, &x, class).unwrap();
        let want = closed_form(&model.features, &w);
        assert!(max_abs_diff(&got.values, &want) < 1e-6, "class {class}");
        assert!(got.values.iter().all(|&v| v >= 0.0));

        // unit-max normalization cancels the 1/HW factor, so α = w gives the same picture
        let unit = Array2::from_shape_fn((4, 4), |(r, c)| {
            rectify(w[0] * model.features[[0, 0, r, c]] + w[1] * model.features[[0, 1, r, c]])
        });
        let unit = &unit / unit.iter().cloned().fold(0.0, f64::max);
        assert!(max_abs_diff(&normalize(&got).values, &unit) < 1e-6, "class {class}");
    }
}

#[test]
fn negated_weights_give_the_complementary_region() {
    let mut model = two_channel_toy();
    let x = Array4::zeros((1, 3, 4, 4));
    let before = gradcam(&model, &x, 0).unwrap();
    model.weights.mapv_inplace(|v| -v);
    let after = gradcam(&model, &x, 0).unwrap();
    let w: Vec<f64> = model.weights.row(0).to_vec();
    assert!(max_abs_diff(&after.values, &closed_form(&model.features, &w)) < 1e-6);
    // wherever the original sum was positive the negated one is rectified away
    for (a, b) in before.values.iter().zip(&after.values) {
        assert!(*a == 0.0 || *b == 0.0);
    }
}

#[test]
fn bad_class_and_batch_are_rejected() {
    let model = two_channel_toy();
    assert!(gradcam(&model, &Array4::zeros((1, 3, 4, 4)), 2).is_err());
    assert!(gradcam(&model, &Array4::zeros((2, 3, 4, 4)), 0).is_err());
}

fn unet(classes: usize, seed: u64) -> UNetClassifier<f64> {
    let config = ModelConfig { num_classes: classes, init_seed: seed, ..ModelConfig::compact(32) };
    UNetClassifier::new(config).unwrap()
}

fn head_row(model: &UNetClassifier<f64>, class: usize) -> Vec<f64> {
    let w = model.params().get(model.head().weight);
    (0..model.feature_channels()).map(|k| w[[class, k]]).collect()
}

#[test]
fn unet_map_matches_closed_form_from_its_features() {
    for seed in 0..4 {
        let mut model = unet(2, seed);
        let x = random_input(100 + seed, 32);
        for class in 0..2 {
            let trace = model.run(&x);
            let want = resize_map(&closed_form(model.features(&trace), &head_row(&model, class)), 32, 32);
            let got = gradcam(&model, &x, class).unwrap();
            assert_eq!(got.normalization, Normalization::Raw);
            assert_eq!(got.dims(), (32, 32));
            assert!(max_abs_diff(&got.values, &want) < 1e-6, "seed {seed} class {class}");
        }
        // flip the head; the map must follow the closed form of the new weights
        let id = model.head().weight;
        model.params_mut().get_mut(id).mapv_inplace(|v| -v);
        let trace = model.run(&x);
        let want = resize_map(&closed_form(model.features(&trace), &head_row(&model, 0)), 32, 32);
        assert!(max_abs_diff(&gradcam(&model, &x, 0).unwrap().values, &want) < 1e-6, "seed {seed} negated");
    }
}

#[test]
fn conv_toy_input_gradient_matches_central_differences() {
    let model = ConvGapModel::new(3);
    for seed in 0..3 {
        let x = random_input(seed, 16);
        for class in 0..2 {
            let err = input_gradient_error(&model, &x, class, 60, seed);
            assert!(err < 1e-3, "seed {seed} class {class}: relative error {err:.2e}");
        }
    }
}

#[test]
fn unet_input_gradient_matches_central_differences() {
    for seed in 0..2 {
        let model = unet(1, seed);
        let x = random_input(200 + seed, 32);
        let err = input_gradient_error(&model, &x, 0, 60, seed);
        assert!(err < 1e-3, "seed {seed}: relative error {err:.2e}");
    }
}

#[test]
fn conv_toy_map_matches_closed_form() {
    let model = ConvGapModel::new(9);
    let w = model.head_weights();
    for seed in 0..5 {
        let x = random_input(50 + seed, 12);
        let trace = model.run(&x);
        for class in 0..2 {
            let want = closed_form(model.features(&trace), &w.row(class).to_vec());
            assert!(max_abs_diff(&gradcam(&model, &x, class).unwrap().values, &want) < 1e-6);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn maps_are_nonnegative_and_input_sized(seed in 0u64..1000, size in prop::sample::select(vec![8usize, 12, 16])) {
        let model = ConvGapModel::new(seed);
        let x = random_input(seed + 1, size);
        for class in 0..2 {
            let map = gradcam(&model, &x, class).unwrap();
            prop_assert_eq!(map.dims(), (size, size));
            prop_assert!(map.values.iter().all(|v| *v >= 0.0 && v.is_finite()));
            let unit = normalize(&map);
            prop_assert!(unit.degenerate || (unit.max() - 1.0).abs() < 1e-12);
        }
    }
}
