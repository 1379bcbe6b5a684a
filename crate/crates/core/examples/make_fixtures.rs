//! Regenerates the committed crack fixture model under `tests/fixtures/`.
//!
//! cargo run --release -p camlabel-core --example make_fixtures

use std::collections::BTreeMap;
use std::path::Path;

use camlabel_core::classes::DefectClass;
use camlabel_core::classifier::{train, LabeledCrop, ModelConfig, TrainConfig, UNetClassifier};
use camlabel_core::synth::{generate_synthetic_scene, SceneParams};
use camlabel_core::weakset::{sample_crops, split_dataset, CropDatasetSpec, CropLabel, CropSample};

const TRAIN_SCENES: u64 = 20;
const CROP: usize = 32;

fn main() {
    let classes: Vec<DefectClass> = ["crack", "spalling", "rust"].iter().map(|s| DefectClass::new(*s).unwrap()).collect();
    let crack = &classes[0];
    let epoch = chrono::DateTime::from_timestamp(0, 0).unwrap();
    let scenes: Vec<_> = (0..TRAIN_SCENES).map(|s| generate_synthetic_scene(&SceneParams::default(), s).unwrap()).collect();
    let mut labels = Vec::new();
    let mut sizes = BTreeMap::new();
    for (i, s) in scenes.iter().enumerate() {
        let id = format!("scene{i:02}");
        labels.extend(s.weak_labels(&id, &classes, epoch));
        sizes.insert(id, (s.image.height(), s.image.width()));
    }
    let spec = CropDatasetSpec { crop_size: CROP, split_fractions: [0.8, 0.2, 0.0], ..Default::default() };
    let samples = sample_crops(&labels, crack, &spec, &sizes).unwrap();
    let (train_set, val_set, _) = split_dataset(&samples, &spec).unwrap();
    let load = |v: &[CropSample]| -> Vec<LabeledCrop> {
        v.iter()
            .map(|s| {
                let i: usize = s.image_id["scene".len()..].parse().unwrap();
                LabeledCrop { pixels: scenes[i].image.crop(s.window).unwrap(), defect: s.label == CropLabel::Defect }
            })
            .collect()
    };
    let model = UNetClassifier::<f32>::new(ModelConfig { init_seed: 1, ..ModelConfig::shallow(CROP) }).unwrap();
    let config = TrainConfig { max_epochs: 10, batch_size: 16, learning_rate: 1e-3, ..Default::default() };
    let bundle = train(model, &load(&train_set), &load(&val_set), &config).unwrap().with_class("crack");
    let out = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/crack_model");
    bundle.save(&out).unwrap();
    println!("best epoch {} f1 {:.3} -> {}", bundle.meta.best_epoch, bundle.meta.best_f_measure, out.display());
}
