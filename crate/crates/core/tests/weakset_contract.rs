use std::collections::{BTreeMap, BTreeSet};

use camlabel_core::classes::{ClassRegistry, DefectClass};
use camlabel_core::geometry::Pixel;
use camlabel_core::weakset::{
    ingest_labels, labels_to_json, sample_crops, split_dataset, CropDatasetSpec, CropLabel, CropSample, ImageEntry,
    ImageManifest, LabelSource, Polarity, WeakLabel, WeaksetError,
};
use chrono::{TimeZone, Utc};
use proptest::prelude::*;

fn crack() -> DefectClass {
    DefectClass::new("crack").unwrap()
}

fn label(id: &str, image: &str, point: (usize, usize), polarity: Polarity) -> WeakLabel {
    WeakLabel {
        id: id.into(),
        image_id: image.into(),
        point: Pixel::new(point.0, point.1),
        defect_class: crack(),
        polarity,
        source: LabelSource::Manual,
        created_at: Utc.with_ymd_and_hms(2024, 5, 1, 12, 0, 0).unwrap(),
    }
}

fn manifest(images: &[(&str, usize, usize)]) -> ImageManifest {
    images.iter().map(|&(id, h, w)| (id.to_string(), ImageEntry { path: format!("{id}.png").into(), height: h, width: w })).collect()
}

fn sizes(images: &[(&str, usize, usize)]) -> BTreeMap<String, (usize, usize)> {
    images.iter().map(|&(id, h, w)| (id.to_string(), (h, w))).collect()
}

fn registry() -> ClassRegistry {
    ClassRegistry::from_names(["crack", "spalling", "rust"]).unwrap()
}

fn spec(crop_size: usize, seed: u64) -> CropDatasetSpec {
    CropDatasetSpec { crop_size, seed, ..Default::default() }
}

#[test]
fn ingest_minimal_and_empty_documents() {
    let m = manifest(&[("a", 100, 100)]);
    assert!(ingest_labels("[]", &m, &registry()).unwrap().is_empty());
    let text = labels_to_json(&[label("l1", "a", (10, 10), Polarity::Positive)]);
    let got = ingest_labels(&text, &m, &registry()).unwrap();
    assert_eq!(got, vec![label("l1", "a", (10, 10), Polarity::Positive)]);
}

#[test]
fn ingest_names_bad_records_with_their_lines() {
    let m = manifest(&[("a", 100, 100)]);
    let text = r#"[
  {"id": "ok", "image_id": "a", "point": [10, 10], "defect_class": "crack", "polarity": "positive",
   "source": "manual", "created_at": "2024-05-01T12:00:00Z"},
  {"id": "far", "image_id": "a", "point": [200, 10], "defect_class": "crack", "polarity": "positive",
   "source": "manual", "created_at": "2024-05-01T12:00:00Z"},
  {"id": "odd", "image_id": "a", "point": [1, 1], "defect_class": "graffiti", "polarity": "negative",
   "source": "manual", "created_at": "2024-05-01T12:00:00Z"}
]"#;
    let Err(WeaksetError::Validation(issues)) = ingest_labels(text, &m, &registry()) else { panic!("expected validation error") };
    assert_eq!(issues.len(), 2);
    assert_eq!((issues[0].id.as_deref(), issues[0].line), (Some("far"), 4));
    assert!(issues[0].reason.contains("outside"));
    assert_eq!((issues[1].id.as_deref(), issues[1].line), (Some("odd"), 6));
    let message = WeaksetError::Validation(issues).to_string();
    assert!(message.contains("far") && message.contains("odd"));

    assert!(matches!(ingest_labels("[{", &m, &registry()), Err(WeaksetError::Parse(_))));
}

#[test]
fn three_clicks_give_fifteen_of_each() {
    let imgs = [("a", 400, 400), ("b", 400, 400)];
    let labels = vec![
        label("p1", "a", (50, 60), Polarity::Positive),
        label("p2", "a", (300, 200), Polarity::Positive),
        label("p3", "b", (390, 10), Polarity::Positive),
        label("n1", "b", (100, 100), Polarity::Negative),
        label("n2", "a", (200, 350), Polarity::Negative),
    ];
    let crops = sample_crops(&labels, &crack(), &spec(64, 7), &sizes(&imgs)).unwrap();
    let defect: Vec<&CropSample> = crops.iter().filter(|c| c.label == CropLabel::Defect).collect();
    assert_eq!(defect.len(), 15);
    assert_eq!(crops.len() - defect.len(), 15);
    for c in &crops {
        let origin = labels.iter().find(|l| l.id == c.origin_label_id).unwrap();
        assert!(c.window.contains(origin.point), "{c:?}");
        assert!(c.window.row_end() <= 400 && c.window.col_end() <= 400);
    }
    for l in &labels[..3] {
        assert_eq!(defect.iter().filter(|c| c.origin_label_id == l.id).count(), 5);
    }
    assert_eq!(crops, sample_crops(&labels, &crack(), &spec(64, 7), &sizes(&imgs)).unwrap());
}

#[test]
fn corner_click_stays_inside_clamped_windows() {
    let imgs = [("a", 200, 200)];
    let labels = vec![label("p", "a", (0, 0), Polarity::Positive), label("n", "a", (150, 150), Polarity::Negative)];
    let crops = sample_crops(&labels, &crack(), &spec(64, 3), &sizes(&imgs)).unwrap();
    for c in crops.iter().filter(|c| c.label == CropLabel::Defect) {
        assert_eq!((c.window.row0, c.window.col0), (0, 0));
    }
}

#[test]
fn sampling_errors() {
    let labels = vec![label("p", "a", (10, 10), Polarity::Positive), label("n", "a", (20, 20), Polarity::Negative)];
    let small = sample_crops(&labels, &crack(), &spec(64, 0), &sizes(&[("a", 50, 100)]));
    assert!(matches!(small, Err(WeaksetError::ImageTooSmall { ref image_id, .. }) if image_id == "a"));
    let rust = DefectClass::new("rust").unwrap();
    assert!(matches!(sample_crops(&labels, &rust, &spec(64, 0), &sizes(&[("a", 100, 100)])), Err(WeaksetError::EmptyDataset(_))));
}

fn one_crop_per_image(n: usize) -> Vec<CropSample> {
    (0..n)
        .map(|i| CropSample {
            image_id: format!("img{i:02}"),
            window: camlabel_core::geometry::Window::new(0, 0, 32, 32),
            label: if i % 2 == 0 { CropLabel::Defect } else { CropLabel::NoDefect },
            defect_class: crack(),
            origin_label_id: format!("l{i}"),
        })
        .collect()
}

#[test]
fn ten_images_split_eight_one_one() {
    let samples = one_crop_per_image(10);
    let (train, val, test) = split_dataset(&samples, &spec(32, 5)).unwrap();
    assert_eq!((train.len(), val.len(), test.len()), (8, 1, 1));
    assert_eq!(split_dataset(&samples, &spec(32, 5)).unwrap(), (train, val, test));
}

#[test]
fn one_image_cannot_fill_three_splits() {
    let mut samples = one_crop_per_image(1);
    samples.extend(one_crop_per_image(1));
    assert!(matches!(split_dataset(&samples, &spec(32, 0)), Err(WeaksetError::InfeasibleSplit { images: 1, splits: 3 })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn splits_are_image_disjoint_and_balanced(
        clicks in prop::collection::vec((0usize..6, 0usize..150, 0usize..150, any::<bool>()), 2..40),
        seed in any::<u64>(),
    ) {
        let imgs: Vec<(String, usize, usize)> = (0..6).map(|i| (format!("i{i}"), 150, 150)).collect();
        let sizes: BTreeMap<String, (usize, usize)> = imgs.iter().map(|(id, h, w)| (id.clone(), (*h, *w))).collect();
        let mut labels: Vec<WeakLabel> = clicks
            .iter()
            .enumerate()
            .map(|(k, &(img, r, c, pos))| {
                let pol = if pos { Polarity::Positive } else { Polarity::Negative };
                label(&format!("l{k}"), &format!("i{img}"), (r, c), pol)
            })
            .collect();
        labels.push(label("anchor+", "i0", (5, 5), Polarity::Positive));
        labels.push(label("anchor-", "i5", (140, 140), Polarity::Negative));
        let spec = CropDatasetSpec { crop_size: 48, seed, split_fractions: [0.6, 0.2, 0.2], ..Default::default() };
        let crops = sample_crops(&labels, &crack(), &spec, &sizes).unwrap();
        let pos = crops.iter().filter(|c| c.label == CropLabel::Defect).count();
        prop_assert_eq!(pos * 2, crops.len());
        for c in &crops {
            prop_assert!(c.window.row_end() <= 150 && c.window.col_end() <= 150);
            if c.label == CropLabel::Defect {
                let origin = labels.iter().find(|l| l.id == c.origin_label_id).unwrap();
                prop_assert!(c.window.contains(origin.point));
            }
        }
        let distinct: BTreeSet<&str> = crops.iter().map(|c| c.image_id.as_str()).collect();
        prop_assume!(distinct.len() >= 3);
        let (a, b, t) = split_dataset(&crops, &spec).unwrap();
        let ids = |s: &[CropSample]| s.iter().map(|c| c.image_id.clone()).collect::<BTreeSet<_>>();
        let (ia, ib, it) = (ids(&a), ids(&b), ids(&t));
        prop_assert!(ia.is_disjoint(&ib) && ia.is_disjoint(&it) && ib.is_disjoint(&it));
        prop_assert_eq!(a.len() + b.len() + t.len(), crops.len());
    }
}
