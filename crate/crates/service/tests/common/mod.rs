#![allow(dead_code)]

use std::path::Path;

use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use axum::Router;
use camlabel_core::classes::DefectClass;
use camlabel_core::geometry::Pixel;
use camlabel_core::mask::{BinaryMask, Connectivity};
use camlabel_core::polygon::Polygon;
use camlabel_core::proposer::{InstanceProposal, ProposerConfig};
use camlabel_core::raster::Raster;
use camlabel_core::rle::Rle;
use camlabel_core::weakset::{ImageEntry, ImageManifest};
use camlabel_service::{Action, InteractionEvent};
use chrono::{TimeZone, Utc};
use serde_json::Value;
use tower::ServiceExt;

pub fn class(name: &str) -> DefectClass {
    DefectClass::new(name).unwrap()
}

pub fn rect(h: usize, w: usize, r0: usize, c0: usize, rh: usize, rw: usize) -> BinaryMask {
    BinaryMask::from_fn(h, w, |r, c| (r0..r0 + rh).contains(&r) && (c0..c0 + rw).contains(&c))
}

pub fn proposal(image_id: &str, class_name: &str, index: usize, mask: &BinaryMask) -> InstanceProposal {
    let (cr, cc) = mask.centroid().expect("nonempty");
    InstanceProposal {
        proposal_id: format!("{image_id}/{class_name}/{index:04}"),
        image_id: image_id.to_string(),
        defect_class: class(class_name),
        mask: Rle::encode(mask),
        polygon: Polygon::trace(mask, Connectivity::Eight).unwrap(),
        score: 0.9,
        area: mask.count(),
        bbox: mask.bounding_box().unwrap(),
        centroid: [cr, cc],
        generator: ProposerConfig::default(),
    }
}

/// Three images written as PNG:
/// `img-a` (64×48) with two crack proposals and one rust proposal,
/// `img-b` (80×100) with one spalling proposal centred on (40, 60),
/// `img-c` (32×32) with none.
pub fn fixture(dir: &Path) -> (ImageManifest, Vec<InstanceProposal>) {
    let mut images = ImageManifest::new();
    for (id, h, w) in [("img-a", 64, 48), ("img-b", 80, 100), ("img-c", 32, 32)] {
        let path = dir.join(format!("{id}.png"));
        Raster::filled(h, w, [0.5, 0.5, 0.5]).save_png(&path).unwrap();
        images.insert(id.to_string(), ImageEntry { path, height: h, width: w });
    }
    let proposals = vec![
        proposal("img-a", "crack", 0, &rect(64, 48, 2, 2, 3, 20)),
        proposal("img-a", "crack", 1, &rect(64, 48, 30, 10, 20, 2)),
        proposal("img-a", "rust", 0, &rect(64, 48, 50, 30, 8, 8)),
        proposal("img-b", "spalling", 0, &rect(80, 100, 35, 55, 11, 11)),
    ];
    (images, proposals)
}

/// Image with `n` single-pixel-spaced crack proposals, for write-load tests.
pub fn many_proposals(dir: &Path, n: usize) -> (ImageManifest, Vec<InstanceProposal>) {
    let (h, w) = (64, 64);
    let path = dir.join("grid.png");
    Raster::filled(h, w, [0.5, 0.5, 0.5]).save_png(&path).unwrap();
    let mut images = ImageManifest::new();
    images.insert("grid".into(), ImageEntry { path, height: h, width: w });
    let proposals = (0..n).map(|i| proposal("grid", "crack", i, &rect(h, w, (i / 16) * 4, (i % 16) * 4, 2, 2))).collect();
    (images, proposals)
}

pub fn event(id: &str, image_id: &str, proposal_id: Option<&str>, action: Action) -> InteractionEvent {
    InteractionEvent {
        event_id: id.to_string(),
        proposal_id: proposal_id.map(str::to_string),
        image_id: image_id.to_string(),
        action,
        edited_mask: None,
        click_point: None,
        defect_class: None,
        duration_ms: (action != Action::Missed).then_some(1500),
        annotator_id: "ann-1".into(),
        created_at: Utc.with_ymd_and_hms(2026, 3, 1, 12, 0, 0).unwrap(),
    }
}

pub fn decide(id: &str, proposal_id: &str, action: Action) -> InteractionEvent {
    let image = proposal_id.split('/').next().unwrap();
    event(id, image, Some(proposal_id), action)
}

pub fn modify(id: &str, proposal_id: &str, mask: &BinaryMask) -> InteractionEvent {
    InteractionEvent { edited_mask: Some(Rle::encode(mask)), ..decide(id, proposal_id, Action::Modify) }
}

pub fn missed(id: &str, image_id: &str, row: usize, col: usize, class_name: &str) -> InteractionEvent {
    InteractionEvent { click_point: Some(Pixel::new(row, col)), defect_class: Some(class(class_name)), ..event(id, image_id, None, Action::Missed) }
}

pub async fn call(app: &Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, to_bytes(resp.into_body(), usize::MAX).await.unwrap().to_vec())
}

pub async fn get_json(app: &Router, uri: &str) -> (StatusCode, Value) {
    let (s, body) = call(app, Request::get(uri).body(Body::empty()).unwrap()).await;
    (s, serde_json::from_slice(&body).unwrap_or(Value::Null))
}

pub async fn post_json(app: &Router, uri: &str, body: &impl serde::Serialize) -> (StatusCode, Value) {
    let req = Request::post(uri)
        .header("content-type", "application/json")
        .body(Body::from(serde_json::to_vec(body).unwrap()))
        .unwrap();
    let (s, body) = call(app, req).await;
    (s, serde_json::from_slice(&body).unwrap_or(Value::Null))
}
