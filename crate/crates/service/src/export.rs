//! Decided proposals as annotation documents: native JSON, or CVAT 1.1 XML.

use std::fmt::Write as _;
use std::str::FromStr;

use camlabel_core::classes::DefectClass;
use camlabel_core::mask::{BinaryMask, Connectivity};
use camlabel_core::polygon::Polygon;
use camlabel_core::postproc::components;
use camlabel_core::rle::Rle;
use serde::{Deserialize, Serialize};

use crate::state::{ReviewStore, Status};
use crate::ServiceError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExportFormat {
    Native,
    Cvat,
}

impl FromStr for ExportFormat {
    type Err = ServiceError;
    fn from_str(s: &str) -> Result<Self, ServiceError> {
        match s {
            "native" => Ok(Self::Native),
            "cvat" => Ok(Self::Cvat),
            other => Err(ServiceError::Invalid(format!("unsupported export format {other:?}; use native or cvat"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NativeAnnotation {
    pub proposal_id: String,
    pub defect_class: DefectClass,
    pub status: Status,
    pub mask: Rle,
    /// Outer contour of each connected part of the mask.
    pub polygons: Vec<Polygon>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NativeExport {
    pub image_id: String,
    pub height: usize,
    pub width: usize,
    pub annotations: Vec<NativeAnnotation>,
}

impl NativeExport {
    /// Final masks by proposal id.
    pub fn masks(&self) -> Result<Vec<(String, BinaryMask)>, ServiceError> {
        self.annotations
            .iter()
            .map(|a| Ok((a.proposal_id.clone(), a.mask.decode().map_err(|e| ServiceError::Invalid(format!("{}: {e}", a.proposal_id)))?)))
            .collect()
    }
}

pub fn import_native(text: &str) -> Result<NativeExport, ServiceError> {
    serde_json::from_str(text).map_err(|e| ServiceError::Invalid(format!("native export: {e}")))
}

fn polygons(mask: &BinaryMask) -> Vec<Polygon> {
    let (h, w) = mask.dims();
    components(mask, Connectivity::Eight)
        .components
        .iter()
        .filter_map(|c| Polygon::trace(&c.to_mask(h, w), Connectivity::Eight))
        .collect()
}

fn native(store: &ReviewStore, image_id: &str) -> Result<NativeExport, ServiceError> {
    let img = store.image(image_id)?;
    let rows = store.proposals_for(image_id, None)?;
    if rows.iter().all(|(_, s)| s.status == Status::Pending) {
        return Err(ServiceError::Invalid(format!("image {image_id} has no decided proposals to export")));
    }
    let mut annotations = Vec::new();
    for (p, s) in rows {
        let Some(rle) = &s.final_mask else { continue };
        let mask = rle.decode().map_err(|e| ServiceError::Invalid(format!("{}: {e}", p.proposal_id)))?;
        annotations.push(NativeAnnotation {
            proposal_id: p.proposal_id.clone(),
            defect_class: p.defect_class.clone(),
            status: s.status,
            mask: rle.clone(),
            polygons: polygons(&mask),
        });
    }
    Ok(NativeExport { image_id: image_id.to_string(), height: img.height, width: img.width, annotations })
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;").replace('\'', "&apos;")
}

/// CVAT "for images" 1.1 layout. Points are `x,y` pixel-edge coordinates,
/// i.e. `(col, row)` of the polygon corners.
fn cvat(doc: &NativeExport, file_name: &str) -> String {
    let mut out = String::from("<?xml version=\"1.0\" encoding=\"utf-8\"?>\n<annotations>\n  <version>1.1</version>\n");
    let _ = writeln!(
        out,
        "  <image id=\"0\" name=\"{}\" width=\"{}\" height=\"{}\">",
        xml_escape(file_name),
        doc.width,
        doc.height
    );
    for a in &doc.annotations {
        for poly in &a.polygons {
            let points: Vec<String> = poly.vertices.iter().map(|[r, c]| format!("{c},{r}")).collect();
            let _ = writeln!(
                out,
                "    <polygon label=\"{}\" source=\"semi-auto\" occluded=\"0\" points=\"{}\" z_order=\"0\">\n      <attribute name=\"proposal_id\">{}</attribute>\n    </polygon>",
                xml_escape(a.defect_class.as_str()),
                points.join(";"),
                xml_escape(&a.proposal_id)
            );
        }
    }
    out.push_str("  </image>\n</annotations>\n");
    out
}

/// Accepted and modified masks of one image; rejected proposals are left out.
pub fn export_annotations(store: &ReviewStore, image_id: &str, format: ExportFormat) -> Result<String, ServiceError> {
    let doc = native(store, image_id)?;
    Ok(match format {
        ExportFormat::Native => serde_json::to_string_pretty(&doc).expect("export serializes"),
        ExportFormat::Cvat => {
            let path = &store.image(image_id)?.path;
            let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| image_id.to_string());
            cvat(&doc, &name)
        }
    })
}
