//! Click labels recovered from review decisions, for the next training round.

use std::collections::{BTreeMap, HashSet};

use camlabel_core::geometry::Pixel;
use camlabel_core::mask::BinaryMask;
use camlabel_core::proposer::InstanceProposal;
use camlabel_core::weakset::{LabelSource, Polarity, WeakLabel};
use serde::{Deserialize, Serialize};

use crate::event::{Action, InteractionEvent};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DerivedLabels {
    pub labels: Vec<WeakLabel>,
    /// Events that produced no label, with the reason.
    pub warnings: Vec<String>,
}

/// The rounded centroid when it falls on the mask, otherwise the mask pixel
/// nearest to the centroid (first in row-major order on ties). A curved crack
/// can have its centroid off the crack, and a click there would label clean
/// background as defect.
pub fn label_point(mask: &BinaryMask) -> Option<Pixel> {
    let (cr, cc) = mask.centroid()?;
    let (r, c) = (cr.round() as usize, cc.round() as usize);
    if r < mask.height() && c < mask.width() && mask.get(r, c) {
        return Some(Pixel::new(r, c));
    }
    let d2 = |p: &Pixel| (p.row as f64 - cr).powi(2) + (p.col as f64 - cc).powi(2);
    mask.pixels().min_by(|a, b| d2(a).total_cmp(&d2(b)))
}

/// Applies the labelling rules to a log:
/// reject gives a negative click at the proposal, missed a positive click at
/// the reported point, accept and modify a positive click on the final mask.
/// The first decision on a proposal counts; later ones are reported.
pub fn derive_weak_labels(events: &[InteractionEvent], proposals: &BTreeMap<String, InstanceProposal>) -> DerivedLabels {
    let mut out = DerivedLabels::default();
    let mut seen_events = HashSet::new();
    let mut decided = HashSet::new();
    for ev in events {
        if !seen_events.insert(ev.event_id.as_str()) {
            out.warnings.push(format!("event {}: repeated event id skipped", ev.event_id));
            continue;
        }
        let (class, polarity, point) = match ev.action {
            Action::Missed => {
                let (Some(class), Some(point)) = (&ev.defect_class, ev.click_point) else {
                    out.warnings.push(format!("event {}: missed without class or point", ev.event_id));
                    continue;
                };
                (class.clone(), Polarity::Positive, point)
            }
            action => {
                let pid = ev.proposal_id.as_deref().unwrap_or_default();
                let Some(p) = proposals.get(pid) else {
                    out.warnings.push(format!("event {}: unknown proposal {pid:?}", ev.event_id));
                    continue;
                };
                if !decided.insert(pid) {
                    out.warnings.push(format!("event {}: proposal {pid} already decided", ev.event_id));
                    continue;
                }
                let (rle, polarity) = match action {
                    Action::Modify => (ev.edited_mask.as_ref(), Polarity::Positive),
                    Action::Reject => (Some(&p.mask), Polarity::Negative),
                    _ => (Some(&p.mask), Polarity::Positive),
                };
                let point = rle.and_then(|m| m.decode().ok()).and_then(|m| label_point(&m));
                let Some(point) = point else {
                    out.warnings.push(format!("event {}: mask is missing, unreadable or empty", ev.event_id));
                    continue;
                };
                (p.defect_class.clone(), polarity, point)
            }
        };
        out.labels.push(WeakLabel {
            id: format!("ix-{}", ev.event_id),
            image_id: ev.image_id.clone(),
            point,
            defect_class: class,
            polarity,
            source: LabelSource::InteractionLog,
            created_at: ev.created_at,
        });
    }
    out
}
