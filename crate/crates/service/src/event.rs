use camlabel_core::classes::DefectClass;
use camlabel_core::geometry::Pixel;
use camlabel_core::rle::Rle;
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::ServiceError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Accept,
    Modify,
    Reject,
    Missed,
}

/// One annotator decision, as posted by the review client and stored in the log.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InteractionEvent {
    pub event_id: String,
    /// Null for `missed`.
    #[serde(default)]
    pub proposal_id: Option<String>,
    pub image_id: String,
    pub action: Action,
    /// Required iff `action` is `modify`.
    #[serde(default)]
    pub edited_mask: Option<Rle>,
    /// Required iff `action` is `missed`.
    #[serde(default)]
    pub click_point: Option<Pixel>,
    /// Class of a `missed` defect; other actions take the proposal's class.
    #[serde(default)]
    pub defect_class: Option<DefectClass>,
    /// Client-measured time on this decision. Required except for `missed`.
    #[serde(default)]
    pub duration_ms: Option<u64>,
    pub annotator_id: String,
    pub created_at: DateTime<Utc>,
}

impl InteractionEvent {
    /// Checks the fields that depend on `action`. Image bounds and proposal
    /// ownership are checked against the store.
    pub fn validate_shape(&self) -> Result<(), ServiceError> {
        let bad = |m: &str| Err(ServiceError::Invalid(format!("event {:?}: {m}", self.event_id)));
        if self.event_id.trim().is_empty() {
            return Err(ServiceError::Invalid("event_id must be nonempty".into()));
        }
        if self.annotator_id.trim().is_empty() {
            return bad("annotator_id must be nonempty");
        }
        let decision = self.action != Action::Missed;
        if decision && self.proposal_id.is_none() {
            return bad("proposal_id is required unless action is missed");
        }
        if !decision && self.proposal_id.is_some() {
            return bad("proposal_id must be null for missed");
        }
        if (self.action == Action::Modify) != self.edited_mask.is_some() {
            return bad("edited_mask is required for modify and only for modify");
        }
        if (self.action == Action::Missed) != self.click_point.is_some() {
            return bad("click_point is required for missed and only for missed");
        }
        if (self.action == Action::Missed) != self.defect_class.is_some() {
            return bad("defect_class is required for missed and only for missed");
        }
        if decision && self.duration_ms.is_none() {
            return bad("duration_ms is required for accept, modify and reject");
        }
        Ok(())
    }
}
