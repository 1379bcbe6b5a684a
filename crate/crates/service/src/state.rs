use std::collections::{BTreeMap, HashMap};

use camlabel_core::classes::DefectClass;
use camlabel_core::proposer::InstanceProposal;
use camlabel_core::rle::Rle;
use camlabel_core::weakset::{ImageEntry, ImageManifest};
use serde::{Deserialize, Serialize};

use crate::event::{Action, InteractionEvent};
use crate::ServiceError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pending,
    Accepted,
    Modified,
    Rejected,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProposalState {
    pub proposal_id: String,
    pub status: Status,
    /// Proposal mask when accepted, edited mask when modified.
    pub final_mask: Option<Rle>,
    pub last_event_id: Option<String>,
}

impl ProposalState {
    fn pending(proposal_id: &str) -> Self {
        Self { proposal_id: proposal_id.to_string(), status: Status::Pending, final_mask: None, last_event_id: None }
    }
}

/// Result of applying (or re-posting) one event.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Outcome {
    Decided(ProposalState),
    Recorded { event_id: String },
}

/// Whether an event still has to be written.
#[derive(Debug)]
pub enum Check {
    New,
    /// Same event already applied; nothing to write.
    Duplicate(Outcome),
}

/// Images, proposals and the state folded from the applied events.
#[derive(Clone, Debug, Default)]
pub struct ReviewStore {
    images: ImageManifest,
    proposals: BTreeMap<String, InstanceProposal>,
    states: BTreeMap<String, ProposalState>,
    events: Vec<InteractionEvent>,
    seen: HashMap<String, usize>,
}

impl ReviewStore {
    pub fn new(images: ImageManifest, proposals: Vec<InstanceProposal>) -> Result<Self, ServiceError> {
        let mut store = Self { images, ..Self::default() };
        for p in proposals {
            let Some(img) = store.images.get(&p.image_id) else {
                return Err(ServiceError::Invalid(format!("proposal {} refers to unknown image {}", p.proposal_id, p.image_id)));
            };
            if p.mask.size != [img.height, img.width] {
                return Err(ServiceError::Invalid(format!(
                    "proposal {} mask is {:?}, image {} is {}x{}",
                    p.proposal_id, p.mask.size, p.image_id, img.height, img.width
                )));
            }
            if store.proposals.contains_key(&p.proposal_id) {
                return Err(ServiceError::Invalid(format!("duplicate proposal id {}", p.proposal_id)));
            }
            store.states.insert(p.proposal_id.clone(), ProposalState::pending(&p.proposal_id));
            store.proposals.insert(p.proposal_id.clone(), p);
        }
        Ok(store)
    }

    /// Store with `events` applied in order; fails on the first event that
    /// would be rejected when posted.
    pub fn replay(images: ImageManifest, proposals: Vec<InstanceProposal>, events: &[InteractionEvent]) -> Result<Self, ServiceError> {
        let mut store = Self::new(images, proposals)?;
        for ev in events {
            store.apply(ev.clone())?;
        }
        Ok(store)
    }

    pub fn images(&self) -> &ImageManifest {
        &self.images
    }

    pub fn image(&self, image_id: &str) -> Result<&ImageEntry, ServiceError> {
        self.images.get(image_id).ok_or_else(|| ServiceError::NotFound(format!("unknown image {image_id}")))
    }

    pub fn proposals(&self) -> &BTreeMap<String, InstanceProposal> {
        &self.proposals
    }

    pub fn state(&self, proposal_id: &str) -> Option<&ProposalState> {
        self.states.get(proposal_id)
    }

    pub fn states(&self) -> &BTreeMap<String, ProposalState> {
        &self.states
    }

    /// Applied events in log order.
    pub fn events(&self) -> &[InteractionEvent] {
        &self.events
    }

    /// Proposals of one image with their state, ordered by proposal id.
    pub fn proposals_for(&self, image_id: &str, class: Option<&DefectClass>) -> Result<Vec<(&InstanceProposal, &ProposalState)>, ServiceError> {
        self.image(image_id)?;
        Ok(self
            .proposals
            .values()
            .filter(|p| p.image_id == image_id && class.is_none_or(|c| &p.defect_class == c))
            .map(|p| (p, &self.states[&p.proposal_id]))
            .collect())
    }

    fn current_outcome(&self, ev: &InteractionEvent) -> Outcome {
        match &ev.proposal_id {
            Some(id) => Outcome::Decided(self.states[id].clone()),
            None => Outcome::Recorded { event_id: ev.event_id.clone() },
        }
    }

    /// Validates `ev` against the current state without changing it.
    pub fn check(&self, ev: &InteractionEvent) -> Result<Check, ServiceError> {
        if let Some(&i) = self.seen.get(&ev.event_id) {
            return if self.events[i] == *ev {
                Ok(Check::Duplicate(self.current_outcome(ev)))
            } else {
                Err(ServiceError::Conflict(format!("event_id {} was already used for a different event", ev.event_id)))
            };
        }
        ev.validate_shape()?;
        let img = self.image(&ev.image_id)?;
        if let Some(pid) = &ev.proposal_id {
            let p = self.proposals.get(pid).ok_or_else(|| ServiceError::NotFound(format!("unknown proposal {pid}")))?;
            if p.image_id != ev.image_id {
                return Err(ServiceError::Invalid(format!("proposal {pid} belongs to image {}, not {}", p.image_id, ev.image_id)));
            }
            let state = &self.states[pid];
            if state.status != Status::Pending {
                return Err(ServiceError::Conflict(format!(
                    "proposal {pid} was already decided ({:?}) by event {}",
                    state.status,
                    state.last_event_id.as_deref().unwrap_or("?")
                )));
            }
        }
        if let Some(m) = &ev.edited_mask {
            if m.size != [img.height, img.width] {
                return Err(ServiceError::Invalid(format!("edited_mask is {:?}, image is {}x{}", m.size, img.height, img.width)));
            }
            match m.area() {
                Ok(0) => return Err(ServiceError::Invalid("edited_mask is empty; reject the proposal instead".into())),
                Ok(_) => {}
                Err(e) => return Err(ServiceError::Invalid(format!("edited_mask: {e}"))),
            }
        }
        if let Some(p) = ev.click_point {
            if p.row >= img.height || p.col >= img.width {
                return Err(ServiceError::Invalid(format!(
                    "click_point [{}, {}] outside {}x{} image {}",
                    p.row, p.col, img.height, img.width, ev.image_id
                )));
            }
        }
        Ok(Check::New)
    }

    /// Checks and applies one event. Re-applying an identical event is a no-op.
    pub fn apply(&mut self, ev: InteractionEvent) -> Result<Outcome, ServiceError> {
        if let Check::Duplicate(out) = self.check(&ev)? {
            return Ok(out);
        }
        Ok(self.commit(ev))
    }

    /// Applies an event that passed [`ReviewStore::check`].
    pub(crate) fn commit(&mut self, ev: InteractionEvent) -> Outcome {
        if let Some(pid) = &ev.proposal_id {
            let mask = match ev.action {
                Action::Accept => Some(self.proposals[pid].mask.clone()),
                Action::Modify => ev.edited_mask.clone(),
                _ => None,
            };
            let status = match ev.action {
                Action::Accept => Status::Accepted,
                Action::Modify => Status::Modified,
                Action::Reject => Status::Rejected,
                Action::Missed => unreachable!("missed events carry no proposal"),
            };
            let state = self.states.get_mut(pid).expect("checked");
            state.status = status;
            state.final_mask = mask;
            state.last_event_id = Some(ev.event_id.clone());
        }
        let out = self.current_outcome(&ev);
        self.seen.insert(ev.event_id.clone(), self.events.len());
        self.events.push(ev);
        out
    }
}
