//! HTTP/JSON routes over a [`ReviewStore`]. Reads take a snapshot under a
//! read lock; every write goes through one writer thread that appends the
//! event to the log, syncs it, and only then updates the state.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Arc, RwLock};

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use camlabel_core::classes::DefectClass;
use camlabel_core::classifier::UNetClassifier;
use camlabel_core::proposer::{propose_class, InstanceProposal, ProposerConfig};
use camlabel_core::raster::Raster;
use camlabel_core::weakset::ImageManifest;
use serde::{Deserialize, Serialize};
use tokio::sync::{mpsc, oneshot};

use crate::derive::derive_weak_labels;
use crate::event::InteractionEvent;
use crate::export::{export_annotations, ExportFormat};
use crate::log::EventLog;
use crate::state::{Check, Outcome, ProposalState, ReviewStore};
use crate::ServiceError;

const DEFAULT_PAGE: usize = 100;
const WRITE_QUEUE: usize = 256;

/// Models for regenerating proposals on request with a different number of
/// climb iterations. Results are returned, not stored.
#[derive(Clone, Debug)]
pub struct Preview {
    pub models: BTreeMap<DefectClass, UNetClassifier<f32>>,
    pub config: ProposerConfig,
}

type Job = (InteractionEvent, oneshot::Sender<Result<Outcome, ServiceError>>);

#[derive(Clone)]
struct AppState {
    store: Arc<RwLock<ReviewStore>>,
    writer: mpsc::Sender<Job>,
    preview: Option<Arc<Preview>>,
}

/// A store recovered from its log plus the writer that extends it.
#[derive(Clone)]
pub struct Service {
    state: AppState,
}

fn writer_loop(mut rx: mpsc::Receiver<Job>, mut log: EventLog, store: Arc<RwLock<ReviewStore>>) {
    while let Some((ev, reply)) = rx.blocking_recv() {
        // this thread is the only mutator, so the check stays valid until commit
        let checked = store.read().expect("store lock").check(&ev);
        let result = match checked {
            Ok(Check::Duplicate(out)) => Ok(out),
            Ok(Check::New) => log.append(&ev).map(|()| store.write().expect("store lock").commit(ev)),
            Err(e) => Err(e),
        };
        let _ = reply.send(result);
    }
}

impl Service {
    /// Opens (or creates) the log at `log_path`, replays it, and starts the
    /// writer thread.
    pub fn start(images: ImageManifest, proposals: Vec<InstanceProposal>, log_path: &Path, preview: Option<Preview>) -> Result<Self, ServiceError> {
        let (log, events) = EventLog::open(log_path)?;
        let store = ReviewStore::replay(images, proposals, &events)
            .map_err(|e| ServiceError::Storage(format!("{}: replay failed: {e}", log_path.display())))?;
        log::info!("replayed {} events from {}", events.len(), log_path.display());
        let store = Arc::new(RwLock::new(store));
        let (tx, rx) = mpsc::channel(WRITE_QUEUE);
        let writer_store = Arc::clone(&store);
        std::thread::Builder::new()
            .name("event-writer".into())
            .spawn(move || writer_loop(rx, log, writer_store))
            .map_err(|e| ServiceError::Storage(format!("cannot start writer: {e}")))?;
        Ok(Self { state: AppState { store, writer: tx, preview: preview.map(Arc::new) } })
    }

    /// Copy of the current state.
    pub fn snapshot(&self) -> ReviewStore {
        self.state.store.read().expect("store lock").clone()
    }

    /// Applies one event through the writer, as `POST /interactions` does.
    pub async fn submit(&self, event: InteractionEvent) -> Result<Outcome, ServiceError> {
        submit(&self.state, event).await
    }
}

async fn submit(state: &AppState, event: InteractionEvent) -> Result<Outcome, ServiceError> {
    let (tx, rx) = oneshot::channel();
    let gone = || ServiceError::Unavailable("event writer stopped".into());
    state.writer.send((event, tx)).await.map_err(|_| gone())?;
    rx.await.map_err(|_| gone())?
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    error: &'a str,
    message: String,
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = match self {
            Self::NotFound(_) => StatusCode::NOT_FOUND,
            Self::Invalid(_) => StatusCode::BAD_REQUEST,
            Self::Conflict(_) => StatusCode::CONFLICT,
            Self::Storage(_) => StatusCode::INTERNAL_SERVER_ERROR,
            Self::Unavailable(_) => StatusCode::SERVICE_UNAVAILABLE,
        };
        (status, Json(ErrorBody { error: self.code(), message: self.to_string() })).into_response()
    }
}

impl From<JsonRejection> for ServiceError {
    fn from(e: JsonRejection) -> Self {
        Self::Invalid(e.body_text())
    }
}

impl From<QueryRejection> for ServiceError {
    fn from(e: QueryRejection) -> Self {
        Self::Invalid(e.body_text())
    }
}

fn parse_class(name: Option<&str>) -> Result<Option<DefectClass>, ServiceError> {
    name.map(|n| DefectClass::new(n).map_err(|e| ServiceError::Invalid(e.to_string()))).transpose()
}

#[derive(Deserialize)]
struct PageQuery {
    offset: Option<usize>,
    limit: Option<usize>,
}

#[derive(Serialize)]
struct ImageItem {
    image_id: String,
    height: usize,
    width: usize,
}

#[derive(Serialize)]
struct ImagePage {
    total: usize,
    offset: usize,
    items: Vec<ImageItem>,
}

async fn list_images(State(s): State<AppState>, q: Result<Query<PageQuery>, QueryRejection>) -> Result<Json<ImagePage>, ServiceError> {
    let Query(q) = q?;
    let (offset, limit) = (q.offset.unwrap_or(0), q.limit.unwrap_or(DEFAULT_PAGE));
    let store = s.store.read().expect("store lock");
    let items = store
        .images()
        .iter()
        .skip(offset)
        .take(limit)
        .map(|(id, e)| ImageItem { image_id: id.clone(), height: e.height, width: e.width })
        .collect();
    Ok(Json(ImagePage { total: store.images().len(), offset, items }))
}

fn content_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("tif" | "tiff") => "image/tiff",
        _ => "application/octet-stream",
    }
}

async fn get_image(State(s): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Response, ServiceError> {
    let path = s.store.read().expect("store lock").image(&id)?.path.clone();
    let bytes = tokio::fs::read(&path)
        .await
        .map_err(|e| ServiceError::Storage(format!("{}: {e}", path.display())))?;
    Ok(([(header::CONTENT_TYPE, content_type(&path))], bytes).into_response())
}

#[derive(Deserialize)]
struct ClassQuery {
    class: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProposalView {
    pub proposal: InstanceProposal,
    pub state: ProposalState,
}

async fn get_proposals(
    State(s): State<AppState>,
    UrlPath(id): UrlPath<String>,
    q: Result<Query<ClassQuery>, QueryRejection>,
) -> Result<Json<Vec<ProposalView>>, ServiceError> {
    let Query(q) = q?;
    let class = parse_class(q.class.as_deref())?;
    let store = s.store.read().expect("store lock");
    let rows = store.proposals_for(&id, class.as_ref())?;
    Ok(Json(rows.into_iter().map(|(p, st)| ProposalView { proposal: p.clone(), state: st.clone() }).collect()))
}

async fn post_interaction(State(s): State<AppState>, body: Result<Json<InteractionEvent>, JsonRejection>) -> Result<Json<Outcome>, ServiceError> {
    let Json(ev) = body?;
    Ok(Json(submit(&s, ev).await?))
}

#[derive(Deserialize)]
struct FormatQuery {
    format: Option<String>,
}

async fn export(
    State(s): State<AppState>,
    UrlPath(id): UrlPath<String>,
    q: Result<Query<FormatQuery>, QueryRejection>,
) -> Result<Response, ServiceError> {
    let Query(q) = q?;
    let format: ExportFormat = q.format.as_deref().unwrap_or("native").parse()?;
    let body = export_annotations(&s.store.read().expect("store lock"), &id, format)?;
    let ctype = match format {
        ExportFormat::Native => "application/json",
        ExportFormat::Cvat => "application/xml",
    };
    Ok(([(header::CONTENT_TYPE, ctype)], body).into_response())
}

async fn derived_labels(State(s): State<AppState>) -> Json<crate::derive::DerivedLabels> {
    let store = s.store.read().expect("store lock");
    Json(derive_weak_labels(store.events(), store.proposals()))
}

#[derive(Deserialize)]
struct PreviewQuery {
    class: String,
    iterations: Option<usize>,
}

async fn preview(
    State(s): State<AppState>,
    UrlPath(id): UrlPath<String>,
    q: Result<Query<PreviewQuery>, QueryRejection>,
) -> Result<Json<Vec<InstanceProposal>>, ServiceError> {
    let Query(q) = q?;
    let pv = s.preview.clone().ok_or_else(|| ServiceError::Unavailable("service started without models; regeneration is off".into()))?;
    let class = parse_class(Some(&q.class))?.expect("class given");
    if !pv.models.contains_key(&class) {
        return Err(ServiceError::NotFound(format!("no model for class {class}")));
    }
    let path = s.store.read().expect("store lock").image(&id)?.path.clone();
    let mut config = pv.config.clone();
    if let Some(t) = q.iterations {
        config.climb.iterations = t;
    }
    let run = move || {
        let image = Raster::load(&path).map_err(|e| ServiceError::Storage(format!("{}: {e}", path.display())))?;
        propose_class(&pv.models[&class], &id, &image, &class, &config)
            .map(|c| c.proposals)
            .map_err(|e| ServiceError::Invalid(e.to_string()))
    };
    let out = tokio::task::spawn_blocking(run)
        .await
        .map_err(|e| ServiceError::Unavailable(format!("regeneration task failed: {e}")))??;
    Ok(Json(out))
}

pub fn router(service: &Service) -> Router {
    Router::new()
        .route("/images", get(list_images))
        .route("/images/{id}", get(get_image))
        .route("/images/{id}/proposals", get(get_proposals))
        .route("/images/{id}/preview", get(preview))
        .route("/interactions", post(post_interaction))
        .route("/export/{image_id}", get(export))
        .route("/labels/derived", get(derived_labels))
        .with_state(service.state.clone())
}
