//! Session-based HTTP annotation service under `/api/v1`.
//!
//! Masks travel as run-length encodings by default: `runs` is a list of `[start, length]`
//! pairs, where `start` is a row-major pixel index (`y * width + x`) and each run covers
//! `length` consecutive foreground pixels. Runs are sorted, non-empty and non-adjacent.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex as StdMutex};
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use tokio::sync::Mutex;
use uuid::Uuid;

use crate::error::Error;
use crate::grid::{BinaryMask, BoxPrompt, ImageGrid, Label, Point, PromptSet};
use crate::io::{image_from_png, load_manifest, manifest_root, mask_from_png, mask_to_png, read_image, read_mask};
use crate::metrics::dsc;
use crate::model::{ImageEmbedding, PromptSegModel};
use crate::prompting::PromptEvent;
use crate::tracking::{load_cine_loop, PreviousMaskTracker, ShiftTracker, TrackerAdapter};

pub fn rle_encode(mask: &BinaryMask) -> Vec<[usize; 2]> {
    let mut runs: Vec<[usize; 2]> = Vec::new();
    for (i, &v) in mask.data().iter().enumerate() {
        if v == 0 {
            continue;
        }
        match runs.last_mut() {
            Some(run) if run[0] + run[1] == i => run[1] += 1,
            _ => runs.push([i, 1]),
        }
    }
    runs
}

pub fn rle_decode(height: usize, width: usize, runs: &[[usize; 2]]) -> crate::Result<BinaryMask> {
    let mut data = vec![0u8; height * width];
    for &[start, len] in runs {
        if start + len > data.len() {
            return Err(Error::InvalidPrompt(format!(
                "run ({start}, {len}) exceeds {height}x{width} mask"
            )));
        }
        data[start..start + len].fill(1);
    }
    BinaryMask::new(height, width, data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrackerKind {
    Previous,
    Shift,
}

impl TrackerKind {
    fn build(self) -> Box<dyn TrackerAdapter> {
        match self {
            TrackerKind::Previous => Box::new(PreviousMaskTracker::default()),
            TrackerKind::Shift => Box::new(ShiftTracker::default()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub idle_timeout: Duration,
    pub dsc_floor: f64,
    pub tracker: TrackerKind,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            idle_timeout: Duration::from_secs(30 * 60),
            dsc_floor: 0.9,
            tracker: TrackerKind::Shift,
        }
    }
}

struct CineContext {
    frames: Vec<ImageGrid>,
    gt: Option<Vec<BinaryMask>>,
    tracker: Box<dyn TrackerAdapter>,
}

#[derive(Clone)]
struct Snapshot {
    prompts: PromptSet,
    log: Vec<PromptEvent>,
    mask: Option<BinaryMask>,
}

struct Session {
    image: ImageGrid,
    embedding: ImageEmbedding,
    gt: Option<BinaryMask>,
    state: Snapshot,
    undo: Vec<Snapshot>,
    frame_index: usize,
    cine: Option<CineContext>,
    last_access: Instant,
}

#[derive(Clone)]
pub struct AppState {
    model: Arc<PromptSegModel>,
    sessions: Arc<StdMutex<HashMap<Uuid, Arc<Mutex<Session>>>>>,
    config: ServiceConfig,
}

impl AppState {
    pub fn new(model: Arc<PromptSegModel>, config: ServiceConfig) -> Self {
        Self {
            model,
            sessions: Arc::default(),
            config,
        }
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().expect("session map").len()
    }

    /// Drops sessions idle for longer than the timeout; returns how many were removed.
    pub async fn expire_idle(&self, now: Instant) -> usize {
        let entries: Vec<(Uuid, Arc<Mutex<Session>>)> = self
            .sessions
            .lock()
            .expect("session map")
            .iter()
            .map(|(k, v)| (*k, v.clone()))
            .collect();
        let mut stale = Vec::new();
        for (id, s) in entries {
            let s = s.lock().await;
            if now.saturating_duration_since(s.last_access) > self.config.idle_timeout {
                stale.push(id);
            }
        }
        let mut map = self.sessions.lock().expect("session map");
        for id in &stale {
            map.remove(id);
        }
        stale.len()
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>, ApiError> {
        let uuid = Uuid::parse_str(id).map_err(|_| ApiError::not_found(id))?;
        self.sessions
            .lock()
            .expect("session map")
            .get(&uuid)
            .cloned()
            .ok_or_else(|| ApiError::not_found(id))
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn not_found(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, format!("unknown session {id}"))
    }

    fn unsupported(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNSUPPORTED_MEDIA_TYPE, message)
    }

    fn conflict(message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, message)
    }

    fn unprocessable(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, message)
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::InvalidPrompt(_) | Error::Ingest { .. } | Error::ShapeMismatch { .. } => {
                StatusCode::UNPROCESSABLE_ENTITY
            }
            Error::NoPrompt => StatusCode::CONFLICT,
            Error::Data { .. } | Error::Io { .. } => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (
            self.status,
            Json(serde_json::json!({ "error": self.message })),
        )
            .into_response()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleMask {
    pub height: usize,
    pub width: usize,
    pub runs: Vec<[usize; 2]>,
}

impl RleMask {
    pub fn from_mask(mask: &BinaryMask) -> Self {
        Self {
            height: mask.height(),
            width: mask.width(),
            runs: rle_encode(mask),
        }
    }

    pub fn decode(&self) -> crate::Result<BinaryMask> {
        rle_decode(self.height, self.width, &self.runs)
    }
}

/// Body of `POST /sessions`; exactly one image source must be given.
#[derive(Debug, Default, Deserialize)]
#[serde(default)]
pub struct CreateSession {
    /// Base64 single-channel PNG.
    pub image: Option<String>,
    /// Optional base64 ground-truth mask enabling DSC reporting.
    pub ground_truth: Option<String>,
    pub manifest: Option<PathBuf>,
    /// `record/object` id within the manifest.
    pub sample_id: Option<String>,
    /// Cine loop directory; the session starts on frame 0.
    pub cine_loop: Option<PathBuf>,
    pub object_id: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SessionCreated {
    pub session_id: String,
    pub height: usize,
    pub width: usize,
    pub frame_index: usize,
    pub frame_count: usize,
    pub has_ground_truth: bool,
}

#[derive(Debug, Deserialize)]
pub struct ClickBody {
    pub x: usize,
    pub y: usize,
    pub label: Label,
}

#[derive(Debug, Deserialize)]
pub struct BoxBody {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MaskResponse {
    pub mask: Option<RleMask>,
    pub dsc: Option<f64>,
    pub prompt_count: usize,
    pub frame_index: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AdvanceResponse {
    pub frame_index: usize,
    pub mask: RleMask,
    pub dsc: Option<f64>,
    pub needs_intervention: bool,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ExportResponse {
    pub frame_index: usize,
    /// Base64 PNG with foreground 255.
    pub mask_png: Option<String>,
    pub prompts: PromptSet,
    pub prompt_log: Vec<PromptEvent>,
}

#[derive(Debug, Deserialize)]
pub struct MaskQuery {
    #[serde(default)]
    pub format: Option<String>,
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/v1/sessions", post(create_session))
        .route("/api/v1/sessions/{id}/clicks", post(add_click))
        .route("/api/v1/sessions/{id}/box", post(set_box))
        .route("/api/v1/sessions/{id}/undo", post(undo))
        .route("/api/v1/sessions/{id}/mask", get(get_mask))
        .route("/api/v1/sessions/{id}/advance", post(advance_frame))
        .route("/api/v1/sessions/{id}/export", post(export))
        .with_state(state)
}

fn decode_b64_png<T>(
    text: &str,
    what: &str,
    parse: impl Fn(&[u8], &std::path::Path) -> crate::Result<T>,
) -> Result<T, ApiError> {
    let bytes = BASE64
        .decode(text.trim())
        .map_err(|e| ApiError::unsupported(format!("{what}: invalid base64: {e}")))?;
    parse(&bytes, std::path::Path::new(what)).map_err(|e| ApiError::unsupported(e.to_string()))
}

struct Source {
    image: ImageGrid,
    gt: Option<BinaryMask>,
    cine: Option<(Vec<ImageGrid>, Option<Vec<BinaryMask>>)>,
}

fn resolve_source(req: CreateSession) -> Result<Source, ApiError> {
    if let Some(img) = &req.image {
        let image = decode_b64_png(img, "image", image_from_png)?;
        let gt = req
            .ground_truth
            .as_deref()
            .map(|g| decode_b64_png(g, "ground_truth", mask_from_png))
            .transpose()?;
        return Ok(Source {
            image,
            gt,
            cine: None,
        });
    }
    if let Some(path) = &req.manifest {
        let id = req
            .sample_id
            .as_deref()
            .ok_or_else(|| ApiError::unprocessable("manifest sessions need sample_id"))?;
        let manifest = load_manifest(path)?;
        let root = manifest_root(path);
        let (record_id, object_id) = id.split_once('/').unwrap_or((id, ""));
        let record = manifest
            .records
            .iter()
            .find(|r| r.id == record_id)
            .ok_or_else(|| ApiError::unprocessable(format!("no record {record_id}")))?;
        let mask_ref = record
            .masks
            .iter()
            .find(|m| object_id.is_empty() || m.object_id == object_id)
            .ok_or_else(|| ApiError::unprocessable(format!("no object {object_id}")))?;
        return Ok(Source {
            image: read_image(&root.join(&record.image))?,
            gt: Some(read_mask(&root.join(&mask_ref.path))?),
            cine: None,
        });
    }
    if let Some(dir) = &req.cine_loop {
        let cine = load_cine_loop(dir)?;
        let gt = match &req.object_id {
            Some(id) => Some(
                cine.objects()
                    .iter()
                    .find(|(o, _)| o == id)
                    .map(|(_, m)| m.clone())
                    .ok_or_else(|| ApiError::unprocessable(format!("no object {id}")))?,
            ),
            None => None,
        };
        let frames = cine.frames().to_vec();
        return Ok(Source {
            image: frames[0].clone(),
            gt: gt.as_ref().map(|g| g[0].clone()),
            cine: Some((frames, gt)),
        });
    }
    Err(ApiError::unprocessable(
        "one of image, manifest or cine_loop is required",
    ))
}

async fn create_session(
    State(state): State<AppState>,
    headers: HeaderMap,
    body: Bytes,
) -> Result<Json<SessionCreated>, ApiError> {
    let content_type = headers
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .unwrap_or("application/json");
    let source = if content_type.starts_with("image/png") {
        Source {
            image: image_from_png(&body, std::path::Path::new("upload"))
                .map_err(|e| ApiError::unsupported(e.to_string()))?,
            gt: None,
            cine: None,
        }
    } else if content_type.starts_with("application/json") {
        let req: CreateSession = serde_json::from_slice(&body)
            .map_err(|e| ApiError::unprocessable(format!("malformed body: {e}")))?;
        resolve_source(req)?
    } else {
        return Err(ApiError::unsupported(format!(
            "unsupported content type {content_type}"
        )));
    };
    if let Some(gt) = &source.gt {
        if gt.shape() != source.image.shape() {
            return Err(ApiError::unprocessable("ground truth does not match the image size"));
        }
    }
    let embedding = state.model.encode_image(&source.image)?;
    let (h, w) = source.image.shape();
    let frame_count = source.cine.as_ref().map_or(1, |(f, _)| f.len());
    let session = Session {
        image: source.image,
        embedding,
        gt: source.gt,
        state: Snapshot {
            prompts: PromptSet::default(),
            log: Vec::new(),
            mask: None,
        },
        undo: Vec::new(),
        frame_index: 0,
        cine: source.cine.map(|(frames, gt)| CineContext {
            frames,
            gt,
            tracker: state.config.tracker.build(),
        }),
        last_access: Instant::now(),
    };
    let has_ground_truth = session.gt.is_some();
    let id = Uuid::new_v4();
    state
        .sessions
        .lock()
        .expect("session map")
        .insert(id, Arc::new(Mutex::new(session)));
    Ok(Json(SessionCreated {
        session_id: id.to_string(),
        height: h,
        width: w,
        frame_index: 0,
        frame_count,
        has_ground_truth,
    }))
}

fn mask_response(s: &Session) -> Result<MaskResponse, ApiError> {
    let dsc = match (&s.state.mask, &s.gt) {
        (Some(m), Some(gt)) => Some(dsc(m, gt)?),
        _ => None,
    };
    Ok(MaskResponse {
        mask: s.state.mask.as_ref().map(RleMask::from_mask),
        dsc,
        prompt_count: s.state.log.len(),
        frame_index: s.frame_index,
    })
}

/// Applies new prompts, re-predicts and pushes the previous state onto the undo stack.
fn mutate(
    model: &PromptSegModel,
    s: &mut Session,
    prompts: PromptSet,
    event: PromptEvent,
) -> Result<MaskResponse, ApiError> {
    let (h, w) = s.image.shape();
    prompts.validate_bounds(h, w).map_err(|e| ApiError::unprocessable(e.to_string()))?;
    let (_, mask) = model.predict_embedded(&s.embedding, &prompts)?;
    let mut log = s.state.log.clone();
    log.push(event);
    let previous = std::mem::replace(
        &mut s.state,
        Snapshot {
            prompts,
            log,
            mask: Some(mask),
        },
    );
    s.undo.push(previous);
    mask_response(s)
}

async fn add_click(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Json(body): Json<ClickBody>,
) -> Result<Json<MaskResponse>, ApiError> {
    let session = state.session(&id)?;
    let mut s = session.lock().await;
    s.last_access = Instant::now();
    let point = Point {
        x: body.x,
        y: body.y,
        label: body.label,
    };
    let prompts = s.state.prompts.with_point(point);
    Ok(Json(mutate(&state.model, &mut s, prompts, PromptEvent::Point(point))?))
}

async fn set_box(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Json(body): Json<BoxBody>,
) -> Result<Json<MaskResponse>, ApiError> {
    let session = state.session(&id)?;
    let mut s = session.lock().await;
    s.last_access = Instant::now();
    let bbox = BoxPrompt {
        x0: body.x0,
        y0: body.y0,
        x1: body.x1,
        y1: body.y1,
    };
    let mut prompts = s.state.prompts.clone();
    prompts.bbox = Some(bbox);
    Ok(Json(mutate(&state.model, &mut s, prompts, PromptEvent::Box(bbox))?))
}

async fn undo(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
) -> Result<Json<MaskResponse>, ApiError> {
    let session = state.session(&id)?;
    let mut s = session.lock().await;
    s.last_access = Instant::now();
    let previous = s
        .undo
        .pop()
        .ok_or_else(|| ApiError::conflict("nothing to undo"))?;
    s.state = previous;
    Ok(Json(mask_response(&s)?))
}

async fn get_mask(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Query(query): Query<MaskQuery>,
) -> Result<Response, ApiError> {
    let session = state.session(&id)?;
    let mut s = session.lock().await;
    s.last_access = Instant::now();
    let mask = s
        .state
        .mask
        .as_ref()
        .ok_or_else(|| ApiError::conflict("no prompts"))?;
    match query.format.as_deref().unwrap_or("rle") {
        "rle" => Ok(Json(mask_response(&s)?).into_response()),
        "png" => {
            let png = mask_to_png(mask)?;
            Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
        }
        other => Err(ApiError::unprocessable(format!("unknown format {other}"))),
    }
}

async fn advance_frame(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
) -> Result<Json<AdvanceResponse>, ApiError> {
    let session = state.session(&id)?;
    let mut guard = session.lock().await;
    let s = &mut *guard;
    s.last_access = Instant::now();
    let current = s
        .state
        .mask
        .clone()
        .ok_or_else(|| ApiError::conflict("no prompts"))?;
    let next = s.frame_index + 1;
    let cine = s
        .cine
        .as_mut()
        .ok_or_else(|| ApiError::conflict("session has no cine loop"))?;
    if next >= cine.frames.len() {
        return Err(ApiError::conflict("already at the last frame"));
    }
    cine.tracker.init(&s.image, std::slice::from_ref(&current))?;
    let tracked = cine
        .tracker
        .propagate(&cine.frames[next])?
        .into_iter()
        .next()
        .ok_or_else(|| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "tracker returned no mask"))?;
    let frame = cine.frames[next].clone();
    if tracked.shape() != frame.shape() {
        return Err(Error::TrackerShape {
            frame: next,
            expected: frame.shape(),
            actual: tracked.shape(),
        }
        .into());
    }
    let gt = cine.gt.as_ref().map(|g| g[next].clone());
    s.embedding = state.model.encode_image(&frame)?;
    s.image = frame;
    s.gt = gt;
    s.frame_index = next;
    s.undo.clear();
    s.state = Snapshot {
        prompts: PromptSet::default(),
        log: Vec::new(),
        mask: Some(tracked.clone()),
    };
    let d = s.gt.as_ref().map(|g| dsc(&tracked, g)).transpose()?;
    Ok(Json(AdvanceResponse {
        frame_index: next,
        mask: RleMask::from_mask(&tracked),
        dsc: d,
        needs_intervention: d.is_some_and(|d| d < state.config.dsc_floor),
    }))
}

async fn export(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
) -> Result<Json<ExportResponse>, ApiError> {
    let session = state.session(&id)?;
    let mut s = session.lock().await;
    s.last_access = Instant::now();
    let mask_png = s
        .state
        .mask
        .as_ref()
        .map(|m| mask_to_png(m).map(|b| BASE64.encode(b)))
        .transpose()?;
    Ok(Json(ExportResponse {
        frame_index: s.frame_index,
        mask_png,
        prompts: s.state.prompts.clone(),
        prompt_log: s.state.log.clone(),
    }))
}

/// Serves until the process receives Ctrl-C; idle sessions are swept once a minute.
pub async fn serve(
    model: PromptSegModel,
    addr: std::net::SocketAddr,
    config: ServiceConfig,
) -> std::io::Result<()> {
    let state = AppState::new(Arc::new(model), config);
    let sweeper = state.clone();
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(Duration::from_secs(60));
        loop {
            tick.tick().await;
            let n = sweeper.expire_idle(Instant::now()).await;
            if n > 0 {
                tracing::info!(expired = n, "idle sessions removed");
            }
        }
    });
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(%addr, "annotation service listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn rle_round_trip(h in 1usize..10, w in 1usize..10, bits in any::<u128>()) {
            let mask = BinaryMask::from_fn(h, w, |y, x| (bits >> ((y * w + x) % 128)) & 1 == 1);
            let runs = rle_encode(&mask);
            for pair in runs.windows(2) {
                prop_assert!(pair[0][0] + pair[0][1] < pair[1][0]);
            }
            prop_assert_eq!(rle_decode(h, w, &runs).unwrap(), mask);
        }
    }

    #[test]
    fn rle_layout() {
        let mask = BinaryMask::new(2, 3, vec![0, 1, 1, 1, 0, 1]).unwrap();
        assert_eq!(rle_encode(&mask), vec![[1, 3], [5, 1]]);
        assert!(rle_decode(2, 3, &[[5, 2]]).is_err());
    }
}
