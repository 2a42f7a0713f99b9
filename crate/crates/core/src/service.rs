//! HTTP service: frame ingestion per stream, alarm review and labeling,
//! recalibration and model statistics.
//!
//! | method | path                         | purpose                                  |
//! |--------|------------------------------|------------------------------------------|
//! | GET    | `/health`                    | liveness probe (never authenticated)     |
//! | POST   | `/streams/{id}/frames`       | submit a frame batch, get `s_t` + events |
//! | GET    | `/streams/{id}/trace`        | recent `(t, delta, s)` of a stream       |
//! | GET    | `/alarms?status=&stream=`    | alarms, highest peak statistic first     |
//! | GET    | `/alarms/{id}`               | one alarm with its trace and summary     |
//! | POST   | `/alarms/{id}/label`         | feedback label                           |
//! | POST   | `/model/recalibrate`         | recompute `d_alpha`                      |
//! | GET    | `/model/stats`               | reference size, `d_alpha`, uptime        |
//!
//! Mutating requests may carry a `request_id` (body field or
//! `Idempotency-Key` header); a repeated id replays the first response.

use std::collections::{HashMap, VecDeque};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Instant;

use axum::extract::{DefaultBodyLimit, Path, Query, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::continual::{AlarmBook, ContinualError, FeedbackLabel, UpdatePolicy, Verdict};
use crate::detector::{AlarmRecord, AlarmStatus, DetectorConfig, TracePoint};
use crate::engine::{AlarmIds, EngineError, FrameOutcome, StreamEngine};
use crate::features::{FeatureVector, FeatureWeights, FIXED_DIMS};
use crate::ingest::{FeatureFrameRecord, FrameParser, IngestConfig, IngestError};
use crate::journal::{read_journal, replay, Journal, JournalError, ModelHandle};
use crate::store::{ModelStats, NominalModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceConfig {
    pub listen: SocketAddr,
    pub model_path: PathBuf,
    #[serde(default)]
    pub detector: DetectorConfig,
    #[serde(default)]
    pub policy: UpdatePolicy,
    #[serde(default)]
    pub weights: FeatureWeights,
    #[serde(default)]
    pub auth_token: Option<String>,
    #[serde(default)]
    pub journal_path: Option<PathBuf>,
    /// Default calibration vectors for `/model/recalibrate`.
    #[serde(default)]
    pub calibration_path: Option<PathBuf>,
}

const IDEMPOTENCY_CAPACITY: usize = 4096;

#[derive(Default)]
struct IdempotencyCache {
    entries: HashMap<String, (StatusCode, Value)>,
    order: VecDeque<String>,
}

impl IdempotencyCache {
    fn get(&self, key: &str) -> Option<(StatusCode, Value)> {
        self.entries.get(key).cloned()
    }

    fn put(&mut self, key: String, status: StatusCode, body: Value) {
        if self.entries.insert(key.clone(), (status, body)).is_none() {
            self.order.push_back(key);
            while self.order.len() > IDEMPOTENCY_CAPACITY {
                if let Some(old) = self.order.pop_front() {
                    self.entries.remove(&old);
                }
            }
        }
    }
}

/// Shared service state.
pub struct AppState {
    model: Arc<ModelHandle>,
    detector: DetectorConfig,
    policy: UpdatePolicy,
    weights: FeatureWeights,
    auth_token: Option<String>,
    calibration: Option<Vec<FeatureVector>>,
    ids: AlarmIds,
    streams: Mutex<HashMap<String, Arc<Mutex<StreamEngine>>>>,
    book: Mutex<AlarmBook>,
    idempotency: Mutex<IdempotencyCache>,
    started: Instant,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

impl AppState {
    pub fn new(
        model: Arc<ModelHandle>,
        detector: DetectorConfig,
        policy: UpdatePolicy,
        weights: FeatureWeights,
        auth_token: Option<String>,
    ) -> Result<Self, EngineError> {
        detector.validate()?;
        policy.validate()?;
        Ok(AppState {
            model,
            detector,
            policy,
            weights,
            auth_token,
            calibration: None,
            ids: AlarmIds::starting_at(1),
            streams: Mutex::new(HashMap::new()),
            book: Mutex::new(AlarmBook::new()),
            idempotency: Mutex::new(IdempotencyCache::default()),
            started: Instant::now(),
        })
    }

    pub fn with_calibration(mut self, vectors: Vec<FeatureVector>) -> Self {
        self.calibration = Some(vectors);
        self
    }

    /// Loads the model, replays an existing journal onto it and keeps
    /// appending to that journal.
    pub fn from_config(cfg: &ServiceConfig) -> anyhow::Result<Self> {
        let mut model = NominalModel::load_from_path(&cfg.model_path)?;
        let journal = match &cfg.journal_path {
            Some(path) => {
                if path.exists() {
                    let entries = read_journal(path)?;
                    let applied = replay(&mut model, &entries)?;
                    tracing::info!(applied, path = %path.display(), "replayed journal");
                }
                Some(Journal::open(path)?)
            }
            None => None,
        };
        let mut state = AppState::new(
            Arc::new(ModelHandle::new(model, journal)),
            cfg.detector.clone(),
            cfg.policy.clone(),
            cfg.weights,
            cfg.auth_token.clone(),
        )?;
        if let Some(path) = &cfg.calibration_path {
            let file = std::io::BufReader::new(std::fs::File::open(path)?);
            let parsed = crate::ingest::parse_stream(file, IngestConfig { weights: cfg.weights, ..Default::default() })?;
            state = state.with_calibration(parsed.frames.into_iter().flat_map(|f| f.objects).collect());
        }
        Ok(state)
    }

    pub fn model(&self) -> &Arc<ModelHandle> {
        &self.model
    }

    fn engine(&self, stream_id: &str) -> Result<Arc<Mutex<StreamEngine>>, ApiError> {
        let mut streams = lock(&self.streams);
        if let Some(e) = streams.get(stream_id) {
            return Ok(e.clone());
        }
        let engine = StreamEngine::new(
            stream_id,
            self.model.clone(),
            self.detector.clone(),
            self.policy.clone(),
            self.ids.clone(),
        )
        .map_err(|e| ApiError::internal(e.to_string()))?;
        let engine = Arc::new(Mutex::new(engine));
        streams.insert(stream_id.to_string(), engine.clone());
        Ok(engine)
    }

    fn stats_json(&self) -> Value {
        let stats: ModelStats = self.model.read().stats();
        let mut v = serde_json::to_value(stats).unwrap_or_else(|_| json!({}));
        v["uptime_secs"] = json!(self.started.elapsed().as_secs_f64());
        v["streams"] = json!(lock(&self.streams).len());
        v["alarms"] = json!(lock(&self.book).len());
        v
    }
}

/// Structured error body: `{"error": {"code": ..., "message": ...}}`.
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError { status, code, message: message.into() }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_input", message)
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", message)
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }

    fn body(&self) -> Value {
        json!({ "error": { "code": self.code, "message": self.message } })
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body())).into_response()
    }
}

impl From<ContinualError> for ApiError {
    fn from(e: ContinualError) -> Self {
        match e {
            ContinualError::UnknownAlarm(_) => ApiError::not_found(e.to_string()),
            ContinualError::AlarmOpen(_) => ApiError::new(StatusCode::CONFLICT, "alarm_open", e.to_string()),
            ContinualError::MissingSegment(_) => ApiError::new(StatusCode::CONFLICT, "no_segment", e.to_string()),
            ContinualError::InvalidInput(_) | ContinualError::Store(_) => ApiError::bad_request(e.to_string()),
            ContinualError::Journal(_) => ApiError::internal(e.to_string()),
        }
    }
}

impl From<JournalError> for ApiError {
    fn from(e: JournalError) -> Self {
        match e {
            JournalError::Store(_) => ApiError::bad_request(e.to_string()),
            _ => ApiError::internal(e.to_string()),
        }
    }
}

/// Accepts JSON bodies and reports decoding failures as structured errors.
struct JsonBody<T>(T);

impl<S, T> axum::extract::FromRequest<S> for JsonBody<T>
where
    T: for<'de> Deserialize<'de>,
    S: Send + Sync,
{
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> Result<Self, Self::Rejection> {
        match Json::<T>::from_request(req, state).await {
            Ok(Json(v)) => Ok(JsonBody(v)),
            Err(rej) => Err(ApiError::new(rej.status(), "malformed_payload", rej.body_text())),
        }
    }
}

fn idempotency_key(route: &str, headers: &HeaderMap, body_id: Option<&str>) -> Option<String> {
    let header_id = headers.get("idempotency-key").and_then(|v| v.to_str().ok());
    body_id.or(header_id).map(|id| format!("{route}\u{0}{id}"))
}

/// Runs `f` unless `key` has already been answered; successful and failed
/// responses are both remembered.
fn idempotent(
    state: &AppState,
    key: Option<String>,
    f: impl FnOnce() -> Result<Value, ApiError>,
) -> Response {
    if let Some(k) = &key {
        if let Some((status, body)) = lock(&state.idempotency).get(k) {
            return (status, Json(body)).into_response();
        }
    }
    let (status, body) = match f() {
        Ok(v) => (StatusCode::OK, v),
        Err(e) => (e.status, e.body()),
    };
    if let Some(k) = key {
        // Server faults are not cached so the client may retry.
        if !status.is_server_error() {
            lock(&state.idempotency).put(k, status, body.clone());
        }
    }
    (status, Json(body)).into_response()
}

pub fn router(state: Arc<AppState>) -> Router {
    let protected = Router::new()
        .route("/streams/{id}/frames", post(submit_frames))
        .route("/streams/{id}/trace", get(stream_trace))
        .route("/alarms", get(list_alarms))
        .route("/alarms/{id}", get(get_alarm))
        .route("/alarms/{id}/label", post(label_alarm))
        .route("/model/recalibrate", post(recalibrate))
        .route("/model/stats", get(model_stats))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token));
    Router::new()
        .route("/health", get(health))
        .merge(protected)
        .layer(DefaultBodyLimit::max(64 << 20))
        .with_state(state)
}

async fn require_token(State(state): State<Arc<AppState>>, req: Request, next: Next) -> Response {
    if let Some(token) = &state.auth_token {
        let supplied = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        if supplied != Some(token.as_str()) {
            return ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing or invalid bearer token")
                .into_response();
        }
    }
    next.run(req).await
}

async fn health() -> Json<Value> {
    Json(json!({ "status": "ok" }))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FramesRequest {
    #[serde(default)]
    request_id: Option<String>,
    frames: Vec<FeatureFrameRecord>,
}

#[derive(Debug, Serialize)]
struct FramesResponse {
    stream_id: String,
    results: Vec<FrameOutcome>,
}

async fn submit_frames(
    State(state): State<Arc<AppState>>,
    Path(stream_id): Path<String>,
    headers: HeaderMap,
    JsonBody(req): JsonBody<FramesRequest>,
) -> Response {
    let key = idempotency_key(&format!("frames/{stream_id}"), &headers, req.request_id.as_deref());
    let task_state = state.clone();
    let work = tokio::task::spawn_blocking(move || {
        idempotent(&task_state, key, || process_frames(&task_state, &stream_id, &req.frames))
    });
    match work.await {
        Ok(resp) => resp,
        Err(e) => ApiError::internal(e.to_string()).into_response(),
    }
}

fn process_frames(state: &AppState, stream_id: &str, records: &[FeatureFrameRecord]) -> Result<Value, ApiError> {
    let engine = state.engine(stream_id)?;
    let mut engine = lock(&engine);
    let mut parser = FrameParser::new(IngestConfig { weights: state.weights, ..Default::default() });
    let mut results = Vec::with_capacity(records.len());
    for (i, rec) in records.iter().enumerate() {
        let step = parser
            .parse_record(i, rec)
            .map_err(|e| frame_error(i, &results, e.to_string(), matches!(e, IngestError::Io(_))))
            .and_then(|frame| {
                engine.process(&frame).map_err(|e| {
                    let internal = matches!(e, EngineError::Journal(JournalError::Io(_)));
                    frame_error(i, &results, e.to_string(), internal)
                })
            });
        let out = step?;
        {
            let mut book = lock(&state.book);
            if let Some(rec) = &out.opened {
                book.open(rec.clone());
            }
            if let (Some(rec), Some(seg)) = (&out.closed, &out.segment) {
                book.close(rec.clone(), seg.clone());
            }
        }
        results.push(out);
    }
    serde_json::to_value(FramesResponse { stream_id: stream_id.to_string(), results })
        .map_err(|e| ApiError::internal(e.to_string()))
}

/// Frames before `index` were applied; the error says how far processing got.
fn frame_error(index: usize, done: &[FrameOutcome], msg: String, internal: bool) -> ApiError {
    let message = format!("frame {index}: {msg} ({} earlier frames applied)", done.len());
    if internal {
        ApiError::internal(message)
    } else {
        ApiError::bad_request(message)
    }
}

#[derive(Debug, Deserialize)]
struct TraceQuery {
    #[serde(default)]
    since: Option<u64>,
}

async fn stream_trace(
    State(state): State<Arc<AppState>>,
    Path(stream_id): Path<String>,
    Query(q): Query<TraceQuery>,
) -> Result<Json<Value>, ApiError> {
    let engine = lock(&state.streams)
        .get(&stream_id)
        .cloned()
        .ok_or_else(|| ApiError::not_found(format!("unknown stream '{stream_id}'")))?;
    let engine = lock(&engine);
    let det = engine.detector();
    let since = q.since.unwrap_or(0);
    let trace: Vec<TracePoint> = det.state().history.iter().filter(|p| p.t >= since).copied().collect();
    Ok(Json(json!({
        "stream_id": stream_id,
        "h": det.config().h,
        "d_alpha": det.d_alpha(),
        "s": det.state().s,
        "phase": det.state().phase,
        "open_alarm": engine.open_alarm(),
        "trace": trace,
    })))
}

#[derive(Debug, Deserialize)]
struct AlarmQuery {
    #[serde(default)]
    status: Option<String>,
    #[serde(default)]
    stream: Option<String>,
}

async fn list_alarms(
    State(state): State<Arc<AppState>>,
    Query(q): Query<AlarmQuery>,
) -> Result<Json<Value>, ApiError> {
    let status = q
        .status
        .as_deref()
        .map(str::parse::<AlarmStatus>)
        .transpose()
        .map_err(ApiError::bad_request)?;
    let alarms: Vec<AlarmRecord> = lock(&state.book)
        .list(status)
        .into_iter()
        .filter(|r| q.stream.as_ref().is_none_or(|s| &r.stream_id == s))
        .collect();
    Ok(Json(json!({ "alarms": alarms })))
}

/// Mean weighted coordinates of a segment, grouped like the feature layout.
fn segment_summary(vectors: &[FeatureVector]) -> Value {
    let Some(dim) = vectors.first().map(FeatureVector::dim) else {
        return Value::Null;
    };
    let mut mean = vec![0.0; dim];
    for v in vectors {
        for (m, x) in mean.iter_mut().zip(v.as_slice()) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= vectors.len() as f64);
    let split = |r: std::ops::Range<usize>| mean.get(r).map(<[f64]>::to_vec).unwrap_or_default();
    json!({
        "motion": split(0..4),
        "location": split(4..FIXED_DIMS),
        "appearance": split(FIXED_DIMS..dim),
    })
}

async fn get_alarm(State(state): State<Arc<AppState>>, Path(id): Path<u64>) -> Result<Json<Value>, ApiError> {
    let (record, label, segment) = {
        let book = lock(&state.book);
        let (record, segment) = book.get(id).ok_or_else(|| ApiError::not_found(format!("unknown alarm {id}")))?;
        (record.clone(), book.label_of(id).cloned(), segment.cloned())
    };
    let (trace, vectors) = match segment {
        Some(seg) => (seg.trace, seg.vectors),
        None => {
            // Open alarm: serve what the detector still remembers.
            let engine = lock(&state.streams).get(&record.stream_id).cloned();
            let trace = engine
                .map(|e| {
                    lock(&e).detector().state().history.iter().filter(|p| p.t >= record.tau_start).copied().collect()
                })
                .unwrap_or_default();
            (trace, Vec::new())
        }
    };
    Ok(Json(json!({
        "alarm": record,
        "label": label,
        "h": state.detector.h,
        "trace": trace,
        "vector_count": vectors.len(),
        "summary": segment_summary(&vectors),
    })))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelRequest {
    #[serde(default)]
    request_id: Option<String>,
    verdict: Verdict,
    #[serde(default)]
    sample_fraction: Option<f64>,
    #[serde(default)]
    labeler: String,
    #[serde(default)]
    timestamp: Option<u64>,
}

async fn label_alarm(
    State(state): State<Arc<AppState>>,
    Path(id): Path<u64>,
    headers: HeaderMap,
    JsonBody(req): JsonBody<LabelRequest>,
) -> Response {
    let key = idempotency_key(&format!("label/{id}"), &headers, req.request_id.as_deref());
    idempotent(&state, key, || {
        let label = FeedbackLabel {
            alarm_id: id,
            verdict: req.verdict,
            sample_fraction: req.sample_fraction,
            labeler: req.labeler.clone(),
            timestamp: req.timestamp.unwrap_or_else(unix_now),
        };
        let outcome = lock(&state.book).apply_label(&state.policy, &state.model, &label)?;
        let mut v = serde_json::to_value(outcome).map_err(|e| ApiError::internal(e.to_string()))?;
        v["model"] = state.stats_json();
        Ok(v)
    })
}

fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecalibrateRequest {
    #[serde(default)]
    request_id: Option<String>,
    #[serde(default)]
    alpha: Option<f64>,
    #[serde(default)]
    calibration: Option<Vec<FeatureVector>>,
}

async fn recalibrate(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    JsonBody(req): JsonBody<RecalibrateRequest>,
) -> Response {
    let key = idempotency_key("recalibrate", &headers, req.request_id.as_deref());
    idempotent(&state, key, || {
        let calibration = req
            .calibration
            .as_ref()
            .or(state.calibration.as_ref())
            .ok_or_else(|| ApiError::bad_request("no calibration vectors supplied or configured"))?;
        let alpha = req.alpha.unwrap_or_else(|| state.model.read().alpha());
        let d_alpha = state.model.recalibrate(calibration, alpha)?;
        let mut v = state.stats_json();
        v["d_alpha"] = json!(d_alpha);
        Ok(v)
    })
}

async fn model_stats(State(state): State<Arc<AppState>>) -> Json<Value> {
    Json(state.stats_json())
}

/// Binds and serves until interrupted.
pub async fn serve(cfg: ServiceConfig) -> anyhow::Result<()> {
    let state = Arc::new(AppState::from_config(&cfg)?);
    let listener = tokio::net::TcpListener::bind(cfg.listen).await?;
    tracing::info!(addr = %listener.local_addr()?, "serving");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
