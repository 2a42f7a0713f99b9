//! C ABI for the seqwatch detector.
//!
//! Every entry point returns an [`SwStatus`]. When it is not `SW_STATUS_OK`
//! a human-readable message is kept per thread and can be read with
//! [`sw_last_error_message`]. Handles ([`SwModel`], [`SwDetector`],
//! [`SwSession`]) are opaque and must be released with their `*_free`
//! function. Panics never cross the boundary; they surface as
//! `SW_STATUS_PANIC`.
//!
//! Feature vectors are passed as row-major `double` arrays of
//! `n_vectors * dim` values.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;

use seqwatch::continual::{ContinualError, UpdatePolicy};
use seqwatch::detector::{evidence, AlarmEvent, Detector, DetectorConfig, DetectorError, StepOutput};
use seqwatch::engine::{AlarmIds, EngineError, FrameOutcome, StreamEngine};
use seqwatch::features::{flow_stats_of, FeatureVector, FlowStats, FrameFeatures};
use seqwatch::journal::{InsertSource, JournalError, ModelHandle};
use seqwatch::store::{NominalModel, StoreError, TrainConfig};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SwStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Dimension = 3,
    Training = 4,
    Io = 5,
    OutOfOrder = 6,
    Panic = 7,
}

struct Failure {
    status: SwStatus,
    message: String,
}

impl Failure {
    fn new(status: SwStatus, message: impl Into<String>) -> Self {
        Failure { status, message: message.into() }
    }
}

impl From<StoreError> for Failure {
    fn from(e: StoreError) -> Self {
        let status = match e {
            StoreError::Training(_) | StoreError::EmptyCalibration => SwStatus::Training,
            StoreError::Dimension { .. } => SwStatus::Dimension,
            StoreError::Config(_) => SwStatus::InvalidArgument,
            StoreError::Load(_) => SwStatus::Io,
        };
        Failure::new(status, e.to_string())
    }
}

impl From<DetectorError> for Failure {
    fn from(e: DetectorError) -> Self {
        let status = match e {
            DetectorError::OutOfOrder { .. } => SwStatus::OutOfOrder,
            DetectorError::InvalidInput(_) | DetectorError::Config(_) => SwStatus::InvalidArgument,
        };
        Failure::new(status, e.to_string())
    }
}

impl From<JournalError> for Failure {
    fn from(e: JournalError) -> Self {
        match e {
            JournalError::Store(s) => s.into(),
            other => Failure::new(SwStatus::Io, other.to_string()),
        }
    }
}

impl From<ContinualError> for Failure {
    fn from(e: ContinualError) -> Self {
        match e {
            ContinualError::Store(s) => s.into(),
            ContinualError::Journal(j) => j.into(),
            other => Failure::new(SwStatus::InvalidArgument, other.to_string()),
        }
    }
}

impl From<EngineError> for Failure {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::Dimension { .. } => Failure::new(SwStatus::Dimension, e.to_string()),
            EngineError::Detector(d) => d.into(),
            EngineError::Store(s) => s.into(),
            EngineError::Journal(j) => j.into(),
            EngineError::Continual(c) => c.into(),
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: &str) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn clear_last_error() {
    LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SwStatus {
    clear_last_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SwStatus::Ok,
        Ok(Err(fail)) => {
            set_last_error(&fail.message);
            fail.status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".to_string());
            set_last_error(&format!("panic: {msg}"));
            SwStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure::new(SwStatus::NullPointer, format!("{what} is null"))
}

unsafe fn out_ref<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn handle_ref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn doubles<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn vectors(p: *const f64, n: usize, dim: usize) -> Result<Vec<FeatureVector>, Failure> {
    if n > 0 && dim == 0 {
        return Err(Failure::new(SwStatus::Dimension, "dimension must be positive"));
    }
    let len = n
        .checked_mul(dim)
        .ok_or_else(|| Failure::new(SwStatus::InvalidArgument, "n_vectors * dim overflows"))?;
    let data = doubles(p, len, "vector data")?;
    data.chunks(dim.max(1))
        .map(|row| {
            FeatureVector::new(row.to_vec())
                .map_err(|e| Failure::new(SwStatus::InvalidArgument, e.to_string()))
        })
        .collect()
}

unsafe fn path_arg(p: *const c_char) -> Result<String, Failure> {
    if p.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(str::to_owned)
        .map_err(|_| Failure::new(SwStatus::InvalidArgument, "path is not valid UTF-8"))
}

/// Message for the most recent failure on the calling thread, or NULL.
///
/// The pointer stays valid until the next `sw_*` call on the same thread.
#[no_mangle]
pub extern "C" fn sw_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sw_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SwFlowStats {
    pub mean: f64,
    pub variance: f64,
    pub skewness: f64,
    pub kurtosis: f64,
}

impl From<FlowStats> for SwFlowStats {
    fn from(s: FlowStats) -> Self {
        SwFlowStats { mean: s.mean, variance: s.variance, skewness: s.skewness, kurtosis: s.kurtosis }
    }
}

/// Mean, population variance, skewness and (non-excess) kurtosis of `len` values.
///
/// # Safety
/// `values` must point to `len` readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sw_flow_stats(values: *const f64, len: usize, out: *mut SwFlowStats) -> SwStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let xs = doubles(values, len, "values")?;
        let stats = flow_stats_of(xs).map_err(|e| Failure::new(SwStatus::InvalidArgument, e.to_string()))?;
        *out = stats.into();
        Ok(())
    })
}

/// Clamped evidence `d^m - d_alpha^m` for one distance.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sw_evidence(
    distance: f64,
    d_alpha: f64,
    exponent: u32,
    cap: f64,
    out: *mut f64,
) -> SwStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        *out = evidence(distance, d_alpha, exponent, cap)?;
        Ok(())
    })
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SwTrainConfig {
    pub k: usize,
    pub alpha: f64,
    /// Fraction of the input assigned to the calibration split.
    pub split_fraction: f64,
    pub rng_seed: u64,
    /// Reference set bound; 0 means unbounded.
    pub max_reference_size: usize,
    /// Fit a per-dimension min-max scaler.
    pub normalize: bool,
}

impl From<SwTrainConfig> for TrainConfig {
    fn from(c: SwTrainConfig) -> Self {
        TrainConfig {
            k: c.k,
            alpha: c.alpha,
            split_fraction: c.split_fraction,
            rng_seed: c.rng_seed,
            max_reference_size: (c.max_reference_size > 0).then_some(c.max_reference_size),
            normalize: c.normalize,
        }
    }
}

#[no_mangle]
pub extern "C" fn sw_train_config_default() -> SwTrainConfig {
    let d = TrainConfig::default();
    SwTrainConfig {
        k: d.k,
        alpha: d.alpha,
        split_fraction: d.split_fraction,
        rng_seed: d.rng_seed,
        max_reference_size: d.max_reference_size.unwrap_or(0),
        normalize: d.normalize,
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SwDetectorConfig {
    pub h: f64,
    pub n_consec: u32,
    /// Evidence for object-free frames; NaN selects `-d_alpha^m`.
    pub delta_floor: f64,
    pub evidence_cap: f64,
    /// Distance exponent; 0 selects the model dimensionality.
    pub exponent: u32,
    pub single_shot_threshold: f64,
    pub history_len: usize,
}

impl From<SwDetectorConfig> for DetectorConfig {
    fn from(c: SwDetectorConfig) -> Self {
        DetectorConfig {
            h: c.h,
            n_consec: c.n_consec,
            delta_floor: (!c.delta_floor.is_nan()).then_some(c.delta_floor),
            evidence_cap: c.evidence_cap,
            exponent: (c.exponent > 0).then_some(c.exponent),
            single_shot_threshold: c.single_shot_threshold,
            history_len: c.history_len,
        }
    }
}

#[no_mangle]
pub extern "C" fn sw_detector_config_default() -> SwDetectorConfig {
    let d = DetectorConfig::default();
    SwDetectorConfig {
        h: d.h,
        n_consec: d.n_consec,
        delta_floor: d.delta_floor.unwrap_or(f64::NAN),
        evidence_cap: d.evidence_cap,
        exponent: d.exponent.unwrap_or(0),
        single_shot_threshold: d.single_shot_threshold,
        history_len: d.history_len,
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SwUpdatePolicy {
    pub auto_insert_on_zero: bool,
    pub auto_insert_stride: u64,
    pub feedback_sample_fraction: f64,
    pub rng_seed: u64,
}

impl From<SwUpdatePolicy> for UpdatePolicy {
    fn from(p: SwUpdatePolicy) -> Self {
        UpdatePolicy {
            auto_insert_on_zero: p.auto_insert_on_zero,
            auto_insert_stride: p.auto_insert_stride,
            feedback_sample_fraction: p.feedback_sample_fraction,
            rng_seed: p.rng_seed,
        }
    }
}

#[no_mangle]
pub extern "C" fn sw_update_policy_default() -> SwUpdatePolicy {
    let d = UpdatePolicy::default();
    SwUpdatePolicy {
        auto_insert_on_zero: d.auto_insert_on_zero,
        auto_insert_stride: d.auto_insert_stride,
        feedback_sample_fraction: d.feedback_sample_fraction,
        rng_seed: d.rng_seed,
    }
}

/// A trained nominal model. Sessions created from it share its reference set.
pub struct SwModel {
    handle: Arc<ModelHandle>,
}

/// Trains a model on `n_vectors` nominal vectors. `cfg` may be NULL for defaults.
///
/// # Safety
/// `data` must hold `n_vectors * dim` doubles, `cfg` must be NULL or valid,
/// and `out` must be writable. On success `*out` owns a new handle.
#[no_mangle]
pub unsafe extern "C" fn sw_model_train(
    data: *const f64,
    n_vectors: usize,
    dim: usize,
    cfg: *const SwTrainConfig,
    out: *mut *mut SwModel,
) -> SwStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let cfg = cfg.as_ref().copied().unwrap_or_else(|| sw_train_config_default());
        let vs = vectors(data, n_vectors, dim)?;
        let model = NominalModel::train(&vs, &cfg.into())?;
        *out = into_model_ptr(model);
        Ok(())
    })
}

fn into_model_ptr(model: NominalModel) -> *mut SwModel {
    Box::into_raw(Box::new(SwModel { handle: Arc::new(ModelHandle::new(model, None)) }))
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sw_model_load(path: *const c_char, out: *mut *mut SwModel) -> SwStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let path = path_arg(path)?;
        *out = into_model_ptr(NominalModel::load_from_path(path)?);
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library and `path` be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn sw_model_save(model: *const SwModel, path: *const c_char) -> SwStatus {
    guard(|| {
        let model = handle_ref(model, "model")?;
        let path = path_arg(path)?;
        model
            .handle
            .snapshot()
            .save_to_path(&path)
            .map_err(|e| Failure::new(SwStatus::Io, format!("{path}: {e}")))
    })
}

/// Releases a model. Sessions created from it keep their own reference.
///
/// # Safety
/// `model` must be NULL or a live handle from this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn sw_model_free(model: *mut SwModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// k-th nearest neighbour distance of `query` to the reference set.
///
/// # Safety
/// `query` must hold `dim` doubles and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sw_model_knn_distance(
    model: *const SwModel,
    query: *const f64,
    dim: usize,
    out: *mut f64,
) -> SwStatus {
    guard(|| {
        let model = handle_ref(model, "model")?;
        let out = out_ref(out, "out")?;
        let q = vectors(query, 1, dim)?;
        *out = model.handle.read().knn_distance(&q[0])?;
        Ok(())
    })
}

/// Appends nominal vectors to the reference set. `inserted` may be NULL.
///
/// # Safety
/// `data` must hold `n_vectors * dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn sw_model_insert(
    model: *const SwModel,
    data: *const f64,
    n_vectors: usize,
    dim: usize,
    inserted: *mut usize,
) -> SwStatus {
    guard(|| {
        let model = handle_ref(model, "model")?;
        let vs = vectors(data, n_vectors, dim)?;
        let n = model.handle.insert(InsertSource::Feedback, None, &vs)?;
        if let Some(out) = inserted.as_mut() {
            *out = n;
        }
        Ok(())
    })
}

/// Recomputes `d_alpha` from a fresh calibration set. `d_alpha` may be NULL.
///
/// # Safety
/// `data` must hold `n_vectors * dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn sw_model_recalibrate(
    model: *const SwModel,
    data: *const f64,
    n_vectors: usize,
    dim: usize,
    alpha: f64,
    d_alpha: *mut f64,
) -> SwStatus {
    guard(|| {
        let model = handle_ref(model, "model")?;
        let vs = vectors(data, n_vectors, dim)?;
        let d = model.handle.recalibrate(&vs, alpha)?;
        if let Some(out) = d_alpha.as_mut() {
            *out = d;
        }
        Ok(())
    })
}

/// Summary of a model, mirrored from the service's `/model/stats`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SwModelStats {
    pub reference_size: usize,
    pub calibration_size: usize,
    pub dim: usize,
    pub k: usize,
    pub alpha: f64,
    pub d_alpha: f64,
    pub insert_count: u64,
}

/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sw_model_stats(model: *const SwModel, out: *mut SwModelStats) -> SwStatus {
    guard(|| {
        let model = handle_ref(model, "model")?;
        let out = out_ref(out, "out")?;
        let s = model.handle.read().stats();
        *out = SwModelStats {
            reference_size: s.reference_size,
            calibration_size: s.calibration_size,
            dim: s.dim,
            k: s.k,
            alpha: s.alpha,
            d_alpha: s.d_alpha,
            insert_count: s.insert_count,
        };
        Ok(())
    })
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SwEventKind {
    None = 0,
    Opened = 1,
    Closed = 2,
}

/// Result of one frame. Alarm fields are meaningful only when `event` is not
/// `SW_EVENT_KIND_NONE`; `tau_end`, `peak_*` and `closed_at` only on close.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SwStepResult {
    pub t: u64,
    pub delta: f64,
    pub s: f64,
    pub event: SwEventKind,
    pub tau_start: u64,
    pub detection_frame: u64,
    pub tau_end: u64,
    pub peak_frame: u64,
    pub peak_statistic: f64,
    pub closed_at: u64,
    /// Session alarms only; 0 for a bare detector.
    pub alarm_id: u64,
    /// Vectors auto-inserted after this frame (sessions only).
    pub inserted: usize,
}

impl SwStepResult {
    fn blank(t: u64, delta: f64, s: f64) -> Self {
        SwStepResult {
            t,
            delta,
            s,
            event: SwEventKind::None,
            tau_start: 0,
            detection_frame: 0,
            tau_end: 0,
            peak_frame: 0,
            peak_statistic: 0.0,
            closed_at: 0,
            alarm_id: 0,
            inserted: 0,
        }
    }

    fn with_event(mut self, event: Option<AlarmEvent>) -> Self {
        match event {
            None => {}
            Some(AlarmEvent::Opened { tau_start, detection_frame, statistic }) => {
                self.event = SwEventKind::Opened;
                self.tau_start = tau_start;
                self.detection_frame = detection_frame;
                self.peak_frame = detection_frame;
                self.peak_statistic = statistic;
            }
            Some(AlarmEvent::Closed { tau_start, detection_frame, tau_end, peak_frame, peak_statistic, closed_at }) => {
                self.event = SwEventKind::Closed;
                self.tau_start = tau_start;
                self.detection_frame = detection_frame;
                self.tau_end = tau_end;
                self.peak_frame = peak_frame;
                self.peak_statistic = peak_statistic;
                self.closed_at = closed_at;
            }
        }
        self
    }
}

impl From<StepOutput> for SwStepResult {
    fn from(o: StepOutput) -> Self {
        SwStepResult::blank(o.t, o.delta, o.s).with_event(o.event)
    }
}

impl From<&FrameOutcome> for SwStepResult {
    fn from(o: &FrameOutcome) -> Self {
        let mut r = SwStepResult::blank(o.t, o.delta, o.s);
        r.inserted = o.inserted;
        // a frame can both close one alarm and, never in practice, open another;
        // the close is reported
        if let Some(a) = o.closed.as_ref() {
            r.event = SwEventKind::Closed;
            r.tau_start = a.tau_start;
            r.detection_frame = a.detection_frame;
            r.tau_end = a.tau_end.unwrap_or(0);
            r.peak_frame = a.peak_frame;
            r.peak_statistic = a.peak_statistic;
            r.closed_at = a.closed_at.unwrap_or(0);
            r.alarm_id = a.id;
        } else if let Some(a) = o.opened.as_ref() {
            r.event = SwEventKind::Opened;
            r.tau_start = a.tau_start;
            r.detection_frame = a.detection_frame;
            r.peak_frame = a.peak_frame;
            r.peak_statistic = a.peak_statistic;
            r.alarm_id = a.id;
        }
        r
    }
}

/// A bare CUSUM detector fed with kNN distances or evidence values.
pub struct SwDetector {
    inner: Detector,
}

/// `cfg` may be NULL for defaults.
///
/// # Safety
/// `out` must be writable; on success it owns a new handle.
#[no_mangle]
pub unsafe extern "C" fn sw_detector_new(
    cfg: *const SwDetectorConfig,
    d_alpha: f64,
    model_dim: usize,
    out: *mut *mut SwDetector,
) -> SwStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let cfg = cfg.as_ref().copied().unwrap_or_else(|| sw_detector_config_default());
        let inner = Detector::new(cfg.into(), d_alpha, model_dim)?;
        *out = Box::into_raw(Box::new(SwDetector { inner }));
        Ok(())
    })
}

/// Feeds the kNN distances of one frame's objects (`n` may be 0).
///
/// # Safety
/// `distances` must hold `n` doubles and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sw_detector_step(
    detector: *mut SwDetector,
    t: u64,
    distances: *const f64,
    n: usize,
    out: *mut SwStepResult,
) -> SwStatus {
    guard(|| {
        let det = out_ref(detector, "detector")?;
        let out = out_ref(out, "out")?;
        let ds = doubles(distances, n, "distances")?;
        *out = det.inner.step(t, ds)?.into();
        Ok(())
    })
}

/// Feeds a precomputed evidence value.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sw_detector_step_delta(
    detector: *mut SwDetector,
    t: u64,
    delta: f64,
    out: *mut SwStepResult,
) -> SwStatus {
    guard(|| {
        let det = out_ref(detector, "detector")?;
        let out = out_ref(out, "out")?;
        *out = det.inner.step_delta(t, delta)?.into();
        Ok(())
    })
}

/// # Safety
/// `detector` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn sw_detector_reset(detector: *mut SwDetector) -> SwStatus {
    guard(|| {
        out_ref(detector, "detector")?.inner.reset();
        Ok(())
    })
}

/// # Safety
/// `detector` must be NULL or a live handle, freed once.
#[no_mangle]
pub unsafe extern "C" fn sw_detector_free(detector: *mut SwDetector) {
    if !detector.is_null() {
        drop(Box::from_raw(detector));
    }
}

/// One stream bound to a model: kNN scoring, CUSUM and auto-insertion.
pub struct SwSession {
    engine: StreamEngine,
}

/// Opens a stream on `model`. The session shares the model's reference set,
/// so auto-inserted vectors are visible through the model handle. `cfg` and
/// `policy` may be NULL for defaults.
///
/// # Safety
/// `model` must be live, `stream_id` NULL or NUL-terminated, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sw_session_new(
    model: *const SwModel,
    stream_id: *const c_char,
    cfg: *const SwDetectorConfig,
    policy: *const SwUpdatePolicy,
    out: *mut *mut SwSession,
) -> SwStatus {
    guard(|| {
        let model = handle_ref(model, "model")?;
        let out = out_ref(out, "out")?;
        let id = if stream_id.is_null() { "default".to_string() } else { path_arg(stream_id)? };
        let cfg = cfg.as_ref().copied().unwrap_or_else(|| sw_detector_config_default());
        let policy = policy.as_ref().copied().unwrap_or_else(|| sw_update_policy_default());
        let engine = StreamEngine::new(
            id,
            Arc::clone(&model.handle),
            cfg.into(),
            policy.into(),
            AlarmIds::starting_at(1),
        )?;
        *out = Box::into_raw(Box::new(SwSession { engine }));
        Ok(())
    })
}

/// Processes one frame of `n_objects` assembled feature vectors.
///
/// # Safety
/// `data` must hold `n_objects * dim` doubles and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sw_session_process(
    session: *mut SwSession,
    t: u64,
    data: *const f64,
    n_objects: usize,
    dim: usize,
    out: *mut SwStepResult,
) -> SwStatus {
    guard(|| {
        let session = out_ref(session, "session")?;
        let out = out_ref(out, "out")?;
        let objects = vectors(data, n_objects, dim)?;
        // the engine scores assembled vectors only; frame-level flow is not needed
        let flow = FlowStats { mean: 0.0, variance: 0.0, skewness: 0.0, kurtosis: 0.0 };
        let frame = FrameFeatures { t, objects, flow, raw_object_meta: None };
        let outcome = session.engine.process(&frame)?;
        *out = (&outcome).into();
        Ok(())
    })
}

/// # Safety
/// `session` must be NULL or a live handle, freed once.
#[no_mangle]
pub unsafe extern "C" fn sw_session_free(session: *mut SwSession) {
    if !session.is_null() {
        drop(Box::from_raw(session));
    }
}
