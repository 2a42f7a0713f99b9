//! Per-stream processing: kNN scoring, the sequential detector, alarm
//! segmentation with retained vectors, and automatic nominal inserts.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::continual::{AutoInserter, ContinualError, UpdatePolicy};
use crate::detector::{
    AlarmEvent, AlarmRecord, AlarmSegment, AlarmStatus, Detector, DetectorConfig, DetectorError,
    TracePoint,
};
use crate::features::{FeatureVector, FrameFeatures};
use crate::journal::{InsertSource, JournalError, ModelHandle};
use crate::store::StoreError;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("frame {t}: object dimension {got} does not match model dimension {expected}")]
    Dimension { t: u64, expected: usize, got: usize },
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Journal(#[from] JournalError),
    #[error(transparent)]
    Continual(#[from] ContinualError),
}

/// Shared, monotonically increasing alarm id source.
#[derive(Debug, Clone, Default)]
pub struct AlarmIds(Arc<AtomicU64>);

impl AlarmIds {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn starting_at(first: u64) -> Self {
        AlarmIds(Arc::new(AtomicU64::new(first)))
    }

    pub fn next(&self) -> u64 {
        self.0.fetch_add(1, Ordering::Relaxed)
    }
}

/// What one frame did to the stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameOutcome {
    pub t: u64,
    pub delta: f64,
    pub s: f64,
    /// Largest object kNN distance (`None` for an object-free frame).
    pub max_distance: Option<f64>,
    pub n_objects: usize,
    /// Vectors auto-inserted into the reference set after this frame.
    pub inserted: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub opened: Option<AlarmRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub closed: Option<AlarmRecord>,
    #[serde(skip)]
    pub segment: Option<AlarmSegment>,
}

impl FrameOutcome {
    pub fn trace_point(&self) -> TracePoint {
        TracePoint { t: self.t, delta: self.delta, s: self.s }
    }
}

#[derive(Debug)]
struct PendingFrame {
    point: TracePoint,
    vectors: Vec<FeatureVector>,
}

/// One stream bound to a shared model.
#[derive(Debug)]
pub struct StreamEngine {
    stream_id: String,
    detector: Detector,
    model: Arc<ModelHandle>,
    inserter: AutoInserter,
    ids: AlarmIds,
    /// Frames from the current `tau_start` candidate onwards.
    pending: VecDeque<PendingFrame>,
    max_pending_frames: usize,
    open: Option<AlarmRecord>,
}

pub const DEFAULT_MAX_PENDING_FRAMES: usize = 100_000;

impl StreamEngine {
    pub fn new(
        stream_id: impl Into<String>,
        model: Arc<ModelHandle>,
        detector_cfg: DetectorConfig,
        policy: UpdatePolicy,
        ids: AlarmIds,
    ) -> Result<Self, EngineError> {
        let (d_alpha, dim) = {
            let m = model.read();
            (m.d_alpha(), m.dim())
        };
        Ok(StreamEngine {
            stream_id: stream_id.into(),
            detector: Detector::new(detector_cfg, d_alpha, dim)?,
            model,
            inserter: AutoInserter::new(policy)?,
            ids,
            pending: VecDeque::new(),
            max_pending_frames: DEFAULT_MAX_PENDING_FRAMES,
            open: None,
        })
    }

    /// Bounds the frames retained for a segment (at least one).
    pub fn with_max_pending_frames(mut self, n: usize) -> Self {
        self.max_pending_frames = n.max(1);
        self
    }

    pub fn stream_id(&self) -> &str {
        &self.stream_id
    }

    pub fn detector(&self) -> &Detector {
        &self.detector
    }

    pub fn model(&self) -> &Arc<ModelHandle> {
        &self.model
    }

    pub fn open_alarm(&self) -> Option<&AlarmRecord> {
        self.open.as_ref()
    }

    pub fn process(&mut self, frame: &FrameFeatures) -> Result<FrameOutcome, EngineError> {
        let (distances, d_alpha) = {
            let model = self.model.read();
            let expected = model.dim();
            if let Some(bad) = frame.objects.iter().find(|o| o.dim() != expected) {
                return Err(EngineError::Dimension { t: frame.t, expected, got: bad.dim() });
            }
            (model.knn_distances(&frame.objects)?, model.d_alpha())
        };
        if d_alpha != self.detector.d_alpha() {
            self.detector.set_d_alpha(d_alpha)?;
        }
        let step = self.detector.step(frame.t, &distances)?;
        let point = TracePoint { t: step.t, delta: step.delta, s: step.s };
        self.pending.push_back(PendingFrame { point, vectors: frame.objects.clone() });

        let mut out = FrameOutcome {
            t: step.t,
            delta: step.delta,
            s: step.s,
            max_distance: distances.iter().copied().reduce(f64::max),
            n_objects: frame.objects.len(),
            inserted: 0,
            opened: None,
            closed: None,
            segment: None,
        };

        match step.event {
            Some(AlarmEvent::Opened { tau_start, detection_frame, statistic }) => {
                let record = AlarmRecord {
                    id: self.ids.next(),
                    stream_id: self.stream_id.clone(),
                    tau_start,
                    tau_end: None,
                    detection_frame,
                    peak_frame: detection_frame,
                    peak_statistic: statistic,
                    closed_at: None,
                    status: AlarmStatus::Open,
                };
                self.open = Some(record.clone());
                out.opened = Some(record);
            }
            Some(AlarmEvent::Closed {
                tau_start,
                detection_frame,
                tau_end,
                peak_frame,
                peak_statistic,
                closed_at,
            }) => {
                let id = self.open.take().map_or_else(|| self.ids.next(), |r| r.id);
                let segment = AlarmSegment {
                    vectors: self
                        .pending
                        .iter()
                        .filter(|f| (tau_start..=tau_end).contains(&f.point.t))
                        .flat_map(|f| f.vectors.iter().cloned())
                        .collect(),
                    trace: self
                        .pending
                        .iter()
                        .filter(|f| f.point.t >= tau_start)
                        .map(|f| f.point)
                        .collect(),
                };
                out.closed = Some(AlarmRecord {
                    id,
                    stream_id: self.stream_id.clone(),
                    tau_start,
                    tau_end: Some(tau_end),
                    detection_frame,
                    peak_frame,
                    peak_statistic,
                    closed_at: Some(closed_at),
                    status: AlarmStatus::Closed,
                });
                out.segment = Some(segment);
            }
            None => {
                if let Some(open) = self.open.as_mut() {
                    if let Some(peak) = self.detector.state().open {
                        open.peak_frame = peak.peak_frame;
                        open.peak_statistic = peak.peak_statistic;
                    }
                }
            }
        }

        // The closing frame resets the statistic by rule rather than by
        // evidence, so it does not count as nominal.
        if step.s == 0.0 && out.closed.is_none() {
            let picked = self.inserter.select(&frame.objects);
            out.inserted = self.model.insert(InsertSource::AutoNominal, None, &picked)?;
        }

        let candidate = self.detector.state().tau_start_candidate;
        if self.open.is_none() {
            while self.pending.front().is_some_and(|f| f.point.t < candidate) {
                self.pending.pop_front();
            }
        }
        while self.pending.len() > self.max_pending_frames {
            self.pending.pop_front();
        }
        Ok(out)
    }

    /// Processes frames in order, stopping at the first error.
    pub fn process_all<'a>(
        &mut self,
        frames: impl IntoIterator<Item = &'a FrameFeatures>,
    ) -> Result<Vec<FrameOutcome>, EngineError> {
        frames.into_iter().map(|f| self.process(f)).collect()
    }
}
