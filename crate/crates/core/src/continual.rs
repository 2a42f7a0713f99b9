//! Continual learning from nominal frames and operator feedback.
//!
//! Two update paths feed the reference set without retraining:
//!
//! * frames whose statistic is zero are nominal; every `stride`-th vector
//!   observed on such frames is inserted;
//! * an alarm labeled as a false alarm contributes a seeded uniform sample of
//!   its segment's vectors.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::{AlarmRecord, AlarmSegment, AlarmStatus};
use crate::features::FeatureVector;
use crate::journal::{InsertSource, JournalError, ModelHandle};
use crate::store::{NominalModel, StoreError};

#[derive(Debug, Error)]
pub enum ContinualError {
    #[error("unknown alarm {0}")]
    UnknownAlarm(u64),
    #[error("alarm {0} is still open")]
    AlarmOpen(u64),
    #[error("alarm {0} has no retained segment")]
    MissingSegment(u64),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Journal(#[from] JournalError),
}

type Result<T> = std::result::Result<T, ContinualError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    FalseAlarm,
    TrueAnomaly,
}

/// An operator's verdict on a closed alarm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackLabel {
    pub alarm_id: u64,
    pub verdict: Verdict,
    /// Fraction of the segment's vectors to fold in; falls back to the policy.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_fraction: Option<f64>,
    #[serde(default)]
    pub labeler: String,
    /// Unix seconds.
    #[serde(default)]
    pub timestamp: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UpdatePolicy {
    pub auto_insert_on_zero: bool,
    /// Insert every `stride`-th vector seen on zero-statistic frames.
    pub auto_insert_stride: u64,
    pub feedback_sample_fraction: f64,
    pub rng_seed: u64,
}

impl Default for UpdatePolicy {
    fn default() -> Self {
        UpdatePolicy {
            auto_insert_on_zero: true,
            auto_insert_stride: 30,
            feedback_sample_fraction: 0.2,
            rng_seed: 0,
        }
    }
}

impl UpdatePolicy {
    pub fn validate(&self) -> Result<()> {
        if self.auto_insert_stride == 0 {
            return Err(ContinualError::InvalidInput("auto_insert_stride must be >= 1".into()));
        }
        check_fraction(self.feedback_sample_fraction)
    }
}

fn check_fraction(f: f64) -> Result<()> {
    if !(f > 0.0 && f <= 1.0) {
        return Err(ContinualError::InvalidInput(format!("sample fraction {f} must lie in (0, 1]")));
    }
    Ok(())
}

/// Counts vectors seen on zero-statistic frames and picks every stride-th.
#[derive(Debug, Clone)]
pub struct AutoInserter {
    policy: UpdatePolicy,
    eligible_seen: u64,
}

impl AutoInserter {
    pub fn new(policy: UpdatePolicy) -> Result<Self> {
        policy.validate()?;
        Ok(AutoInserter { policy, eligible_seen: 0 })
    }

    pub fn policy(&self) -> &UpdatePolicy {
        &self.policy
    }

    /// Vectors of a frame with `s_t = 0` selected for insertion.
    pub fn select(&mut self, frame_vectors: &[FeatureVector]) -> Vec<FeatureVector> {
        if !self.policy.auto_insert_on_zero {
            return Vec::new();
        }
        let stride = self.policy.auto_insert_stride;
        let mut picked = Vec::new();
        for v in frame_vectors {
            if self.eligible_seen.is_multiple_of(stride) {
                picked.push(v.clone());
            }
            self.eligible_seen += 1;
        }
        picked
    }

    /// Applies the zero-statistic rule to a plain model. Frames with a
    /// positive statistic are ignored.
    pub fn on_frame_nominal(
        &mut self,
        model: &mut NominalModel,
        frame_vectors: &[FeatureVector],
        statistic: f64,
    ) -> Result<usize> {
        if statistic != 0.0 {
            return Ok(0);
        }
        let picked = self.select(frame_vectors);
        Ok(model.insert_nominal(&picked)?)
    }
}

/// Seeded uniform sample (without replacement) of `fraction` of `vectors`,
/// returned in segment order.
pub fn sample_segment(
    vectors: &[FeatureVector],
    fraction: f64,
    seed: u64,
    alarm_id: u64,
) -> Result<Vec<FeatureVector>> {
    check_fraction(fraction)?;
    let n = vectors.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let amount = (((fraction * n as f64) - 1e-9).ceil() as usize).clamp(1, n);
    if amount == n {
        return Ok(vectors.to_vec());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ alarm_id.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut idx = rand::seq::index::sample(&mut rng, n, amount).into_vec();
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| vectors[i].clone()).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackOutcome {
    pub alarm_id: u64,
    pub status: AlarmStatus,
    pub inserted: usize,
    pub reference_size: usize,
}

/// Applies a label to an alarm against a plain model: a false alarm folds a
/// sample of its segment into the reference set; a true anomaly only updates
/// the status. Repeating the same verdict is a no-op.
pub fn apply_feedback(
    policy: &UpdatePolicy,
    model: &mut NominalModel,
    alarm: &mut AlarmRecord,
    segment: &AlarmSegment,
    label: &FeedbackLabel,
) -> Result<FeedbackOutcome> {
    let picked = plan_feedback(policy, alarm, segment, label)?;
    let inserted = model.insert_nominal(&picked)?;
    alarm.status = status_for(label.verdict);
    Ok(FeedbackOutcome {
        alarm_id: alarm.id,
        status: alarm.status,
        inserted,
        reference_size: model.reference_size(),
    })
}

fn status_for(v: Verdict) -> AlarmStatus {
    match v {
        Verdict::FalseAlarm => AlarmStatus::LabeledFalse,
        Verdict::TrueAnomaly => AlarmStatus::LabeledTrue,
    }
}

/// Vectors a label would insert, after validating it against the alarm.
fn plan_feedback(
    policy: &UpdatePolicy,
    alarm: &AlarmRecord,
    segment: &AlarmSegment,
    label: &FeedbackLabel,
) -> Result<Vec<FeatureVector>> {
    if label.alarm_id != alarm.id {
        return Err(ContinualError::UnknownAlarm(label.alarm_id));
    }
    if !alarm.status.is_closed() {
        return Err(ContinualError::AlarmOpen(alarm.id));
    }
    let fraction = label.sample_fraction.unwrap_or(policy.feedback_sample_fraction);
    check_fraction(fraction)?;
    // Relabeling with the same verdict changes nothing; a false-alarm label
    // after a true-anomaly label still inserts, the reverse cannot un-insert.
    if alarm.status == status_for(label.verdict) || label.verdict == Verdict::TrueAnomaly {
        return Ok(Vec::new());
    }
    if alarm.status == AlarmStatus::LabeledFalse {
        return Ok(Vec::new());
    }
    sample_segment(&segment.vectors, fraction, policy.rng_seed, alarm.id)
}

#[derive(Debug, Clone)]
struct BookEntry {
    record: AlarmRecord,
    segment: Option<AlarmSegment>,
    label: Option<FeedbackLabel>,
    /// Whether a false-alarm label has already inserted vectors.
    absorbed: bool,
}

/// Registry of alarms with their retained segments and labels.
#[derive(Debug, Clone, Default)]
pub struct AlarmBook {
    entries: BTreeMap<u64, BookEntry>,
}

impl AlarmBook {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records a freshly opened alarm.
    pub fn open(&mut self, record: AlarmRecord) {
        self.entries.insert(
            record.id,
            BookEntry { record, segment: None, label: None, absorbed: false },
        );
    }

    /// Stores the closed record and its segment (replacing the open record).
    pub fn close(&mut self, record: AlarmRecord, segment: AlarmSegment) {
        let entry = self.entries.entry(record.id).or_insert_with(|| BookEntry {
            record: record.clone(),
            segment: None,
            label: None,
            absorbed: false,
        });
        entry.record = record;
        entry.segment = Some(segment);
    }

    pub fn get(&self, id: u64) -> Option<(&AlarmRecord, Option<&AlarmSegment>)> {
        self.entries.get(&id).map(|e| (&e.record, e.segment.as_ref()))
    }

    pub fn label_of(&self, id: u64) -> Option<&FeedbackLabel> {
        self.entries.get(&id).and_then(|e| e.label.as_ref())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Alarms ordered by peak statistic, highest first (ties by id).
    pub fn list(&self, status: Option<AlarmStatus>) -> Vec<AlarmRecord> {
        let mut out: Vec<AlarmRecord> = self
            .entries
            .values()
            .map(|e| e.record.clone())
            .filter(|r| status.is_none_or(|s| r.status == s))
            .collect();
        out.sort_by(|a, b| b.peak_statistic.total_cmp(&a.peak_statistic).then(a.id.cmp(&b.id)));
        out
    }

    pub fn closed_records(&self) -> Vec<AlarmRecord> {
        self.entries.values().filter(|e| e.record.status.is_closed()).map(|e| e.record.clone()).collect()
    }

    /// Applies a label through the shared model: sampling, insertion and
    /// journaling happen under the model's write lock.
    pub fn apply_label(
        &mut self,
        policy: &UpdatePolicy,
        model: &ModelHandle,
        label: &FeedbackLabel,
    ) -> Result<FeedbackOutcome> {
        let entry = self.entries.get_mut(&label.alarm_id).ok_or(ContinualError::UnknownAlarm(label.alarm_id))?;
        if !entry.record.status.is_closed() {
            return Err(ContinualError::AlarmOpen(label.alarm_id));
        }
        let empty = AlarmSegment::default();
        let segment = match (&entry.segment, label.verdict) {
            (Some(s), _) => s,
            (None, Verdict::TrueAnomaly) => &empty,
            (None, Verdict::FalseAlarm) => return Err(ContinualError::MissingSegment(label.alarm_id)),
        };
        let picked = if entry.absorbed {
            Vec::new()
        } else {
            plan_feedback(policy, &entry.record, segment, label)?
        };
        let inserted = model.insert(InsertSource::Feedback, Some(label.alarm_id), &picked)?;
        if label.verdict == Verdict::FalseAlarm {
            entry.absorbed = true;
        }
        model.record_label(label, inserted)?;
        entry.record.status = status_for(label.verdict);
        entry.label = Some(label.clone());
        Ok(FeedbackOutcome {
            alarm_id: label.alarm_id,
            status: entry.record.status,
            inserted,
            reference_size: model.read().reference_size(),
        })
    }
}
