//! Sequential decision core.
//!
//! Each frame contributes evidence `delta_t = (max_i d_t^i)^m - d_alpha^m`,
//! accumulated as `s_t = max(s_{t-1} + delta_t, 0)`. An alarm opens when
//! `s_t > h`. While the alarm is open, `n_consec` strictly decreasing steps
//! close it: `tau_end` is the frame the decrease started from, and the
//! statistic is reset to zero.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DetectorError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("frame {got} does not follow frame {last}")]
    OutOfOrder { last: u64, got: u64 },
}

type Result<T> = std::result::Result<T, DetectorError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    /// Alarm threshold on the statistic.
    pub h: f64,
    /// Strictly decreasing steps needed to close an alarm.
    pub n_consec: u32,
    /// Evidence for frames without objects; `None` means `-d_alpha^m` (clamped).
    pub delta_floor: Option<f64>,
    /// Symmetric clamp on `|delta_t|`.
    pub evidence_cap: f64,
    /// Power applied to distances; `None` uses the model dimensionality.
    pub exponent: Option<u32>,
    /// Threshold on the instantaneous evidence for the single-shot baseline.
    pub single_shot_threshold: f64,
    /// Number of recent `(t, delta, s)` points retained for audit.
    pub history_len: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            h: 1e6,
            n_consec: 5,
            delta_floor: None,
            evidence_cap: 1e6,
            exponent: None,
            single_shot_threshold: 0.0,
            history_len: 1024,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.h > 0.0) || self.h.is_nan() {
            return Err(DetectorError::Config(format!("h = {} must be positive", self.h)));
        }
        if self.n_consec == 0 {
            return Err(DetectorError::Config("n_consec must be at least 1".into()));
        }
        if !(self.evidence_cap > 0.0) {
            return Err(DetectorError::Config("evidence_cap must be positive".into()));
        }
        if let Some(f) = self.delta_floor {
            if !(f <= 0.0) {
                return Err(DetectorError::Config(format!("delta_floor {f} must be <= 0")));
            }
        }
        if self.exponent == Some(0) {
            return Err(DetectorError::Config("exponent must be at least 1".into()));
        }
        if self.single_shot_threshold.is_nan() {
            return Err(DetectorError::Config("single_shot_threshold is NaN".into()));
        }
        Ok(())
    }
}

/// Anomaly evidence `clamp(d^m - d_alpha^m, -cap, cap)`.
///
/// Powers are taken directly while they stay finite. Once either overflows,
/// the difference is evaluated in the log domain as
/// `hi^m * (1 - (lo/hi)^m)` and saturated at the cap. An infinite cap is
/// treated as `f64::MAX`.
pub fn evidence(distance: f64, d_alpha: f64, exponent: u32, cap: f64) -> Result<f64> {
    if !(distance >= 0.0) || !(d_alpha >= 0.0) {
        return Err(DetectorError::InvalidInput(format!(
            "distances must be non-negative (got {distance}, d_alpha {d_alpha})"
        )));
    }
    if exponent == 0 {
        return Err(DetectorError::InvalidInput("exponent must be at least 1".into()));
    }
    let cap = cap.min(f64::MAX);
    if distance == d_alpha {
        return Ok(0.0);
    }
    let m = exponent as i32;
    let (pd, pa) = (distance.powi(m), d_alpha.powi(m));
    let direct = pd - pa;
    if pd.is_finite() && pa.is_finite() && direct.is_finite() {
        return Ok(direct.clamp(-cap, cap));
    }

    let (hi, lo, sign) = if distance > d_alpha {
        (distance, d_alpha, 1.0)
    } else {
        (d_alpha, distance, -1.0)
    };
    let m = f64::from(exponent);
    let ratio_term = if lo == 0.0 { 1.0 } else { -(m * (lo / hi).ln()).exp_m1() };
    let log_mag = m * hi.ln() + ratio_term.ln();
    if log_mag >= cap.ln() {
        Ok(sign * cap)
    } else {
        Ok(sign * log_mag.exp())
    }
}

/// Single-shot baseline: flag the frame when its evidence exceeds the
/// configured threshold.
pub fn single_shot_decision(
    max_knn_distance: f64,
    d_alpha: f64,
    exponent: u32,
    cfg: &DetectorConfig,
) -> Result<bool> {
    Ok(evidence(max_knn_distance, d_alpha, exponent, cfg.evidence_cap)? > cfg.single_shot_threshold)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Monitoring,
    InAlarm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub t: u64,
    pub delta: f64,
    pub s: f64,
}

/// An alarm that has crossed `h` and is not yet closed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpenAlarm {
    pub tau_start: u64,
    pub detection_frame: u64,
    pub peak_frame: u64,
    pub peak_statistic: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AlarmEvent {
    Opened {
        tau_start: u64,
        detection_frame: u64,
        statistic: f64,
    },
    Closed {
        tau_start: u64,
        detection_frame: u64,
        tau_end: u64,
        peak_frame: u64,
        peak_statistic: f64,
        /// Frame at which the decrease run completed.
        closed_at: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepOutput {
    pub t: u64,
    pub delta: f64,
    /// Statistic after this frame, after any post-alarm reset.
    pub s: f64,
    pub event: Option<AlarmEvent>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorState {
    pub s: f64,
    pub last_t: Option<u64>,
    /// Last frame at which the statistic was zero.
    pub tau_start_candidate: u64,
    pub phase: Phase,
    pub decrease_run: u32,
    /// Frame the current decrease run started from.
    pub run_start: u64,
    pub open: Option<OpenAlarm>,
    pub history: VecDeque<TracePoint>,
}

impl Default for DetectorState {
    fn default() -> Self {
        DetectorState {
            s: 0.0,
            last_t: None,
            tau_start_candidate: 0,
            phase: Phase::Monitoring,
            decrease_run: 0,
            run_start: 0,
            open: None,
            history: VecDeque::new(),
        }
    }
}

/// One stream's CUSUM detector bound to a baseline `d_alpha`.
#[derive(Debug, Clone)]
pub struct Detector {
    cfg: DetectorConfig,
    d_alpha: f64,
    exponent: u32,
    floor: f64,
    state: DetectorState,
}

impl Detector {
    /// `model_dim` supplies the exponent unless the config overrides it.
    pub fn new(cfg: DetectorConfig, d_alpha: f64, model_dim: usize) -> Result<Self> {
        cfg.validate()?;
        if !(d_alpha >= 0.0 && d_alpha.is_finite()) {
            return Err(DetectorError::InvalidInput(format!("d_alpha {d_alpha} is invalid")));
        }
        let exponent = match cfg.exponent {
            Some(e) => e,
            None => u32::try_from(model_dim)
                .ok()
                .filter(|&m| m >= 1)
                .ok_or_else(|| DetectorError::Config(format!("bad model dimension {model_dim}")))?,
        };
        let floor = match cfg.delta_floor {
            Some(f) => f,
            None => evidence(0.0, d_alpha, exponent, cfg.evidence_cap)?,
        };
        Ok(Detector { cfg, d_alpha, exponent, floor, state: DetectorState::default() })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.cfg
    }

    pub fn state(&self) -> &DetectorState {
        &self.state
    }

    pub fn exponent(&self) -> u32 {
        self.exponent
    }

    pub fn d_alpha(&self) -> f64 {
        self.d_alpha
    }

    /// Evidence assigned to a frame without objects.
    pub fn delta_floor(&self) -> f64 {
        self.floor
    }

    /// Rebinds the baseline after a recalibration; the running state is kept.
    pub fn set_d_alpha(&mut self, d_alpha: f64) -> Result<()> {
        if !(d_alpha >= 0.0 && d_alpha.is_finite()) {
            return Err(DetectorError::InvalidInput(format!("d_alpha {d_alpha} is invalid")));
        }
        self.d_alpha = d_alpha;
        if self.cfg.delta_floor.is_none() {
            self.floor = evidence(0.0, d_alpha, self.exponent, self.cfg.evidence_cap)?;
        }
        Ok(())
    }

    /// Frame evidence from the per-object kNN distances.
    pub fn frame_evidence(&self, distances: &[f64]) -> Result<f64> {
        if let Some(bad) = distances.iter().find(|d| !(**d >= 0.0)) {
            return Err(DetectorError::InvalidInput(format!("kNN distance {bad} is invalid")));
        }
        match distances.iter().copied().reduce(f64::max) {
            None => Ok(self.floor),
            Some(max) => evidence(max, self.d_alpha, self.exponent, self.cfg.evidence_cap),
        }
    }

    /// Processes one frame given its objects' kNN distances.
    pub fn step(&mut self, t: u64, distances: &[f64]) -> Result<StepOutput> {
        if let Some(last) = self.state.last_t {
            if t <= last {
                return Err(DetectorError::OutOfOrder { last, got: t });
            }
        }
        let delta = self.frame_evidence(distances)?;
        Ok(self.advance(t, delta))
    }

    /// Processes one frame given its evidence directly.
    pub fn step_delta(&mut self, t: u64, delta: f64) -> Result<StepOutput> {
        if delta.is_nan() {
            return Err(DetectorError::InvalidInput("evidence is NaN".into()));
        }
        if let Some(last) = self.state.last_t {
            if t <= last {
                return Err(DetectorError::OutOfOrder { last, got: t });
            }
        }
        Ok(self.advance(t, delta))
    }

    fn advance(&mut self, t: u64, delta: f64) -> StepOutput {
        let h = self.cfg.h;
        let st = &mut self.state;
        if st.last_t.is_none() {
            // s_0 = 0 belongs to the frame before the first one observed.
            st.tau_start_candidate = t.saturating_sub(1);
        }
        let prev_t = st.last_t.unwrap_or(st.tau_start_candidate);
        let prev_s = st.s;
        let mut s = (prev_s + delta).max(0.0);
        let mut event = None;

        match st.phase {
            Phase::Monitoring => {
                if s == 0.0 {
                    st.tau_start_candidate = t;
                } else if s > h {
                    let open = OpenAlarm {
                        tau_start: st.tau_start_candidate,
                        detection_frame: t,
                        peak_frame: t,
                        peak_statistic: s,
                    };
                    st.open = Some(open);
                    st.phase = Phase::InAlarm;
                    st.decrease_run = 0;
                    event = Some(AlarmEvent::Opened {
                        tau_start: open.tau_start,
                        detection_frame: t,
                        statistic: s,
                    });
                }
            }
            Phase::InAlarm => {
                let open = st.open.as_mut().expect("open alarm while in alarm phase");
                if s > open.peak_statistic {
                    open.peak_statistic = s;
                    open.peak_frame = t;
                }
                if s < prev_s {
                    if st.decrease_run == 0 {
                        st.run_start = prev_t;
                    }
                    st.decrease_run += 1;
                } else {
                    st.decrease_run = 0;
                }
                // A statistic that collapses to zero cannot keep decreasing,
                // so it closes the alarm as well.
                if st.decrease_run >= self.cfg.n_consec || (s == 0.0 && st.decrease_run > 0) {
                    let open = st.open.take().expect("open alarm");
                    event = Some(AlarmEvent::Closed {
                        tau_start: open.tau_start,
                        detection_frame: open.detection_frame,
                        tau_end: st.run_start,
                        peak_frame: open.peak_frame,
                        peak_statistic: open.peak_statistic,
                        closed_at: t,
                    });
                    s = 0.0;
                    st.phase = Phase::Monitoring;
                    st.decrease_run = 0;
                    st.tau_start_candidate = t;
                }
            }
        }

        st.s = s;
        st.last_t = Some(t);
        if self.cfg.history_len > 0 {
            if st.history.len() == self.cfg.history_len {
                st.history.pop_front();
            }
            st.history.push_back(TracePoint { t, delta, s });
        }
        StepOutput { t, delta, s, event }
    }

    /// Clears the running state, keeping configuration and baseline.
    pub fn reset(&mut self) {
        self.state = DetectorState::default();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlarmStatus {
    Open,
    Closed,
    LabeledFalse,
    LabeledTrue,
}

impl AlarmStatus {
    pub fn is_closed(self) -> bool {
        self != AlarmStatus::Open
    }
}

impl std::str::FromStr for AlarmStatus {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "open" => Ok(AlarmStatus::Open),
            "closed" => Ok(AlarmStatus::Closed),
            "labeled_false" => Ok(AlarmStatus::LabeledFalse),
            "labeled_true" => Ok(AlarmStatus::LabeledTrue),
            other => Err(format!("unknown alarm status '{other}'")),
        }
    }
}

/// An alarm segment as tracked by a stream and shown to the reviewer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlarmRecord {
    pub id: u64,
    pub stream_id: String,
    pub tau_start: u64,
    /// Set once the alarm closes.
    pub tau_end: Option<u64>,
    pub detection_frame: u64,
    pub peak_frame: u64,
    pub peak_statistic: f64,
    pub closed_at: Option<u64>,
    pub status: AlarmStatus,
}

impl AlarmRecord {
    /// Frame range `[tau_start, tau_end]`; open alarms extend to the detection frame.
    pub fn span(&self) -> (u64, u64) {
        (self.tau_start, self.tau_end.unwrap_or(self.detection_frame))
    }
}

/// Vectors and statistic trace retained for a closed alarm.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AlarmSegment {
    /// Object vectors of frames `tau_start..=tau_end`, in frame order.
    pub vectors: Vec<crate::features::FeatureVector>,
    /// `(t, delta, s)` from `tau_start` through the closing frame.
    pub trace: Vec<TracePoint>,
}

/// Runs `deltas` (frames `1..=n`) through a fresh detector with threshold
/// `h` and counts opened alarms.
pub fn count_alarms(deltas: &[f64], cfg: &DetectorConfig, h: f64) -> Result<usize> {
    let cfg = DetectorConfig { h, history_len: 0, ..cfg.clone() };
    let mut det = Detector::new(cfg, 0.0, 1)?;
    let mut alarms = 0;
    for (i, &d) in deltas.iter().enumerate() {
        if let Some(AlarmEvent::Opened { .. }) = det.step_delta(i as u64 + 1, d)?.event {
            alarms += 1;
        }
    }
    Ok(alarms)
}

/// Smallest threshold (to relative precision 1e-9) whose alarm count `a` on
/// the nominal evidence sequence of `n` frames satisfies `a * target_period < n`.
///
/// A target period at least as long as the sequence asks for zero alarms.
pub fn calibrate_threshold(deltas: &[f64], cfg: &DetectorConfig, target_period: f64) -> Result<f64> {
    if deltas.is_empty() {
        return Err(DetectorError::InvalidInput("no nominal evidence to calibrate on".into()));
    }
    if !(target_period >= 1.0) {
        return Err(DetectorError::InvalidInput(format!(
            "target false-alarm period {target_period} must be >= 1 frame"
        )));
    }
    if deltas.iter().any(|d| d.is_nan()) {
        return Err(DetectorError::InvalidInput("evidence contains NaN".into()));
    }
    let allowed = ((deltas.len() as f64 / target_period).ceil() as usize).saturating_sub(1);

    // Without thresholding the recursion never exceeds its running maximum,
    // so h at that maximum yields no alarms.
    let mut s: f64 = 0.0;
    let mut max_s: f64 = 0.0;
    for &d in deltas {
        s = (s + d).max(0.0);
        max_s = max_s.max(s);
    }
    let mut hi = max_s.max(f64::MIN_POSITIVE);
    if count_alarms(deltas, cfg, hi)? > allowed {
        return Err(DetectorError::InvalidInput("calibration failed to bound alarms".into()));
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        if hi - lo <= hi * 1e-9 {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if mid <= 0.0 {
            break;
        }
        if count_alarms(deltas, cfg, mid)? <= allowed {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}
