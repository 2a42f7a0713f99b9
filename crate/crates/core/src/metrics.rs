//! Frame-level ROC/AUC, detection delay and event-level alarm accounting.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::{AlarmRecord, TracePoint};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("AUC is undefined: ground truth contains only {0} frames")]
    UndefinedAuc(&'static str),
    #[error("invalid ground truth: {0}")]
    GroundTruth(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

type Result<T> = std::result::Result<T, MetricsError>;

/// Anomalous frame intervals of one stream, inclusive on both ends.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    #[serde(default)]
    pub stream_id: String,
    pub intervals: Vec<(u64, u64)>,
}

impl GroundTruth {
    pub fn new(stream_id: impl Into<String>, intervals: Vec<(u64, u64)>) -> Result<Self> {
        let gt = GroundTruth { stream_id: stream_id.into(), intervals };
        gt.validate()?;
        Ok(gt)
    }

    /// Intervals must be non-inverted, sorted and pairwise disjoint.
    pub fn validate(&self) -> Result<()> {
        for (i, &(a, b)) in self.intervals.iter().enumerate() {
            if a > b {
                return Err(MetricsError::GroundTruth(format!("interval [{a}, {b}] is inverted")));
            }
            if let Some(&(pa, pb)) = i.checked_sub(1).map(|j| &self.intervals[j]) {
                if a <= pb {
                    return Err(MetricsError::GroundTruth(format!(
                        "interval [{a}, {b}] overlaps or precedes [{pa}, {pb}]"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.intervals.is_empty()
    }

    pub fn contains(&self, t: u64) -> bool {
        let i = self.intervals.partition_point(|&(_, b)| b < t);
        self.intervals.get(i).is_some_and(|&(a, _)| a <= t)
    }

    /// Whether `[a, b]` shares at least one frame with some interval.
    pub fn intersects(&self, a: u64, b: u64) -> bool {
        let i = self.intervals.partition_point(|&(_, end)| end < a);
        self.intervals.get(i).is_some_and(|&(start, _)| start <= b)
    }

    pub fn labels(&self, frames: impl IntoIterator<Item = u64>) -> Vec<bool> {
        frames.into_iter().map(|t| self.contains(t)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub tpr: f64,
    pub fpr: f64,
}

/// ROC points for "score >= threshold is anomalous", one per distinct score
/// from the highest down, preceded by the `(0, 0)` corner at `+inf`.
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<RocPoint>> {
    if scores.len() != labels.len() {
        return Err(MetricsError::InvalidInput(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(MetricsError::InvalidInput("scores contain NaN".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 {
        return Err(MetricsError::UndefinedAuc("nominal"));
    }
    if neg == 0 {
        return Err(MetricsError::UndefinedAuc("anomalous"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut curve = vec![RocPoint { threshold: f64::INFINITY, tpr: 0.0, fpr: 0.0 }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let thr = scores[order[i]];
        while i < order.len() && scores[order[i]] == thr {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        curve.push(RocPoint { threshold: thr, tpr: tp as f64 / pos as f64, fpr: fp as f64 / neg as f64 });
    }
    Ok(curve)
}

/// Trapezoidal area under the ROC curve.
///
/// Tied scores form a single curve step, which credits each tied
/// (anomalous, nominal) pair with one half.
pub fn frame_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let curve = roc_curve(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count() as f64;
    let neg = labels.len() as f64 - pos;
    // Integrate in counts rather than rates so every trapezoid is an exact
    // small integer (or half-integer) before the single final division.
    let mut twice_area = 0.0;
    for w in curve.windows(2) {
        let dfp = (w[1].fpr - w[0].fpr) * neg;
        let tp_sum = (w[1].tpr + w[0].tpr) * pos;
        twice_area += dfp.round() * tp_sum.round();
    }
    Ok(twice_area / (2.0 * pos * neg))
}

/// Frame AUC of a trace against ground truth.
pub fn trace_auc(trace: &[TracePoint], gt: &GroundTruth, mode: ScoreMode) -> Result<f64> {
    let scores: Vec<f64> = trace.iter().map(|p| mode.score(p)).collect();
    let labels = gt.labels(trace.iter().map(|p| p.t));
    frame_auc(&scores, &labels)
}

/// Which per-frame quantity serves as the anomaly score.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    /// The running statistic `s_t`.
    #[default]
    Statistic,
    /// The instantaneous evidence `delta_t`.
    Evidence,
}

impl ScoreMode {
    pub fn score(self, p: &TracePoint) -> f64 {
        match self {
            ScoreMode::Statistic => p.s,
            ScoreMode::Evidence => p.delta,
        }
    }
}

impl std::fmt::Display for ScoreMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ScoreMode::Statistic => "statistic",
            ScoreMode::Evidence => "evidence",
        })
    }
}

impl std::str::FromStr for ScoreMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "statistic" | "s" => Ok(ScoreMode::Statistic),
            "evidence" | "delta" => Ok(ScoreMode::Evidence),
            other => Err(format!("unknown score mode '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelayReport {
    /// Mean delay over detected intervals; `None` when nothing was detected.
    pub average: Option<f64>,
    /// Per detected interval: `(interval start, delay in frames)`.
    pub delays: Vec<(u64, u64)>,
    pub misses: usize,
}

/// An interval is detected by the earliest alarm whose detection frame lies
/// inside it; its delay is that frame minus the interval start.
pub fn detection_delay(alarms: &[AlarmRecord], gt: &GroundTruth) -> DelayReport {
    let mut delays = Vec::new();
    for &(a, b) in &gt.intervals {
        let first = alarms
            .iter()
            .map(|r| r.detection_frame)
            .filter(|t| (a..=b).contains(t))
            .min();
        if let Some(t) = first {
            delays.push((a, t - a));
        }
    }
    let misses = gt.intervals.len() - delays.len();
    let average = (!delays.is_empty())
        .then(|| delays.iter().map(|&(_, d)| d as f64).sum::<f64>() / delays.len() as f64);
    DelayReport { average, delays, misses }
}

/// Alarms whose `[tau_start, tau_end]` touches no ground-truth interval.
pub fn count_false_alarm_events(alarms: &[AlarmRecord], gt: &GroundTruth) -> usize {
    alarms.iter().filter(|r| !intersects_span(r, gt)).count()
}

/// Alarms whose `[tau_start, tau_end]` touches some ground-truth interval.
pub fn true_positive_events(alarms: &[AlarmRecord], gt: &GroundTruth) -> usize {
    alarms.iter().filter(|r| intersects_span(r, gt)).count()
}

fn intersects_span(r: &AlarmRecord, gt: &GroundTruth) -> bool {
    let (a, b) = r.span();
    gt.intersects(a, b)
}

/// Maximal runs of consecutive flagged frames as `[first, last]` intervals.
/// Used to turn per-frame single-shot decisions into events.
pub fn flag_events(frames: &[u64], flags: &[bool]) -> Vec<(u64, u64)> {
    let mut out: Vec<(u64, u64)> = Vec::new();
    let mut prev: Option<(u64, bool)> = None;
    for (&t, &f) in frames.iter().zip(flags) {
        if f {
            match (prev, out.last_mut()) {
                (Some((_, true)), Some(last)) => last.1 = t,
                _ => out.push((t, t)),
            }
        }
        prev = Some((t, f));
    }
    out
}

/// Counts `(false, true)` events among plain intervals.
pub fn classify_intervals(events: &[(u64, u64)], gt: &GroundTruth) -> (usize, usize) {
    let hits = events.iter().filter(|&&(a, b)| gt.intersects(a, b)).count();
    (events.len() - hits, hits)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub score_mode: ScoreMode,
    pub frames: usize,
    /// `None` when the ground truth has only one class of frames.
    pub auc: Option<f64>,
    pub avg_detection_delay: Option<f64>,
    pub detected_intervals: usize,
    pub missed_intervals: usize,
    pub false_alarm_events: usize,
    pub true_positive_events: usize,
    pub per_threshold_curve: Vec<RocPoint>,
}

/// Full evaluation of one (or several concatenated) traces and their alarms.
pub fn evaluate(
    trace: &[TracePoint],
    alarms: &[AlarmRecord],
    gt: &GroundTruth,
    mode: ScoreMode,
) -> Result<EvalReport> {
    let scores: Vec<f64> = trace.iter().map(|p| mode.score(p)).collect();
    let labels = gt.labels(trace.iter().map(|p| p.t));
    let (auc, curve) = match roc_curve(&scores, &labels) {
        Ok(curve) => (Some(frame_auc(&scores, &labels)?), curve),
        Err(MetricsError::UndefinedAuc(_)) => (None, Vec::new()),
        Err(e) => return Err(e),
    };
    let delay = detection_delay(alarms, gt);
    Ok(EvalReport {
        score_mode: mode,
        frames: trace.len(),
        auc,
        avg_detection_delay: delay.average,
        detected_intervals: delay.delays.len(),
        missed_intervals: delay.misses,
        false_alarm_events: count_false_alarm_events(alarms, gt),
        true_positive_events: true_positive_events(alarms, gt),
        per_threshold_curve: curve,
    })
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.6}"));
        let mut s = String::new();
        let _ = writeln!(s, "frames               {}", self.frames);
        let _ = writeln!(s, "score                {}", self.score_mode);
        let _ = writeln!(s, "frame AUC            {}", opt(self.auc));
        let _ = writeln!(s, "avg detection delay  {}", opt(self.avg_detection_delay));
        let _ = writeln!(s, "detected intervals   {}", self.detected_intervals);
        let _ = writeln!(s, "missed intervals     {}", self.missed_intervals);
        let _ = writeln!(s, "true positive events {}", self.true_positive_events);
        let _ = writeln!(s, "false alarm events   {}", self.false_alarm_events);
        s
    }

    /// Two whitespace-separated columns, `fpr tpr`, one ROC point per line.
    pub fn roc_table(&self) -> String {
        let mut s = String::from("# fpr tpr\n");
        for p in &self.per_threshold_curve {
            let _ = writeln!(s, "{} {}", p.fpr, p.tpr);
        }
        s
    }
}
