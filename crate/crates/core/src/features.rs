//! Feature space: per-object vectors built from motion, location and
//! appearance parts.
//!
//! Every object detected in a frame is described by
//!
//! ```text
//! [w1·mean, w1·variance, w1·skewness, w1·kurtosis,
//!  w2·cx, w2·cy, w2·area,
//!  w3·p(C_1), ..., w3·p(C_n)]
//! ```
//!
//! so the dimensionality is always `n + 7`. The four motion entries are the
//! moments of the frame's optical-flow magnitude field and are shared by all
//! objects of the frame.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of non-appearance entries in a feature vector (4 motion + 3 location).
pub const FIXED_DIMS: usize = 7;

/// Index ranges of the three feature groups inside a [`FeatureVector`].
pub const MOTION_RANGE: std::ops::Range<usize> = 0..4;
pub const LOCATION_RANGE: std::ops::Range<usize> = 4..7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeatureError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

type Result<T> = std::result::Result<T, FeatureError>;

fn invalid(msg: impl Into<String>) -> FeatureError {
    FeatureError::InvalidInput(msg.into())
}

/// Moments of a flow-magnitude field.
///
/// Variance is the population variance; kurtosis is the non-excess fourth
/// standardized moment. A constant field reports zero skewness and kurtosis.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FlowStats {
    pub mean: f64,
    pub variance: f64,
    pub skewness: f64,
    pub kurtosis: f64,
}

impl FlowStats {
    pub fn new(mean: f64, variance: f64, skewness: f64, kurtosis: f64) -> Result<Self> {
        let stats = FlowStats { mean, variance, skewness, kurtosis };
        stats.validate()?;
        Ok(stats)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mean.is_finite()
            && self.variance.is_finite()
            && self.skewness.is_finite()
            && self.kurtosis.is_finite())
        {
            return Err(invalid("flow statistics must be finite"));
        }
        if self.variance < 0.0 {
            return Err(invalid(format!("flow variance {} is negative", self.variance)));
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.mean, self.variance, self.skewness, self.kurtosis]
    }
}

/// A dense 2D field of optical-flow magnitudes, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl FlowField {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows.checked_mul(cols) != Some(data.len()) {
            return Err(invalid(format!(
                "flow field shape {rows}x{cols} does not match {} values",
                data.len()
            )));
        }
        Ok(FlowField { rows, cols, data })
    }

    /// Builds a field from nested rows; all rows must have equal length.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != cols {
                return Err(invalid(format!("row {i} has {} columns, expected {cols}", row.len())));
            }
            data.extend_from_slice(row);
        }
        FlowField::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }
}

/// Computes mean, population variance, skewness and non-excess kurtosis of a
/// flow-magnitude field.
pub fn compute_flow_stats(field: &FlowField) -> Result<FlowStats> {
    flow_stats_of(field.values())
}

/// Same as [`compute_flow_stats`] over a flat slice of magnitudes.
pub fn flow_stats_of(values: &[f64]) -> Result<FlowStats> {
    if values.is_empty() {
        return Err(invalid("flow field is empty"));
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(invalid(format!("flow field entry {i} is not finite")));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;

    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for &v in values {
        let d = v - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    m2 /= n;
    m3 /= n;
    m4 /= n;

    // A field whose deviations all vanish is treated as degenerate; tiny
    // rounding residue in the mean must not produce huge ratios.
    let scale = values.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let degenerate = m2 == 0.0 || m2.sqrt() <= scale * 1e-12;
    let (skewness, kurtosis) = if degenerate {
        (0.0, 0.0)
    } else {
        (m3 / m2.powf(1.5), m4 / (m2 * m2))
    };
    let variance = if degenerate { 0.0 } else { m2 };

    FlowStats::new(mean, variance, skewness, kurtosis)
}

/// Axis-aligned detector box in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = BoundingBox { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if ![self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite()) {
            return Err(invalid("bounding box coordinates must be finite"));
        }
        if self.x2 <= self.x1 || self.y2 <= self.y1 {
            return Err(invalid(format!(
                "degenerate bounding box ({}, {}, {}, {})",
                self.x1, self.y1, self.x2, self.y2
            )));
        }
        Ok(())
    }
}

/// Center and area of an object's box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocationFeatures {
    pub cx: f64,
    pub cy: f64,
    pub area: f64,
}

impl LocationFeatures {
    pub fn new(cx: f64, cy: f64, area: f64) -> Result<Self> {
        let loc = LocationFeatures { cx, cy, area };
        loc.validate()?;
        Ok(loc)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cx.is_finite() && self.cy.is_finite() && self.area.is_finite()) {
            return Err(invalid("location features must be finite"));
        }
        if self.area <= 0.0 {
            return Err(invalid(format!("object area {} must be positive", self.area)));
        }
        Ok(())
    }
}

pub fn bbox_to_location(b: &BoundingBox) -> Result<LocationFeatures> {
    b.validate()?;
    LocationFeatures::new((b.x1 + b.x2) / 2.0, (b.y1 + b.y2) / 2.0, (b.x2 - b.x1) * (b.y2 - b.y1))
}

/// Per-class confidences from an object detector. They need not sum to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassProbs(Vec<f64>);

impl ClassProbs {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        for (i, &v) in p.iter().enumerate() {
            if !(0.0..=1.0).contains(&v) {
                // also rejects NaN
                return Err(invalid(format!("class probability {i} = {v} outside [0, 1]")));
            }
        }
        Ok(ClassProbs(p))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Relative importance of the motion, location and appearance groups.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureWeights {
    pub motion: f64,
    pub location: f64,
    pub appearance: f64,
}

impl Default for FeatureWeights {
    fn default() -> Self {
        FeatureWeights { motion: 1.0, location: 1.0, appearance: 1.0 }
    }
}

impl FeatureWeights {
    pub fn new(motion: f64, location: f64, appearance: f64) -> Result<Self> {
        let w = FeatureWeights { motion, location, appearance };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let ws = [self.motion, self.location, self.appearance];
        if ws.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(invalid("feature weights must be finite and non-negative"));
        }
        if ws.iter().all(|w| *w == 0.0) {
            return Err(invalid("feature weights must not all be zero"));
        }
        Ok(())
    }

    pub fn scaled(&self, c: f64) -> FeatureWeights {
        FeatureWeights {
            motion: self.motion * c,
            location: self.location * c,
            appearance: self.appearance * c,
        }
    }
}

/// One object's coordinates in the weighted feature space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    /// Wraps raw coordinates, rejecting non-finite entries.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(invalid(format!("feature entry {i} is not finite")));
        }
        Ok(FeatureVector(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Class count `n` implied by the layout, if the vector is long enough.
    pub fn class_count(&self) -> Option<usize> {
        self.0.len().checked_sub(FIXED_DIMS)
    }

    pub fn motion(&self) -> &[f64] {
        &self.0[MOTION_RANGE]
    }

    pub fn location(&self) -> &[f64] {
        &self.0[LOCATION_RANGE]
    }

    pub fn appearance(&self) -> &[f64] {
        &self.0[FIXED_DIMS..]
    }
}

impl From<FeatureVector> for Vec<f64> {
    fn from(v: FeatureVector) -> Self {
        v.0
    }
}

/// Builds the weighted `n + 7` dimensional vector for one object.
pub fn assemble_feature(
    flow: &FlowStats,
    loc: &LocationFeatures,
    cls: &ClassProbs,
    w: &FeatureWeights,
) -> Result<FeatureVector> {
    let mut values = Vec::with_capacity(FIXED_DIMS + cls.len());
    values.extend(flow.as_array().iter().map(|v| w.motion * v));
    values.extend([loc.cx, loc.cy, loc.area].iter().map(|v| w.location * v));
    values.extend(cls.as_slice().iter().map(|p| w.appearance * p));
    FeatureVector::new(values)
}

/// All objects of one frame plus the frame's flow statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameFeatures {
    pub t: u64,
    pub objects: Vec<FeatureVector>,
    pub flow: FlowStats,
    /// Raw detector output kept for audit and re-serialization.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_object_meta: Option<Vec<ObjectMeta>>,
}

/// The raw location and class confidences behind one assembled vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<BoundingBox>,
    pub location: LocationFeatures,
    pub probs: ClassProbs,
}

impl FrameFeatures {
    /// Common dimensionality of the frame's objects (`None` for an empty frame).
    pub fn dim(&self) -> Option<usize> {
        self.objects.first().map(FeatureVector::dim)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field(rows: &[&[f64]]) -> FlowField {
        FlowField::from_rows(rows).unwrap()
    }

    #[test]
    fn constant_field_is_degenerate() {
        let s = compute_flow_stats(&field(&[&[2.0, 2.0], &[2.0, 2.0]])).unwrap();
        assert_eq!(s, FlowStats { mean: 2.0, variance: 0.0, skewness: 0.0, kurtosis: 0.0 });
    }

    #[test]
    fn single_spike_field_moments() {
        // Central moments of {0,0,0,4} summed by hand: m2=3, m3=6, m4=21.
        let s = compute_flow_stats(&field(&[&[0.0, 0.0], &[0.0, 4.0]])).unwrap();
        assert_eq!(s.mean, 1.0);
        assert_eq!(s.variance, 3.0);
        assert!((s.skewness - 1.154_700_538_379_251_5).abs() < 1e-15);
        assert!((s.kurtosis - 2.333_333_333_333_333_5).abs() < 1e-15);
    }

    #[test]
    fn symmetric_field_has_zero_skew() {
        let s = flow_stats_of(&[-3.0, 3.0, -3.0, 3.0]).unwrap();
        assert_eq!(s.skewness, 0.0);
        assert_eq!(s.kurtosis, 1.0);
    }

    #[test]
    fn empty_and_nonfinite_fields_rejected() {
        assert!(flow_stats_of(&[]).is_err());
        assert!(flow_stats_of(&[1.0, f64::NAN]).is_err());
        assert!(flow_stats_of(&[1.0, f64::INFINITY]).is_err());
        assert!(FlowField::from_rows(&[vec![1.0, 2.0], vec![3.0]]).is_err());
    }

    #[test]
    fn bbox_examples() {
        let cases = [
            ((0.0, 0.0, 10.0, 10.0), (5.0, 5.0, 100.0)),
            ((2.0, 4.0, 6.0, 8.0), (4.0, 6.0, 16.0)),
            ((0.0, 0.0, 1.0, 1.0), (0.5, 0.5, 1.0)),
        ];
        for ((x1, y1, x2, y2), (cx, cy, area)) in cases {
            let loc = bbox_to_location(&BoundingBox { x1, y1, x2, y2 }).unwrap();
            assert_eq!(loc, LocationFeatures { cx, cy, area });
        }
    }

    #[test]
    fn degenerate_bbox_rejected() {
        assert!(bbox_to_location(&BoundingBox { x1: 1.0, y1: 0.0, x2: 1.0, y2: 5.0 }).is_err());
        assert!(bbox_to_location(&BoundingBox { x1: 0.0, y1: 3.0, x2: 2.0, y2: 3.0 }).is_err());
    }

    #[test]
    fn assemble_unit_weights() {
        let v = assemble_feature(
            &FlowStats::default(),
            &LocationFeatures::new(0.0, 0.0, 1.0).unwrap(),
            &ClassProbs::new(vec![1.0, 0.0]).unwrap(),
            &FeatureWeights::default(),
        )
        .unwrap();
        assert_eq!(v.as_slice(), &[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0]);
        assert_eq!(v.dim(), 9);
        assert_eq!(v.class_count(), Some(2));
    }

    #[test]
    fn motion_weight_is_linear() {
        let flow = FlowStats::new(3.0, 1.0, 0.0, 0.0).unwrap();
        let loc = LocationFeatures::new(4.0, 5.0, 6.0).unwrap();
        let cls = ClassProbs::new(vec![0.3]).unwrap();
        let base = assemble_feature(&flow, &loc, &cls, &FeatureWeights::default()).unwrap();
        let doubled =
            assemble_feature(&flow, &loc, &cls, &FeatureWeights::new(2.0, 1.0, 1.0).unwrap())
                .unwrap();
        for i in 0..4 {
            assert_eq!(doubled.as_slice()[i], 2.0 * base.as_slice()[i]);
        }
        assert_eq!(&doubled.as_slice()[4..], &base.as_slice()[4..]);
    }

    #[test]
    fn appearance_only_weights_zero_prefix() {
        let v = assemble_feature(
            &FlowStats::new(1.0, 2.0, 3.0, 4.0).unwrap(),
            &LocationFeatures::new(5.0, 6.0, 7.0).unwrap(),
            &ClassProbs::new(vec![0.5, 0.25]).unwrap(),
            &FeatureWeights::new(0.0, 0.0, 1.0).unwrap(),
        )
        .unwrap();
        assert!(v.as_slice()[..7].iter().all(|x| *x == 0.0));
        assert_eq!(v.appearance(), &[0.5, 0.25]);
    }

    #[test]
    fn weight_and_prob_validation() {
        assert!(FeatureWeights::new(0.0, 0.0, 0.0).is_err());
        assert!(FeatureWeights::new(-1.0, 1.0, 1.0).is_err());
        assert!(ClassProbs::new(vec![1.2]).is_err());
        assert!(ClassProbs::new(vec![-0.1]).is_err());
        // Unnormalized detector confidences are fine.
        assert!(ClassProbs::new(vec![0.9, 0.8]).is_ok());
    }
}
