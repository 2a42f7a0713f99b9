//! Synthetic feature streams with known ground truth.
//!
//! Objects are drawn from a diagonal mixture over the raw per-object
//! coordinates `(cx, cy, area, p_1..p_n)`; every frame shares one draw of the
//! four flow moments. Anomalous intervals replace or perturb those draws.
//!
//! Components default to bounded (uniform) noise. With the distance exponent
//! equal to the dimension, `d^m` behaves like the inverse local density, so
//! Gaussian tails give nominal frames a positive mean evidence and the
//! statistic drifts upward; bounded support keeps the nominal drift negative.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{
    assemble_feature, ClassProbs, FeatureError, FeatureVector, FeatureWeights, FlowStats,
    FrameFeatures, LocationFeatures, ObjectMeta,
};
use crate::metrics::GroundTruth;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    Config(String),
    #[error(transparent)]
    Feature(#[from] FeatureError),
}

type Result<T> = std::result::Result<T, SimError>;

fn bad(msg: impl Into<String>) -> SimError {
    SimError::Config(msg.into())
}

/// Per-coordinate noise law of a component; both have standard deviation `std`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Gaussian,
    /// Uniform on `mean ± sqrt(3) * std`.
    #[default]
    Uniform,
}

/// One diagonal component over raw object coordinates `(cx, cy, area, p..)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    #[serde(default = "one")]
    pub weight: f64,
    #[serde(default)]
    pub shape: Shape,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionModel {
    pub mean: [f64; 4],
    pub std: [f64; 4],
    #[serde(default)]
    pub shape: Shape,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AnomalyGenerator {
    /// Nominal objects displaced by a fixed raw offset.
    ClusterShift { offset: Vec<f64> },
    /// Objects drawn from a separate cluster.
    NovelCluster { cluster: Component },
    /// Nominal objects under shifted flow moments.
    MotionShift { offset: [f64; 4] },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalySegment {
    pub start: u64,
    pub end: u64,
    pub generator: AnomalyGenerator,
}

/// Nominal but previously unseen behavior that recurs; not part of the
/// ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecurringPattern {
    pub intervals: Vec<(u64, u64)>,
    pub cluster: Component,
}

/// How the per-frame object count is drawn around `objects_per_frame`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CountLaw {
    #[default]
    Poisson,
    /// Always the rate rounded to the nearest integer.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub stream_id: String,
    pub n_classes: usize,
    #[serde(default)]
    pub weights: FeatureWeights,
    pub nominal_mixture: Vec<Component>,
    pub motion: MotionModel,
    pub frames: u64,
    /// Mean number of objects per nominal frame.
    pub objects_per_frame: f64,
    #[serde(default)]
    pub count_law: CountLaw,
    #[serde(default)]
    pub anomaly_segments: Vec<AnomalySegment>,
    #[serde(default)]
    pub recurring_novel_pattern: Option<RecurringPattern>,
    #[serde(default)]
    pub rng_seed: u64,
}

impl ScenarioConfig {
    /// A three-cluster nominal world sized so kNN distances are of order one.
    pub fn desk(n_classes: usize, frames: u64, rng_seed: u64) -> Self {
        let n = n_classes.max(1);
        let component = |c: usize, cx: f64, cy: f64, area: f64| {
            let mut mean = vec![cx, cy, area];
            mean.extend((0..n).map(|j| if j == c % n { 0.8 } else { 0.1 }));
            let mut std = vec![0.4, 0.4, 0.2];
            std.extend(std::iter::repeat_n(0.05, n));
            Component { mean, std, weight: 1.0 / 3.0, shape: Shape::default() }
        };
        ScenarioConfig {
            stream_id: "sim".into(),
            n_classes: n,
            weights: FeatureWeights::default(),
            nominal_mixture: vec![
                component(0, 2.0, 3.0, 1.5),
                component(1, 5.0, 6.0, 2.0),
                component(2, 8.0, 4.0, 2.5),
            ],
            motion: MotionModel { mean: [1.0, 0.5, 0.3, 2.8], std: [0.05, 0.03, 0.05, 0.1], shape: Shape::default() },
            frames,
            objects_per_frame: 3.0,
            count_law: CountLaw::Poisson,
            anomaly_segments: Vec::new(),
            recurring_novel_pattern: None,
            rng_seed,
        }
    }

    /// A tight cluster `offset` raw units away from the nominal clusters
    /// along the location axes.
    pub fn novel_cluster(&self, offset: f64, spread: f64) -> Component {
        let n = self.n_classes;
        let mut mean = vec![5.0 + offset, 4.5 + offset, 2.0];
        mean.extend(std::iter::repeat_n(0.5, n));
        let mut std = vec![spread, spread, spread * 0.5];
        std.extend(std::iter::repeat_n(spread * 0.1, n));
        Component { mean, std, weight: 1.0, shape: Shape::default() }
    }

    pub fn raw_dim(&self) -> usize {
        self.n_classes + 3
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.nominal_mixture.is_empty() {
            return Err(bad("nominal mixture is empty"));
        }
        for c in &self.nominal_mixture {
            self.check_component(c)?;
        }
        let total: f64 = self.nominal_mixture.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(bad(format!("mixture weights sum to {total}, not 1")));
        }
        if self.motion.std.iter().chain(&self.motion.mean).any(|v| !v.is_finite())
            || self.motion.std.iter().any(|&s| s < 0.0)
        {
            return Err(bad("motion model must be finite with non-negative spreads"));
        }
        if !(self.objects_per_frame >= 0.0 && self.objects_per_frame.is_finite()) {
            return Err(bad("objects_per_frame must be a finite non-negative rate"));
        }
        let mut spans: Vec<(u64, u64)> =
            self.anomaly_segments.iter().map(|s| (s.start, s.end)).collect();
        for seg in &self.anomaly_segments {
            match &seg.generator {
                AnomalyGenerator::ClusterShift { offset } if offset.len() != self.raw_dim() => {
                    return Err(bad(format!("shift offset has {} entries, want {}", offset.len(), self.raw_dim())));
                }
                AnomalyGenerator::NovelCluster { cluster } => self.check_component(cluster)?,
                AnomalyGenerator::MotionShift { offset } if offset.iter().any(|v| !v.is_finite()) => {
                    return Err(bad("motion offset must be finite"));
                }
                _ => {}
            }
        }
        if let Some(p) = &self.recurring_novel_pattern {
            self.check_component(&p.cluster)?;
            spans.extend(&p.intervals);
        }
        for &(a, b) in &spans {
            if a > b || b >= self.frames {
                return Err(bad(format!("interval [{a}, {b}] outside [0, {})", self.frames)));
            }
        }
        spans.sort_unstable();
        if spans.windows(2).any(|w| w[1].0 <= w[0].1) {
            return Err(bad("anomaly and recurring intervals must not overlap"));
        }
        Ok(())
    }

    fn check_component(&self, c: &Component) -> Result<()> {
        let d = self.raw_dim();
        if c.mean.len() != d || c.std.len() != d {
            return Err(bad(format!("component has {}/{} entries, want {d}", c.mean.len(), c.std.len())));
        }
        if c.mean.iter().chain(&c.std).any(|v| !v.is_finite()) || c.std.iter().any(|&s| s < 0.0) {
            return Err(bad("component must be finite with non-negative spreads"));
        }
        if !(c.weight >= 0.0) {
            return Err(bad("component weight must be non-negative"));
        }
        Ok(())
    }
}

/// A generated stream and its anomalous intervals.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub frames: Vec<FrameFeatures>,
    pub ground_truth: GroundTruth,
}

impl Scenario {
    pub fn objects(&self) -> impl Iterator<Item = &FeatureVector> {
        self.frames.iter().flat_map(|f| f.objects.iter())
    }
}

fn gaussian(rng: &mut ChaCha8Rng, mean: f64, std: f64) -> f64 {
    if std == 0.0 {
        return mean;
    }
    Normal::new(mean, std).expect("validated spread").sample(rng)
}

fn draw(rng: &mut ChaCha8Rng, shape: Shape, mean: f64, std: f64) -> f64 {
    match shape {
        Shape::Gaussian => gaussian(rng, mean, std),
        Shape::Uniform => mean + std * 3f64.sqrt() * (2.0 * rng.random::<f64>() - 1.0),
    }
}

fn draw_raw(rng: &mut ChaCha8Rng, c: &Component) -> Vec<f64> {
    c.mean.iter().zip(&c.std).map(|(&m, &s)| draw(rng, c.shape, m, s)).collect()
}

fn pick<'a>(rng: &mut ChaCha8Rng, mixture: &'a [Component]) -> &'a Component {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for c in mixture {
        acc += c.weight;
        if u < acc {
            return c;
        }
    }
    mixture.last().expect("non-empty mixture")
}

fn draw_motion(rng: &mut ChaCha8Rng, m: &MotionModel, shift: [f64; 4]) -> Result<FlowStats> {
    let v: Vec<f64> = (0..4).map(|i| draw(rng, m.shape, m.mean[i], m.std[i]) + shift[i]).collect();
    Ok(FlowStats::new(v[0], v[1].max(0.0), v[2], v[3])?)
}

/// Clamps raw coordinates into the valid domain and assembles the vector.
fn realize(raw: &[f64], flow: &FlowStats, w: &FeatureWeights) -> Result<(FeatureVector, ObjectMeta)> {
    let location = LocationFeatures::new(raw[0], raw[1], raw[2].max(1e-3))?;
    let probs = ClassProbs::new(raw[3..].iter().map(|p| p.clamp(0.0, 1.0)).collect())?;
    let v = assemble_feature(flow, &location, &probs, w)?;
    Ok((v, ObjectMeta { bbox: None, location, probs }))
}

enum FrameKind<'a> {
    Nominal,
    Anomalous(&'a AnomalyGenerator),
    Recurring(&'a Component),
}

/// Generates the stream; frames are numbered `0..frames`.
///
/// Anomalous and recurring-pattern frames always carry at least one object.
pub fn generate(cfg: &ScenarioConfig) -> Result<Scenario> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let poisson = (cfg.objects_per_frame > 0.0 && cfg.count_law == CountLaw::Poisson)
        .then(|| Poisson::new(cfg.objects_per_frame).expect("validated rate"));
    let fixed = cfg.objects_per_frame.round() as usize;
    let mut frames = Vec::with_capacity(cfg.frames as usize);

    for t in 0..cfg.frames {
        let kind = if let Some(seg) = cfg.anomaly_segments.iter().find(|s| (s.start..=s.end).contains(&t)) {
            FrameKind::Anomalous(&seg.generator)
        } else if let Some(p) = cfg
            .recurring_novel_pattern
            .as_ref()
            .filter(|p| p.intervals.iter().any(|&(a, b)| (a..=b).contains(&t)))
        {
            FrameKind::Recurring(&p.cluster)
        } else {
            FrameKind::Nominal
        };

        let mut count = match (&poisson, cfg.count_law) {
            (Some(p), _) => p.sample(&mut rng) as usize,
            (None, CountLaw::Fixed) => fixed,
            (None, CountLaw::Poisson) => 0,
        };
        if !matches!(kind, FrameKind::Nominal) {
            count = count.max(1);
        }
        let shift = match kind {
            FrameKind::Anomalous(AnomalyGenerator::MotionShift { offset }) => *offset,
            _ => [0.0; 4],
        };
        let flow = draw_motion(&mut rng, &cfg.motion, shift)?;

        let mut objects = Vec::with_capacity(count);
        let mut meta = Vec::with_capacity(count);
        for _ in 0..count {
            let raw = match kind {
                FrameKind::Anomalous(AnomalyGenerator::NovelCluster { cluster }) | FrameKind::Recurring(cluster) => {
                    draw_raw(&mut rng, cluster)
                }
                FrameKind::Anomalous(AnomalyGenerator::ClusterShift { offset }) => {
                    let c = pick(&mut rng, &cfg.nominal_mixture);
                    draw_raw(&mut rng, c).iter().zip(offset).map(|(x, o)| x + o).collect()
                }
                _ => {
                    let c = pick(&mut rng, &cfg.nominal_mixture);
                    draw_raw(&mut rng, c)
                }
            };
            let (v, m) = realize(&raw, &flow, &cfg.weights)?;
            objects.push(v);
            meta.push(m);
        }
        frames.push(FrameFeatures { t, objects, flow, raw_object_meta: Some(meta) });
    }

    let mut intervals: Vec<(u64, u64)> = cfg.anomaly_segments.iter().map(|s| (s.start, s.end)).collect();
    intervals.sort_unstable();
    let ground_truth = GroundTruth::new(cfg.stream_id.clone(), intervals)
        .map_err(|e| bad(e.to_string()))?;
    Ok(Scenario { frames, ground_truth })
}

/// Independent nominal object vectors, each with its own flow draw.
pub fn sample_nominal_vectors(cfg: &ScenarioConfig, count: usize, seed: u64) -> Result<Vec<FeatureVector>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let flow = draw_motion(&mut rng, &cfg.motion, [0.0; 4])?;
            let c = pick(&mut rng, &cfg.nominal_mixture);
            let raw = draw_raw(&mut rng, c);
            Ok(realize(&raw, &flow, &cfg.weights)?.0)
        })
        .collect()
}

/// Independent draws from one cluster under nominal motion.
pub fn sample_cluster_vectors(
    cfg: &ScenarioConfig,
    cluster: &Component,
    count: usize,
    seed: u64,
) -> Result<Vec<FeatureVector>> {
    cfg.check_component(cluster)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let flow = draw_motion(&mut rng, &cfg.motion, [0.0; 4])?;
            Ok(realize(&draw_raw(&mut rng, cluster), &flow, &cfg.weights)?.0)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FlowDistribution {
    Constant { value: f64 },
    Unimodal { mean: f64, std: f64 },
    /// A slow majority mixed with a fast minority.
    Bimodal { slow_mean: f64, slow_std: f64, fast_mean: f64, fast_std: f64, fast_fraction: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowFieldSpec {
    pub distribution: FlowDistribution,
    pub rows: usize,
    pub cols: usize,
    pub seed: u64,
}

/// A row-major flow-magnitude field; magnitudes are floored at zero.
pub fn generate_flow_field(spec: &FlowFieldSpec) -> Result<Vec<f64>> {
    if spec.rows == 0 || spec.cols == 0 {
        return Err(bad(format!("flow field shape {}x{} is empty", spec.rows, spec.cols)));
    }
    let n = spec.rows.checked_mul(spec.cols).ok_or_else(|| bad("flow field too large"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let check = |vals: &[f64]| {
        if vals.iter().any(|v| !v.is_finite()) || vals.iter().skip(1).step_by(2).any(|s| *s < 0.0) {
            Err(bad("flow distribution parameters must be finite, spreads non-negative"))
        } else {
            Ok(())
        }
    };
    let out = match spec.distribution {
        FlowDistribution::Constant { value } => {
            if !value.is_finite() {
                return Err(bad("constant flow value must be finite"));
            }
            vec![value.max(0.0); n]
        }
        FlowDistribution::Unimodal { mean, std } => {
            check(&[mean, std])?;
            (0..n).map(|_| gaussian(&mut rng, mean, std).max(0.0)).collect()
        }
        FlowDistribution::Bimodal { slow_mean, slow_std, fast_mean, fast_std, fast_fraction } => {
            check(&[slow_mean, slow_std, fast_mean, fast_std])?;
            if !(0.0..=1.0).contains(&fast_fraction) {
                return Err(bad("fast_fraction must lie in [0, 1]"));
            }
            (0..n)
                .map(|_| {
                    let fast = rng.random::<f64>() < fast_fraction;
                    let (m, s) = if fast { (fast_mean, fast_std) } else { (slow_mean, slow_std) };
                    gaussian(&mut rng, m, s).max(0.0)
                })
                .collect()
        }
    };
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::flow_stats_of;

    #[test]
    fn no_segments_means_empty_truth() {
        let s = generate(&ScenarioConfig::desk(2, 50, 1)).unwrap();
        assert!(s.ground_truth.is_empty());
        assert_eq!(s.frames.len(), 50);
        assert!(s.objects().all(|v| v.dim() == 9));
    }

    #[test]
    fn seeded_generation_is_reproducible() {
        let cfg = ScenarioConfig::desk(3, 200, 42);
        assert_eq!(generate(&cfg).unwrap(), generate(&cfg).unwrap());
        let other = ScenarioConfig { rng_seed: 43, ..cfg.clone() };
        assert_ne!(generate(&cfg).unwrap(), generate(&other).unwrap());
    }

    #[test]
    fn segments_shape_frames_and_truth() {
        let mut cfg = ScenarioConfig::desk(2, 100, 5);
        cfg.objects_per_frame = 0.5;
        let far = cfg.novel_cluster(20.0, 0.1);
        cfg.anomaly_segments = vec![
            AnomalySegment { start: 40, end: 49, generator: AnomalyGenerator::NovelCluster { cluster: far } },
            AnomalySegment { start: 10, end: 12, generator: AnomalyGenerator::MotionShift { offset: [5.0, 0.0, 0.0, 0.0] } },
        ];
        let s = generate(&cfg).unwrap();
        assert_eq!(s.ground_truth.intervals, vec![(10, 12), (40, 49)]);
        for f in &s.frames[40..50] {
            assert!(!f.objects.is_empty());
            assert!(f.objects.iter().all(|o| o.location()[0] > 20.0));
        }
        assert!(s.frames[10..13].iter().all(|f| f.flow.mean > 4.0));
        assert!(s.frames.iter().any(|f| f.objects.is_empty()));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let base = ScenarioConfig::desk(2, 100, 0);
        let mut c = base.clone();
        c.nominal_mixture[0].weight = 0.9;
        assert!(generate(&c).is_err());
        let mut c = base.clone();
        let cl = c.novel_cluster(5.0, 0.1);
        c.anomaly_segments =
            vec![AnomalySegment { start: 90, end: 100, generator: AnomalyGenerator::NovelCluster { cluster: cl } }];
        assert!(generate(&c).is_err());
        let mut c = base;
        c.anomaly_segments = vec![
            AnomalySegment { start: 5, end: 10, generator: AnomalyGenerator::MotionShift { offset: [1.0; 4] } },
            AnomalySegment { start: 10, end: 12, generator: AnomalyGenerator::MotionShift { offset: [1.0; 4] } },
        ];
        assert!(generate(&c).is_err());
    }

    #[test]
    fn flow_fields() {
        let spec = |distribution, seed| FlowFieldSpec { distribution, rows: 64, cols: 64, seed };
        let constant = generate_flow_field(&spec(FlowDistribution::Constant { value: 1.5 }, 0)).unwrap();
        assert_eq!(flow_stats_of(&constant).unwrap().variance, 0.0);
        let uni = spec(FlowDistribution::Unimodal { mean: 1.0, std: 0.2 }, 9);
        assert_eq!(generate_flow_field(&uni).unwrap(), generate_flow_field(&uni).unwrap());
        let bi = spec(
            FlowDistribution::Bimodal { slow_mean: 1.0, slow_std: 0.2, fast_mean: 6.0, fast_std: 0.5, fast_fraction: 0.05 },
            9,
        );
        let su = flow_stats_of(&generate_flow_field(&uni).unwrap()).unwrap();
        let sb = flow_stats_of(&generate_flow_field(&bi).unwrap()).unwrap();
        assert!(sb.kurtosis > su.kurtosis && sb.skewness > su.skewness);
        assert!(generate_flow_field(&FlowFieldSpec { rows: 0, ..uni }).is_err());
    }
}
