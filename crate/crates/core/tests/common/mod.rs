#![allow(dead_code)]

use seqwatch::cli::detect_frames;
use seqwatch::continual::UpdatePolicy;
use seqwatch::detector::{calibrate_threshold, DetectorConfig};
use seqwatch::features::{FeatureVector, FrameFeatures};
use seqwatch::simgen::{generate, AnomalyGenerator, AnomalySegment, Scenario, ScenarioConfig};
use seqwatch::store::{NominalModel, TrainConfig};

pub const CLASSES: usize = 2;

pub fn objects(frames: &[FrameFeatures]) -> Vec<FeatureVector> {
    frames.iter().flat_map(|f| f.objects.iter().cloned()).collect()
}

/// Model trained on a nominal desk stream.
pub fn desk_model(frames: u64, seed: u64) -> NominalModel {
    let nominal = generate(&ScenarioConfig::desk(CLASSES, frames, seed)).unwrap();
    NominalModel::train(&objects(&nominal.frames), &TrainConfig { rng_seed: seed, ..Default::default() }).unwrap()
}

/// A desk stream with one novel-cluster anomaly over `[start, end]`.
pub fn anomalous_stream(frames: u64, seed: u64, start: u64, end: u64, offset: f64) -> Scenario {
    let mut cfg = ScenarioConfig::desk(CLASSES, frames, seed);
    let cluster = cfg.novel_cluster(offset, 0.3);
    cfg.anomaly_segments =
        vec![AnomalySegment { start, end, generator: AnomalyGenerator::NovelCluster { cluster } }];
    generate(&cfg).unwrap()
}

/// Smallest threshold with no alarm on a held-out nominal stream.
pub fn calibrated_h(model: &NominalModel, held_out: &[FrameFeatures], policy: &UpdatePolicy) -> f64 {
    let probe = DetectorConfig { h: f64::MAX, ..Default::default() };
    let out = detect_frames(model.clone(), held_out, &probe, policy, "calib").unwrap();
    let deltas: Vec<f64> = out.trace.iter().map(|p| p.delta).collect();
    calibrate_threshold(&deltas, &probe, deltas.len() as f64).unwrap()
}
