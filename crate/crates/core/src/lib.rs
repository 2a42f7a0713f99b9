//! Streaming kNN + CUSUM anomaly detection over per-object feature vectors,
//! with retrain-free continual learning from nominal frames and operator
//! feedback.
//!
//! The pipeline for one stream:
//!
//! 1. [`features`] turns flow statistics, object locations and class
//!    confidences into weighted vectors.
//! 2. [`store::NominalModel`] scores each vector by its exact kth-nearest
//!    neighbour distance to the nominal reference set.
//! 3. [`detector::Detector`] accumulates frame evidence and segments alarms.
//! 4. [`engine::StreamEngine`] ties these together and folds nominal data
//!    back into the model through [`journal::ModelHandle`].

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod continual;
pub mod detector;
pub mod engine;
pub mod features;
pub mod ingest;
pub mod journal;
pub mod metrics;
pub mod service;
pub mod simgen;
pub mod store;
