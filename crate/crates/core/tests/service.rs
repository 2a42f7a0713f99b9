mod common;

use std::sync::Arc;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use seqwatch::cli::detect_frames;
use seqwatch::continual::UpdatePolicy;
use seqwatch::detector::DetectorConfig;
use seqwatch::features::{FeatureWeights, FrameFeatures};
use seqwatch::ingest::FeatureFrameRecord;
use seqwatch::journal::{read_journal, replay, Journal, ModelHandle};
use seqwatch::service::{router, AppState};
use seqwatch::simgen::{generate, ScenarioConfig};
use seqwatch::store::NominalModel;

use common::*;

const TOKEN: &str = "s3cret";

struct Harness {
    app: axum::Router,
    state: Arc<AppState>,
    model: NominalModel,
    detector: DetectorConfig,
    policy: UpdatePolicy,
    frames: Vec<FrameFeatures>,
}

fn harness_with(journal: Option<Journal>) -> Harness {
    let model = desk_model(1500, 11);
    let policy = UpdatePolicy::default();
    let held_out = generate(&ScenarioConfig::desk(CLASSES, 1500, 12)).unwrap();
    let h = calibrated_h(&model, &held_out.frames, &policy);
    let detector = DetectorConfig { h, ..Default::default() };
    let frames = anomalous_stream(600, 13, 300, 329, 4.0).frames;
    let handle = Arc::new(ModelHandle::new(model.clone(), journal));
    let calib = objects(&generate(&ScenarioConfig::desk(CLASSES, 300, 14)).unwrap().frames);
    let state = Arc::new(
        AppState::new(handle, detector.clone(), policy.clone(), FeatureWeights::default(), Some(TOKEN.into()))
            .unwrap()
            .with_calibration(calib),
    );
    Harness { app: router(state.clone()), state, model, detector, policy, frames }
}

fn harness() -> Harness {
    harness_with(None)
}

fn records(frames: &[FrameFeatures]) -> Vec<Value> {
    frames
        .iter()
        .map(|f| serde_json::to_value(FeatureFrameRecord::from_frame(f, &FeatureWeights::default()).unwrap()).unwrap())
        .collect()
}

async fn call(app: &axum::Router, method: Method, uri: &str, body: Option<Value>, headers: &[(&str, &str)]) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri).header("authorization", format!("Bearer {TOKEN}"));
    for (k, v) in headers {
        req = req.header(*k, *v);
    }
    let req = match body {
        Some(b) => req.header("content-type", "application/json").body(Body::from(b.to_string())).unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let v = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (status, v)
}

async fn get(app: &axum::Router, uri: &str) -> (StatusCode, Value) {
    call(app, Method::GET, uri, None, &[]).await
}

async fn post(app: &axum::Router, uri: &str, body: Value) -> (StatusCode, Value) {
    call(app, Method::POST, uri, Some(body), &[]).await
}

async fn submit(h: &Harness, stream: &str, frames: &[FrameFeatures]) -> Value {
    let (st, v) = post(&h.app, &format!("/streams/{stream}/frames"), json!({ "frames": records(frames) })).await;
    assert_eq!(st, StatusCode::OK, "{v}");
    v
}

fn closed_ids(results: &Value) -> Vec<u64> {
    results["results"]
        .as_array()
        .unwrap()
        .iter()
        .filter_map(|r| r.get("closed").map(|c| c["id"].as_u64().unwrap()))
        .collect()
}

#[tokio::test]
async fn health_is_public_and_the_rest_needs_a_token() {
    let h = harness();
    let resp = h.app.clone().oneshot(Request::get("/health").body(Body::empty()).unwrap()).await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);

    for uri in ["/model/stats", "/alarms", "/streams/a/trace"] {
        let resp = h.app.clone().oneshot(Request::get(uri).body(Body::empty()).unwrap()).await.unwrap();
        assert_eq!(resp.status(), StatusCode::UNAUTHORIZED, "{uri}");
        let wrong = Request::get(uri).header("authorization", "Bearer nope").body(Body::empty()).unwrap();
        assert_eq!(h.app.clone().oneshot(wrong).await.unwrap().status(), StatusCode::UNAUTHORIZED);
    }
    let (st, body) = get(&h.app, "/model/stats").await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(body["reference_size"].as_u64().unwrap() as usize, h.model.reference_size());
    assert_eq!(body["d_alpha"].as_f64().unwrap(), h.model.d_alpha());
    assert_eq!(body["streams"], 0);
    assert!(body["uptime_secs"].as_f64().unwrap() >= 0.0);
}

#[tokio::test]
async fn service_trace_matches_offline_detection() {
    let h = harness();
    let offline = detect_frames(h.model.clone(), &h.frames, &h.detector, &h.policy, "cam").unwrap();
    assert!(!offline.alarms.is_empty());

    // submit in uneven batches
    let mut results = Vec::new();
    for chunk in h.frames.chunks(97) {
        let v = submit(&h, "cam", chunk).await;
        results.extend(v["results"].as_array().unwrap().iter().cloned());
    }
    assert_eq!(results.len(), offline.trace.len());
    for (r, p) in results.iter().zip(&offline.trace) {
        assert_eq!(r["t"].as_u64().unwrap(), p.t);
        assert_eq!(r["delta"].as_f64().unwrap().to_bits(), p.delta.to_bits());
        assert_eq!(r["s"].as_f64().unwrap().to_bits(), p.s.to_bits());
    }

    let (st, trace) = get(&h.app, "/streams/cam/trace?since=500").await;
    assert_eq!(st, StatusCode::OK);
    let pts = trace["trace"].as_array().unwrap();
    assert_eq!(pts.len(), 100);
    assert_eq!(pts[0]["t"], 500);
    assert_eq!(trace["h"].as_f64().unwrap(), h.detector.h);

    let (st, list) = get(&h.app, "/alarms?stream=cam").await;
    assert_eq!(st, StatusCode::OK);
    let mut ids: Vec<u64> = list["alarms"].as_array().unwrap().iter().map(|a| a["id"].as_u64().unwrap()).collect();
    ids.sort_unstable();
    let mut want: Vec<u64> = offline.alarms.iter().map(|a| a.id).collect();
    want.sort_unstable();
    assert_eq!(ids, want);

    let (_, other) = get(&h.app, "/alarms?stream=elsewhere").await;
    assert!(other["alarms"].as_array().unwrap().is_empty());
    let (st, _) = get(&h.app, "/streams/nope/trace").await;
    assert_eq!(st, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn alarm_detail_and_feedback_grow_the_reference_set() {
    let h = harness();
    let v = submit(&h, "cam", &h.frames).await;
    let id = closed_ids(&v)[0];

    let (st, detail) = get(&h.app, &format!("/alarms/{id}")).await;
    assert_eq!(st, StatusCode::OK);
    let alarm = &detail["alarm"];
    assert_eq!(alarm["status"], "closed");
    let (tau_start, tau_end) = (alarm["tau_start"].as_u64().unwrap(), alarm["tau_end"].as_u64().unwrap());
    let n_vectors = detail["vector_count"].as_u64().unwrap() as usize;
    let expected: usize = h.frames[tau_start as usize..=tau_end as usize].iter().map(|f| f.objects.len()).sum();
    assert_eq!(n_vectors, expected);
    assert_eq!(detail["trace"][0]["t"].as_u64().unwrap(), tau_start);
    assert_eq!(detail["summary"]["motion"].as_array().unwrap().len(), 4);
    assert_eq!(detail["label"], Value::Null);

    let (_, before) = get(&h.app, "/model/stats").await;
    let body = json!({ "verdict": "false_alarm", "labeler": "op", "request_id": "r-1" });
    let (st, out) = post(&h.app, &format!("/alarms/{id}/label"), body.clone()).await;
    assert_eq!(st, StatusCode::OK, "{out}");
    let inserted = out["inserted"].as_u64().unwrap() as usize;
    assert_eq!(inserted, (0.2 * n_vectors as f64).ceil() as usize);
    assert_eq!(out["status"], "labeled_false");
    let grown = before["reference_size"].as_u64().unwrap() as usize + inserted;
    assert_eq!(out["reference_size"].as_u64().unwrap() as usize, grown);
    assert_eq!(out["model"]["reference_size"].as_u64().unwrap() as usize, grown);

    // a retried request is answered from the cache
    let (st, again) = post(&h.app, &format!("/alarms/{id}/label"), body).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(again, out);
    // a fresh request with the same verdict is a no-op
    let (st, dup) = post(&h.app, &format!("/alarms/{id}/label"), json!({ "verdict": "false_alarm", "labeler": "op" })).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(dup["inserted"], 0);
    let (_, after) = get(&h.app, "/model/stats").await;
    assert_eq!(after["reference_size"].as_u64().unwrap() as usize, grown);

    let (_, detail) = get(&h.app, &format!("/alarms/{id}")).await;
    assert_eq!(detail["alarm"]["status"], "labeled_false");
    assert_eq!(detail["label"]["labeler"], "op");
    let (_, labeled) = get(&h.app, "/alarms?status=labeled_false").await;
    assert_eq!(labeled["alarms"].as_array().unwrap().len(), 1);
    let (st, err) = get(&h.app, "/alarms?status=bogus").await;
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(err["error"]["code"], "invalid_input");
}

#[tokio::test]
async fn labeling_errors_map_to_statuses() {
    let h = harness();
    // stop in the middle of the anomaly so the alarm is still open
    let v = submit(&h, "cam", &h.frames[..320]).await;
    let open = v["results"].as_array().unwrap().iter().find_map(|r| r.get("opened")).expect("alarm opened");
    let id = open["id"].as_u64().unwrap();
    let (_, trace) = get(&h.app, "/streams/cam/trace").await;
    assert_eq!(trace["open_alarm"]["id"].as_u64().unwrap(), id);

    let (st, err) = post(&h.app, &format!("/alarms/{id}/label"), json!({ "verdict": "false_alarm", "labeler": "op" })).await;
    assert_eq!(st, StatusCode::CONFLICT);
    assert_eq!(err["error"]["code"], "alarm_open");
    let (st, detail) = get(&h.app, &format!("/alarms/{id}")).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(detail["alarm"]["status"], "open");
    assert!(!detail["trace"].as_array().unwrap().is_empty());

    let (st, err) = post(&h.app, "/alarms/999/label", json!({ "verdict": "true_anomaly", "labeler": "op" })).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
    assert_eq!(err["error"]["code"], "not_found");
    let (st, _) = get(&h.app, "/alarms/999").await;
    assert_eq!(st, StatusCode::NOT_FOUND);

    let (st, err) = post(&h.app, &format!("/alarms/{id}/label"), json!({ "verdict": "maybe" })).await;
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(err["error"]["code"], "malformed_payload");

    // finish the stream; the alarm closes and becomes labelable
    let v = submit(&h, "cam", &h.frames[320..]).await;
    assert!(closed_ids(&v).contains(&id));
    let (st, out) = post(&h.app, &format!("/alarms/{id}/label"), json!({ "verdict": "true_anomaly", "labeler": "op" })).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(out["inserted"], 0);
    assert_eq!(out["status"], "labeled_true");
}

#[tokio::test]
async fn frame_submission_validation_and_idempotency() {
    let h = harness();
    let first = &h.frames[..50];
    let body = json!({ "frames": records(first) });
    let (st, a) = call(&h.app, Method::POST, "/streams/s/frames", Some(body.clone()), &[("idempotency-key", "k1")]).await;
    assert_eq!(st, StatusCode::OK);
    let (st, b) = call(&h.app, Method::POST, "/streams/s/frames", Some(body.clone()), &[("idempotency-key", "k1")]).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(a, b);
    let (_, trace) = get(&h.app, "/streams/s/trace").await;
    assert_eq!(trace["trace"].as_array().unwrap().len(), 50);

    // the same frames again without a key are out of order
    let (st, err) = post(&h.app, "/streams/s/frames", body).await;
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(err["error"]["message"].as_str().unwrap().contains("frame 0"));

    let (st, err) = post(&h.app, "/streams/s/frames", json!({ "frames": [{ "t": 99, "flow": {} }] })).await;
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(err["error"]["code"], "malformed_payload");

    let bad_probs = json!({ "frames": [{ "t": 60, "flow": { "mean": 1, "var": 0.5, "skew": 0.3, "kurt": 2.8 },
                                          "objects": [{ "loc": [1, 1, 1], "probs": [0.5, 1.5] }] }] });
    let (st, err) = post(&h.app, "/streams/s/frames", bad_probs).await;
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(err["error"]["code"], "invalid_input");

    let wrong_dim = json!({ "frames": [{ "t": 61, "flow": { "mean": 1, "var": 0.5, "skew": 0.3, "kurt": 2.8 },
                                         "objects": [{ "loc": [1, 1, 1], "probs": [0.5, 0.2, 0.1] }] }] });
    let (st, err) = post(&h.app, "/streams/s/frames", wrong_dim).await;
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(err["error"]["message"].as_str().unwrap().contains("dimension"));

    let (_, stats) = get(&h.app, "/model/stats").await;
    assert_eq!(stats["streams"], 1);
}

#[tokio::test]
async fn recalibration_endpoint() {
    let h = harness();
    let (st, out) = post(&h.app, "/model/recalibrate", json!({ "alpha": 0.1 })).await;
    assert_eq!(st, StatusCode::OK, "{out}");
    let d = out["d_alpha"].as_f64().unwrap();
    assert!(d > 0.0 && d < h.model.d_alpha());
    assert_eq!(out["alpha"].as_f64().unwrap(), 0.1);

    let explicit = objects(&generate(&ScenarioConfig::desk(CLASSES, 50, 99)).unwrap().frames);
    let (st, out) = post(&h.app, "/model/recalibrate", json!({ "calibration": explicit, "request_id": "x" })).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(out["calibration_size"].as_u64().unwrap() as usize, explicit.len());

    let (st, err) = post(&h.app, "/model/recalibrate", json!({ "alpha": 2.0 })).await;
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(err["error"]["code"], "invalid_input");

    // streams pick up the new d_alpha
    submit(&h, "cam", &h.frames[..5]).await;
    let (_, trace) = get(&h.app, "/streams/cam/trace").await;
    assert_eq!(trace["d_alpha"].as_f64().unwrap(), h.state.model().read().d_alpha());
}

#[tokio::test]
async fn journal_replay_reconstructs_the_live_model() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("journal.jsonl");
    let h = harness_with(Some(Journal::open(&path).unwrap()));
    let v = submit(&h, "cam", &h.frames).await;
    for id in closed_ids(&v) {
        let (st, _) = post(&h.app, &format!("/alarms/{id}/label"), json!({ "verdict": "false_alarm", "labeler": "op" })).await;
        assert_eq!(st, StatusCode::OK);
    }
    let (st, _) = post(&h.app, "/model/recalibrate", json!({})).await;
    assert_eq!(st, StatusCode::OK);

    let live = h.state.model().snapshot();
    assert!(live.reference_size() > h.model.reference_size());
    let mut rebuilt = h.model.clone();
    replay(&mut rebuilt, &read_journal(&path).unwrap()).unwrap();
    assert!(rebuilt.content_eq(&live));
}
